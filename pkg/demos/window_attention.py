"""Why windows: attention cost bookkeeping, and the oracle check that a
single window spanning the whole sequence reproduces full attention."""

import math

import numpy as np

from splitformer import (
    MhaParams,
    Tensor,
    counter_rng,
    mha,
    reset_score_count,
    score_count,
    sw_mha,
)
from splitformer import ops


def main():
    rng = counter_rng(11)
    h, eta, heads = 24, 8, 2
    x = Tensor(rng.normal(size=(h, eta)), dtype=np.float64)
    p = MhaParams.create(eta, heads, rng, np.float64)

    full = mha(x, p)
    one_window = ops.reshape(sw_mha(x, p, window=h, stride=h), (h, eta))
    delta = np.abs(full.data - one_window.data).max()
    print(f"single window vs full attention, H={h}: max |delta| {delta:.2e}")

    # score storage is the quantity windows attack: every materialized
    # q.k scalar is counted, per head
    reset_score_count()
    mha(x, p)
    print(f"full attention scores   : {score_count():>8,}  (= heads * H^2)")
    reset_score_count()
    sw_mha(x, p, window=8, stride=4)
    k = math.ceil(h / 4)
    print(f"windowed scores W=8 s=4 : {score_count():>8,}  (= heads * {k} windows * 64)")

    # the same arithmetic at production scale, no allocation needed
    big_h, w, stride = 16385, 64, 32
    k = math.ceil(big_h / stride)
    ratio = big_h**2 / (k * w**2)
    print(f"at H={big_h}: full needs {big_h**2:,} score scalars per head,")
    print(f"windows need {k} * {w}^2 = {k * w**2:,}, a {ratio:.1f}x reduction")


if __name__ == "__main__":
    main()
