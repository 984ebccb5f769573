"""Forward-time scaling of windowed vs full attention.

Runs the bench grid in process and fits log-log slopes: windowed cost
grows about linearly in sequence length at these sizes, full attention
quadratically. Expect a few minutes of single-core number crunching.
"""

import csv
import tempfile
from pathlib import Path

from splitformer.cli import main as cli_main


def main():
    out = Path(tempfile.mkdtemp(prefix="attn_bench_"))
    rc = cli_main(["bench-attn", "--h-values", "1024,2048,4096",
                   "--repeats", "3", "--out", str(out)])
    if rc != 0:
        raise SystemExit(rc)

    print()
    with open(out / "bench.csv", newline="") as f:
        for row in csv.DictReader(f):
            if row["h"] == "slope":
                print(f"{row['mechanism']:<10} time ~ H^{float(row['seconds']):.2f}")
    print(f"\nfull rows in {out / 'bench.csv'}")


if __name__ == "__main__":
    main()
