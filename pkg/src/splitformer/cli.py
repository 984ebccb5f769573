"""Command-line interface.

Subcommands: synth (generate a labeled corpus), embed (precompute the
embedding cache), train, eval, bench-attn (attention timing/memory
table), inspect (describe a checkpoint). Exit codes: 0 success, 2 input
error, 3 artifact mismatch, 4 benchmark budget refusal (whole grid
infeasible).

Train and synth take a mandatory --seed; every command is reproducible
from its flags and config file alone. A JSON config file supplies
defaults; explicit flags win over file values.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from pathlib import Path

import numpy as np

from .attention import MhaParams, reset_score_count, scaled_dot_attention, score_count
from .blocks import (
    ModelConfig,
    StageConfig,
    SwBlockParams,
    WBlockParams,
    assemble_model,
    planned_trace,
    sw_block,
    w_block,
)
from .data import (
    CachedEmbeddings,
    HashEmbedder,
    load_dataset,
    save_dataset,
    split_dataset,
    synth_generate,
    write_embedding_cache,
)
from .seeding import counter_rng
from .tensor import Tensor
from .training import (
    CheckpointError,
    TrainConfig,
    evaluate,
    load_checkpoint,
    save_checkpoint,
    train_loop,
    write_history_csv,
    write_history_json,
)

DEFAULT_BUDGET_GIB = 4.0


class CliError(Exception):
    """Structured command failure: carries the process exit code."""

    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _out_dir(args) -> Path:
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise CliError(2, f"cannot create output directory {out}: {e}") from None
    return out


def _load_users(path):
    p = Path(path)
    if not p.is_file():
        raise CliError(2, f"dataset not found: {p}")
    try:
        return load_dataset(p)
    except ValueError as e:
        raise CliError(2, str(e)) from None


def _load_config_file(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise CliError(2, f"config file not found: {p}")
    try:
        obj = json.loads(p.read_text(encoding="utf-8"))
    except ValueError as e:
        raise CliError(2, f"{p}: invalid JSON: {e}") from None
    if not isinstance(obj, dict):
        raise CliError(2, f"{p}: config must be a JSON object")
    unknown = set(obj) - {"model", "train", "split_ratios"}
    if unknown:
        raise CliError(2, f"{p}: unknown config sections {sorted(unknown)}")
    return obj


# -- synth ------------------------------------------------------------------------


def cmd_synth(args) -> int:
    out = _out_dir(args)
    users = synth_generate(args.n_users, l_mean=args.l_mean, seed=args.seed)
    dataset = out / "dataset.jsonl"
    save_dataset(dataset, users)
    manifest = {
        "command": "synth",
        "seed": args.seed,
        "n_users": args.n_users,
        "l_mean": args.l_mean,
        "users_written": len(users),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                                       encoding="utf-8")
    print(f"wrote {len(users)} users to {dataset}")
    return 0


# -- embed ------------------------------------------------------------------------


def cmd_embed(args) -> int:
    out = _out_dir(args)
    users = _load_users(args.dataset)
    cache = out / "cache.msde"
    write_embedding_cache(cache, users, HashEmbedder())
    n = sum(len(u.behaviors) for u in users)
    print(f"embedded {n} behaviors from {len(users)} users into {cache}")
    return 0


# -- train ------------------------------------------------------------------------


def _model_config_from(args, file_cfg: dict) -> ModelConfig:
    m = dict(file_cfg.get("model", {}))
    if args.variant is not None:
        m["variant"] = args.variant
    if args.l is not None:
        m["l"] = args.l
    if "l" not in m:
        raise CliError(2, "sequence length missing: pass --l or set model.l in the config")
    variant = m.get("variant", "B")
    try:
        if variant in ("B", "M", "L") and "windows" not in m:
            return ModelConfig.from_variant(variant, l=m["l"],
                                            n_heads=m.get("n_heads", 8),
                                            dropout=m.get("dropout", 0.2))
        return ModelConfig.custom(
            m["d"], m["l"], tuple(m["windows"]), tuple(m["strides"]), tuple(m["w_counts"]),
            n_heads=m.get("n_heads", 8), dropout=m.get("dropout", 0.2),
            embed_dim=m.get("embed_dim", 768), mvae_hidden=m.get("mvae_hidden", 256),
            name=variant,
        )
    except (KeyError, ValueError, TypeError) as e:
        raise CliError(2, f"invalid model config: {e}") from None


def _train_config_from(args, file_cfg: dict) -> TrainConfig:
    t = dict(file_cfg.get("train", {}))
    for key, val in (("lr", args.lr), ("max_epochs", args.max_epochs),
                     ("patience", args.patience), ("batch_size", args.batch_size),
                     ("precision", args.precision), ("clip_norm", args.clip_norm)):
        if val is not None:
            t[key] = val
    t["seed"] = args.seed
    if "psi" in t:
        t["psi"] = tuple(t["psi"])
    if t.get("clip_norm") == 0:  # 0 on the command line means "disable"
        t["clip_norm"] = None
    try:
        return TrainConfig(**t)
    except (TypeError, ValueError) as e:
        raise CliError(2, f"invalid train config: {e}") from None


def _provider_from(args):
    if getattr(args, "cache", None) is None:
        return HashEmbedder()
    p = Path(args.cache)
    if not p.is_file():
        raise CliError(2, f"embedding cache not found: {p}")
    try:
        return CachedEmbeddings(p)
    except ValueError as e:
        raise CliError(3, f"embedding cache {p}: {e}") from None


def cmd_train(args) -> int:
    out = _out_dir(args)
    file_cfg = _load_config_file(args.config)
    users = _load_users(args.dataset)
    mcfg = _model_config_from(args, file_cfg)
    tcfg = _train_config_from(args, file_cfg)
    ratios = tuple(file_cfg.get("split_ratios", (0.7, 0.2, 0.1)))
    try:
        split = split_dataset(users, ratios=ratios, seed=args.seed)
    except ValueError as e:
        raise CliError(2, str(e)) from None
    provider = _provider_from(args)

    model = assemble_model(mcfg, seed=args.seed, dtype=tcfg.dtype)
    model, history = train_loop(model, split, tcfg, provider=provider)
    report = evaluate(model, split.test, provider=provider)

    save_checkpoint(out / "model.msdc", model)
    write_history_csv(out / "history.csv", history)
    write_history_json(out / "history.json", history)
    payload = {
        "test": report.to_dict(),
        "epochs_run": len(history),
        "best_val_acc": max(r["val_acc"] for r in history),
        "seed": args.seed,
        "model": json.loads(mcfg.to_json()),
    }
    (out / "metrics.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n",
                                      encoding="utf-8")
    print(report.format_table())
    print(f"epochs {len(history)}, best val acc {payload['best_val_acc']:.4f}")
    print(f"artifacts in {out}")
    return 0


# -- eval -------------------------------------------------------------------------


def cmd_eval(args) -> int:
    out = _out_dir(args)
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise CliError(2, f"checkpoint not found: {ckpt}")
    model = load_checkpoint(ckpt)  # CheckpointError -> exit 3 via main
    users = _load_users(args.dataset)
    report = evaluate(model, users, provider=_provider_from(args))
    (out / "metrics.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n",
                                      encoding="utf-8")
    print(report.format_table())
    return 0


# -- bench-attn ---------------------------------------------------------------------


def _bench_full_cell(h: int, eta: int, n_heads: int, repeats: int, seed: int):
    """Full-MHA timing: per-head attention so peak memory stays one head."""
    rng = counter_rng(seed)
    p = MhaParams.create(eta, n_heads, rng, np.float32)
    x = Tensor(rng.normal(size=(h, eta)).astype(np.float32))
    dh = eta // n_heads
    q = x.data @ p.wq.data
    k = x.data @ p.wk.data
    v = x.data @ p.wv.data
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        outs = []
        for i in range(n_heads):
            s = slice(i * dh, (i + 1) * dh)
            outs.append(scaled_dot_attention(Tensor(q[:, s]), Tensor(k[:, s]), Tensor(v[:, s])).data)
        np.concatenate(outs, axis=1)
        times.append(time.perf_counter() - t0)
    params = sum(t.data.size for t in p.named("p").values())
    return float(np.median(times)), params


def _bench_sw_cell(h: int, window: int, stride: int, eta: int, n_heads: int,
                   repeats: int, seed: int):
    """One windowed stage forward: SW block then one W block."""
    rng = counter_rng(seed)
    cfg = StageConfig(window=window, stride=stride, w_count=1, eta=eta)
    sw = SwBlockParams.create(cfg, n_heads, rng, np.float32, dropout=0.0)
    wb = WBlockParams.create(2 * eta, n_heads, rng, np.float32, dropout=0.0)
    x = Tensor(rng.normal(size=(h, eta)).astype(np.float32))
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        y, mask, _ = sw_block(x, sw, cfg)
        w_block(y, wb, window_mask=mask)
        times.append(time.perf_counter() - t0)
    params = sum(t.data.size for t in {**sw.named("sw"), **wb.named("w")}.values())
    return float(np.median(times)), params


def _fit_slope(rows):
    pts = [(r["h"], r["seconds"]) for r in rows if r["status"] == "ok"]
    if len(pts) < 2:
        return None
    hs = np.log([p[0] for p in pts])
    ts = np.log([p[1] for p in pts])
    return float(np.polyfit(hs, ts, 1)[0])


def cmd_bench_attn(args) -> int:
    out = _out_dir(args)
    try:
        h_values = [int(v) for v in args.h_values.split(",") if v]
    except ValueError:
        raise CliError(2, f"bad --h-values {args.h_values!r}: need comma-separated integers") from None
    if not h_values or any(h < 1 for h in h_values):
        raise CliError(2, f"bad --h-values {args.h_values!r}: need positive integers")
    if args.window < args.stride:
        raise CliError(2, f"window {args.window} smaller than stride {args.stride}")
    budget_bytes = int(args.budget_gib * 2**30)
    n = args.n_heads
    eta = args.eta
    itemsize = 4  # float32 benchmarking

    rows = []
    for h in h_values:
        k = -(-h // args.stride)
        # SW/W mechanism: k windows of W-square scores, then one k-square block
        sw_scores = n * (k * args.window**2 + k * k)
        if sw_scores * itemsize > budget_bytes:
            rows.append({"mechanism": "sw_w_mha", "h": h, "status": "refused",
                         "seconds": "", "score_scalars": sw_scores, "param_count": ""})
        else:
            reset_score_count()
            seconds, params = _bench_sw_cell(h, args.window, args.stride, eta, n,
                                             args.repeats, args.seed)
            rows.append({"mechanism": "sw_w_mha", "h": h, "status": "ok", "seconds": seconds,
                         "score_scalars": score_count(), "param_count": params})
        # full-MHA baseline
        if args.baseline:
            full_scores = n * h * h
            if full_scores * itemsize > budget_bytes:
                rows.append({"mechanism": "full_mha", "h": h, "status": "refused",
                             "seconds": "", "score_scalars": full_scores, "param_count": ""})
            else:
                reset_score_count()
                seconds, params = _bench_full_cell(h, eta, n, args.repeats, args.seed)
                rows.append({"mechanism": "full_mha", "h": h, "status": "ok",
                             "seconds": seconds, "score_scalars": score_count(),
                             "param_count": params})

    slope_rows = []
    for mech in ("sw_w_mha", "full_mha"):
        sub = [r for r in rows if r["mechanism"] == mech]
        slope = _fit_slope(sub)
        if slope is not None:
            slope_rows.append({"mechanism": mech, "h": "slope", "status": "ok",
                               "seconds": slope, "score_scalars": "", "param_count": ""})

    fields = ("mechanism", "h", "status", "seconds", "score_scalars", "param_count")
    with open(out / "bench.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=fields)
        w.writeheader()
        w.writerows(rows + slope_rows)

    for r in rows + slope_rows:
        sec = f"{r['seconds']:.4f}" if isinstance(r["seconds"], float) else "-"
        print(f"{r['mechanism']:<10} H={r['h']:<7} {r['status']:<8} {sec:>10s}s  "
              f"scores={r['score_scalars']}")
    ok_cells = [r for r in rows if r["status"] == "ok"]
    if not ok_cells:
        print("every cell exceeded the score-storage budget", file=sys.stderr)
        return 4
    return 0


# -- inspect ----------------------------------------------------------------------


def cmd_inspect(args) -> int:
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise CliError(2, f"checkpoint not found: {ckpt}")
    model = load_checkpoint(ckpt)
    trace = planned_trace(model.config)
    info = {
        "config": json.loads(model.config.to_json()),
        "param_count": model.param_count(),
        "trace": trace.to_dict(),
    }
    if args.json:
        print(json.dumps(info, indent=2, sort_keys=True))
    else:
        print(f"variant {model.config.variant}  d={model.config.d}  l={model.config.l}")
        print(f"params {model.param_count():,}")
        print(f"tokens {trace.token_shape}")
        for i, s in enumerate(trace.stage_shapes):
            print(f"stage {i + 2}: {s['input']} -> {s['post_sw']} -> {s['output']}")
        print(f"cls width {trace.cls_width}")
    return 0


# -- parser -----------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="splitformer",
                                 description="spammer-detection model toolkit")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic labeled corpus")
    p.add_argument("--n-users", type=int, default=200)
    p.add_argument("--l-mean", type=int, default=48)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("embed", help="precompute the embedding cache")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_embed)

    p = sub.add_parser("train", help="train a model on a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="JSON config file with model/train sections")
    p.add_argument("--cache", help="embedding cache from the embed command")
    p.add_argument("--variant", choices=("B", "M", "L"))
    p.add_argument("--l", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--precision", choices=("float32", "float64"))
    p.add_argument("--clip-norm", type=float, dest="clip_norm",
                   help="max global gradient norm per step, 0 to disable")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--cache")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("bench-attn", help="attention mechanism timing table")
    p.add_argument("--h-values", default="1024,2048,4096,8192")
    p.add_argument("--window", type=int, default=64)
    p.add_argument("--stride", type=int, default=32)
    p.add_argument("--eta", type=int, default=32)
    p.add_argument("--n-heads", type=int, default=8)
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--budget-gib", type=float, default=DEFAULT_BUDGET_GIB)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-baseline", dest="baseline", action="store_false")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_bench_attn)

    p = sub.add_parser("inspect", help="describe a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--json", action="store_true")
    p.set_defaults(fn=cmd_inspect)

    return ap


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 2 if e.code not in (0, None) else 0
    try:
        return args.fn(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except CheckpointError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    sys.exit(main())
