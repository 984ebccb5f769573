"""The command-line pipeline end to end: synthesize a dataset, train on
it, evaluate the checkpoint, and inspect its stored geometry."""

import json
import subprocess
import sys
import tempfile
from pathlib import Path


def run(*args):
    cmd = [sys.executable, "-m", "splitformer.cli", *args]
    print("$", " ".join(cmd[2:]))
    res = subprocess.run(cmd, capture_output=True, text=True)
    if res.returncode != 0:
        print(res.stderr)
        raise SystemExit(res.returncode)
    return res.stdout


def main():
    work = Path(tempfile.mkdtemp(prefix="splitformer_"))
    data = work / "dataset.jsonl"

    run("synth", "--n-users", "48", "--l-mean", "12", "--seed", "9",
        "--out", str(work))
    run("train", "--dataset", str(data), "--seed", "9", "--out", str(work),
        "--l", "32", "--max-epochs", "3", "--lr", "0.001")
    print(run("eval", "--checkpoint", str(work / "model.msdc"),
              "--dataset", str(data), "--out", str(work / "eval")))
    print(run("inspect", "--checkpoint", str(work / "model.msdc")))

    metrics = json.loads((work / "metrics.json").read_text())
    print(f"stored test accuracy: {metrics['test']['accuracy']:.3f}")
    print("(three epochs is a plumbing smoke test; train_miniature.py shows a real run)")
    print(f"artifacts in {work}")


if __name__ == "__main__":
    main()
