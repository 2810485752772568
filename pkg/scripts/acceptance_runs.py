"""Long toy-task training runs behind the convergence and determinism checks.

Runs AH-CTC and H-CTC for three seeds each, then repeats AH-CTC seed 0 to
compare histories and checkpoints byte for byte. Each finished run writes
``summary.json``; runs that already have one are skipped, so the script can
be restarted. The collected results go to ``results/acceptance_runs.json``,
which ``tests/test_acceptance.py`` reads.

    python3 scripts/acceptance_runs.py            # about 2-3 hours on one core
"""

from __future__ import annotations

import argparse
import hashlib
import json
import subprocess
import sys
from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]
SEEDS = (0, 1, 2)


def _run(variant: str, seed: int, out: Path, epochs: int | None) -> dict:
    summary = out / "summary.json"
    if not summary.exists():
        cmd = [sys.executable, str(ROOT / "scripts" / "toy_run.py"), "--variant", variant,
               "--seed", str(seed), "--out", str(out)]
        if epochs is not None:
            cmd += ["--epochs", str(epochs)]
        subprocess.run(cmd, check=True)
    rec = json.loads(summary.read_text())
    rec["history"] = [json.loads(x) for x in (out / "history.jsonl").read_text().splitlines()]
    return rec


def _digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def main(argv=None) -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--runs", default=str(ROOT / "runs" / "acceptance"))
    ap.add_argument("--results", default=str(ROOT / "results" / "acceptance_runs.json"))
    ap.add_argument("--epochs", type=int, default=None, help="override for quick smoke runs")
    args = ap.parse_args(argv)
    runs = Path(args.runs)
    out = {"runs": []}
    for variant in ("ah-ctc", "h-ctc"):
        for seed in SEEDS:
            out["runs"].append(_run(variant, seed, runs / f"{variant}-s{seed}", args.epochs))
    first, replica = runs / "ah-ctc-s0", runs / "ah-ctc-s0-replica"
    _run("ah-ctc", 0, replica, args.epochs)
    files = ("history.jsonl", "best.lckp", "last.lckp")
    out["determinism"] = {
        name: {"first": _digest(first / name), "replica": _digest(replica / name)} for name in files
    }
    path = Path(args.results)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(out, indent=2))
    print(f"wrote {path}")


if __name__ == "__main__":
    main()
