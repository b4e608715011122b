"""Run the whole pipeline offline against the scripted mocks in tests/fixtures/corpus.

    python3 scripts/dry_run.py [OUT_DIR]

Stages: annotate, chunk, export-sft (with action-token variants), rollout, eval, stats, probe.
Outputs land under OUT_DIR (default: ./dry_run_out). Reruns are byte-identical.
"""

from __future__ import annotations

import sys
from pathlib import Path

from a2l import cli

ROOT = Path(__file__).resolve().parent.parent
CORPUS = ROOT / "tests" / "fixtures" / "corpus"


def main(out: Path) -> int:
    mocks = str(CORPUS / "mocks")
    steps = [
        ["annotate", "--in", str(CORPUS / "raw"), "--out", str(out / "annotated"), "--mock", mocks, "--jobs", "2"],
        ["chunk", "--in", str(out / "annotated"), "--out", str(out / "chunked")],
        ["export-sft", "--in", str(out / "chunked"), "--out", str(out / "sft"), "--at", "--seed", "11",
         "--manifest", str(out / "training.toml")],
        ["rollout", "--scenario", "pick_up", "--mock", mocks, "--out", str(out / "logs")],
        ["eval", "--in", str(out / "logs"), "--out", str(out / "eval")],
        ["stats", "--in", str(out / "logs"), "--out", str(out / "stats")],
        ["probe", "--in", str(out / "chunked"), "--mock", mocks, "--out", str(out / "probe")],
    ]
    for argv in steps:
        print(f"$ a2l {' '.join(argv)}")
        code = cli.main(argv)
        if code:
            print(f"stage {argv[0]} failed with exit code {code}", file=sys.stderr)
            return code
    print(f"done, outputs under {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main(Path(sys.argv[1] if len(sys.argv) > 1 else "dry_run_out")))
