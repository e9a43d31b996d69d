#!/usr/bin/env python3
"""Train stages 0 -> 1 -> 2 at the default desk-scale budget, then grade.

Writes checkpoints, metrics logs, loss curves, and an evaluation report
under --out.  Expect roughly an hour on a laptop CPU at the defaults.
"""

import argparse
import sys
from pathlib import Path

from duoflow.cli import main as duoflow


def run(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/pipeline")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--config", default=None,
                    help="optional config file applied to every step")
    args = ap.parse_args(argv)

    out = Path(args.out)
    base = ["--seed", str(args.seed)]
    if args.config:
        base += ["--config", args.config]

    stage_dirs = [out / f"stage{n}" for n in (0, 1, 2)]
    init: list[str] = []
    for n, stage_dir in enumerate(stage_dirs):
        code = duoflow(["train", *base, "--out", str(stage_dir),
                        "--stage", str(n), *init])
        if code != 0:
            return code
        init = ["--init", str(stage_dir / f"stage{n}.ckpt")]

    return duoflow(["eval", *base, "--out", str(out / "eval"),
                    "--ckpt", str(stage_dirs[2] / "stage2.ckpt")])


if __name__ == "__main__":
    sys.exit(run())
