#!/usr/bin/env python3
"""Train a shared backbone, then compare adapter variants on one table.

Arms: no alignment, pooled term only, pooled+interpolated, the gated
default, and the query-update ablation.  Reuses an existing stage-0
checkpoint when --init is given; otherwise trains one first.
"""

import argparse
import sys
from pathlib import Path

from duoflow.cli import main as duoflow
from duoflow.config import parse_pairs


def run(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/ablations")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--init", default=None, help="existing stage-0 checkpoint")
    ap.add_argument("--config", default=None)
    args = ap.parse_args(argv)

    out = Path(args.out)
    base = ["--seed", str(args.seed)]
    cfg = ["--config", args.config] if args.config else []

    init = args.init
    if init is None:
        code = duoflow(["train", *base, *cfg, "--out", str(out / "stage0"),
                        "--stage", "0"])
        if code != 0:
            return code
        init = str(out / "stage0" / "stage0.ckpt")

    pairs = {}
    if args.config:
        pairs = parse_pairs(Path(args.config).read_text())
    pairs["train.stage"] = "1"
    ablate_cfg = out / "ablate.cfg"
    ablate_cfg.parent.mkdir(parents=True, exist_ok=True)
    ablate_cfg.write_text("".join(f"{k} = {v}\n" for k, v in pairs.items()))

    return duoflow(["ablate", *base, "--config", str(ablate_cfg),
                    "--out", str(out / "table"), "--init", init])


if __name__ == "__main__":
    sys.exit(run())
