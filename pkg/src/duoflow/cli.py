"""Command-line interface: train, sample, eval, ablate, gradcheck, datagen.

Every artifact-producing command writes a fully resolved config copy next
to its outputs so a run can be reproduced from that file and the seed
alone.  Exit codes: 0 success, 1 validation error (bad flags, bad config,
bad caption, missing or mismatched checkpoint), 2 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from .align import AlignmentConfig
from .checkpoint import (
    Checkpoint,
    CheckpointError,
    checkpoint_from,
    load_checkpoint,
    restore_model,
    restore_optimizer,
    save_checkpoint,
)
from .config import ConfigError, RunConfig, build_config, parse_pairs, write_resolved
from .evalbench import (
    EvalError,
    ablation_records,
    ablation_run,
    ablation_table,
    balanced_captions,
    conditional_accuracy,
    default_grid,
    report_record,
)
from .flow import SamplerConfig, sample_batch, to_unit
from .gradcheck import end_to_end_checks, primitive_checks, run_checks
from .model import ModelConfig, VelocityModel
from .optim import AdamW
from .plots import accuracy_bars, loss_curves
from .scenes import caption_pair, parse_caption, scene_from_attributes, to_png_bytes, write_dataset
from .tensor import set_default_dtype
from .text import LexicalError, default_vocab, empty_embedding, pad_encoded, tokenize
from .train import (
    TrainError,
    adapt_model,
    apply_freeze,
    build_encoders,
    build_stage0_model,
    freeze_policy,
    set_precision,
    train_stage,
)

_VALIDATION_ERRORS = (ConfigError, CheckpointError, EvalError, ValueError)


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="duoflow",
        description="Two-language flow-matching image model: training, "
        "sampling, and evaluation tools.",
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value config file")
    common.add_argument("--seed", type=int, help="override the run seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("--precision", choices=("32", "64"),
                        help="float width override")

    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", parents=[common],
                             help="run one training stage")
    p_train.add_argument("--stage", type=int, choices=(0, 1, 2),
                         help="training stage (default: config train.stage)")
    p_train.add_argument("--init", help="checkpoint to start from; required "
                         "for stages 1 and 2, or to resume the same stage")

    p_sample = sub.add_parser("sample", parents=[common],
                              help="draw images for a caption")
    p_sample.add_argument("--ckpt", required=True, help="model checkpoint")
    p_sample.add_argument("--caption", required=True, help="caption text")
    p_sample.add_argument("--cond", choices=("a", "b", "ab"), default="b",
                          help="conditioning mode (default b: adapter only, "
                          "backbone text empty)")
    p_sample.add_argument("--count", type=int, default=1,
                          help="number of images (default 1)")
    p_sample.add_argument("--guidance", type=float,
                          help="guidance scale override (default 3.5)")
    p_sample.add_argument("--steps", type=int, help="sampler steps override")

    p_eval = sub.add_parser("eval", parents=[common],
                            help="grade a checkpoint on balanced captions")
    p_eval.add_argument("--ckpt", required=True, help="model checkpoint")

    p_ablate = sub.add_parser("ablate", parents=[common],
                              help="train and grade adapter variants")
    p_ablate.add_argument("--init", required=True,
                          help="shared backbone (stage-0) checkpoint")

    sub.add_parser("gradcheck", parents=[common],
                   help="finite-difference gradient checks")
    sub.add_parser("datagen", parents=[common],
                   help="dump a rendered caption dataset")
    return parser


def _run_config(args) -> RunConfig:
    pairs = {}
    if args.config:
        try:
            text = Path(args.config).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config file {args.config}: {exc}") from None
        pairs = parse_pairs(text)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if args.out is not None:
        overrides["out"] = args.out
    if args.precision is not None:
        overrides["precision"] = f"float{args.precision}"
    if getattr(args, "stage", None) is not None:
        overrides["train.stage"] = str(args.stage)
    return build_config(pairs, overrides)


def _load_ckpt(path: str) -> Checkpoint:
    try:
        return load_checkpoint(path)
    except FileNotFoundError:
        raise ConfigError(f"checkpoint not found: {path}") from None


def _model_from(ckpt: Checkpoint) -> VelocityModel:
    """Rebuild the checkpointed model and restore every parameter.

    The checkpoint's embedded model config wins over whatever the run
    config says; only a fresh stage-0 build or a stage-0 -> 1 adaptation
    reads architecture fields from the config.
    """
    model = VelocityModel(ModelConfig(**ckpt.model_config), seed=0)
    restore_model(model, ckpt, names=set(model.named_params()))
    return model


# -- train ---------------------------------------------------------------------


def _prepare_train(args):
    rc = _run_config(args)
    stage = rc.train.stage
    cfg = rc.train
    init = None
    if args.init:
        init = _load_ckpt(args.init)
    elif stage > 0:
        raise ConfigError(
            f"--init checkpoint required for stage {stage} "
            f"(stage {stage - 1} output, or a stage-{stage} snapshot to resume)"
        )
    if init is not None and init.stage not in (stage, stage - 1):
        raise ConfigError(
            f"--init checkpoint is from stage {init.stage}; stage {stage} "
            f"needs one from stage {stage - 1} (fresh) or {stage} (resume)"
        )
    if init is not None and init.model_config.get("d_enc") != cfg.model.d_enc:
        raise ConfigError(
            f"model.d_enc is {cfg.model.d_enc} but the checkpoint was built "
            f"with {init.model_config.get('d_enc')}; text encoders would not fit"
        )
    resume = init is not None and init.stage == stage
    if resume:
        if not any(k.startswith("opt.") for k in init.arrays):
            raise ConfigError(
                "checkpoint carries no optimizer state; cannot resume mid-stage"
            )
        if init.step >= cfg.steps:
            raise ConfigError(
                f"checkpoint is at step {init.step}, config budget is {cfg.steps}"
            )

    def run() -> int:
        out = Path(rc.out)
        out.mkdir(parents=True, exist_ok=True)
        write_resolved(rc, out)
        set_precision(cfg)
        enc_a, enc_b = build_encoders(cfg)

        backbone: set[str] = set()
        if stage == 0:
            model = build_stage0_model(cfg)
            if resume:
                restore_model(model, init, names=set(model.named_params()))
        elif resume or init.model_config.get("adapter_branch"):
            model = _model_from(init)
            backbone = set(model.backbone_param_names())
        else:
            model = adapt_model(init, cfg)
            backbone = set(model.backbone_param_names())

        opt = AdamW(
            apply_freeze(model, freeze_policy(model, stage)),
            lr=cfg.lr,
            weight_decay=cfg.weight_decay,
        )
        start = 0
        if resume:
            restore_optimizer(opt, init)
            start = init.step

        ckpt_path = out / f"stage{stage}.ckpt"
        metrics_path = out / f"stage{stage}_metrics.ndjson"
        param_stages = {n: 0 for n in backbone}
        mode = "a" if resume else "w"
        with metrics_path.open(mode) as fh:
            def sink(rec: dict) -> None:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
                fh.flush()

            train_stage(
                model, opt, cfg, enc_a, enc_b,
                start_step=start, sink=sink,
                checkpoint_path=ckpt_path,
                checkpoint_every=rc.checkpoint_every,
                frozen_names=backbone, param_stages=param_stages,
            )
        save_checkpoint(
            ckpt_path,
            checkpoint_from(model, stage=stage, step=cfg.steps, optimizer=opt,
                            frozen_names=backbone, param_stages=param_stages),
        )
        records = [json.loads(l) for l in metrics_path.read_text().splitlines()]
        loss_curves(records, out / f"stage{stage}_loss.png")
        print(f"stage {stage} done: {ckpt_path}")
        print(f"metrics: {metrics_path}")
        return 0

    return run


# -- sample --------------------------------------------------------------------


def _captions_for_mode(text: str, cond: str):
    """(caption_a, caption_b) per conditioning mode; None means empty side."""
    if cond == "a":
        return tokenize(text, "a"), None
    cap_b = tokenize(text, "b")
    if cond == "b":
        return None, cap_b
    attrs = parse_caption(cap_b)
    if attrs.get("motif") is not None:
        vocab = default_vocab("b")
        word = next(
            vocab.terminals[t] for t in cap_b.tokens
            if vocab.category_of(vocab.terminals[t]) == "motif"
        )
        raise LexicalError(
            f"motif terminal {word!r} has no language-a counterpart; "
            "conditioning mode 'ab' needs a caption expressible in both languages"
        )
    cap_a, _ = caption_pair(scene_from_attributes(attrs))
    return cap_a, cap_b


def _prepare_sample(args):
    rc = _run_config(args)
    if args.count < 1:
        raise ConfigError(f"--count must be positive, got {args.count}")
    cap_a, cap_b = _captions_for_mode(args.caption, args.cond)
    ckpt = _load_ckpt(args.ckpt)
    if cap_b is not None and not ckpt.model_config.get("adapter_branch"):
        raise ConfigError(
            "checkpoint has no adapter branch; language-b conditioning "
            "needs a stage-1 or stage-2 checkpoint"
        )
    sampler = rc.sampler()
    if args.guidance is not None:
        sampler = dataclasses.replace(sampler, guidance=args.guidance)
    if args.steps is not None:
        sampler = dataclasses.replace(sampler, steps=args.steps)

    def run() -> int:
        out = Path(rc.out)
        out.mkdir(parents=True, exist_ok=True)
        write_resolved(rc, out)
        set_precision(rc.train)
        enc_a, enc_b = build_encoders(rc.train)
        n = args.count
        d_enc = rc.train.model.d_enc
        if cap_a is not None:
            a_tokens, a_mask = pad_encoded([enc_a.encode(cap_a)] * n)
        else:
            a_tokens, a_mask = pad_encoded([empty_embedding("a", d_enc)] * n)
        if cap_b is not None:
            b_tokens, b_mask = pad_encoded([enc_b.encode(cap_b)] * n)
        else:
            b_tokens, b_mask = None, None

        model = _model_from(ckpt)
        images = sample_batch(
            model, a_tokens, a_mask, b_tokens, b_mask, sampler,
            resolution=rc.eval_resolution,
        )
        images = np.clip(to_unit(images), 0.0, 1.0)
        paths = []
        for i in range(n):
            path = out / f"sample_{i:03d}.png"
            path.write_bytes(to_png_bytes(images[i]))
            paths.append(path)
        for path in paths:
            print(path)
        return 0

    return run


# -- eval ----------------------------------------------------------------------


def _prepare_eval(args):
    rc = _run_config(args)
    ckpt = _load_ckpt(args.ckpt)
    if rc.eval_language == "b" and not ckpt.model_config.get("adapter_branch"):
        raise ConfigError(
            "checkpoint has no adapter branch; set eval.language = a "
            "or evaluate a stage-1/2 checkpoint"
        )
    captions = balanced_captions(
        rc.eval_language, rc.eval_captions, seed=rc.seed,
        motif_prob=rc.eval_motif_prob,
    )

    def run() -> int:
        out = Path(rc.out)
        out.mkdir(parents=True, exist_ok=True)
        write_resolved(rc, out)
        set_precision(rc.train)
        enc_a, enc_b = build_encoders(rc.train)
        enc = enc_b if rc.eval_language == "b" else enc_a
        model = _model_from(ckpt)
        report = conditional_accuracy(
            model, enc, captions, rc.sampler(),
            resolution=rc.eval_resolution, margin=rc.eval_margin,
            min_samples=rc.eval_min_samples, batch_size=rc.eval_batch_size,
        )
        record = report_record(report)
        path = out / "eval_report.json"
        path.write_text(json.dumps(record, sort_keys=True, indent=2) + "\n")
        attrs = sorted(record["per_attribute"])
        accuracy_bars(
            ["overall"] + attrs,
            [record["accuracy"]] + [record["per_attribute"][a] for a in attrs],
            out / "eval_accuracy.png",
        )
        print(f"accuracy={report.accuracy:.4f} rejection={report.rejection_rate:.4f} "
              f"mmd2={report.mmd2:.6f} n={report.n_samples}")
        print(path)
        return 0

    return run


# -- ablate --------------------------------------------------------------------


def _prepare_ablate(args):
    rc = _run_config(args)
    if rc.train.stage != 1:
        raise ConfigError(
            f"ablation arms run the adapter stage; set train.stage = 1 "
            f"(config says {rc.train.stage})"
        )
    known = {spec.name: spec for spec in default_grid()}
    missing = [name for name in rc.ablate_arms if name not in known]
    if missing:
        raise ConfigError(
            f"ablate.arms: unknown arm names {missing}; known: {sorted(known)}"
        )
    grid = tuple(known[name] for name in rc.ablate_arms)
    ckpt = _load_ckpt(args.init)

    def run() -> int:
        out = Path(rc.out)
        out.mkdir(parents=True, exist_ok=True)
        write_resolved(rc, out)
        rows = ablation_run(
            ckpt, grid, rc.train,
            eval_captions=rc.eval_captions, sampler=rc.sampler(),
            resolution=rc.eval_resolution, margin=rc.eval_margin,
            min_samples=rc.eval_min_samples, batch_size=rc.eval_batch_size,
            workers=rc.ablate_workers, save_dir=out,
        )
        table = ablation_table(rows)
        (out / "ablation.txt").write_text(table)
        with (out / "ablation.ndjson").open("w") as fh:
            for rec in ablation_records(rows):
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        accuracy_bars(
            [row.name for row in rows],
            [row.report.accuracy for row in rows],
            out / "ablation_accuracy.png",
        )
        print(table, end="")
        return 0

    return run


# -- gradcheck -----------------------------------------------------------------


def _prepare_gradcheck(args):
    _run_config(args)  # validates flags and config even though values are unused

    def run() -> int:
        set_default_dtype(np.float64)
        failures = 0
        for label, checks, tol in (
            ("primitive", primitive_checks(), 1e-5),
            ("end-to-end", end_to_end_checks(), 1e-4),
        ):
            for name, err, ok in run_checks(checks, tol):
                print(f"{'pass' if ok else 'FAIL'} {label:10s} {name:28s} "
                      f"rel_err={err:.3e} tol={tol:.0e}")
                failures += 0 if ok else 1
        if failures:
            print(f"{failures} check(s) failed")
            return 2
        return 0

    return run


# -- datagen -------------------------------------------------------------------


def _prepare_datagen(args):
    rc = _run_config(args)

    def run() -> int:
        out = Path(rc.out)
        out.mkdir(parents=True, exist_ok=True)
        write_resolved(rc, out)
        manifest = write_dataset(
            out / "data", rc.datagen_count, seed=rc.seed,
            resolution=rc.datagen_resolution,
            allow_motif=rc.datagen_allow_motif,
            length_mode=rc.datagen_length_mode,
        )
        digest = hashlib.sha256()
        digest.update(manifest.read_bytes())
        for png in sorted(manifest.parent.glob("*.png")):
            digest.update(png.name.encode())
            digest.update(png.read_bytes())
        sha = digest.hexdigest()
        (manifest.parent / "manifest.sha256").write_text(sha + "\n")
        print(f"{manifest} sha256={sha}")
        return 0

    return run


_PREPARE = {
    "train": _prepare_train,
    "sample": _prepare_sample,
    "eval": _prepare_eval,
    "ablate": _prepare_ablate,
    "gradcheck": _prepare_gradcheck,
    "datagen": _prepare_datagen,
}


def main(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on bad flags; fold that into the validation code
        return 0 if exc.code in (0, None) else 1
    try:
        work = _PREPARE[args.command](args)
    except _VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    try:
        return work()
    except Exception as exc:  # noqa: BLE001 - single runtime boundary
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
