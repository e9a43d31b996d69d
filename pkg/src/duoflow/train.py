"""Three-phase training schedule with a hard freezing contract.

Stage 0 pretrains a branch-free backbone on language-A captions.  Stage 1
attaches the adapter branch, freezes everything that stage 0 produced, and
trains only the branch on a B/A mixture with the alignment objective; B
samples condition the backbone with an empty A sequence so the branch is
the only conditioning path.  Stage 2 continues branch-only training on pure
B data, biased toward B-exclusive motifs, stepping the image resolution up
at configured boundaries.

All per-step randomness derives from (seed, stage, step), so an interrupted
run resumed from a checkpoint retraces the exact remaining steps.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .align import AlignmentConfig, LossReport, gated_ra_loss, inter_loss, pool_loss
from .checkpoint import (
    Checkpoint,
    checkpoint_from,
    restore_model,
    restore_optimizer,
    save_checkpoint,
)
from .evalbench import EvalReport, balanced_captions, chance_rate, conditional_accuracy
from .flow import SamplerConfig, from_unit, make_flow_sample
from .model import ModelConfig, VelocityModel, patchify
from .optim import AdamW
from .scenes import RESOLUTIONS, caption_pair, render, sample_scene
from .seeds import derive_rng
from .tensor import Tensor, mse, no_grad, set_default_dtype
from .text import FrozenEncoder, TextEmbedding, empty_embedding, pad_encoded

logger = logging.getLogger("duoflow.train")

METRIC_FIELDS = ("step", "stage", "l_gen", "l_p", "l_inter", "l_ra",
                 "gate_fired", "lr", "resolution")


class TrainError(RuntimeError):
    """Configuration violation or a failed training-stage contract."""


@dataclass(frozen=True)
class TrainConfig:
    """One stage's schedule; build per-stage instances via default_config."""

    stage: int
    steps: int
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 0.0
    seed: int = 0
    resolution_schedule: tuple[int, ...] = (16,)
    boundaries: tuple[int, ...] = ()
    b_fraction: float = 0.6
    cond_dropout: float = 0.1
    motif_prob: float = 0.0
    long_caption_prob: float = 0.5
    align: AlignmentConfig = AlignmentConfig()
    model: ModelConfig = ModelConfig()
    model_seed: int = 0
    encoder_seed: int = 0
    precision: str = "float32"
    accuracy_floor: float = 0.8
    eval_captions: int = 108
    eval_sampler_steps: int = 50
    eval_guidance: float = 3.5

    def __post_init__(self) -> None:
        if self.stage not in (0, 1, 2):
            raise ValueError(f"stage must be 0, 1, or 2, got {self.stage}")
        if self.steps <= 0 or self.batch_size <= 0:
            raise ValueError("steps and batch_size must be positive")
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        sched = self.resolution_schedule
        if not sched or any(b >= a for a, b in zip(sched[1:], sched)):
            raise ValueError(f"resolution schedule must be strictly increasing: {sched}")
        if any(r not in RESOLUTIONS for r in sched):
            raise ValueError(f"unsupported resolutions in {sched}; renderer does {RESOLUTIONS}")
        if len(self.boundaries) != len(sched) - 1:
            raise ValueError(
                f"{len(sched)} resolutions need {len(sched) - 1} boundaries, "
                f"got {len(self.boundaries)}"
            )
        if any(b >= a for a, b in zip(self.boundaries[1:], self.boundaries)):
            raise ValueError(f"boundaries must be strictly increasing: {self.boundaries}")
        if any(not 0 < b < self.steps for b in self.boundaries):
            raise ValueError(f"boundaries must fall inside (0, {self.steps})")
        if not 0.0 <= self.b_fraction <= 1.0:
            raise ValueError(f"b_fraction must be in [0, 1], got {self.b_fraction}")
        if not 0.0 <= self.cond_dropout < 1.0:
            raise ValueError(f"cond_dropout must be in [0, 1), got {self.cond_dropout}")
        if not 0.0 <= self.motif_prob <= 1.0:
            raise ValueError(f"motif_prob must be in [0, 1], got {self.motif_prob}")
        if not 0.0 <= self.long_caption_prob <= 1.0:
            raise ValueError(
                f"long_caption_prob must be in [0, 1], got {self.long_caption_prob}"
            )
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"precision must be float32 or float64, got {self.precision!r}")


def default_config(stage: int, **overrides) -> TrainConfig:
    """Desk-scale defaults: 3000/2000/1000 steps, stage 2 stepping 16 to 32."""
    base: dict = {
        0: dict(stage=0, steps=3000),
        1: dict(stage=1, steps=2000),
        2: dict(stage=2, steps=1000, motif_prob=0.8,
                resolution_schedule=(16, 32), boundaries=(500,)),
    }[stage]
    base.update(overrides)
    return TrainConfig(**base)


@dataclass(frozen=True)
class FreezePolicy:
    """Exact trainable-parameter set for one stage."""

    stage: int
    trainable: frozenset[str]


def freeze_policy(model: VelocityModel, stage: int) -> FreezePolicy:
    """Stage 0 trains the whole branch-free model; stages 1-2 only the branch."""
    if stage == 0:
        if model.cfg.adapter_branch:
            raise TrainError(
                "stage 0 pretrains the plain backbone; build the model with "
                "adapter_branch=False"
            )
        return FreezePolicy(stage=0, trainable=frozenset(model.named_params()))
    if not model.cfg.adapter_branch:
        raise TrainError(f"stage {stage} trains the adapter branch; the model has none")
    return FreezePolicy(stage=stage, trainable=frozenset(model.adapter_param_names()))


def apply_freeze(model: VelocityModel, policy: FreezePolicy) -> dict[str, Tensor]:
    """Flip requires_grad per policy; returns the trainable params for AdamW."""
    model.set_trainable(set(policy.trainable))
    return {n: p for n, p in model.named_params().items() if n in policy.trainable}


def set_precision(cfg: TrainConfig) -> None:
    """Install the run precision; affects every Tensor built afterwards."""
    set_default_dtype(np.float32 if cfg.precision == "float32" else np.float64)


def build_encoders(cfg: TrainConfig) -> tuple[FrozenEncoder, FrozenEncoder]:
    d = cfg.model.d_enc
    return (FrozenEncoder("a", d, cfg.encoder_seed),
            FrozenEncoder("b", d, cfg.encoder_seed))


def build_stage0_model(cfg: TrainConfig) -> VelocityModel:
    mc = dataclasses.replace(cfg.model, adapter_branch=False, query_update=False)
    return VelocityModel(mc, seed=cfg.model_seed)


def adapt_model(stage0: Checkpoint, cfg: TrainConfig) -> VelocityModel:
    """Branch model with the stage-0 backbone weights copied in by name."""
    mc = dataclasses.replace(
        ModelConfig(**stage0.model_config),
        adapter_branch=True,
        query_update=cfg.model.query_update,
    )
    model = VelocityModel(mc, seed=cfg.model_seed)
    restore_model(model, stage0, names=model.backbone_param_names())
    return model


# -- batch synthesis ---------------------------------------------------------


@dataclass
class TrainItem:
    """One training example: target tokens plus its conditioning streams."""

    x1_tokens: np.ndarray
    t: float
    noise_seed: int
    emb_a: TextEmbedding | None
    emb_b: TextEmbedding | None
    aux_a: TextEmbedding | None


def resolution_at(cfg: TrainConfig, step: int) -> int:
    idx = sum(1 for b in cfg.boundaries if step >= b)
    return cfg.resolution_schedule[idx]


def make_batch(
    cfg: TrainConfig, enc_a: FrozenEncoder, enc_b: FrozenEncoder, step: int
) -> tuple[list[TrainItem], int]:
    """Synthesize one step's batch; fully determined by (seed, stage, step)."""
    rng = derive_rng(cfg.seed, "batch", cfg.stage, step)
    res = resolution_at(cfg, step)
    items: list[TrainItem] = []
    for _ in range(cfg.batch_size):
        length_mode = "long" if rng.random() < cfg.long_caption_prob else "short"
        if cfg.stage == 0:
            use_b = False
            with_motif = False
        elif cfg.stage == 1:
            use_b = rng.random() < cfg.b_fraction
            with_motif = use_b and rng.random() < cfg.motif_prob
        else:
            use_b = True
            with_motif = rng.random() < cfg.motif_prob
        scene = sample_scene(
            int(rng.integers(1 << 62)), allow_motif=with_motif, motif_prob=1.0
        )
        cap_a, cap_b = caption_pair(scene, length_mode)
        x1 = patchify(from_unit(render(scene, res)), cfg.model.patch).tokens

        emb_a = emb_b = aux_a = None
        if rng.random() >= cfg.cond_dropout:
            if use_b:
                emb_b = enc_b.encode(cap_b)
                if cap_a is not None:
                    aux_a = enc_a.encode(cap_a)
            else:
                emb_a = enc_a.encode(cap_a)
        items.append(
            TrainItem(
                x1_tokens=x1,
                t=float(rng.random()),
                noise_seed=int(rng.integers(1 << 62)),
                emb_a=emb_a,
                emb_b=emb_b,
                aux_a=aux_a,
            )
        )
    return items, res


# -- single optimization step -------------------------------------------------


def train_step(
    model: VelocityModel,
    opt: AdamW,
    cfg: TrainConfig,
    enc_a: FrozenEncoder,
    enc_b: FrozenEncoder,
    step: int,
    items: list[TrainItem] | None = None,
) -> LossReport:
    """One batch forward/backward and optimizer step; returns the losses.

    ``items`` overrides the synthesized batch (tests exercise contracts with
    hand-built batches).  Stage 2 rejects any A-conditioned item.  B items
    lacking an A counterpart skip the alignment terms and are logged.
    """
    resolution = resolution_at(cfg, step)
    if items is None:
        items, resolution = make_batch(cfg, enc_a, enc_b, step)
    if cfg.stage == 2 and any(it.emb_a is not None for it in items):
        raise TrainError("stage 2 batches must be language-B only; got an A caption")

    d_enc = model.cfg.d_enc
    flows = [make_flow_sample(it.x1_tokens, it.noise_seed, it.t) for it in items]
    xt = np.stack([f.xt for f in flows])
    targets = np.stack([f.target_v for f in flows])
    ts = np.asarray([f.t for f in flows])
    grid = (resolution // model.cfg.patch, resolution // model.cfg.patch)

    a_tok, a_mask = pad_encoded(
        [it.emb_a if it.emb_a is not None else empty_embedding("a", d_enc)
         for it in items]
    )
    if any(it.emb_b is not None for it in items):
        b_tok, b_mask = pad_encoded(
            [it.emb_b if it.emb_b is not None else empty_embedding("b", d_enc)
             for it in items]
        )
    else:
        b_tok, b_mask = None, None

    v_pred = model.forward_tokens(xt, a_tok, a_mask, b_tok, b_mask, ts, grid)
    l_gen = mse(v_pred, Tensor(targets))

    l_p_sum = l_inter_sum = None
    eligible = skipped = 0
    if cfg.align.enabled and model.adapter_b is not None:
        for it in items:
            if it.emb_b is None:
                continue
            if it.aux_a is None:
                skipped += 1
                continue
            feat_b = TextEmbedding(
                language="b",
                vectors=model.adapter_b(it.emb_b.vectors),
                mask=it.emb_b.mask,
            )
            with no_grad():
                aux_vecs = model.adapter_a(it.aux_a.vectors)
            feat_a = TextEmbedding(language="a", vectors=aux_vecs, mask=it.aux_a.mask)
            if cfg.align.enable_pool:
                lp = pool_loss(feat_b, feat_a)
                l_p_sum = lp if l_p_sum is None else l_p_sum + lp
            if cfg.align.enable_inter:
                li = inter_loss(feat_b, feat_a)
                l_inter_sum = li if l_inter_sum is None else l_inter_sum + li
            eligible += 1
    if skipped:
        logger.info(
            "step %d: %d B sample(s) without an A counterpart; alignment skipped",
            step, skipped,
        )

    gate_fired = False
    l_p: Tensor | float = 0.0
    l_inter: Tensor | float = 0.0
    if eligible:
        if l_p_sum is not None:
            l_p = l_p_sum * (1.0 / eligible)
        if l_inter_sum is not None:
            l_inter = l_inter_sum * (1.0 / eligible)
        l_ra, gate_fired = gated_ra_loss(l_p, l_inter, cfg.align)
    else:
        l_ra = 0.0

    total = l_gen + l_ra

    opt.zero_grad()
    total.backward()
    for p in opt.params.values():
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
    opt.step()

    def val(x: Tensor | float) -> float:
        return float(x.data) if isinstance(x, Tensor) else float(x)

    return LossReport(
        l_gen=val(l_gen),
        l_p=val(l_p),
        l_inter=val(l_inter),
        l_ra=val(l_ra),
        total=val(total),
        gate_fired=bool(gate_fired),
    )


# -- stage loop ----------------------------------------------------------------


def metrics_record(
    step: int, stage: int, report: LossReport, lr: float, resolution: int
) -> dict:
    return {
        "step": int(step),
        "stage": int(stage),
        "l_gen": float(report.l_gen),
        "l_p": float(report.l_p),
        "l_inter": float(report.l_inter),
        "l_ra": float(report.l_ra),
        "gate_fired": bool(report.gate_fired),
        "lr": float(lr),
        "resolution": int(resolution),
    }


def format_metrics(record: dict) -> str:
    return json.dumps(record, sort_keys=True) + "\n"


def train_stage(
    model: VelocityModel,
    opt: AdamW,
    cfg: TrainConfig,
    enc_a: FrozenEncoder,
    enc_b: FrozenEncoder,
    *,
    start_step: int = 0,
    sink: Callable[[dict], None] | None = None,
    checkpoint_path: str | Path | None = None,
    checkpoint_every: int = 0,
    frozen_names: Sequence[str] = (),
    param_stages: dict[str, int] | None = None,
) -> list[dict]:
    """Run steps [start_step, cfg.steps); returns the metrics records.

    ``checkpoint_every`` > 0 overwrites ``checkpoint_path`` periodically so
    an interrupted run can resume from the last snapshot.
    """
    records = []
    for step in range(start_step, cfg.steps):
        report = train_step(model, opt, cfg, enc_a, enc_b, step)
        rec = metrics_record(step, cfg.stage, report, cfg.lr, resolution_at(cfg, step))
        records.append(rec)
        if sink is not None:
            sink(rec)
        done = step + 1
        if checkpoint_path and checkpoint_every and done % checkpoint_every == 0:
            save_checkpoint(
                checkpoint_path,
                checkpoint_from(
                    model, stage=cfg.stage, step=done, optimizer=opt,
                    frozen_names=frozen_names, param_stages=param_stages,
                ),
            )
    return records


def eval_sampler_config(cfg: TrainConfig, tag: str) -> SamplerConfig:
    return SamplerConfig(
        steps=cfg.eval_sampler_steps,
        guidance=cfg.eval_guidance,
        seed=int(derive_rng(cfg.seed, "eval-seed", tag).integers(1 << 62)),
    )


def pretrain_stage0(
    cfg: TrainConfig,
    *,
    sink: Callable[[dict], None] | None = None,
    checkpoint_path: str | Path | None = None,
    checkpoint_every: int = 0,
    start_from: Checkpoint | None = None,
) -> tuple[VelocityModel, AdamW, list[dict], EvalReport]:
    """Stage 0: train the branch-free backbone, then gate on A accuracy.

    Fails with diagnostics if held-out A-caption accuracy misses
    cfg.accuracy_floor within the budget.
    """
    if cfg.stage != 0:
        raise TrainError(f"pretrain_stage0 needs a stage-0 config, got stage {cfg.stage}")
    set_precision(cfg)
    enc_a, enc_b = build_encoders(cfg)
    model = build_stage0_model(cfg)
    start_step = 0
    trainable = apply_freeze(model, freeze_policy(model, 0))
    opt = AdamW(trainable, lr=cfg.lr, weight_decay=cfg.weight_decay)
    if start_from is not None:
        restore_model(model, start_from)
        restore_optimizer(opt, start_from)
        start_step = start_from.step
    records = train_stage(
        model, opt, cfg, enc_a, enc_b,
        start_step=start_step, sink=sink,
        checkpoint_path=checkpoint_path, checkpoint_every=checkpoint_every,
    )
    report = evaluate_stage0(model, cfg, enc_a)
    if report.accuracy < cfg.accuracy_floor:
        raise TrainError(
            f"stage-0 accuracy {report.accuracy:.3f} is below the "
            f"{cfg.accuracy_floor} floor after {cfg.steps} steps "
            f"(chance {chance_rate(balanced_captions('a', 8, cfg.seed)):.4f}; "
            f"per-attribute {dict(report.per_attribute)})"
        )
    return model, opt, records, report


def evaluate_stage0(
    model: VelocityModel, cfg: TrainConfig, enc_a: FrozenEncoder
) -> EvalReport:
    caps = balanced_captions(
        "a", cfg.eval_captions, seed=int(derive_rng(cfg.seed, "eval-caps").integers(1 << 62))
    )
    return conditional_accuracy(
        model, enc_a, caps, eval_sampler_config(cfg, "stage0"),
        resolution=cfg.resolution_schedule[0],
        min_samples=min(cfg.eval_captions, 100),
    )


def run_pipeline(
    out_dir: str | Path,
    configs: Sequence[TrainConfig] | None = None,
    *,
    checkpoint_every: int = 500,
) -> dict[str, Path]:
    """Stages 0-2 end to end; writes checkpoints and per-stage metrics logs.

    Returns the artifact paths.  The three configs must agree on model
    architecture, seeds, and precision; stage i > 0 starts from stage
    (i-1)'s checkpoint.
    """
    if configs is None:
        configs = tuple(default_config(s) for s in (0, 1, 2))
    if tuple(c.stage for c in configs) != (0, 1, 2):
        raise TrainError("run_pipeline needs configs for stages 0, 1, 2 in order")
    for c in configs[1:]:
        if (c.model, c.model_seed, c.encoder_seed, c.precision) != (
            configs[0].model, configs[0].model_seed,
            configs[0].encoder_seed, configs[0].precision,
        ):
            raise TrainError("pipeline stages disagree on model/seed/precision")

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths: dict[str, Path] = {}

    def stage_sink(stage: int):
        path = out / f"stage{stage}_metrics.ndjson"
        paths[f"metrics{stage}"] = path
        f = open(path, "w")

        def write(rec: dict) -> None:
            f.write(format_metrics(rec))
            f.flush()

        return write, f

    cfg0, cfg1, cfg2 = configs
    sink0, f0 = stage_sink(0)
    try:
        model0, opt0, _, report0 = pretrain_stage0(
            cfg0, sink=sink0,
            checkpoint_path=out / "stage0_periodic.ckpt",
            checkpoint_every=checkpoint_every,
        )
    finally:
        f0.close()
    stage0_ckpt = checkpoint_from(model0, stage=0, step=cfg0.steps)
    paths["stage0"] = out / "stage0.ckpt"
    save_checkpoint(paths["stage0"], stage0_ckpt)
    (out / "stage0_eval.json").write_text(
        json.dumps(dataclasses.asdict(report0), sort_keys=True, indent=2) + "\n"
    )

    enc_a, enc_b = build_encoders(cfg1)
    model = adapt_model(stage0_ckpt, cfg1)
    backbone = sorted(model.backbone_param_names())
    stages_map = {name: 0 for name in backbone}

    for cfg in (cfg1, cfg2):
        policy = freeze_policy(model, cfg.stage)
        trainable = apply_freeze(model, policy)
        opt = AdamW(trainable, lr=cfg.lr, weight_decay=cfg.weight_decay)
        sink, f = stage_sink(cfg.stage)
        try:
            train_stage(
                model, opt, cfg, enc_a, enc_b, sink=sink,
                checkpoint_path=out / f"stage{cfg.stage}_periodic.ckpt",
                checkpoint_every=checkpoint_every,
                frozen_names=backbone, param_stages=stages_map,
            )
        finally:
            f.close()
        paths[f"stage{cfg.stage}"] = out / f"stage{cfg.stage}.ckpt"
        save_checkpoint(
            paths[f"stage{cfg.stage}"],
            checkpoint_from(
                model, stage=cfg.stage, step=cfg.steps, optimizer=opt,
                frozen_names=backbone, param_stages=stages_map,
            ),
        )
    return paths
