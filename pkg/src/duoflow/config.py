"""Key-value run configuration shared by the command-line tools.

The on-disk format is one `key = value` pair per line with `#` comments.
Keys are dotted into sections (model.*, train.*, align.*, sample.*,
eval.*, ablate.*, datagen.*) plus three top-level keys: seed, precision,
out.  Unknown and duplicate keys are rejected by name.  Stage-dependent
trainer defaults (step budget, motif probability, resolution schedule)
resolve at build time, so a formatted copy of a built config always
parses back to the same config.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .align import AlignmentConfig
from .flow import SamplerConfig
from .model import ModelConfig
from .train import TrainConfig, default_config

__all__ = [
    "ConfigError",
    "RunConfig",
    "parse_pairs",
    "build_config",
    "load_config",
    "format_config",
    "write_resolved",
    "RESOLVED_NAME",
]

RESOLVED_NAME = "resolved.cfg"


class ConfigError(ValueError):
    """Bad key, bad value, or malformed config text; message names the key."""


def _bool(raw: str, key: str) -> bool:
    if raw == "true":
        return True
    if raw == "false":
        return False
    raise ConfigError(f"{key}: expected true or false, got {raw!r}")


def _int(raw: str, key: str) -> int:
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"{key}: expected an integer, got {raw!r}") from None


def _float(raw: str, key: str) -> float:
    try:
        return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: expected a number, got {raw!r}") from None


def _ints(raw: str, key: str) -> tuple[int, ...]:
    if raw == "":
        return ()
    return tuple(_int(part.strip(), key) for part in raw.split(","))


def _choice(options: tuple[str, ...]):
    def cast(raw: str, key: str) -> str:
        if raw not in options:
            raise ConfigError(f"{key}: expected one of {options}, got {raw!r}")
        return raw

    return cast


def _str(raw: str, key: str) -> str:
    return raw


# every legal key with its parser; "stage default" keys may be absent
_SCHEMA = {
    "seed": _int,
    "precision": _choice(("float32", "float64")),
    "out": _str,
    "model.d_model": _int,
    "model.n_heads": _int,
    "model.n_double": _int,
    "model.n_single": _int,
    "model.d_enc": _int,
    "model.patch": _int,
    "model.channels": _int,
    "model.mlp_ratio": _int,
    "model.adapter_hidden": _int,
    "model.max_text_len": _int,
    "model.query_update": _bool,
    "train.stage": _int,
    "train.steps": _int,
    "train.batch_size": _int,
    "train.lr": _float,
    "train.weight_decay": _float,
    "train.b_fraction": _float,
    "train.cond_dropout": _float,
    "train.motif_prob": _float,
    "train.long_caption_prob": _float,
    "train.resolution_schedule": _ints,
    "train.boundaries": _ints,
    "train.model_seed": _int,
    "train.encoder_seed": _int,
    "train.accuracy_floor": _float,
    "train.eval_captions": _int,
    "train.eval_sampler_steps": _int,
    "train.eval_guidance": _float,
    "train.checkpoint_every": _int,
    "align.enabled": _bool,
    "align.enable_pool": _bool,
    "align.enable_inter": _bool,
    "align.d_threshold": _float,
    "align.gate_mode": _choice(("equation", "text")),
    "sample.steps": _int,
    "sample.guidance": _float,
    "sample.scheme": _choice(("euler", "heun")),
    "eval.captions": _int,
    "eval.language": _choice(("a", "b")),
    "eval.resolution": _int,
    "eval.margin": _float,
    "eval.motif_prob": _float,
    "eval.min_samples": _int,
    "eval.batch_size": _int,
    "ablate.arms": _str,
    "ablate.workers": _int,
    "datagen.count": _int,
    "datagen.resolution": _int,
    "datagen.allow_motif": _bool,
    "datagen.length_mode": _choice(("short", "long")),
}

# keys whose defaults depend on train.stage and resolve inside default_config
_STAGE_DEFAULT_KEYS = ("train.steps", "train.motif_prob",
                       "train.resolution_schedule", "train.boundaries")


@dataclass(frozen=True)
class RunConfig:
    seed: int
    precision: str
    out: str
    train: TrainConfig
    checkpoint_every: int
    sample_steps: int
    sample_guidance: float
    sample_scheme: str
    eval_captions: int
    eval_language: str
    eval_resolution: int
    eval_margin: float
    eval_motif_prob: float
    eval_min_samples: int
    eval_batch_size: int
    ablate_arms: tuple[str, ...]
    ablate_workers: int
    datagen_count: int
    datagen_resolution: int
    datagen_allow_motif: bool
    datagen_length_mode: str

    def sampler(self) -> SamplerConfig:
        return SamplerConfig(
            steps=self.sample_steps,
            guidance=self.sample_guidance,
            scheme=self.sample_scheme,
            seed=self.seed,
        )


def parse_pairs(text: str) -> dict[str, str]:
    """Raw `key = value` pairs; rejects unknown, duplicate, malformed keys."""
    pairs: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        if key not in _SCHEMA:
            raise ConfigError(f"unknown config key {key!r} (line {lineno})")
        if key in pairs:
            raise ConfigError(f"duplicate config key {key!r} (line {lineno})")
        pairs[key] = raw.strip()
    return pairs


def build_config(pairs: dict[str, str], overrides: dict[str, str] | None = None) -> RunConfig:
    """Typed RunConfig from raw pairs; overrides (CLI flags) win over file keys."""
    merged = dict(pairs)
    if overrides:
        for key, raw in overrides.items():
            if key not in _SCHEMA:
                raise ConfigError(f"unknown config key {key!r}")
            merged[key] = raw
    typed = {k: _SCHEMA[k](raw, k) for k, raw in merged.items()}

    def get(key: str, default):
        return typed.get(key, default)

    model = ModelConfig(
        d_model=get("model.d_model", 64),
        n_heads=get("model.n_heads", 4),
        n_double=get("model.n_double", 2),
        n_single=get("model.n_single", 2),
        d_enc=get("model.d_enc", 48),
        patch=get("model.patch", 4),
        channels=get("model.channels", 3),
        mlp_ratio=get("model.mlp_ratio", 4),
        adapter_hidden=get("model.adapter_hidden", 96),
        max_text_len=get("model.max_text_len", 16),
        query_update=get("model.query_update", False),
    )
    align = AlignmentConfig(
        enabled=get("align.enabled", True),
        enable_pool=get("align.enable_pool", True),
        enable_inter=get("align.enable_inter", True),
        d_threshold=get("align.d_threshold", 0.05),
        gate_mode=get("align.gate_mode", "equation"),
    )

    stage = get("train.stage", 0)
    if stage not in (0, 1, 2):
        raise ConfigError(f"train.stage: expected 0, 1, or 2, got {stage}")
    train_kw = dict(
        batch_size=get("train.batch_size", 32),
        lr=get("train.lr", 1e-3),
        weight_decay=get("train.weight_decay", 0.0),
        seed=get("seed", 0),
        b_fraction=get("train.b_fraction", 0.6),
        cond_dropout=get("train.cond_dropout", 0.1),
        long_caption_prob=get("train.long_caption_prob", 0.5),
        model_seed=get("train.model_seed", 0),
        encoder_seed=get("train.encoder_seed", 0),
        accuracy_floor=get("train.accuracy_floor", 0.8),
        eval_captions=get("train.eval_captions", 108),
        eval_sampler_steps=get("train.eval_sampler_steps", 50),
        eval_guidance=get("train.eval_guidance", 3.5),
        precision=get("precision", "float32"),
        align=align,
        model=model,
    )
    for key, field in (("train.steps", "steps"), ("train.motif_prob", "motif_prob"),
                       ("train.resolution_schedule", "resolution_schedule"),
                       ("train.boundaries", "boundaries")):
        if key in typed:
            train_kw[field] = typed[key]
    try:
        train = default_config(stage, **train_kw)
    except ValueError as exc:
        raise ConfigError(f"train section invalid: {exc}") from exc

    arms_raw = get("ablate.arms", "no-align,pool,pool+inter,pool+inter+gate,query-update")
    arms = tuple(a.strip() for a in arms_raw.split(",") if a.strip())
    if not arms:
        raise ConfigError("ablate.arms: expected at least one arm name")

    try:
        return RunConfig(
            seed=get("seed", 0),
            precision=get("precision", "float32"),
            out=get("out", "runs/out"),
            train=train,
            checkpoint_every=get("train.checkpoint_every", 500),
            sample_steps=get("sample.steps", 50),
            sample_guidance=get("sample.guidance", 3.5),
            sample_scheme=get("sample.scheme", "euler"),
            eval_captions=get("eval.captions", 108),
            eval_language=get("eval.language", "b"),
            eval_resolution=get("eval.resolution", 16),
            eval_margin=get("eval.margin", 0.05),
            eval_motif_prob=get("eval.motif_prob", 0.0),
            eval_min_samples=get("eval.min_samples", 100),
            eval_batch_size=get("eval.batch_size", 25),
            ablate_arms=arms,
            ablate_workers=get("ablate.workers", 1),
            datagen_count=get("datagen.count", 108),
            datagen_resolution=get("datagen.resolution", 16),
            datagen_allow_motif=get("datagen.allow_motif", True),
            datagen_length_mode=get("datagen.length_mode", "short"),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: str | Path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    return build_config(parse_pairs(text))


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def format_config(rc: RunConfig) -> str:
    """Fully resolved text: every schema key with its effective value."""
    t, m, a = rc.train, rc.train.model, rc.train.align
    values = {
        "seed": rc.seed,
        "precision": rc.precision,
        "out": rc.out,
        "model.d_model": m.d_model,
        "model.n_heads": m.n_heads,
        "model.n_double": m.n_double,
        "model.n_single": m.n_single,
        "model.d_enc": m.d_enc,
        "model.patch": m.patch,
        "model.channels": m.channels,
        "model.mlp_ratio": m.mlp_ratio,
        "model.adapter_hidden": m.adapter_hidden,
        "model.max_text_len": m.max_text_len,
        "model.query_update": m.query_update,
        "train.stage": t.stage,
        "train.steps": t.steps,
        "train.batch_size": t.batch_size,
        "train.lr": t.lr,
        "train.weight_decay": t.weight_decay,
        "train.b_fraction": t.b_fraction,
        "train.cond_dropout": t.cond_dropout,
        "train.motif_prob": t.motif_prob,
        "train.long_caption_prob": t.long_caption_prob,
        "train.resolution_schedule": t.resolution_schedule,
        "train.boundaries": t.boundaries,
        "train.model_seed": t.model_seed,
        "train.encoder_seed": t.encoder_seed,
        "train.accuracy_floor": t.accuracy_floor,
        "train.eval_captions": t.eval_captions,
        "train.eval_sampler_steps": t.eval_sampler_steps,
        "train.eval_guidance": t.eval_guidance,
        "train.checkpoint_every": rc.checkpoint_every,
        "align.enabled": a.enabled,
        "align.enable_pool": a.enable_pool,
        "align.enable_inter": a.enable_inter,
        "align.d_threshold": a.d_threshold,
        "align.gate_mode": a.gate_mode,
        "sample.steps": rc.sample_steps,
        "sample.guidance": rc.sample_guidance,
        "sample.scheme": rc.sample_scheme,
        "eval.captions": rc.eval_captions,
        "eval.language": rc.eval_language,
        "eval.resolution": rc.eval_resolution,
        "eval.margin": rc.eval_margin,
        "eval.motif_prob": rc.eval_motif_prob,
        "eval.min_samples": rc.eval_min_samples,
        "eval.batch_size": rc.eval_batch_size,
        "ablate.arms": ",".join(rc.ablate_arms),
        "ablate.workers": rc.ablate_workers,
        "datagen.count": rc.datagen_count,
        "datagen.resolution": rc.datagen_resolution,
        "datagen.allow_motif": rc.datagen_allow_motif,
        "datagen.length_mode": rc.datagen_length_mode,
    }
    missing = set(_SCHEMA) - set(values)
    if missing:
        raise ConfigError(f"schema keys without formatted values: {sorted(missing)}")
    lines = [f"{key} = {_fmt(values[key])}" for key in _SCHEMA]
    return "\n".join(lines) + "\n"


def write_resolved(rc: RunConfig, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / RESOLVED_NAME
    path.write_text(format_config(rc))
    return path
