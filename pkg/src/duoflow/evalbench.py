"""Grading generated images without a learned judge.

The renderer's attribute grid is small enough to enumerate, so evaluation
inverts it directly: a template bank of every renderable scene turns
attribute decoding into nearest-template lookup with a rejection margin,
and a kernel two-sample statistic over fixed pixel features stands in for
learned distribution metrics.  The ablation harness at the bottom retrains
adapter arms from a shared backbone state and grades them with the same
tools so arms stay comparable.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .flow import SamplerConfig, sample_batch, to_unit
from .model import VelocityModel, patchify
from .scenes import (
    MOTIF_NAMES,
    N_CLASSES,
    RESOLUTIONS,
    Scene,
    all_class_scenes,
    parse_caption,
    render,
    scene_from_attributes,
    scene_from_class_index,
)
from .align import AlignmentConfig
from .seeds import derive_rng
from .tensor import Tensor
from .text import Caption, FrozenEncoder, pad_encoded

ATTRIBUTE_NAMES = ("shape", "color", "position", "size", "motif")
DEFAULT_MARGIN = 0.05


class EvalError(RuntimeError):
    """Evaluation precondition or configuration failure."""


@lru_cache(maxsize=None)
def _template_bank(resolution: int) -> tuple[np.ndarray, tuple[Scene, ...]]:
    """All renderable scenes (motif-free plus every motif variant), flattened.

    Returns (n_templates, pixels) float matrix and the matching scene tuple.
    """
    if resolution not in RESOLUTIONS:
        raise EvalError(f"no templates at resolution {resolution}; use {RESOLUTIONS}")
    scenes: list[Scene] = []
    for i in range(N_CLASSES):
        scenes.append(scene_from_class_index(i))
        for m in MOTIF_NAMES:
            scenes.append(scene_from_class_index(i, motif=m))
    flat = np.stack([render(s, resolution).ravel() for s in scenes])
    return flat, tuple(scenes)


def decode_attributes(
    image: np.ndarray, margin: float = DEFAULT_MARGIN
) -> Scene | None:
    """Nearest-template attribute read-out; None means rejection.

    ``image`` is an (H, W, 3) array in [0, 1] renderer space.  The decoded
    scene is the template with the smallest mean squared pixel distance;
    images farther than ``margin`` from every template are rejected rather
    than guessed at.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3 or img.shape[0] != img.shape[1]:
        raise EvalError(f"expected a square (H, H, 3) image, got {img.shape}")
    bank, scenes = _template_bank(img.shape[0])
    d = np.mean((bank - img.ravel()) ** 2, axis=1)
    best = int(np.argmin(d))
    if d[best] > margin:
        return None
    return scenes[best]


def chance_rate(captions: list[Caption], attribute: str | None = None) -> float:
    """Exact-match probability of a uniform guess over the decodable grid.

    Brute force: for each caption, count the grid tuples (108 motif-free
    classes plus all motif variants) agreeing with it on the full tuple, or
    on one ``attribute``, and average the fractions.
    """
    if not captions:
        raise EvalError("chance rate needs at least one caption")
    if attribute is not None and attribute not in ATTRIBUTE_NAMES:
        raise EvalError(f"unknown attribute {attribute!r}")
    grid: list[dict[str, str | None]] = []
    for base in all_class_scenes():
        grid.append(base.attributes())
        for m in MOTIF_NAMES:
            grid.append(dataclasses.replace(base, motif=m).attributes())
    total = 0.0
    for cap in captions:
        want = parse_caption(cap)
        if attribute is None:
            hits = sum(
                all(g[k] == want.get(k) for k in ATTRIBUTE_NAMES) for g in grid
            )
        else:
            hits = sum(g[attribute] == want.get(attribute) for g in grid)
        total += hits / len(grid)
    return total / len(captions)


def pixel_features(images: np.ndarray) -> np.ndarray:
    """Fixed pixel-statistic feature: 8x8 grayscale blocks + color histogram.

    ``images`` is (batch, H, W, 3) in [0, 1].  H must be a multiple of 8.
    The feature is an (batch, 88) array: 64 block-mean grays and an 8-bin
    histogram per channel, normalized to sum to 1.
    """
    imgs = np.asarray(images, dtype=np.float64)
    if imgs.ndim != 4 or imgs.shape[3] != 3:
        raise EvalError(f"expected (batch, H, W, 3) images, got {imgs.shape}")
    h = imgs.shape[1]
    if h != imgs.shape[2] or h % 8 != 0:
        raise EvalError(f"resolution {imgs.shape[1:3]} is not a square multiple of 8")
    f = h // 8
    gray = imgs.mean(axis=3)
    blocks = gray.reshape(len(imgs), 8, f, 8, f).mean(axis=(2, 4)).reshape(len(imgs), 64)
    bins = np.clip((imgs * 8.0).astype(np.intp), 0, 7)
    hist = np.zeros((len(imgs), 3, 8))
    for i in range(len(imgs)):
        for c in range(3):
            hist[i, c] = np.bincount(bins[i, :, :, c].ravel(), minlength=8)
    hist /= h * h
    return np.concatenate([blocks, hist.reshape(len(imgs), 24)], axis=1)


def mmd2(x: np.ndarray, y: np.ndarray) -> float:
    """Biased MMD^2 V-statistic with an RBF kernel, median-heuristic width.

    Both inputs are (n, d) feature arrays.  The biased estimator is a
    squared RKHS norm, so the result is nonnegative by construction.
    """
    xs = np.asarray(x, dtype=np.float64)
    ys = np.asarray(y, dtype=np.float64)
    if xs.ndim != 2 or ys.ndim != 2 or xs.shape[1] != ys.shape[1]:
        raise EvalError(f"feature shapes {xs.shape} and {ys.shape} do not align")
    if len(xs) == 0 or len(ys) == 0:
        raise EvalError("mmd2 needs nonempty sample sets")
    z = np.concatenate([xs, ys])
    sq = np.sum(z**2, axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * (z @ z.T), 0.0)
    off = d2[~np.eye(len(z), dtype=bool)]
    bandwidth = float(np.median(off)) if off.size else 1.0
    bandwidth = max(bandwidth, 1e-12)
    k = np.exp(-d2 / bandwidth)
    n = len(xs)
    kxx = k[:n, :n].mean()
    kyy = k[n:, n:].mean()
    kxy = k[:n, n:].mean()
    return float(max(kxx + kyy - 2.0 * kxy, 0.0))


def mmd_noise_floor(feats: np.ndarray, n_splits: int = 20, seed: int = 0) -> float:
    """Largest MMD^2 between random half-splits of one sample set.

    Calibrates the "same distribution" level: a statistic at or below this
    floor is indistinguishable from sampling noise.
    """
    arr = np.asarray(feats, dtype=np.float64)
    if len(arr) < 4:
        raise EvalError("need at least 4 samples to split")
    rng = derive_rng(seed, "mmd-floor")
    half = len(arr) // 2
    floor = 0.0
    for _ in range(n_splits):
        perm = rng.permutation(len(arr))
        floor = max(floor, mmd2(arr[perm[:half]], arr[perm[half : 2 * half]]))
    return floor


@dataclass(frozen=True)
class EvalReport:
    """Grades for one (model, caption set, sampler) combination."""

    language: str
    accuracy: float
    per_attribute: tuple[tuple[str, float], ...]
    motif_accuracy: float | None
    rejection_rate: float
    mmd2: float
    n_samples: int
    fingerprint: str

    def __post_init__(self) -> None:
        rates = [self.accuracy, self.rejection_rate] + [a for _, a in self.per_attribute]
        if self.motif_accuracy is not None:
            rates.append(self.motif_accuracy)
        for r in rates:
            if not 0.0 <= r <= 1.0:
                raise ValueError(f"rate {r} outside [0, 1]")
        if self.mmd2 < 0.0:
            raise ValueError(f"mmd2 must be nonnegative, got {self.mmd2}")
        if self.n_samples <= 0:
            raise ValueError("n_samples must be positive")


def _model_digest(model) -> bytes:
    """Stable digest of whatever determines the model's outputs."""
    h = hashlib.sha256()
    named = getattr(model, "named_params", None)
    if named is not None:
        for name, p in sorted(named().items()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data, dtype=np.float64).tobytes())
    else:
        h.update(type(model).__name__.encode())
        h.update(getattr(model, "digest", lambda: b"")())
    return h.digest()


def _fingerprint(
    model,
    encoder: FrozenEncoder,
    captions: list[Caption],
    config: SamplerConfig,
    resolution: int,
    margin: float,
) -> str:
    h = hashlib.sha256()
    h.update(_model_digest(model))
    h.update(np.ascontiguousarray(encoder.table).tobytes())
    for cap in captions:
        h.update(repr((cap.language, cap.tokens)).encode())
    h.update(repr((config.steps, config.guidance, config.scheme, config.seed)).encode())
    h.update(repr((resolution, margin)).encode())
    return h.hexdigest()


def balanced_captions(
    language: str,
    n: int,
    seed: int,
    length_mode: str = "short",
    motif_prob: float = 0.0,
) -> list[Caption]:
    """Caption set cycling the 108 classes in a seeded shuffle.

    Language "b" captions carry a motif with probability ``motif_prob``;
    language "a" cannot express motifs, so requesting them there fails.
    """
    from .scenes import caption_pair

    if language not in ("a", "b"):
        raise EvalError(f"unknown language {language!r}")
    if language == "a" and motif_prob > 0.0:
        raise EvalError("language 'a' has no motif terms; use motif_prob=0")
    rng = derive_rng(seed, "eval-captions", language)
    order: list[int] = []
    while len(order) < n:
        order.extend(rng.permutation(N_CLASSES).tolist())
    caps: list[Caption] = []
    for cls in order[:n]:
        motif = None
        if motif_prob > 0.0 and rng.random() < motif_prob:
            motif = MOTIF_NAMES[rng.integers(len(MOTIF_NAMES))]
        cap_a, cap_b = caption_pair(scene_from_class_index(cls, motif=motif), length_mode)
        caps.append(cap_b if language == "b" else cap_a)
    return caps


class OracleModel:
    """Velocity field that transports noise exactly to the captioned render.

    For each known conditioning sequence the model returns the point-mass
    field v = (target - x) / (1 - t), which the Euler integrator follows
    exactly to the render.  Used as the upper-bound reference for the
    grading pipeline; evaluate it with guidance 1.0.
    """

    def __init__(
        self,
        captions: list[Caption],
        encoder: FrozenEncoder,
        resolution: int,
        cfg,
    ) -> None:
        self.cfg = cfg
        self._resolution = resolution
        self._targets: dict[bytes, np.ndarray] = {}
        for cap in captions:
            scene = scene_from_attributes(parse_caption(cap))
            img = render(scene, resolution) * 2.0 - 1.0
            emb = encoder.encode(cap)
            key = np.ascontiguousarray(emb.vectors.data).tobytes()
            self._targets[key] = patchify(img, cfg.patch).tokens

    def digest(self) -> bytes:
        h = hashlib.sha256()
        for key in sorted(self._targets):
            h.update(key)
            h.update(self._targets[key].tobytes())
        return h.digest()

    def _lookup(self, vecs: np.ndarray, mask: np.ndarray) -> np.ndarray | None:
        if not mask.any():
            return None
        key = np.ascontiguousarray(vecs[mask]).tobytes()
        return self._targets.get(key)

    def forward_tokens(self, x, a, a_mask, b, b_mask, t, grid) -> Tensor:
        xv = x.data if isinstance(x, Tensor) else np.asarray(x)
        v = np.zeros_like(xv)
        for i in range(len(xv)):
            target = None
            if b is not None and b_mask is not None:
                target = self._lookup(b[i], b_mask[i])
            if target is None:
                target = self._lookup(a[i], a_mask[i])
            if target is None:
                continue
            remaining = max(1.0 - float(np.asarray(t).ravel()[i]), 1e-9)
            v[i] = (target - xv[i]) / remaining
        return Tensor(v)


def conditional_accuracy(
    model,
    encoder: FrozenEncoder,
    captions: list[Caption],
    config: SamplerConfig,
    resolution: int = 16,
    margin: float = DEFAULT_MARGIN,
    min_samples: int = 100,
    batch_size: int = 25,
) -> EvalReport:
    """Grade a model by decoding its samples against the caption tuples.

    Captions must all be in the encoder's language; language "b" captions
    condition only the adapter branch (backbone text left empty), language
    "a" captions only the backbone.  One sample per caption; decoding
    rejections count as full mismatches.  Deterministic given the sampler
    seed.  ``min_samples`` enforces the floor for a trustworthy rate; tests
    may lower it explicitly.
    """
    if len(captions) < min_samples:
        raise EvalError(
            f"need at least {min_samples} captions for a stable rate, "
            f"got {len(captions)}"
        )
    if any(c.language != encoder.language for c in captions):
        raise EvalError("captions and encoder disagree on language")
    language = encoder.language

    expected = [parse_caption(c) for c in captions]
    embs = [encoder.encode(c) for c in captions]

    generated = np.zeros((len(captions), resolution, resolution, 3))
    for start in range(0, len(captions), batch_size):
        chunk = embs[start : start + batch_size]
        vecs, mask = pad_encoded(chunk)
        batch_seed = int(derive_rng(config.seed, "eval-batch", start).integers(1 << 62))
        cfg = dataclasses.replace(config, seed=batch_seed)
        if language == "b":
            empty_a = np.zeros((len(chunk), 1, vecs.shape[2]))
            empty_m = np.zeros((len(chunk), 1), dtype=bool)
            imgs = sample_batch(model, empty_a, empty_m, vecs, mask, cfg, resolution)
        else:
            imgs = sample_batch(model, vecs, mask, None, None, cfg, resolution)
        generated[start : start + len(chunk)] = np.clip(to_unit(imgs), 0.0, 1.0)

    decoded = [decode_attributes(img, margin) for img in generated]

    hits = 0
    attr_hits = {name: 0 for name in ATTRIBUTE_NAMES}
    motif_total = motif_hits = rejects = 0
    for dec, want in zip(decoded, expected):
        got = dec.attributes() if dec is not None else None
        if got is None:
            rejects += 1
        if got is not None and all(got[k] == want.get(k) for k in ATTRIBUTE_NAMES):
            hits += 1
        for name in ATTRIBUTE_NAMES:
            if got is not None and got[name] == want.get(name):
                attr_hits[name] += 1
        if want.get("motif") is not None:
            motif_total += 1
            if got is not None and got["motif"] == want["motif"]:
                motif_hits += 1

    n = len(captions)
    reference = np.stack(
        [render(scene_from_attributes(w), resolution) for w in expected]
    )
    score = mmd2(pixel_features(generated), pixel_features(reference))

    return EvalReport(
        language=language,
        accuracy=hits / n,
        per_attribute=tuple((name, attr_hits[name] / n) for name in ATTRIBUTE_NAMES),
        motif_accuracy=(motif_hits / motif_total) if motif_total else None,
        rejection_rate=rejects / n,
        mmd2=score,
        n_samples=n,
        fingerprint=_fingerprint(model, encoder, captions, config, resolution, margin),
    )


# -- ablation harness ---------------------------------------------------------


@dataclass(frozen=True)
class ArmSpec:
    """One adapter-training variant: alignment recipe plus the query toggle."""

    name: str
    align: AlignmentConfig = AlignmentConfig()
    query_update: bool = False


@dataclass(frozen=True)
class ArmResult:
    name: str
    query_update: bool
    report: EvalReport


def default_grid() -> tuple[ArmSpec, ...]:
    """Standard five arms: the alignment ladder plus the query-update variant.

    d_threshold=0.0 keeps a loss term applied unconditionally (the gate
    fires only strictly below the threshold, and losses are nonnegative).
    """
    return (
        ArmSpec("no-align", AlignmentConfig(enabled=False)),
        ArmSpec("pool", AlignmentConfig(enable_inter=False, d_threshold=0.0)),
        ArmSpec("pool+inter", AlignmentConfig(d_threshold=0.0)),
        ArmSpec("pool+inter+gate", AlignmentConfig()),
        ArmSpec("query-update", AlignmentConfig(), query_update=True),
    )


def ablation_run(
    checkpoint,
    grid,
    train_config,
    *,
    eval_captions: int = 108,
    sampler: SamplerConfig | None = None,
    resolution: int = 16,
    margin: float = DEFAULT_MARGIN,
    min_samples: int = 100,
    batch_size: int = 25,
    workers: int = 1,
    save_dir=None,
):
    """Fine-tune one adapter per arm from a shared backbone and grade them.

    Every arm starts from the same branchless checkpoint and runs the same
    adapter-stage budget; only the alignment recipe and the query toggle
    vary, so rows are comparable and identical specs give identical rows.
    Returns one ArmResult per grid entry, in grid order.  ``save_dir``
    keeps each arm's trained checkpoint as ``arm-<name>.ckpt`` so a row
    can be reproduced by evaluating that checkpoint directly.
    """
    from pathlib import Path

    from .checkpoint import (
        Checkpoint,
        CheckpointError,
        checkpoint_from,
        load_checkpoint,
        save_checkpoint,
    )
    from .optim import AdamW
    from .train import (
        adapt_model,
        apply_freeze,
        build_encoders,
        freeze_policy,
        set_precision,
        train_stage,
    )

    if not grid:
        raise EvalError("ablation grid is empty")
    if train_config.stage != 1:
        raise EvalError(
            f"arms run the adapter stage (1), config says stage {train_config.stage}"
        )
    if isinstance(checkpoint, Checkpoint):
        ckpt = checkpoint
    else:
        try:
            ckpt = load_checkpoint(checkpoint)
        except (FileNotFoundError, CheckpointError) as exc:
            raise EvalError(f"backbone checkpoint unavailable: {exc}") from exc
    if ckpt.model_config.get("adapter_branch"):
        raise EvalError("arms adapt a branchless backbone checkpoint")
    if sampler is None:
        sampler = SamplerConfig(seed=train_config.seed)

    set_precision(train_config)
    captions = balanced_captions("b", eval_captions, seed=train_config.seed)

    def run_arm(spec: ArmSpec) -> ArmResult:
        cfg = dataclasses.replace(
            train_config,
            align=spec.align,
            model=dataclasses.replace(train_config.model, query_update=spec.query_update),
        )
        enc_a, enc_b = build_encoders(cfg)
        model = adapt_model(ckpt, cfg)
        opt = AdamW(
            apply_freeze(model, freeze_policy(model, 1)),
            lr=cfg.lr,
            weight_decay=cfg.weight_decay,
        )
        train_stage(model, opt, cfg, enc_a, enc_b)
        if save_dir is not None:
            backbone = set(model.backbone_param_names())
            save_checkpoint(
                Path(save_dir) / f"arm-{spec.name}.ckpt",
                checkpoint_from(
                    model, stage=1, step=cfg.steps,
                    frozen_names=backbone,
                    param_stages={n: 0 for n in backbone},
                ),
            )
        report = conditional_accuracy(
            model,
            enc_b,
            captions,
            sampler,
            resolution=resolution,
            margin=margin,
            min_samples=min_samples,
            batch_size=batch_size,
        )
        return ArmResult(name=spec.name, query_update=spec.query_update, report=report)

    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            return tuple(pool.map(run_arm, grid))
    return tuple(run_arm(spec) for spec in grid)


def report_record(report: EvalReport) -> dict:
    """JSON-friendly dict of one report; shared by the eval and ablate tools."""
    return {
        "language": report.language,
        "accuracy": report.accuracy,
        "per_attribute": dict(report.per_attribute),
        "motif_accuracy": report.motif_accuracy,
        "rejection_rate": report.rejection_rate,
        "mmd2": report.mmd2,
        "n_samples": report.n_samples,
        "fingerprint": report.fingerprint,
    }


def ablation_records(rows) -> list[dict]:
    """Machine-readable row dicts, one per arm, JSON-friendly."""
    return [
        {"arm": row.name, "query_update": row.query_update, **report_record(row.report)}
        for row in rows
    ]


def ablation_table(rows) -> str:
    """Fixed-width text table for terminal output."""
    header = ("arm", "query", "accuracy", "reject", "mmd2")
    body = [
        (
            row.name,
            "on" if row.query_update else "off",
            f"{row.report.accuracy:.4f}",
            f"{row.report.rejection_rate:.4f}",
            f"{row.report.mmd2:.6f}",
        )
        for row in rows
    ]
    widths = [max(len(r[i]) for r in [header, *body]) for i in range(len(header))]
    lines = []
    for r in [header, *body]:
        lines.append("  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip())
    return "\n".join(lines) + "\n"
