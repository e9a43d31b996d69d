"""Rectified-flow interpolant, generation loss, guidance, and ODE sampler.

Convention: x_t = (1-t) * eps + t * x1, so integration runs t: 0 -> 1 from
pure noise to data and the regression target is the constant straight-line
velocity x1 - eps.

The sampler works in model space, where images live in [-1, 1]; the
``to_unit`` / ``from_unit`` helpers convert to and from the renderer's
[0, 1] space, and ``write_png`` clamps to [0, 1] before quantizing.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import LatentImage, VelocityModel, patchify, unpatchify
from .seeds import derive_rng
from .tensor import ShapeError, Tensor, mse, no_grad
from .text import TextEmbedding

__all__ = [
    "FlowSample",
    "SamplerConfig",
    "FlowError",
    "make_flow_sample",
    "fm_loss",
    "cfg_combine",
    "sample",
    "sample_batch",
    "to_unit",
    "from_unit",
    "write_png",
]


class FlowError(RuntimeError):
    """Sampler failure (non-finite state)."""


@dataclass(frozen=True)
class FlowSample:
    """One training draw: endpoints, time, interpolated state, target velocity."""

    x1: np.ndarray
    eps: np.ndarray
    t: float
    xt: np.ndarray
    target_v: np.ndarray


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 50
    guidance: float = 3.5
    scheme: str = "euler"
    seed: int = 0

    def __post_init__(self) -> None:
        if self.steps < 1:
            raise ValueError(f"step count must be >= 1, got {self.steps}")
        if self.guidance < 0:
            raise ValueError(f"guidance scale must be >= 0, got {self.guidance}")
        if self.scheme not in ("euler", "heun"):
            raise ValueError(f"scheme must be 'euler' or 'heun', got {self.scheme!r}")


def make_flow_sample(x1: np.ndarray, seed: int, t: float) -> FlowSample:
    """Interpolate x1 with seeded standard-normal noise at time t."""
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"flow time must lie in [0, 1], got {t}")
    x1 = np.asarray(x1, dtype=np.float64)
    if not np.isfinite(x1).all():
        raise ValueError("x1 must be finite")
    eps = derive_rng(seed, "flow-eps").standard_normal(x1.shape)
    xt = (1.0 - t) * eps + t * x1
    return FlowSample(x1=x1, eps=eps, t=float(t), xt=xt, target_v=x1 - eps)


def fm_loss(v_pred: Tensor, sample: FlowSample) -> Tensor:
    """Mean squared error against the straight-line target velocity."""
    if v_pred.data.shape != sample.target_v.shape:
        raise ShapeError(
            f"prediction shape {v_pred.data.shape} != target shape "
            f"{sample.target_v.shape}"
        )
    return mse(v_pred, Tensor(sample.target_v))


def cfg_combine(v_cond: np.ndarray, v_uncond: np.ndarray, s: float) -> np.ndarray:
    """v_uncond + s * (v_cond - v_uncond); exact passthrough at s in {0, 1}."""
    if v_cond.shape != v_uncond.shape:
        raise ShapeError(
            f"guidance operand shapes disagree: {v_cond.shape} vs {v_uncond.shape}"
        )
    if s == 1.0:
        return v_cond
    if s == 0.0:
        return v_uncond
    return v_uncond + s * (v_cond - v_uncond)


def to_unit(x: np.ndarray) -> np.ndarray:
    """Model space [-1, 1] to renderer space [0, 1] (unclamped)."""
    return (x + 1.0) / 2.0


def from_unit(img: np.ndarray) -> np.ndarray:
    """Renderer space [0, 1] to model space [-1, 1]."""
    return img * 2.0 - 1.0


def _encoder_batch(
    emb: TextEmbedding | None, d_enc: int
) -> tuple[np.ndarray, np.ndarray]:
    if emb is None or emb.length == 0:
        return np.zeros((1, 1, d_enc)), np.zeros((1, 1), dtype=bool)
    return emb.vectors.data[None], emb.mask[None]


def sample_batch(
    model: VelocityModel,
    a_tokens: np.ndarray,
    a_mask: np.ndarray,
    b_tokens: np.ndarray | None,
    b_mask: np.ndarray | None,
    config: SamplerConfig,
    resolution: int = 16,
) -> np.ndarray:
    """Integrate the flow ODE for a batch of conditions.

    Noise is drawn once from config.seed; returns (batch, H, W, C) images in
    model space.  Guidance contrasts the given conditions against the fully
    unconditional branch (both text streams empty).  Aborts with the step
    index if the state stops being finite.
    """
    bsz = a_tokens.shape[0]
    c = model.cfg.channels
    eps = derive_rng(config.seed, "sample-noise").standard_normal(
        (bsz, resolution, resolution, c)
    )
    grid = (resolution // model.cfg.patch, resolution // model.cfg.patch)
    x = patchify(eps, model.cfg.patch).tokens
    dt = 1.0 / config.steps

    uncond_a = np.zeros((bsz, 1, model.cfg.d_enc))
    uncond_a_mask = np.zeros((bsz, 1), dtype=bool)

    def velocity(state: np.ndarray, t_now: float) -> np.ndarray:
        tt = np.full((bsz,), t_now)
        if config.guidance == 0.0:
            return model.forward_tokens(
                state, uncond_a, uncond_a_mask, None, None, tt, grid
            ).data
        v_cond = model.forward_tokens(
            state, a_tokens, a_mask, b_tokens, b_mask, tt, grid
        ).data
        if config.guidance == 1.0:
            return v_cond
        v_uncond = model.forward_tokens(
            state, uncond_a, uncond_a_mask, None, None, tt, grid
        ).data
        return cfg_combine(v_cond, v_uncond, config.guidance)

    with no_grad():
        for k in range(config.steps):
            t_now = k * dt
            v1 = velocity(x, t_now)
            if config.scheme == "euler":
                x = x + dt * v1
            else:
                x_pred = x + dt * v1
                v2 = velocity(x_pred, min(t_now + dt, 1.0))
                x = x + 0.5 * dt * (v1 + v2)
            if not np.isfinite(x).all():
                raise FlowError(f"non-finite sampler state at step {k}")

    return unpatchify(LatentImage(tokens=x, grid=grid, patch=model.cfg.patch, channels=c))


def sample(
    model: VelocityModel,
    tau_a: TextEmbedding | None,
    tau_b: TextEmbedding | None,
    config: SamplerConfig,
    resolution: int = 16,
) -> LatentImage:
    """Single-condition sampler; returns the final state as patch tokens."""
    if (tau_a is None or tau_a.length == 0) and (tau_b is None or tau_b.length == 0):
        if config.guidance not in (0.0, 1.0):
            raise ValueError(
                "unconditional sampling needs guidance 0 or 1: there is no "
                "condition to contrast against"
            )
    d_enc = model.cfg.d_enc
    a_tok, a_mask = _encoder_batch(tau_a, d_enc)
    if tau_b is None or tau_b.length == 0:
        b_tok, b_mask = None, None
    else:
        b_tok, b_mask = tau_b.vectors.data[None], tau_b.mask[None]
    img = sample_batch(model, a_tok, a_mask, b_tok, b_mask, config, resolution)
    return patchify(img[0], model.cfg.patch)


def write_png(path: str | Path, img_unit: np.ndarray) -> None:
    """Write a [0, 1]-space image as 8-bit RGB PNG (clamped, rounded)."""
    import io

    from PIL import Image

    arr = np.clip(np.rint(np.asarray(img_unit) * 255.0), 0, 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr, mode="RGB").save(buf, format="PNG")
    Path(path).write_bytes(buf.getvalue())
