"""Representation-alignment objective for the adapter branch.

Two terms pull the adapted b tokens toward the frozen a-path features of
the semantically equivalent a caption: ``pool_loss`` compares sequence-mean
vectors, ``inter_loss`` compares token-by-token after linearly resampling
the a sequence to the b length.  A threshold gate decides what survives:
above threshold the sum trains, below it either the pooled term alone
("equation" mode) or nothing ("text" mode) does.  The comparison itself is
a stop-decision: no gradient flows through the gate condition.

The auxiliary a features are constants on the tape; gradient reaches only
the b side.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, matmul, mse
from .text import TextEmbedding

__all__ = [
    "AlignmentConfig",
    "LossReport",
    "AlignError",
    "pool_loss",
    "interp_seq",
    "inter_loss",
    "gated_ra_loss",
]


class AlignError(ValueError):
    """Alignment loss invoked on an empty sequence."""


@dataclass(frozen=True)
class AlignmentConfig:
    d_threshold: float = 0.05
    gate_mode: str = "equation"
    enable_pool: bool = True
    enable_inter: bool = True
    enabled: bool = True

    def __post_init__(self) -> None:
        if self.d_threshold < 0:
            raise ValueError(f"d_threshold must be >= 0, got {self.d_threshold}")
        if self.gate_mode not in ("equation", "text"):
            raise ValueError(
                f"gate_mode must be 'equation' or 'text', got {self.gate_mode!r}"
            )


@dataclass(frozen=True)
class LossReport:
    """Per-step scalar summary; total is the trained objective."""

    l_gen: float
    l_p: float
    l_inter: float
    l_ra: float
    total: float
    gate_fired: bool

    def __post_init__(self) -> None:
        # tolerance covers single-precision rounding of the on-tape sum
        if not np.isclose(self.total, self.l_gen + self.l_ra, rtol=1e-6, atol=1e-9):
            raise ValueError(
                f"total {self.total} != l_gen {self.l_gen} + l_ra {self.l_ra}"
            )


def _require_tokens(emb: TextEmbedding, name: str) -> Tensor:
    if emb.length == 0:
        raise AlignError(f"{name} is empty; alignment needs at least one token")
    return emb.vectors


def pool_loss(tau_b: TextEmbedding, tau_a_aux: TextEmbedding) -> Tensor:
    """MSE between the two sequence-mean vectors."""
    vb = _require_tokens(tau_b, "tau_b")
    va = _require_tokens(tau_a_aux, "tau_a_aux")
    return mse(vb.mean(axis=0), va.mean(axis=0))


def _interp_weights(src_len: int, target_len: int) -> np.ndarray:
    """(target_len, src_len) row-stochastic matrix of linear resampling weights."""
    w = np.zeros((target_len, src_len))
    if target_len == 1:
        # endpoint formula degenerates; define the single output as the mean
        w[0, :] = 1.0 / src_len
        return w
    for i in range(target_len):
        coord = i * (src_len - 1) / (target_len - 1)
        lo = int(np.floor(coord))
        hi = min(lo + 1, src_len - 1)
        frac = coord - lo
        w[i, lo] += 1.0 - frac
        if hi != lo:
            w[i, hi] += frac
    return w


def interp_seq(tau: TextEmbedding, target_len: int) -> TextEmbedding:
    """Linearly resample along the sequence axis, endpoints aligned."""
    if target_len < 1:
        raise ValueError(f"target_len must be >= 1, got {target_len}")
    vecs = _require_tokens(tau, "tau")
    src_len = vecs.data.shape[0]
    if src_len == target_len:
        return tau
    w = Tensor(_interp_weights(src_len, target_len))
    return TextEmbedding(
        language=tau.language,
        vectors=matmul(w, vecs),
        mask=np.ones((target_len,), dtype=bool),
    )


def inter_loss(tau_b: TextEmbedding, tau_a_aux: TextEmbedding) -> Tensor:
    """Token-wise MSE after resampling the a sequence to the b length."""
    vb = _require_tokens(tau_b, "tau_b")
    _require_tokens(tau_a_aux, "tau_a_aux")
    resampled = interp_seq(tau_a_aux, vb.data.shape[0])
    return mse(vb, resampled.vectors)


def _scalar(x: Tensor | float) -> float:
    if isinstance(x, Tensor):
        return float(x.data)
    return float(x)


def gated_ra_loss(
    l_p: Tensor | float, l_inter: Tensor | float, cfg: AlignmentConfig
) -> tuple[Tensor | float, bool]:
    """Threshold gate over the two alignment terms.

    The decision compares l_p + l_inter against d_threshold on values only
    (no gradient through the comparison).  Above or at threshold both modes
    keep the sum; below it "equation" keeps the pooled term and "text"
    keeps nothing.  Returns (l_ra, gate_fired) where gate_fired marks the
    below-threshold branch.
    """
    vp, vi = _scalar(l_p), _scalar(l_inter)
    if vp < 0 or vi < 0:
        raise ValueError(f"alignment terms must be >= 0, got {vp}, {vi}")
    fired = (vp + vi) < cfg.d_threshold
    if not fired:
        return l_p + l_inter, False
    if cfg.gate_mode == "equation":
        return l_p, True
    zero = Tensor(np.zeros(())) if isinstance(l_p, Tensor) else 0.0
    return zero, True
