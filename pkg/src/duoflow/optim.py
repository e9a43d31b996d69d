"""AdamW with decoupled weight decay, operating on named parameter tensors."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor

__all__ = ["AdamW", "OptimError"]


class OptimError(RuntimeError):
    """A step was aborted; the message names the offending parameter."""


class AdamW:
    """Bias-corrected Adam update with decoupled weight decay.

    Holds first/second moment buffers for exactly the parameters it was
    given (the trainable set); frozen parameters must not appear here.
    The step counter increases by one per successful step. A non-finite
    gradient aborts the whole step before any parameter is touched.
    """

    def __init__(
        self,
        params: dict[str, Tensor],
        lr: float = 1e-3,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ):
        self.params = dict(params)
        self.lr = float(lr)
        self.betas = (float(betas[0]), float(betas[1]))
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        grads: dict[str, np.ndarray] = {}
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                raise OptimError(
                    f"parameter '{name}' has no gradient; fill zeros explicitly "
                    "if the parameter is intentionally inactive this step"
                )
            if g.shape != p.data.shape:
                raise OptimError(f"gradient shape {g.shape} != parameter shape {p.data.shape} for '{name}'")
            if not np.isfinite(g).all():
                raise OptimError(f"non-finite gradient in parameter '{name}'; step aborted")
            grads[name] = g

        self.step_count += 1
        t = self.step_count
        b1, b2 = self.betas
        bc1 = 1.0 - b1**t
        bc2 = 1.0 - b2**t
        for name, p in self.params.items():
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            mhat = m / bc1
            vhat = v / bc2
            if self.weight_decay != 0.0:
                p.data -= self.lr * self.weight_decay * p.data
            p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)

    # -- checkpoint support --------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Moment buffers and step counter as named arrays (for checkpoints)."""
        out: dict[str, np.ndarray] = {}
        for name in self.params:
            out[f"opt.m.{name}"] = self.m[name]
            out[f"opt.v.{name}"] = self.v[name]
        out["opt.step"] = np.asarray([float(self.step_count)], dtype=np.float64)
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name in self.params:
            mkey, vkey = f"opt.m.{name}", f"opt.v.{name}"
            if mkey not in arrays or vkey not in arrays:
                raise OptimError(f"optimizer state missing buffers for '{name}'")
            if arrays[mkey].shape != self.params[name].data.shape:
                raise OptimError(f"optimizer state shape mismatch for '{name}'")
            self.m[name] = arrays[mkey].astype(self.params[name].data.dtype, copy=True)
            self.v[name] = arrays[vkey].astype(self.params[name].data.dtype, copy=True)
        self.step_count = int(arrays["opt.step"].reshape(-1)[0])
