"""Finite-difference gradient oracle and the named check suite."""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import tensor as T
from .tensor import Tensor

__all__ = ["finite_diff_check", "primitive_checks", "end_to_end_checks", "run_checks"]


def finite_diff_check(
    f: Callable[[Tensor], Tensor], x: Tensor | np.ndarray, h: float = 1e-5
) -> float:
    """Max relative error between analytic and central-difference gradients.

    f must be deterministic and scalar-valued; x may be a Tensor or a plain
    array. Returns max_i |analytic_i - central_i| / (|analytic_i| + 1e-8).
    Meaningful only in 64-bit mode; h defaults to 1e-5.
    """
    values = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    probe = Tensor(values.copy(), requires_grad=True, dtype=np.float64)
    out = f(probe)
    if out.data.size != 1:
        raise ValueError("finite_diff_check needs a scalar-valued function")
    probe.grad = None
    out.backward()
    analytic = probe.grad.copy() if probe.grad is not None else np.zeros_like(probe.data)

    flat = probe.data.reshape(-1)
    central = np.zeros_like(flat)
    with T.no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(probe).data)
            flat[i] = orig - h
            fm = float(f(probe).data)
            flat[i] = orig
            central[i] = (fp - fm) / (2.0 * h)
    central = central.reshape(probe.data.shape)
    rel = np.abs(analytic - central) / (np.abs(analytic) + 1e-8)
    return float(rel.max())


def _weighted_sum(t: Tensor, w: np.ndarray) -> Tensor:
    """Scalarize with fixed weights so the gradient is non-degenerate."""
    return (t * Tensor(w, dtype=np.float64)).sum()


def primitive_checks(seed: int = 0) -> list[tuple[str, Callable[[], float]]]:
    """Named finite-difference checks for every differentiable primitive.

    Shapes are randomized but small (<= 8x8); each check returns its max
    relative error. Run in 64-bit mode.
    """
    rng = np.random.default_rng(seed)

    def rand(*shape):
        return rng.standard_normal(shape)

    checks: list[tuple[str, Callable[[], float]]] = []

    def add_check(name, f, x):
        checks.append((name, lambda f=f, x=x: finite_diff_check(f, Tensor(x, dtype=np.float64))))

    wa = rand(3, 2)
    b_const = Tensor(rand(4, 2), dtype=np.float64)
    add_check("matmul_lhs", lambda t: _weighted_sum(T.matmul(t, b_const), wa), rand(3, 4))
    a_const = Tensor(rand(3, 4), dtype=np.float64)
    add_check("matmul_rhs", lambda t: _weighted_sum(T.matmul(a_const, t), wa), rand(4, 2))
    wb = rand(2, 3, 2)
    bb_const = Tensor(rand(2, 4, 2), dtype=np.float64)
    add_check("matmul_batched", lambda t: _weighted_sum(T.matmul(t, bb_const), wb), rand(2, 3, 4))

    w56 = rand(5, 6)
    other = Tensor(rand(5, 6), dtype=np.float64)
    add_check("add", lambda t: _weighted_sum(t + other, w56), rand(5, 6))
    add_check("add_broadcast", lambda t: _weighted_sum(other + t, w56), rand(6))
    add_check("sub", lambda t: _weighted_sum(t - other, w56), rand(5, 6))
    add_check("mul", lambda t: _weighted_sum(t * other, w56), rand(5, 6))
    add_check("mul_broadcast", lambda t: _weighted_sum(other * t, w56), rand(6))

    w47 = rand(4, 7)
    add_check("gelu", lambda t: _weighted_sum(T.gelu(t), w47), rand(4, 7))
    add_check("silu", lambda t: _weighted_sum(T.silu(t), w47), rand(4, 7))

    scale = Tensor(rand(7), dtype=np.float64)
    shift = Tensor(rand(7), dtype=np.float64)
    add_check("layer_norm_x", lambda t: _weighted_sum(T.layer_norm(t, scale, shift), w47), rand(4, 7))
    xc = Tensor(rand(4, 7), dtype=np.float64)
    w7 = rand(7)
    add_check("layer_norm_scale", lambda t: _weighted_sum(T.layer_norm(xc, t, shift), w47), rand(7))
    add_check("layer_norm_shift", lambda t: _weighted_sum(T.layer_norm(xc, scale, t), w47), rand(7))
    del w7

    w38 = rand(3, 8)
    add_check("softmax", lambda t: _weighted_sum(T.softmax_rows(t), w38), rand(3, 8))
    mask = np.array([True, True, True, True, True, False, False, True])
    add_check("softmax_masked", lambda t: _weighted_sum(T.softmax_rows(t, mask), w38), rand(3, 8))

    w25 = rand(2, 5)
    c_const = Tensor(rand(2, 2), dtype=np.float64)
    add_check("concat", lambda t: _weighted_sum(T.concat([t, c_const], axis=1), w25), rand(2, 3))
    w32 = rand(3, 2)
    add_check("slice", lambda t: _weighted_sum(t[1:4, 2:4], w32), rand(6, 5))
    w26, w43, w4 = rand(2, 6), rand(4, 3), rand(4)
    add_check("reshape", lambda t: _weighted_sum(t.reshape(2, 6), w26), rand(3, 4))
    add_check("swapaxes", lambda t: _weighted_sum(t.swapaxes(0, 1), w43), rand(3, 4))
    add_check("sum_axis", lambda t: _weighted_sum(t.sum(axis=0), w4), rand(5, 4))
    add_check("mean", lambda t: t.mean(), rand(5, 4))

    # shared subexpression: gradient must accumulate, not overwrite
    add_check("shared_subexpr", lambda t: ((t * t) + t * 3.0).sum(), rand(4, 4))

    return checks


def _owner_of(root, target: Tensor):
    """Locate the object attribute holding target, searching by identity."""
    stack = [root]
    seen: set[int] = set()
    while stack:
        obj = stack.pop()
        if id(obj) in seen:
            continue
        seen.add(id(obj))
        for attr, val in vars(obj).items():
            if val is target:
                return obj, attr
            if isinstance(val, (list, tuple)):
                stack.extend(v for v in val if hasattr(v, "__dict__"))
            elif hasattr(val, "__dict__") and not isinstance(val, Tensor):
                stack.append(val)
    raise KeyError("parameter tensor not reachable from model attributes")


def end_to_end_checks(seed: int = 1) -> list[tuple[str, Callable[[], float]]]:
    """Finite-difference checks through a whole block stack plus the
    generation loss.

    A one-double one-single model runs on a fixed flow-matching batch with
    both text streams populated; each named check differentiates the loss
    with respect to one parameter by temporarily rebinding that parameter
    to the probe tensor.  Run in 64-bit mode; tolerance is looser than the
    primitive checks because errors compound across the stack.
    """
    from .model import ModelConfig, VelocityModel
    from .tensor import mse

    cfg = ModelConfig(
        d_model=8, n_heads=2, n_double=1, n_single=1, d_enc=6, patch=2,
        adapter_hidden=10, max_text_len=4,
    )
    model = VelocityModel(cfg, seed=seed)
    rng = np.random.default_rng(seed)
    # zero-init heads gate the stack shut at init, which would zero every
    # upstream gradient and make the check vacuous; nudge them off zero
    for _, p in sorted(model.named_params().items()):
        if not p.data.any():
            p.data[...] = 0.05 * rng.standard_normal(p.data.shape)

    batch, grid = 2, (2, 2)
    n_tok = grid[0] * grid[1]
    x1 = rng.standard_normal((batch, n_tok, cfg.d_patch))
    eps = rng.standard_normal((batch, n_tok, cfg.d_patch))
    ts = np.array([0.35, 0.8])
    xt = (1.0 - ts)[:, None, None] * eps + ts[:, None, None] * x1
    target = Tensor(x1 - eps, dtype=np.float64)
    a_tokens = rng.standard_normal((batch, 3, cfg.d_enc))
    a_mask = np.array([[True, True, True], [True, True, False]])
    b_tokens = rng.standard_normal((batch, 2, cfg.d_enc))
    b_mask = np.ones((batch, 2), dtype=bool)

    def loss() -> Tensor:
        v = model.forward_tokens(xt, a_tokens, a_mask, b_tokens, b_mask, ts, grid)
        return mse(v, target)

    params = model.named_params()
    picked = [
        "in_proj.w",
        "time.fc1.w",
        "adapter_a.w2",
        "adapter_b.w1",
        "double0.img.wq.w",
        "double0.a.wv.w",
        "double0.img.mod.w",
        "double0.clab.wk",
        "double0.clab.wv",
        "single0.wo.w",
        "single0.clab.wv",
        "out.proj.w",
    ]
    missing = [n for n in picked if n not in params]
    if missing:
        raise KeyError(f"no parameters named {missing}; have {sorted(params)[:8]}...")

    checks: list[tuple[str, Callable[[], float]]] = []
    for name in picked:
        param = params[name]
        owner, attr = _owner_of(model, param)

        def f(probe: Tensor, owner=owner, attr=attr, param=param) -> Tensor:
            setattr(owner, attr, probe)
            try:
                return loss()
            finally:
                setattr(owner, attr, param)

        checks.append(
            (f"one_block/{name}", lambda f=f, p=param: finite_diff_check(f, p.data))
        )
    return checks


def run_checks(checks, tol: float) -> list[tuple[str, float, bool]]:
    """Evaluate (name, rel_err, passed) for each named check."""
    results = []
    for name, fn in checks:
        err = fn()
        results.append((name, err, err <= tol))
    return results
