"""Velocity-field transformer with a key/value-only adapter branch.

The stack: patch tokens pass an input projection, N_d double-stream blocks
(separate projections for the image stream and the language-a stream), then
N_s single-stream blocks (one shared projection over the concatenated
streams), then a modulated output head back to patch space.

The adapter branch conditions generation on language "b" without touching
any backbone weight: the adapted b tokens are projected by a per-block
trainable (key, value) pair and appended to every block's attention key and
value lists.  B tokens are never used as queries and are never updated, so
the same adapted sequence enters every block.  With zero b tokens the
forward path is the exact code path of a model built without the branch;
given equal seeds the two produce bitwise-identical outputs.

Timestep conditioning follows the usual diffusion-transformer recipe:
sinusoidal embedding, a small MLP, then per-block zero-initialized linear
heads producing shift/scale/gate pairs for the attention and MLP sublayers.
Blocks therefore start as identities and the output head starts at zero.

``query_update`` builds the deliberately wrong variant used by the
ablation harness: b tokens get a query projection, join the query list,
and are residually updated across blocks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .seeds import derive_rng
from .tensor import (
    ShapeError,
    Tensor,
    concat,
    gelu,
    layer_norm,
    matmul,
    silu,
    softmax_rows,
)
from .text import AdapterMLP, TextEmbedding, sinusoidal_positions

__all__ = [
    "ModelConfig",
    "LatentImage",
    "BlockParams",
    "VelocityModel",
    "patchify",
    "unpatchify",
    "joint_attention",
    "timestep_embedding",
]


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    n_heads: int = 4
    n_double: int = 2
    n_single: int = 2
    d_enc: int = 48
    patch: int = 4
    channels: int = 3
    mlp_ratio: int = 4
    adapter_hidden: int = 96
    max_text_len: int = 16
    adapter_branch: bool = True
    query_update: bool = False
    use_positions: bool = True

    @property
    def d_patch(self) -> int:
        return self.patch * self.patch * self.channels

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def __post_init__(self) -> None:
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must divide evenly into heads")
        if self.query_update and not self.adapter_branch:
            raise ValueError("query_update requires the adapter branch")


@dataclass
class LatentImage:
    """Image as row-major patch tokens plus the grid needed to invert."""

    tokens: np.ndarray
    grid: tuple[int, int]
    patch: int
    channels: int

    def __post_init__(self) -> None:
        n = self.grid[0] * self.grid[1]
        if self.tokens.shape[-2] != n:
            raise ShapeError(
                f"token count {self.tokens.shape[-2]} != grid {self.grid} ({n})"
            )


def patchify(img: np.ndarray, patch: int = 4) -> LatentImage:
    """Split (..., H, W, C) pixels into row-major (..., N, patch*patch*C) tokens."""
    h, w, c = img.shape[-3], img.shape[-2], img.shape[-1]
    if h % patch != 0 or w % patch != 0:
        raise ShapeError(f"image {h}x{w} not divisible by patch size {patch}")
    hp, wp = h // patch, w // patch
    lead = img.shape[:-3]
    x = img.reshape(lead + (hp, patch, wp, patch, c))
    x = np.moveaxis(x, -4, -3)  # (..., hp, wp, patch, patch, c)
    tokens = x.reshape(lead + (hp * wp, patch * patch * c))
    return LatentImage(tokens=tokens, grid=(hp, wp), patch=patch, channels=c)


def unpatchify(latent: LatentImage) -> np.ndarray:
    """Exact inverse of patchify."""
    hp, wp = latent.grid
    p, c = latent.patch, latent.channels
    lead = latent.tokens.shape[:-2]
    x = latent.tokens.reshape(lead + (hp, wp, p, p, c))
    x = np.moveaxis(x, -3, -4)  # (..., hp, p, wp, p, c)
    return x.reshape(lead + (hp * p, wp * p, c))


def timestep_embedding(t: np.ndarray, dim: int) -> np.ndarray:
    """Sinusoidal embedding of flow times in [0, 1], shape (batch, dim)."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half, dtype=np.float64) / half)
    args = t[:, None] * 1000.0 * freqs[None, :]
    return np.concatenate([np.cos(args), np.sin(args)], axis=-1)


def positional_grid(grid: tuple[int, int], dim: int) -> np.ndarray:
    """2-D sinusoidal encoding: half the width per axis, row-major tokens."""
    hp, wp = grid
    half = dim // 2
    rows = sinusoidal_positions(hp, half)
    cols = sinusoidal_positions(wp, half)
    out = np.zeros((hp * wp, dim), dtype=np.float64)
    for i in range(hp):
        for j in range(wp):
            out[i * wp + j, :half] = rows[i]
            out[i * wp + j, half:] = cols[j]
    return out


@dataclass
class BlockParams:
    """Projection weights one block exposes to the joint attention op.

    mode "double" uses the per-stream projections (img_*, a_*); mode
    "single" uses the shared ones (s_*).  The adapter pair (b_wk, b_wv) is
    exactly two matrices; b_wq exists only on the query-update ablation
    variant.
    """

    mode: str
    n_heads: int
    img_wq: Tensor | None = None
    img_bq: Tensor | None = None
    img_wk: Tensor | None = None
    img_bk: Tensor | None = None
    img_wv: Tensor | None = None
    img_bv: Tensor | None = None
    a_wq: Tensor | None = None
    a_bq: Tensor | None = None
    a_wk: Tensor | None = None
    a_bk: Tensor | None = None
    a_wv: Tensor | None = None
    a_bv: Tensor | None = None
    s_wq: Tensor | None = None
    s_bq: Tensor | None = None
    s_wk: Tensor | None = None
    s_bk: Tensor | None = None
    s_wv: Tensor | None = None
    s_bv: Tensor | None = None
    b_wk: Tensor | None = None
    b_wv: Tensor | None = None
    b_wq: Tensor | None = None


def _heads(x: Tensor, n_heads: int) -> Tensor:
    b, l, d = x.data.shape
    return x.reshape((b, l, n_heads, d // n_heads)).swapaxes(1, 2)


def _unheads(x: Tensor) -> Tensor:
    b, h, l, dh = x.data.shape
    return x.swapaxes(1, 2).reshape((b, l, h * dh))


def _mha(q: Tensor, k: Tensor, v: Tensor, key_mask: np.ndarray | None, n_heads: int) -> Tensor:
    """Masked multi-head attention on (batch, len, d_model) tensors."""
    d_head = q.data.shape[-1] // n_heads
    qh = _heads(q, n_heads)
    kh = _heads(k, n_heads)
    vh = _heads(v, n_heads)
    logits = matmul(qh, kh.swapaxes(-1, -2)) * (1.0 / np.sqrt(d_head))
    mask = None
    if key_mask is not None:
        mask = key_mask[:, None, None, :]
    weights = softmax_rows(logits, mask)
    return _unheads(matmul(weights, vh))


def _ensure_batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.data.ndim == 2:
        return x.reshape((1,) + x.data.shape), True
    return x, False


def joint_attention(
    x_img: Tensor,
    tau_a: Tensor,
    tau_b: Tensor | None,
    params: BlockParams,
    a_mask: np.ndarray | None = None,
    b_mask: np.ndarray | None = None,
) -> tuple[Tensor, Tensor]:
    """Attention core shared by both block types.

    Queries come from the image and a streams; keys and values additionally
    include the projected b tokens.  Returns the attention-weighted values
    (pre output-projection) for the image and a streams.  The b stream is
    read-only here; the query-update variant is available to blocks through
    :func:`_joint_attention_full`.
    """
    img_out, a_out, _ = _joint_attention_full(
        x_img, tau_a, tau_b, params, a_mask, b_mask
    )
    return img_out, a_out


def _joint_attention_full(
    x_img: Tensor,
    tau_a: Tensor,
    tau_b: Tensor | None,
    params: BlockParams,
    a_mask: np.ndarray | None = None,
    b_mask: np.ndarray | None = None,
) -> tuple[Tensor, Tensor, Tensor | None]:
    x_img, squeeze = _ensure_batched(x_img)
    tau_a, _ = _ensure_batched(tau_a)
    if a_mask is not None and a_mask.ndim == 1:
        a_mask = a_mask[None]
    if b_mask is not None and b_mask.ndim == 1:
        b_mask = b_mask[None]
    if tau_b is not None:
        tau_b, _ = _ensure_batched(tau_b)
        if tau_b.data.shape[-2] == 0:
            tau_b = None
    if x_img.data.shape[-1] != tau_a.data.shape[-1]:
        raise ShapeError(
            f"stream widths disagree: image {x_img.data.shape} vs a {tau_a.data.shape}"
        )
    n_img = x_img.data.shape[1]
    n_a = tau_a.data.shape[1]
    bsz = x_img.data.shape[0]

    if params.mode == "double":
        q_img = matmul(x_img, params.img_wq) + params.img_bq
        k_img = matmul(x_img, params.img_wk) + params.img_bk
        v_img = matmul(x_img, params.img_wv) + params.img_bv
        q_a = matmul(tau_a, params.a_wq) + params.a_bq
        k_a = matmul(tau_a, params.a_wk) + params.a_bk
        v_a = matmul(tau_a, params.a_wv) + params.a_bv
        q = concat([q_img, q_a], axis=1)
        k = concat([k_img, k_a], axis=1)
        v = concat([v_img, v_a], axis=1)
    elif params.mode == "single":
        z = concat([x_img, tau_a], axis=1)
        q = matmul(z, params.s_wq) + params.s_bq
        k = matmul(z, params.s_wk) + params.s_bk
        v = matmul(z, params.s_wv) + params.s_bv
    else:
        raise ValueError(f"unknown attention mode {params.mode!r}")

    if a_mask is None:
        a_mask = np.ones((bsz, n_a), dtype=bool)
    key_mask = np.concatenate([np.ones((bsz, n_img), dtype=bool), a_mask], axis=1)

    n_b = 0
    if tau_b is not None:
        # adapter branch: keys and values only, no bias terms
        k_b = matmul(tau_b, params.b_wk)
        v_b = matmul(tau_b, params.b_wv)
        k = concat([k, k_b], axis=1)
        v = concat([v, v_b], axis=1)
        n_b = tau_b.data.shape[1]
        if b_mask is None:
            b_mask = np.ones((bsz, n_b), dtype=bool)
        key_mask = np.concatenate([key_mask, b_mask], axis=1)
        if params.b_wq is not None:
            q = concat([q, matmul(tau_b, params.b_wq)], axis=1)

    out = _mha(q, k, v, key_mask, params.n_heads)
    img_out = out[:, :n_img]
    a_out = out[:, n_img : n_img + n_a]
    b_out = None
    if params.b_wq is not None and tau_b is not None:
        b_out = out[:, n_img + n_a : n_img + n_a + n_b]
    if squeeze:
        img_out = img_out.reshape(img_out.data.shape[1:])
        a_out = a_out.reshape(a_out.data.shape[1:])
        if b_out is not None:
            b_out = b_out.reshape(b_out.data.shape[1:])
    return img_out, a_out, b_out


class _Linear:
    """Plain affine map with named parameters."""

    def __init__(self, name: str, d_in: int, d_out: int, seed: int, zero: bool = False):
        self.name = name
        if zero:
            w = np.zeros((d_in, d_out))
        else:
            rng = derive_rng(seed, "param", name)
            w = rng.standard_normal((d_in, d_out)) / np.sqrt(d_in)
        self.w = Tensor(w, requires_grad=True)
        self.b = Tensor(np.zeros((d_out,)), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return matmul(x, self.w) + self.b

    def named_params(self) -> dict[str, Tensor]:
        return {f"{self.name}.w": self.w, f"{self.name}.b": self.b}


class _Mlp:
    def __init__(self, name: str, d: int, ratio: int, seed: int):
        self.fc1 = _Linear(f"{name}.fc1", d, d * ratio, seed)
        self.fc2 = _Linear(f"{name}.fc2", d * ratio, d, seed)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(gelu(self.fc1(x)))

    def named_params(self) -> dict[str, Tensor]:
        return {**self.fc1.named_params(), **self.fc2.named_params()}


class _Modulation:
    """Zero-init head mapping the time vector to n chunks of width d."""

    def __init__(self, name: str, d: int, n_chunks: int, seed: int):
        self.lin = _Linear(name, d, d * n_chunks, seed, zero=True)
        self.d = d
        self.n_chunks = n_chunks

    def __call__(self, tvec: Tensor) -> list[Tensor]:
        out = self.lin(tvec)
        bsz = out.data.shape[0]
        return [
            out[:, i * self.d : (i + 1) * self.d].reshape((bsz, 1, self.d))
            for i in range(self.n_chunks)
        ]

    def named_params(self) -> dict[str, Tensor]:
        return self.lin.named_params()


def _norm(x: Tensor, ones: Tensor, zeros: Tensor) -> Tensor:
    return layer_norm(x, ones, zeros)


def _modulate(h: Tensor, scale: Tensor, shift: Tensor) -> Tensor:
    return h * (scale + 1.0) + shift


class _ClabPair:
    """Per-block trainable key/value pair; query matrix only on the ablation."""

    def __init__(self, name: str, d: int, seed: int, query_update: bool):
        rng = derive_rng(seed, "param", f"{name}.wk")
        # key small-random so b tokens compete for attention mass at once,
        # value zero so they contribute nothing until trained
        self.wk = Tensor(rng.standard_normal((d, d)) / np.sqrt(d), requires_grad=True)
        self.wv = Tensor(np.zeros((d, d)), requires_grad=True)
        self.wq = None
        if query_update:
            rngq = derive_rng(seed, "param", f"{name}.wq")
            self.wq = Tensor(rngq.standard_normal((d, d)) / np.sqrt(d), requires_grad=True)
        self.name = name

    def named_params(self) -> dict[str, Tensor]:
        out = {f"{self.name}.wk": self.wk, f"{self.name}.wv": self.wv}
        if self.wq is not None:
            out[f"{self.name}.wq"] = self.wq
        return out


class _DoubleBlock:
    def __init__(self, name: str, cfg: ModelConfig, seed: int):
        d = cfg.d_model
        self.cfg = cfg
        self.name = name
        mk = lambda suffix: _Linear(f"{name}.{suffix}", d, d, seed)
        self.img_wq, self.img_wk, self.img_wv = mk("img.wq"), mk("img.wk"), mk("img.wv")
        self.img_wo = _Linear(f"{name}.img.wo", d, d, seed)
        self.a_wq, self.a_wk, self.a_wv = mk("a.wq"), mk("a.wk"), mk("a.wv")
        self.a_wo = _Linear(f"{name}.a.wo", d, d, seed)
        self.img_mlp = _Mlp(f"{name}.img.mlp", d, cfg.mlp_ratio, seed)
        self.a_mlp = _Mlp(f"{name}.a.mlp", d, cfg.mlp_ratio, seed)
        self.img_mod = _Modulation(f"{name}.img.mod", d, 6, seed)
        self.a_mod = _Modulation(f"{name}.a.mod", d, 6, seed)
        self.clab = None
        if cfg.adapter_branch:
            self.clab = _ClabPair(f"{name}.clab", d, seed, cfg.query_update)
        self._ones = Tensor(np.ones((d,)))
        self._zeros = Tensor(np.zeros((d,)))

    def block_params(self) -> BlockParams:
        return BlockParams(
            mode="double",
            n_heads=self.cfg.n_heads,
            img_wq=self.img_wq.w, img_bq=self.img_wq.b,
            img_wk=self.img_wk.w, img_bk=self.img_wk.b,
            img_wv=self.img_wv.w, img_bv=self.img_wv.b,
            a_wq=self.a_wq.w, a_bq=self.a_wq.b,
            a_wk=self.a_wk.w, a_bk=self.a_wk.b,
            a_wv=self.a_wv.w, a_bv=self.a_wv.b,
            b_wk=None if self.clab is None else self.clab.wk,
            b_wv=None if self.clab is None else self.clab.wv,
            b_wq=None if self.clab is None else self.clab.wq,
        )

    def __call__(
        self,
        x: Tensor,
        a: Tensor,
        a_mask: np.ndarray,
        b: Tensor | None,
        b_mask: np.ndarray | None,
        tvec: Tensor,
    ) -> tuple[Tensor, Tensor, Tensor | None]:
        i_sh1, i_sc1, i_g1, i_sh2, i_sc2, i_g2 = self.img_mod(tvec)
        a_sh1, a_sc1, a_g1, a_sh2, a_sc2, a_g2 = self.a_mod(tvec)
        xh = _modulate(_norm(x, self._ones, self._zeros), i_sc1, i_sh1)
        ah = _modulate(_norm(a, self._ones, self._zeros), a_sc1, a_sh1)
        params = self.block_params()
        if self.clab is None or b is None:
            img_out, a_out, b_out = _joint_attention_full(
                xh, ah, None, params, a_mask, None
            )
        else:
            img_out, a_out, b_out = _joint_attention_full(
                xh, ah, b, params, a_mask, b_mask
            )
        x = x + i_g1 * self.img_wo(img_out)
        a = a + a_g1 * self.a_wo(a_out)
        x = x + i_g2 * self.img_mlp(_modulate(_norm(x, self._ones, self._zeros), i_sc2, i_sh2))
        a = a + a_g2 * self.a_mlp(_modulate(_norm(a, self._ones, self._zeros), a_sc2, a_sh2))
        if b_out is not None:
            b = b + b_out
        return x, a, b

    def named_params(self) -> dict[str, Tensor]:
        groups = [
            self.img_wq, self.img_wk, self.img_wv, self.img_wo,
            self.a_wq, self.a_wk, self.a_wv, self.a_wo,
            self.img_mlp, self.a_mlp, self.img_mod, self.a_mod,
        ]
        out: dict[str, Tensor] = {}
        for g in groups:
            out.update(g.named_params())
        if self.clab is not None:
            out.update(self.clab.named_params())
        return out


class _SingleBlock:
    def __init__(self, name: str, cfg: ModelConfig, seed: int):
        d = cfg.d_model
        self.cfg = cfg
        self.name = name
        self.wq = _Linear(f"{name}.wq", d, d, seed)
        self.wk = _Linear(f"{name}.wk", d, d, seed)
        self.wv = _Linear(f"{name}.wv", d, d, seed)
        self.wo = _Linear(f"{name}.wo", d, d, seed)
        self.mlp = _Mlp(f"{name}.mlp", d, cfg.mlp_ratio, seed)
        self.mod = _Modulation(f"{name}.mod", d, 6, seed)
        self.clab = None
        if cfg.adapter_branch:
            self.clab = _ClabPair(f"{name}.clab", d, seed, cfg.query_update)
        self._ones = Tensor(np.ones((d,)))
        self._zeros = Tensor(np.zeros((d,)))

    def block_params(self) -> BlockParams:
        return BlockParams(
            mode="single",
            n_heads=self.cfg.n_heads,
            s_wq=self.wq.w, s_bq=self.wq.b,
            s_wk=self.wk.w, s_bk=self.wk.b,
            s_wv=self.wv.w, s_bv=self.wv.b,
            b_wk=None if self.clab is None else self.clab.wk,
            b_wv=None if self.clab is None else self.clab.wv,
            b_wq=None if self.clab is None else self.clab.wq,
        )

    def __call__(
        self,
        x: Tensor,
        a: Tensor,
        a_mask: np.ndarray,
        b: Tensor | None,
        b_mask: np.ndarray | None,
        tvec: Tensor,
    ) -> tuple[Tensor, Tensor, Tensor | None]:
        sh1, sc1, g1, sh2, sc2, g2 = self.mod(tvec)
        n_img = x.data.shape[1]
        z = concat([x, a], axis=1)
        zh = _modulate(_norm(z, self._ones, self._zeros), sc1, sh1)
        xh = zh[:, :n_img]
        ah = zh[:, n_img:]
        params = self.block_params()
        if self.clab is None or b is None:
            img_out, a_out, b_out = _joint_attention_full(
                xh, ah, None, params, a_mask, None
            )
        else:
            img_out, a_out, b_out = _joint_attention_full(
                xh, ah, b, params, a_mask, b_mask
            )
        o = concat([img_out, a_out], axis=1)
        z = z + g1 * self.wo(o)
        z = z + g2 * self.mlp(_modulate(_norm(z, self._ones, self._zeros), sc2, sh2))
        x = z[:, :n_img]
        a = z[:, n_img:]
        if b_out is not None:
            b = b + b_out
        return x, a, b

    def named_params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for g in (self.wq, self.wk, self.wv, self.wo, self.mlp, self.mod):
            out.update(g.named_params())
        if self.clab is not None:
            out.update(self.clab.named_params())
        return out


class VelocityModel:
    """Full velocity-field model; see the module docstring for the layout."""

    def __init__(self, cfg: ModelConfig, seed: int):
        self.cfg = cfg
        self.seed = seed
        d = cfg.d_model
        self.in_proj = _Linear("in_proj", cfg.d_patch, d, seed)
        self.time_fc1 = _Linear("time.fc1", d, d, seed)
        self.time_fc2 = _Linear("time.fc2", d, d, seed)
        self.adapter_a = AdapterMLP("adapter_a", cfg.d_enc, cfg.adapter_hidden, d, seed)
        self.adapter_b = None
        if cfg.adapter_branch:
            self.adapter_b = AdapterMLP(
                "adapter_b", cfg.d_enc, cfg.adapter_hidden, d, seed
            )
        self.doubles = [
            _DoubleBlock(f"double{i}", cfg, seed) for i in range(cfg.n_double)
        ]
        self.singles = [
            _SingleBlock(f"single{i}", cfg, seed) for i in range(cfg.n_single)
        ]
        self.out_mod = _Modulation("out.mod", d, 2, seed)
        self.out_proj = _Linear("out.proj", d, cfg.d_patch, seed, zero=True)
        self._ones = Tensor(np.ones((d,)))
        self._zeros = Tensor(np.zeros((d,)))
        self.text_pe = sinusoidal_positions(cfg.max_text_len, d)

    # -- parameter bookkeeping ------------------------------------------------

    def named_params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        out.update(self.in_proj.named_params())
        out.update(self.time_fc1.named_params())
        out.update(self.time_fc2.named_params())
        out.update(self.adapter_a.named_params())
        if self.adapter_b is not None:
            out.update(self.adapter_b.named_params())
        for blk in self.doubles + self.singles:
            out.update(blk.named_params())
        out.update(self.out_mod.named_params())
        out.update(self.out_proj.named_params())
        return out

    def adapter_param_names(self) -> set[str]:
        """The trainable conditioning branch: b adapter plus every block's K/V pair."""
        names: set[str] = set()
        if self.adapter_b is not None:
            names.update(self.adapter_b.named_params())
        for blk in self.doubles + self.singles:
            if blk.clab is not None:
                names.update(blk.clab.named_params())
        return names

    def backbone_param_names(self) -> set[str]:
        return set(self.named_params()) - self.adapter_param_names()

    def set_trainable(self, names: set[str]) -> None:
        """requires_grad True exactly on ``names``; everything else frozen."""
        for name, p in self.named_params().items():
            p.requires_grad = name in names

    # -- forward ---------------------------------------------------------------

    def time_vector(self, t: np.ndarray) -> Tensor:
        emb = Tensor(timestep_embedding(t, self.cfg.d_model))
        return self.time_fc2(silu(self.time_fc1(emb)))

    def forward_tokens(
        self,
        patch_tokens: np.ndarray | Tensor,
        a_tokens: np.ndarray,
        a_mask: np.ndarray,
        b_tokens: np.ndarray | None,
        b_mask: np.ndarray | None,
        t: np.ndarray,
        grid: tuple[int, int],
    ) -> Tensor:
        """Batched core: (B, N, d_patch) tokens to same-shape velocity tokens.

        a_tokens/b_tokens are encoder outputs at d_enc width; the adapters
        run inside so their gradients flow.  b_tokens None or zero-length
        takes the exact code path of a model without the adapter branch.
        """
        cfg = self.cfg
        x = patch_tokens if isinstance(patch_tokens, Tensor) else Tensor(patch_tokens)
        if x.data.ndim != 3 or x.data.shape[-1] != cfg.d_patch:
            raise ShapeError(
                f"patch tokens must be (batch, n, {cfg.d_patch}), got {x.data.shape}"
            )
        x = self.in_proj(x)
        if cfg.use_positions:
            x = x + Tensor(positional_grid(grid, cfg.d_model))

        a = self.adapter_a(Tensor(a_tokens))
        if cfg.use_positions and a.data.shape[1] > 0:
            a = a + Tensor(self.text_pe[: a.data.shape[1]])

        b = None
        if b_tokens is not None and b_tokens.shape[-2] > 0:
            if self.adapter_b is None:
                raise ValueError("model was built without the adapter branch")
            if b_mask is None or not b_mask.any():
                b = None
            else:
                b = self.adapter_b(Tensor(b_tokens))
                if cfg.use_positions:
                    b = b + Tensor(self.text_pe[: b.data.shape[1]])

        tvec = self.time_vector(t)
        b_mask_eff = b_mask if b is not None else None
        for blk in self.doubles:
            x, a, b2 = blk(x, a, a_mask, b, b_mask_eff, tvec)
            if b2 is not None:
                b = b2
        for blk in self.singles:
            x, a, b2 = blk(x, a, a_mask, b, b_mask_eff, tvec)
            if b2 is not None:
                b = b2

        sh, sc = self.out_mod(tvec)
        x = _modulate(_norm(x, self._ones, self._zeros), sc, sh)
        return self.out_proj(x)

    def forward_velocity(
        self,
        x: LatentImage,
        tau_a: TextEmbedding | None,
        tau_b: TextEmbedding | None,
        t: float,
    ) -> LatentImage:
        """Single-sample wrapper over forward_tokens; returns velocity tokens."""
        if not np.isfinite(t) or not 0.0 <= t <= 1.0:
            raise ValueError(f"flow time must be finite in [0, 1], got {t}")
        tokens = x.tokens
        if tokens.ndim == 2:
            tokens = tokens[None]
        if tau_a is None or tau_a.length == 0:
            a_tok = np.zeros((1, 1, self.cfg.d_enc))
            a_mask = np.zeros((1, 1), dtype=bool)
        else:
            a_tok = tau_a.vectors.data[None]
            a_mask = tau_a.mask[None]
        if tau_b is None or tau_b.length == 0:
            b_tok, b_mask = None, None
        else:
            b_tok = tau_b.vectors.data[None]
            b_mask = tau_b.mask[None]
        out = self.forward_tokens(
            tokens, a_tok, a_mask, b_tok, b_mask, np.asarray([t]), x.grid
        )
        vel = out.data[0] if x.tokens.ndim == 2 else out.data
        return LatentImage(tokens=vel, grid=x.grid, patch=x.patch, channels=x.channels)
