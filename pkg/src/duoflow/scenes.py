"""Parametric scene generator: shape images plus bilingual captions.

A scene is one shape with a color, a horizontal position, and a size, drawn
on a uniform light background; 3 shapes x 6 colors x 3 positions x 2 sizes
give 108 motif-free classes.  A scene may additionally carry one of eight
motif overlays (deterministic texture patterns inside the shape); motifs are
expressible only in language "b".

Rendering is a pure function of (scene, resolution): geometry lives in
normalized coordinates so the 16 and 32 pixel versions depict the same
layout.  The attribute-to-pixel mapping:

    position  -> shape center x at 0.28 / 0.50 / 0.72 of the width
    size      -> shape radius 0.16 (small) or 0.26 (large) of the width
    color     -> fill RGB (palette below), background fixed light gray
    motif     -> pattern mask inside the shape, fill darkened to 35%

Captions realize the attribute tuple in canonical order (size, color,
shape, position, then motif for language "b").  ``long`` mode inserts
filler terminals chosen deterministically from the class index, two for
language "a" and three for language "b", so paired captions differ in
length without any randomness.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .seeds import derive_rng
from .text import (
    COLORS,
    MOTIF_NAMES,
    POSITIONS,
    SHAPES,
    SIZES,
    Caption,
    default_vocab,
    detokenize,
)

__all__ = [
    "Scene",
    "GrammarError",
    "RenderError",
    "sample_scene",
    "render",
    "caption_pair",
    "parse_caption",
    "class_index",
    "scene_from_class_index",
    "all_class_scenes",
    "write_dataset",
    "N_CLASSES",
    "RESOLUTIONS",
]

N_CLASSES = 108
RESOLUTIONS = (16, 32)

_PALETTE = {
    "red": (0.90, 0.10, 0.10),
    "green": (0.10, 0.75, 0.15),
    "blue": (0.15, 0.25, 0.90),
    "yellow": (0.95, 0.85, 0.10),
    "purple": (0.60, 0.15, 0.80),
    "orange": (0.95, 0.55, 0.10),
}
_BACKGROUND = 0.85
_POSITION_X = {"left": 0.28, "center": 0.50, "right": 0.72}
_SIZE_R = {"small": 0.16, "large": 0.26}
_MOTIF_DARKEN = 0.35


class GrammarError(ValueError):
    """A caption does not realize a full, single attribute tuple."""


class RenderError(ValueError):
    """Unsupported render request."""


@dataclass(frozen=True)
class Scene:
    """One renderable scene; ``motif`` is None or a name from MOTIF_NAMES."""

    shape: str
    color: str
    position: str
    size: str
    motif: str | None = None

    def __post_init__(self) -> None:
        if self.shape not in SHAPES:
            raise ValueError(f"unknown shape {self.shape!r}")
        if self.color not in COLORS:
            raise ValueError(f"unknown color {self.color!r}")
        if self.position not in POSITIONS:
            raise ValueError(f"unknown position {self.position!r}")
        if self.size not in SIZES:
            raise ValueError(f"unknown size {self.size!r}")
        if self.motif is not None and self.motif not in MOTIF_NAMES:
            raise ValueError(f"unknown motif {self.motif!r}")

    def attributes(self) -> dict[str, str | None]:
        return {
            "shape": self.shape,
            "color": self.color,
            "position": self.position,
            "size": self.size,
            "motif": self.motif,
        }


def class_index(scene: Scene) -> int:
    """Motif-free class id in [0, 108)."""
    i = SHAPES.index(scene.shape)
    i = i * len(COLORS) + COLORS.index(scene.color)
    i = i * len(POSITIONS) + POSITIONS.index(scene.position)
    i = i * len(SIZES) + SIZES.index(scene.size)
    return i


def scene_from_class_index(i: int, motif: str | None = None) -> Scene:
    if not 0 <= i < N_CLASSES:
        raise ValueError(f"class index {i} out of range [0, {N_CLASSES})")
    i, s = divmod(i, len(SIZES))
    i, p = divmod(i, len(POSITIONS))
    sh, c = divmod(i, len(COLORS))
    return Scene(
        shape=SHAPES[sh],
        color=COLORS[c],
        position=POSITIONS[p],
        size=SIZES[s],
        motif=motif,
    )


def all_class_scenes() -> list[Scene]:
    """The 108 motif-free scenes in class-index order."""
    return [scene_from_class_index(i) for i in range(N_CLASSES)]


def sample_scene(
    seed: int, allow_motif: bool = True, motif_prob: float = 0.5
) -> Scene:
    """Uniform draw over the attribute grid; motif with ``motif_prob`` if allowed."""
    rng = derive_rng(seed, "scene")
    shape = SHAPES[rng.integers(len(SHAPES))]
    color = COLORS[rng.integers(len(COLORS))]
    position = POSITIONS[rng.integers(len(POSITIONS))]
    size = SIZES[rng.integers(len(SIZES))]
    motif = None
    if allow_motif and rng.random() < motif_prob:
        motif = MOTIF_NAMES[rng.integers(len(MOTIF_NAMES))]
    return Scene(shape=shape, color=color, position=position, size=size, motif=motif)


def _shape_mask(scene: Scene, res: int) -> np.ndarray:
    # pixel-center coordinates in [0, 1]
    coords = (np.arange(res, dtype=np.float64) + 0.5) / res
    u = coords[None, :]  # x, column
    v = coords[:, None]  # y, row
    cx = _POSITION_X[scene.position]
    cy = 0.5
    r = _SIZE_R[scene.size]
    if scene.shape == "circle":
        return (u - cx) ** 2 + (v - cy) ** 2 <= r * r
    if scene.shape == "square":
        # full half-side r: corner pixels at radius r*sqrt(2) separate the
        # square from the circle even on the coarse 16-pixel grid
        return (np.abs(u - cx) <= r) & (np.abs(v - cy) <= r)
    # upward triangle: apex at (cx, cy - r), base at cy + 0.8 r
    t = (v - (cy - r)) / (1.8 * r)
    return (t >= 0.0) & (t <= 1.0) & (np.abs(u - cx) <= r * t)


def _motif_mask(scene: Scene, res: int) -> np.ndarray:
    coords = (np.arange(res, dtype=np.float64) + 0.5) / res
    u = coords[None, :]
    v = coords[:, None]
    cx = _POSITION_X[scene.position]
    cy = 0.5
    m = scene.motif
    if m == "hstripe":
        return np.floor(v * 8.0).astype(int) % 2 == 0
    if m == "vstripe":
        return np.floor(u * 8.0).astype(int) % 2 == 0
    if m == "checker":
        return (np.floor(u * 8.0) + np.floor(v * 8.0)).astype(int) % 2 == 0
    if m == "diag":
        return np.floor((u + v) * 8.0).astype(int) % 2 == 0
    if m == "dots":
        return (np.floor(u * 8.0).astype(int) % 2 == 0) & (
            np.floor(v * 8.0).astype(int) % 2 == 0
        )
    if m == "rings":
        d = np.sqrt((u - cx) ** 2 + (v - cy) ** 2)
        return np.floor(d * 16.0).astype(int) % 2 == 0
    if m == "hband":
        return np.broadcast_to(np.abs(v - cy) < 0.08, (res, res))
    if m == "vband":
        return np.broadcast_to(np.abs(u - cx) < 0.08, (res, res))
    raise AssertionError(f"unhandled motif {m!r}")


def render(scene: Scene, resolution: int) -> np.ndarray:
    """Render to an (R, R, 3) float64 RGB array in [0, 1]."""
    if resolution not in RESOLUTIONS:
        raise RenderError(
            f"resolution must be one of {RESOLUTIONS}, got {resolution}"
        )
    img = np.full((resolution, resolution, 3), _BACKGROUND, dtype=np.float64)
    mask = _shape_mask(scene, resolution)
    fill = np.asarray(_PALETTE[scene.color], dtype=np.float64)
    img[mask] = fill
    if scene.motif is not None:
        overlay = mask & _motif_mask(scene, resolution)
        img[overlay] = fill * _MOTIF_DARKEN
    return img


# -- captions ----------------------------------------------------------------

_FILLER_COUNT = 18


def _fillers(language: str) -> tuple[str, ...]:
    return default_vocab(language).terms_in("filler")


def _b_counterpart(term_a: str) -> str:
    va, vb = default_vocab("a"), default_vocab("b")
    return vb.terminals[va.index[term_a]]


def _attribute_terms(scene: Scene, language: str) -> list[str]:
    # canonical order: size, color, shape, position (motif last, "b" only)
    order_a = [scene.size, scene.color, scene.shape, scene.position]
    if language == "a":
        return order_a
    terms = [_b_counterpart(t) for t in order_a]
    if scene.motif is not None:
        motif_terms = default_vocab("b").terms_in("motif")
        terms.append(motif_terms[MOTIF_NAMES.index(scene.motif)])
    return terms


def _tokens(terms: list[str], language: str) -> tuple[int, ...]:
    vocab = default_vocab(language)
    return tuple(vocab.index[t] for t in terms)


def caption_pair(
    scene: Scene,
    length_mode: str = "short",
    force_a: bool = False,
) -> tuple[Caption | None, Caption]:
    """Paired captions for one scene.

    caption_B always realizes the full tuple (motif included).  caption_A is
    the same tuple in language "a" for motif-free scenes; a motif scene has
    no exact language-a counterpart, so caption_A is None unless ``force_a``
    asks for the motif-free projection.  ``long`` mode inserts fillers keyed
    on the class index: two for "a", three for "b", so paired lengths always
    differ.
    """
    if length_mode not in ("short", "long"):
        raise ValueError(f"length_mode must be 'short' or 'long', got {length_mode!r}")
    attrs = scene.attributes()

    terms_b = _attribute_terms(scene, "b")
    if length_mode == "long":
        cls = class_index(scene)
        fb = _fillers("b")
        picks = [fb[cls % _FILLER_COUNT], fb[(cls * 7 + 3) % _FILLER_COUNT],
                 fb[(cls * 11 + 5) % _FILLER_COUNT]]
        terms_b = [picks[0], terms_b[0], picks[1]] + terms_b[1:] + [picks[2]]
    cap_b = Caption(language="b", tokens=_tokens(terms_b, "b"), attributes=attrs)

    if scene.motif is not None and not force_a:
        return None, cap_b

    terms_a = _attribute_terms(scene, "a")
    if length_mode == "long":
        cls = class_index(scene)
        fa = _fillers("a")
        picks_a = [fa[cls % _FILLER_COUNT], fa[(cls * 5 + 2) % _FILLER_COUNT]]
        terms_a = [picks_a[0]] + terms_a[:2] + [picks_a[1]] + terms_a[2:]
    attrs_a = dict(attrs)
    if scene.motif is not None:
        attrs_a["motif"] = None  # the projection drops the motif
    cap_a = Caption(language="a", tokens=_tokens(terms_a, "a"), attributes=attrs_a)
    return cap_a, cap_b


def parse_caption(caption: Caption) -> dict[str, str | None]:
    """Recover the attribute tuple from a caption; fillers are transparent.

    Raises GrammarError when an attribute category repeats or when any of
    shape, color, position, size is missing.  Motif terminals are mapped
    back to canonical motif names; language "a" can never produce one.
    """
    vocab = default_vocab(caption.language)
    va = default_vocab("a")
    found: dict[str, str] = {}
    for tok in caption.tokens:
        term = vocab.terminals[tok]
        cat = vocab.category_of(term)
        if cat == "filler":
            continue
        if cat in found:
            raise GrammarError(
                f"category {cat!r} appears more than once in {detokenize(caption)!r}"
            )
        if cat == "motif":
            motif_terms = vocab.terms_in("motif")
            found[cat] = MOTIF_NAMES[motif_terms.index(term)]
        elif caption.language == "a":
            found[cat] = term
        else:
            # map the b terminal back to language-a coordinates by index
            found[cat] = va.terminals[vocab.index[term]]
    missing = [c for c in ("shape", "color", "position", "size") if c not in found]
    if missing:
        raise GrammarError(
            f"caption {detokenize(caption)!r} is missing categories: {missing}"
        )
    return {
        "shape": found["shape"],
        "color": found["color"],
        "position": found["position"],
        "size": found["size"],
        "motif": found.get("motif"),
    }


def scene_from_attributes(attrs: dict[str, str | None]) -> Scene:
    return Scene(
        shape=attrs["shape"],
        color=attrs["color"],
        position=attrs["position"],
        size=attrs["size"],
        motif=attrs.get("motif"),
    )


# -- dataset dump --------------------------------------------------------------


def to_png_bytes(img: np.ndarray) -> bytes:
    """Encode a unit-range (H, W, 3) image as PNG bytes."""
    import io

    from PIL import Image

    arr = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr, mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def write_dataset(
    out_dir: str | Path,
    n: int,
    seed: int,
    resolution: int = 16,
    allow_motif: bool = True,
    length_mode: str = "short",
) -> Path:
    """Dump n scenes as PNGs plus a newline-delimited JSON manifest.

    Returns the manifest path.  Every record holds the file name, both
    captions (language "a" may be null for motif scenes), and the attribute
    tuple.  Fixed seed gives an identical dump across runs.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    for i in range(n):
        scene = sample_scene(seed * 100003 + i, allow_motif=allow_motif)
        img = render(scene, resolution)
        name = f"scene_{i:05d}.png"
        (out / name).write_bytes(to_png_bytes(img))
        cap_a, cap_b = caption_pair(scene, length_mode=length_mode)
        records.append(
            {
                "file": name,
                "caption_a": None if cap_a is None else detokenize(cap_a),
                "caption_b": detokenize(cap_b),
                "attributes": scene.attributes(),
            }
        )
    manifest = out / "manifest.jsonl"
    with manifest.open("w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return manifest
