"""Two synthetic condition languages: vocabularies, tokenizer, frozen encoders.

Language "a" conditions the frozen backbone; language "b" feeds the trainable
adapter branch.  Both vocabularies ship as plain text files (one terminal per
line, line order defines token indices) with a fixed category layout:

    a: shapes[0:3] colors[3:9] positions[9:12] sizes[12:14] fillers[14:32]
    b: shapes[0:3] colors[3:9] positions[9:12] sizes[12:14] motifs[14:22]
       fillers[22:40]

The first fourteen terminals of each language are attribute counterparts at
matching indices; the eight motif terminals exist only in language "b".  The
two terminal sets share no strings, so every caption is unambiguously tagged
by its words alone.

Encoders are frozen at construction: an embedding table plus sinusoidal
positions followed by one single-head self-attention layer with a residual
connection.  Their output never carries gradient.  The per-language adapter
MLP (two linear layers with a GELU between) maps encoder width to model
width and is the only trainable piece of the conditioning path.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .seeds import derive_rng
from .tensor import Tensor, gelu, matmul

__all__ = [
    "LexicalError",
    "Vocabulary",
    "Caption",
    "TextEmbedding",
    "FrozenEncoder",
    "AdapterMLP",
    "load_vocab",
    "default_vocab",
    "tokenize",
    "detokenize",
    "sinusoidal_positions",
    "empty_embedding",
    "pad_encoded",
    "MAX_CAPTION_LEN",
    "MOTIF_NAMES",
    "SHAPES",
    "COLORS",
    "POSITIONS",
    "SIZES",
]

MAX_CAPTION_LEN = 16

SHAPES = ("circle", "square", "triangle")
COLORS = ("red", "green", "blue", "yellow", "purple", "orange")
POSITIONS = ("left", "center", "right")
SIZES = ("small", "large")
MOTIF_NAMES = (
    "hstripe",
    "vstripe",
    "checker",
    "diag",
    "dots",
    "rings",
    "hband",
    "vband",
)

_N_ATTR = len(SHAPES) + len(COLORS) + len(POSITIONS) + len(SIZES)

_SLICES_A = {
    "shape": (0, 3),
    "color": (3, 9),
    "position": (9, 12),
    "size": (12, 14),
    "filler": (14, 32),
}
_SLICES_B = {
    "shape": (0, 3),
    "color": (3, 9),
    "position": (9, 12),
    "size": (12, 14),
    "motif": (14, 22),
    "filler": (22, 40),
}
_VOCAB_SIZES = {"a": 32, "b": 40}


class LexicalError(ValueError):
    """A caption used a terminal outside its language, or broke length rules."""


@dataclass(frozen=True)
class Vocabulary:
    """Terminal list for one language; line order defines token indices."""

    language: str
    terminals: tuple[str, ...]
    index: dict[str, int] = field(repr=False)

    @property
    def size(self) -> int:
        return len(self.terminals)

    def category_of(self, term: str) -> str:
        i = self.index.get(term)
        if i is None:
            raise LexicalError(
                f"unknown terminal {term!r} in language {self.language!r}"
            )
        slices = _SLICES_A if self.language == "a" else _SLICES_B
        for name, (lo, hi) in slices.items():
            if lo <= i < hi:
                return name
        raise AssertionError("category layout does not cover the vocabulary")

    def terms_in(self, category: str) -> tuple[str, ...]:
        slices = _SLICES_A if self.language == "a" else _SLICES_B
        lo, hi = slices[category]
        return self.terminals[lo:hi]


def load_vocab(path: str | Path, language: str) -> Vocabulary:
    """Read one terminal per line; blank lines are ignored."""
    if language not in ("a", "b"):
        raise ValueError(f"language must be 'a' or 'b', got {language!r}")
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    terminals = tuple(ln.strip() for ln in lines if ln.strip())
    if len(terminals) != _VOCAB_SIZES[language]:
        raise ValueError(
            f"language {language!r} vocabulary must hold "
            f"{_VOCAB_SIZES[language]} terminals, file has {len(terminals)}"
        )
    if len(set(terminals)) != len(terminals):
        raise ValueError(f"duplicate terminal in vocabulary file {path}")
    index = {t: i for i, t in enumerate(terminals)}
    return Vocabulary(language=language, terminals=terminals, index=index)


_VOCAB_CACHE: dict[str, Vocabulary] = {}


def default_vocab(language: str) -> Vocabulary:
    """The packaged vocabulary for a language (cached)."""
    if language not in _VOCAB_CACHE:
        path = Path(__file__).parent / "vocab" / f"lang_{language}.txt"
        _VOCAB_CACHE[language] = load_vocab(path, language)
    return _VOCAB_CACHE[language]


@dataclass(frozen=True)
class Caption:
    """A tokenized caption tagged with its language.

    ``attributes`` optionally records the scene attributes the caption was
    generated from (category name to terminal in language "a" coordinates,
    motif slot by motif name, absent slots None).
    """

    language: str
    tokens: tuple[int, ...]
    attributes: dict[str, str | None] | None = None

    def __post_init__(self) -> None:
        if self.language not in ("a", "b"):
            raise ValueError(f"language must be 'a' or 'b', got {self.language!r}")
        vocab_size = _VOCAB_SIZES[self.language]
        for t in self.tokens:
            if not 0 <= t < vocab_size:
                raise LexicalError(
                    f"token index {t} out of range for language "
                    f"{self.language!r} (size {vocab_size})"
                )

    def __len__(self) -> int:
        return len(self.tokens)


def tokenize(text: str, language: str) -> Caption:
    """Whitespace-split ``text`` and map each word to its token index.

    The empty caption is valid only in language "a" (it denotes the
    unconditional branch on the frozen side).  Any word outside the tagged
    language's vocabulary raises :class:`LexicalError` naming the word.
    """
    vocab = default_vocab(language)
    words = text.split()
    if not words:
        if language != "a":
            raise LexicalError(
                "empty caption is only valid in language 'a'; language "
                f"{language!r} requires at least one terminal"
            )
        return Caption(language=language, tokens=())
    if len(words) > MAX_CAPTION_LEN:
        raise LexicalError(
            f"caption has {len(words)} terminals, maximum is {MAX_CAPTION_LEN}"
        )
    ids = []
    for w in words:
        i = vocab.index.get(w)
        if i is None:
            raise LexicalError(
                f"unknown terminal {w!r} in language {language!r}"
            )
        ids.append(i)
    return Caption(language=language, tokens=tuple(ids))


def detokenize(caption: Caption) -> str:
    vocab = default_vocab(caption.language)
    return " ".join(vocab.terminals[t] for t in caption.tokens)


def sinusoidal_positions(n: int, d: int) -> np.ndarray:
    """Classic fixed sin/cos position table, shape (n, d), float64."""
    if d % 2 != 0:
        raise ValueError(f"position encoding width must be even, got {d}")
    pos = np.arange(n, dtype=np.float64)[:, None]
    dim = np.arange(d // 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * dim / d)
    out = np.zeros((n, d), dtype=np.float64)
    out[:, 0::2] = np.sin(angle)
    out[:, 1::2] = np.cos(angle)
    return out


@dataclass
class TextEmbedding:
    """A caption after encoding: (length, width) vectors plus a key mask."""

    language: str
    vectors: Tensor
    mask: np.ndarray

    @property
    def length(self) -> int:
        return int(self.vectors.data.shape[0])

    @property
    def width(self) -> int:
        return int(self.vectors.data.shape[1])


def empty_embedding(language: str, width: int) -> TextEmbedding:
    """A zero-length embedding (no tokens, all-false mask)."""
    return TextEmbedding(
        language=language,
        vectors=Tensor(np.zeros((0, width))),
        mask=np.zeros((0,), dtype=bool),
    )


class FrozenEncoder:
    """Frozen per-language caption encoder.

    Embedding lookup plus sinusoidal positions, then one single-head
    self-attention layer with a residual connection.  All weights are plain
    numpy constants derived from ``seed`` and never receive gradient.
    """

    def __init__(self, language: str, d_enc: int, seed: int) -> None:
        vocab = default_vocab(language)
        self.language = language
        self.d_enc = d_enc
        self.vocab_size = vocab.size
        rng = derive_rng(seed, "encoder", language)
        scale = 1.0 / np.sqrt(d_enc)
        self.table = rng.standard_normal((vocab.size, d_enc)) * scale
        self.positions = sinusoidal_positions(MAX_CAPTION_LEN, d_enc) * 0.5
        self.w_q = rng.standard_normal((d_enc, d_enc)) * scale
        self.w_k = rng.standard_normal((d_enc, d_enc)) * scale
        self.w_v = rng.standard_normal((d_enc, d_enc)) * scale
        self.w_o = rng.standard_normal((d_enc, d_enc)) * scale

    def encode_ids(self, tokens: tuple[int, ...]) -> np.ndarray:
        """Encode token indices to a (length, d_enc) float array."""
        n = len(tokens)
        if n == 0:
            return np.zeros((0, self.d_enc))
        ids = np.asarray(tokens, dtype=np.intp)
        x = self.table[ids] + self.positions[:n]
        q = x @ self.w_q
        k = x @ self.w_k
        v = x @ self.w_v
        logits = (q @ k.T) / np.sqrt(self.d_enc)
        logits = logits - logits.max(axis=-1, keepdims=True)
        weights = np.exp(logits)
        weights = weights / weights.sum(axis=-1, keepdims=True)
        return x + (weights @ v) @ self.w_o

    def encode(self, caption: Caption) -> TextEmbedding:
        if caption.language != self.language:
            raise ValueError(
                f"encoder for language {self.language!r} got a caption "
                f"tagged {caption.language!r}"
            )
        vecs = self.encode_ids(caption.tokens)
        return TextEmbedding(
            language=self.language,
            vectors=Tensor(vecs),
            mask=np.ones((len(caption.tokens),), dtype=bool),
        )


def pad_encoded(
    embeddings: list[TextEmbedding], pad_to: int | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Stack variable-length encoder outputs into a padded batch.

    Returns (batch, length, width) values and a (batch, length) bool key
    mask.  Padding rows are zero and masked out; attention must consult the
    mask, so the pad value itself never matters.
    """
    if not embeddings:
        raise ValueError("cannot pad an empty list of embeddings")
    width = embeddings[0].width
    longest = max(e.length for e in embeddings)
    n = longest if pad_to is None else pad_to
    if n < longest:
        raise ValueError(f"pad_to={n} is shorter than longest sequence {longest}")
    n = max(n, 1)
    out = np.zeros((len(embeddings), n, width))
    mask = np.zeros((len(embeddings), n), dtype=bool)
    for i, e in enumerate(embeddings):
        if e.width != width:
            raise ValueError("embeddings disagree on width")
        out[i, : e.length] = e.vectors.data
        mask[i, : e.length] = e.mask
    return out, mask


class AdapterMLP:
    """Two-layer GELU MLP from encoder width to model width.

    The language "a" instance is trainable only while the backbone itself
    trains; the language "b" instance is the trainable half of the adapter
    branch.  Trainability is controlled through ``set_trainable`` which
    flips ``requires_grad`` on every parameter.
    """

    def __init__(
        self, name: str, d_in: int, d_hidden: int, d_out: int, seed: int
    ) -> None:
        self.name = name
        rng = derive_rng(seed, "adapter", name)
        s1 = 1.0 / np.sqrt(d_in)
        s2 = 1.0 / np.sqrt(d_hidden)
        self.w1 = Tensor(rng.standard_normal((d_in, d_hidden)) * s1, requires_grad=True)
        self.b1 = Tensor(np.zeros((d_hidden,)), requires_grad=True)
        self.w2 = Tensor(rng.standard_normal((d_hidden, d_out)) * s2, requires_grad=True)
        self.b2 = Tensor(np.zeros((d_out,)), requires_grad=True)

    def named_params(self) -> dict[str, Tensor]:
        return {
            f"{self.name}.w1": self.w1,
            f"{self.name}.b1": self.b1,
            f"{self.name}.w2": self.w2,
            f"{self.name}.b2": self.b2,
        }

    def set_trainable(self, flag: bool) -> None:
        for p in (self.w1, self.b1, self.w2, self.b2):
            p.requires_grad = flag

    def __call__(self, x: Tensor) -> Tensor:
        """Apply token-wise; accepts (..., d_in) with any leading axes."""
        h = gelu(matmul(x, self.w1) + self.b1)
        return matmul(h, self.w2) + self.b2
