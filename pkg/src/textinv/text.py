"""Tokenizer, embedding lookup with placeholder overrides, the frozen text encoder
and the prompt template banks."""

from __future__ import annotations

import base64
import hashlib
import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from . import nn
from .autograd import Tensor

# Neutral contexts used while optimizing an object pseudo-word. "{}" is the slot.
OBJECT_TEMPLATES = (
    "a photo of a {}.",
    "a rendering of a {}.",
    "a cropped photo of the {}.",
    "the photo of a {}.",
    "a photo of a clean {}.",
    "a photo of a dirty {}.",
    "a dark photo of the {}.",
    "a photo of my {}.",
    "a photo of the cool {}.",
    "a close-up photo of a {}.",
    "a bright photo of the {}.",
    "a cropped photo of a {}.",
    "a photo of the {}.",
    "a good photo of the {}.",
    "a photo of one {}.",
    "a close-up photo of the {}.",
    "a rendition of the {}.",
    "a photo of the clean {}.",
    "a rendition of a {}.",
    "a photo of a nice {}.",
    "a good photo of a {}.",
    "a photo of the nice {}.",
    "a photo of the small {}.",
    "a photo of the weird {}.",
    "a photo of the large {}.",
    "a photo of a cool {}.",
    "a photo of a small {}.",
)

# Invented paraphrases for style concepts; all share "in the style of".
STYLE_TEMPLATES = (
    "a painting in the style of {}",
    "a rendering in the style of {}",
    "a cropped painting in the style of {}",
    "the painting in the style of {}",
    "a clean painting in the style of {}",
    "a dark painting in the style of {}",
    "a picture in the style of {}",
    "a good painting in the style of {}",
)

RECONSTRUCTION_PROMPT = "a photo of {}"

# Editing prompts over the toy vocabulary: background changes, appearance
# (color / texture) changes and one compound edit.
EVAL_PROMPTS = (
    "a photo of {} on a dark background",
    "a photo of {} on a light background",
    "a photo of {} on a sand background",
    "a photo of {} on a sky background",
    "a photo of a green {}",
    "a photo of a dotted {}",
    "a photo of a solid {}",
    "a photo of a teal {} on a light background",
)

PAD, UNK, BOS = "<pad>", "<unk>", "<bos>"
SPECIALS = (PAD, UNK, BOS)
CONTEXT_LENGTH = 16

_TOKEN_RE = re.compile(r"<[^<>\s]+>|[a-z0-9]+(?:-[a-z0-9]+)*")
_PLACEHOLDER_RE = re.compile(r"^<[^<>\s]+>$")


def placeholder_name(k: int = 0) -> str:
    return f"<concept-{k}>"


def image_token_name(i: int) -> str:
    return f"<image-{i}>"


def template_words() -> set[str]:
    words = set()
    for bank in (OBJECT_TEMPLATES, STYLE_TEMPLATES, EVAL_PROMPTS, (RECONSTRUCTION_PROMPT,)):
        for tpl in bank:
            words.update(_TOKEN_RE.findall(tpl.replace("{}", " ").lower()))
    return words


class Vocabulary:
    """Word-level vocabulary. Ids are dense: specials, corpus words, then placeholders."""

    def __init__(self, words):
        self.words = list(SPECIALS) + [w for w in sorted(set(words)) if w not in SPECIALS]
        self._ids = {w: i for i, w in enumerate(self.words)}
        self.base_size = len(self.words)
        self.placeholders: dict[str, int] = {}

    @classmethod
    def default(cls) -> "Vocabulary":
        from .data import corpus_vocabulary_words

        extra = {"with", "painting", "of", "style", "in", "the", "an", "image"}
        return cls(set(corpus_vocabulary_words()) | template_words() | extra)

    def __len__(self) -> int:
        return self.base_size + len(self.placeholders)

    def __contains__(self, word: str) -> bool:
        return word in self._ids or word in self.placeholders

    def id(self, word: str) -> int:
        if word in self.placeholders:
            return self.placeholders[word]
        return self._ids.get(word, self._ids[UNK])

    @property
    def pad_id(self) -> int:
        return self._ids[PAD]

    @property
    def unk_id(self) -> int:
        return self._ids[UNK]

    @property
    def bos_id(self) -> int:
        return self._ids[BOS]

    def is_placeholder_id(self, idx: int) -> bool:
        return idx >= self.base_size

    def register(self, name: str) -> int:
        if not _PLACEHOLDER_RE.match(name):
            raise ValueError(f"placeholder must look like <name>, got {name!r}")
        if name in self._ids:
            raise ValueError(f"placeholder {name!r} collides with a vocabulary word")
        if name not in self.placeholders:
            self.placeholders[name] = len(self)
        return self.placeholders[name]

    def extended(self, *names: str) -> "Vocabulary":
        v = Vocabulary.__new__(Vocabulary)
        v.words, v._ids, v.base_size = self.words, self._ids, self.base_size
        v.placeholders = dict(self.placeholders)
        for n in names:
            v.register(n)
        return v

    def checksum(self) -> str:
        return hashlib.sha256("\n".join(self.words).encode()).hexdigest()


def tokenize(text: str, vocab: Vocabulary) -> list[int]:
    """Lowercased word tokens; punctuation separates words and is dropped."""
    return [vocab.id(tok) for tok in _TOKEN_RE.findall(text.lower())]


def strip_placeholders(text: str) -> str:
    """Remove every ``<...>`` placeholder and collapse the whitespace left behind."""
    return " ".join(re.sub(r"<[^<>\s]+>", " ", text).split())


# ---------------------------------------------------------------------------
# embeddings
# ---------------------------------------------------------------------------

class EmbeddingTable:
    """Frozen base rows plus per-placeholder learned vectors.

    ``overrides[pid]`` holds up to three (1, d) tensors; ``active[pid]`` says how
    many of them a lookup expands to (progressive schedules grow it).
    """

    def __init__(self, base: Tensor):
        self.base = base
        self.overrides: dict[int, list[Tensor]] = {}
        self.active: dict[int, int] = {}
        self.override_lookups = 0

    @property
    def dim(self) -> int:
        return self.base.shape[1]

    def row(self, idx: int) -> np.ndarray:
        return self.base.data[idx]

    def set_override(self, pid: int, vectors: list[Tensor], active: int | None = None) -> None:
        if not 1 <= len(vectors) <= 3:
            raise ValueError(f"a placeholder binds 1-3 vectors, got {len(vectors)}")
        for v in vectors:
            if v.shape != (1, self.dim):
                raise ag.ShapeError(f"override vector must have shape (1, {self.dim}), got {v.shape}")
        self.overrides[pid] = list(vectors)
        self.active[pid] = len(vectors) if active is None else active

    def clear_overrides(self) -> None:
        self.overrides.clear()
        self.active.clear()

    def expand(self, tokens) -> list:
        """Token ids to row references: ints for base rows, (pid, k) for override vectors."""
        refs = []
        for t in tokens:
            if t < self.base.shape[0]:
                refs.append(int(t))
            elif t in self.overrides:
                self.override_lookups += 1
                refs.extend((t, k) for k in range(self.active[t]))
            else:
                raise KeyError(f"placeholder id {t} has no registered embedding")
        return refs

    def lookup(self, ref_rows: list[list], pad_id: int) -> Tensor:
        """Gather a (B, L, d) tensor from lists of row references (equal length L)."""
        used = sorted({r for rows in ref_rows for r in rows if isinstance(r, tuple)})
        if not used:
            return ag.gather_rows(self.base, np.array(ref_rows, dtype=np.int64))
        offset = {}
        parts = [self.base]
        n = self.base.shape[0]
        for r in used:
            offset[r] = n
            parts.append(self.overrides[r[0]][r[1]])
            n += 1
        table = ag.concat(parts, axis=0)
        index = np.array([[offset[r] if isinstance(r, tuple) else r for r in rows] for rows in ref_rows],
                         dtype=np.int64)
        return ag.gather_rows(table, index)

    def embed(self, tokens) -> Tensor:
        """One sequence of ids to an (L', d) tensor, placeholders expanded in place."""
        refs = self.expand(tokens)
        if not refs:
            return Tensor(np.zeros((0, self.dim), dtype=self.base.dtype))
        return self.lookup([refs], pad_id=0)[0]


class TextEncoder(nn.Module):
    """Positional embeddings, pre-norm self-attention blocks, final norm."""

    def __init__(self, rng, vocab_size: int, dim: int = 64, blocks: int = 2, heads: int = 4,
                 context_length: int = CONTEXT_LENGTH):
        self.token_embedding = nn.param(rng.standard_normal((vocab_size, dim)) * 0.5)
        self.position = nn.param(rng.standard_normal((context_length, dim)) * 0.1)
        self.blocks = [nn.TransformerBlock(rng, dim, heads) for _ in range(blocks)]
        self.ln_f = nn.LayerNorm(dim)
        self.context_length = context_length
        self.dim = dim

    def forward(self, embedded: Tensor, mask: np.ndarray) -> Tensor:
        """(B, L, d) embedded sequences with boolean (B, L) mask -> (B, L, d) conditioning."""
        if embedded.shape[1] != self.context_length:
            raise ag.ShapeError(f"expected context length {self.context_length}, got {embedded.shape[1]}")
        x = embedded + self.position
        for blk in self.blocks:
            x = blk(x, mask)
        x = self.ln_f(x)
        return x * Tensor(mask[..., None].astype(x.dtype))


def pack_prompts(prompts, vocab: Vocabulary, table: EmbeddingTable,
                 context_length: int = CONTEXT_LENGTH) -> tuple[Tensor, np.ndarray]:
    """Tokenize, expand and pad a batch of prompts: BOS first, PAD after the end."""
    rows = []
    mask = np.zeros((len(prompts), context_length), dtype=bool)
    for i, p in enumerate(prompts):
        refs = [vocab.bos_id] + table.expand(tokenize(p, vocab))
        refs = refs[:context_length]
        mask[i, :len(refs)] = True
        rows.append(refs + [vocab.pad_id] * (context_length - len(refs)))
    return table.lookup(rows, vocab.pad_id), mask


def encode_condition(encoder: TextEncoder, embedded: Tensor, mask: np.ndarray) -> Tensor:
    return encoder(embedded, mask)


# ---------------------------------------------------------------------------
# template sampling
# ---------------------------------------------------------------------------

def template_bank(mode: str) -> tuple[str, ...]:
    if mode == "object":
        return OBJECT_TEMPLATES
    if mode == "style":
        return STYLE_TEMPLATES
    raise ValueError(f"template mode must be 'object' or 'style', got {mode!r}")


def sample_template(bank, placeholder: str, rng: np.random.Generator) -> str:
    if not bank:
        raise ValueError("empty template bank")
    if isinstance(bank, str):
        bank = template_bank(bank)
    return bank[int(rng.integers(len(bank)))].format(placeholder)


# ---------------------------------------------------------------------------
# pseudo-words
# ---------------------------------------------------------------------------

PSEUDOWORD_FORMAT = "textinv-pseudoword"
PSEUDOWORD_VERSION = 1


@dataclass
class PseudoWord:
    placeholder: str
    vectors: np.ndarray  # (k, d) float32, 1 <= k <= 3
    descriptor: str
    config_hash: str = ""
    base_checksum: str = ""
    seed: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float32)
        if self.vectors.ndim != 2 or not 1 <= self.vectors.shape[0] <= 3:
            raise ValueError(f"pseudo-word needs 1-3 vectors, got shape {self.vectors.shape}")

    @property
    def num_vectors(self) -> int:
        return self.vectors.shape[0]

    def to_dict(self) -> dict:
        blob = np.ascontiguousarray(self.vectors, dtype="<f4").tobytes()
        return {
            "format": PSEUDOWORD_FORMAT,
            "version": PSEUDOWORD_VERSION,
            "placeholder": self.placeholder,
            "num_vectors": self.num_vectors,
            "dim": int(self.vectors.shape[1]),
            "descriptor": self.descriptor,
            "base_table_checksum": self.base_checksum,
            "config_hash": self.config_hash,
            "seed": self.seed,
            "vectors": base64.b64encode(blob).decode("ascii"),
            "meta": self.meta,
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")

    @classmethod
    def from_dict(cls, doc: dict) -> "PseudoWord":
        if doc.get("format") != PSEUDOWORD_FORMAT:
            raise ValueError(f"not a pseudo-word file (format={doc.get('format')!r})")
        if doc.get("version") != PSEUDOWORD_VERSION:
            raise ValueError(f"unsupported pseudo-word version {doc.get('version')}")
        k, d = int(doc["num_vectors"]), int(doc["dim"])
        vec = np.frombuffer(base64.b64decode(doc["vectors"]), dtype="<f4")
        if vec.size != k * d:
            raise ValueError(f"vector payload has {vec.size} floats, header says {k}x{d}")
        return cls(doc["placeholder"], vec.reshape(k, d).astype(np.float32), doc["descriptor"],
                   doc.get("config_hash", ""), doc.get("base_table_checksum", ""), int(doc.get("seed", 0)),
                   doc.get("meta", {}))

    @classmethod
    def load(cls, path) -> "PseudoWord":
        return cls.from_dict(json.loads(Path(path).read_text()))
