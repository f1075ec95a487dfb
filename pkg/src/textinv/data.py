"""Procedural shape/caption corpus, held-out concept sets and image file I/O."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

IMAGE_SIZE = 32
SUPERSAMPLE = 4
MAX_CONCEPT_IMAGES = 25

SHAPES = ("circle", "square", "triangle", "star")
COLORS = {
    "red": (0.90, 0.15, 0.15),
    "orange": (0.95, 0.55, 0.10),
    "yellow": (0.95, 0.90, 0.20),
    "green": (0.20, 0.75, 0.25),
    "teal": (0.10, 0.65, 0.65),
    "blue": (0.20, 0.35, 0.90),
    "purple": (0.60, 0.25, 0.80),
    "pink": (0.95, 0.50, 0.75),
}
TEXTURES = ("solid", "striped", "dotted")
BACKGROUNDS = {
    "dark": (0.10, 0.10, 0.12),
    "light": (0.92, 0.92, 0.90),
    "sand": (0.85, 0.75, 0.55),
    "sky": (0.55, 0.75, 0.95),
}

# default unseen (shape, color, texture) combinations
DEFAULT_HOLDOUT = (
    ("circle", "red", "striped"),
    ("star", "blue", "dotted"),
    ("square", "yellow", "striped"),
    ("triangle", "purple", "dotted"),
)

# probability that each attribute word is left out of a caption
_DROP = {"texture": 0.25, "color": 0.15, "shape": 0.10, "background": 0.30}


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class AttributeSpec:
    shape: str
    color: str
    texture: str
    background: str
    dx: float = 0.0
    dy: float = 0.0
    radius: float = 10.0
    angle: float = 0.0

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise DataError(f"unknown shape {self.shape!r}")
        if self.color not in COLORS:
            raise DataError(f"unknown color {self.color!r}")
        if self.texture not in TEXTURES:
            raise DataError(f"unknown texture {self.texture!r}")
        if self.background not in BACKGROUNDS:
            raise DataError(f"unknown background {self.background!r}")

    @property
    def object_key(self) -> tuple[str, str, str]:
        return (self.shape, self.color, self.texture)

    def full_description(self) -> str:
        return f"{self.texture} {self.color} {self.shape} on a {self.background} background"


def jittered(rng: np.random.Generator, shape: str, color: str, texture: str, background: str) -> AttributeSpec:
    return AttributeSpec(shape, color, texture, background,
                         dx=float(rng.uniform(-4, 4)), dy=float(rng.uniform(-4, 4)),
                         radius=float(rng.uniform(8.0, 11.0)), angle=float(rng.uniform(-0.35, 0.35)))


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

def _polygon_mask(px: np.ndarray, py: np.ndarray, verts: np.ndarray) -> np.ndarray:
    inside = np.zeros(px.shape, dtype=bool)
    n = len(verts)
    for i in range(n):
        x1, y1 = verts[i]
        x2, y2 = verts[(i + 1) % n]
        crosses = (y1 > py) != (y2 > py)
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = x1 + (py - y1) * (x2 - x1) / (y2 - y1)
        inside ^= crosses & (px < xint)
    return inside


def _shape_mask(spec: AttributeSpec, lx: np.ndarray, ly: np.ndarray) -> np.ndarray:
    r = spec.radius
    if spec.shape == "circle":
        return lx ** 2 + ly ** 2 < r ** 2
    if spec.shape == "square":
        s = 0.82 * r
        return (np.abs(lx) < s) & (np.abs(ly) < s)
    if spec.shape == "triangle":
        ang = -np.pi / 2 + np.arange(3) * 2 * np.pi / 3
        verts = np.stack([1.15 * r * np.cos(ang), 1.15 * r * np.sin(ang) + 0.2 * r], axis=1)
        return _polygon_mask(lx, ly, verts)
    ang = -np.pi / 2 + np.arange(10) * np.pi / 5
    rad = np.where(np.arange(10) % 2 == 0, 1.2 * r, 0.5 * r)
    verts = np.stack([rad * np.cos(ang), rad * np.sin(ang)], axis=1)
    return _polygon_mask(lx, ly, verts)


def _texture_shade(spec: AttributeSpec, lx: np.ndarray, ly: np.ndarray) -> np.ndarray:
    """Multiplicative shade in object coordinates (1 = base color)."""
    if spec.texture == "striped":
        return np.where(np.floor(ly / 3.0) % 2 == 0, 1.0, 0.4)
    if spec.texture == "dotted":
        gx = lx - 6.0 * np.round(lx / 6.0)
        gy = ly - 6.0 * np.round(ly / 6.0)
        return np.where(gx ** 2 + gy ** 2 < 1.8 ** 2, 0.3, 1.0)
    return np.ones_like(lx)


def render(spec: AttributeSpec, size: int = IMAGE_SIZE) -> np.ndarray:
    """Antialiased HxWx3 float32 image in [0, 1], quantized to 8-bit levels."""
    n = size * SUPERSAMPLE
    coords = (np.arange(n) + 0.5) / SUPERSAMPLE
    px, py = np.meshgrid(coords, coords)
    cx = size / 2 + spec.dx
    cy = size / 2 + spec.dy
    c, s = np.cos(spec.angle), np.sin(spec.angle)
    lx = c * (px - cx) + s * (py - cy)
    ly = -s * (px - cx) + c * (py - cy)
    mask = _shape_mask(spec, lx, ly)
    shade = _texture_shade(spec, lx, ly)
    fg = np.asarray(COLORS[spec.color])[None, None, :] * shade[..., None]
    bg = np.asarray(BACKGROUNDS[spec.background])[None, None, :]
    img = np.where(mask[..., None], fg, bg)
    img = img.reshape(size, SUPERSAMPLE, size, SUPERSAMPLE, 3).mean(axis=(1, 3))
    return (np.round(np.clip(img, 0, 1) * 255) / 255).astype(np.float32)


# ---------------------------------------------------------------------------
# captions
# ---------------------------------------------------------------------------

def describe(spec: AttributeSpec, rng: np.random.Generator | None = None) -> str:
    """Attribute phrase; with ``rng`` each attribute may be dropped."""
    keep = {k: True for k in _DROP}
    if rng is not None:
        for k, p in _DROP.items():
            keep[k] = rng.random() >= p
    words = []
    if keep["texture"]:
        words.append(spec.texture)
    if keep["color"]:
        words.append(spec.color)
    if keep["shape"]:
        words.append(spec.shape)
    text = " ".join(words)
    if keep["background"]:
        text = f"{text} on a {spec.background} background".strip()
    return text


def make_caption(spec: AttributeSpec, rng: np.random.Generator) -> str:
    from .text import OBJECT_TEMPLATES

    desc = describe(spec, rng)
    if rng.random() < 0.5:
        return f"a {desc}".strip()
    template = OBJECT_TEMPLATES[int(rng.integers(len(OBJECT_TEMPLATES)))]
    return template.format(desc)


# ---------------------------------------------------------------------------
# corpus and concept sets
# ---------------------------------------------------------------------------

@dataclass
class ConceptSet:
    images: np.ndarray  # (n, H, W, 3) float32 in [0, 1]
    descriptor: str
    name: str = "concept"
    source: str = "generated"
    attributes: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.images) == 0:
            raise DataError("concept set has no images")
        if len(self.images) > MAX_CONCEPT_IMAGES:
            raise DataError(f"concept set has {len(self.images)} images, maximum is {MAX_CONCEPT_IMAGES}")

    def __len__(self) -> int:
        return len(self.images)

    def subset(self, n: int) -> "ConceptSet":
        if n > len(self.images):
            raise DataError(f"requested {n} images from a set of {len(self.images)}")
        return ConceptSet(self.images[:n], self.descriptor, self.name, self.source, dict(self.attributes))


@dataclass
class Corpus:
    images: np.ndarray  # (N, H, W, 3) uint8
    captions: list
    seed: int

    def __len__(self) -> int:
        return len(self.captions)

    def float_images(self, idx=None) -> np.ndarray:
        imgs = self.images if idx is None else self.images[idx]
        return imgs.astype(np.float32) / 255.0

    def split(self, holdout_fraction: float = 0.1) -> tuple["Corpus", "Corpus"]:
        n_test = max(1, int(len(self) * holdout_fraction))
        n_train = len(self) - n_test
        return (Corpus(self.images[:n_train], self.captions[:n_train], self.seed),
                Corpus(self.images[n_train:], self.captions[n_train:], self.seed))

    def save(self, path) -> None:
        np.savez_compressed(path, images=self.images, captions=np.array(self.captions), seed=self.seed)

    @classmethod
    def load(cls, path) -> "Corpus":
        with np.load(path, allow_pickle=False) as f:
            return cls(f["images"], [str(c) for c in f["captions"]], int(f["seed"]))


def _pair_rng(seed: int, tag: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, tag, index]))


def render_concept(key: tuple[str, str, str], n: int, seed: int, concept_index: int = 0) -> ConceptSet:
    """Render ``n`` jittered views of one held-out object on varied backgrounds."""
    shape, color, texture = key
    bgs = list(BACKGROUNDS)
    images = []
    for i in range(n):
        rng = _pair_rng(seed, 1000 + concept_index, i)
        bg = bgs[int(rng.integers(len(bgs)))]
        images.append(render(jittered(rng, shape, color, texture, bg)))
    return ConceptSet(np.stack(images), descriptor=shape, name=f"{texture}-{color}-{shape}",
                      attributes={"shape": shape, "color": color, "texture": texture})


def generate_corpus(seed: int = 0, n_pairs: int = 6000, holdout=DEFAULT_HOLDOUT,
                    concept_images: int = 5) -> tuple[Corpus, list[ConceptSet]]:
    """Image/caption pairs over every attribute combination except the held-out ones."""
    holdout = [tuple(h) for h in holdout]
    allowed = [(s, c, t) for s in SHAPES for c in COLORS for t in TEXTURES if (s, c, t) not in holdout]
    for h in holdout:
        if len(h) != 3 or h[0] not in SHAPES or h[1] not in COLORS or h[2] not in TEXTURES:
            raise DataError(f"invalid holdout combination {h}")
    if not allowed:
        raise DataError("holdout covers every attribute combination")
    bgs = list(BACKGROUNDS)
    images = np.empty((n_pairs, IMAGE_SIZE, IMAGE_SIZE, 3), dtype=np.uint8)
    captions = []
    for i in range(n_pairs):
        rng = _pair_rng(seed, 0, i)
        s, c, t = allowed[int(rng.integers(len(allowed)))]
        spec = jittered(rng, s, c, t, bgs[int(rng.integers(len(bgs)))])
        if spec.object_key in holdout:
            raise DataError("holdout overlaps the training specification")
        images[i] = np.round(render(spec) * 255).astype(np.uint8)
        captions.append(make_caption(spec, rng))
    concepts = [render_concept(h, concept_images, seed, k) for k, h in enumerate(holdout)]
    return Corpus(images, captions, seed), concepts


# ---------------------------------------------------------------------------
# file I/O
# ---------------------------------------------------------------------------

def save_png(image: np.ndarray, path) -> None:
    arr = np.asarray(image)
    if arr.dtype != np.uint8:
        arr = np.round(np.clip(arr, 0, 1) * 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def load_png(path, size: int = IMAGE_SIZE) -> np.ndarray:
    """Read an image, center-crop to square, resize to ``size`` and scale to [0, 1]."""
    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            w, h = im.size
            side = min(w, h)
            left, top = (w - side) // 2, (h - side) // 2
            im = im.crop((left, top, left + side, top + side))
            if side != size:
                im = im.resize((size, size), Image.BILINEAR)
            return np.asarray(im, dtype=np.float32) / 255.0
    except (UnidentifiedImageError, OSError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc


DESCRIPTOR_FILE = "descriptor.txt"
_IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".webp"}


def save_concept_set(concept: ConceptSet, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for i, img in enumerate(concept.images):
        save_png(img, d / f"{i:03d}.png")
    (d / DESCRIPTOR_FILE).write_text(concept.descriptor + "\n")
    if concept.attributes:
        (d / "attributes.json").write_text(json.dumps(concept.attributes, sort_keys=True) + "\n")
    return d


def load_concept_set(directory, descriptor: str | None = None) -> ConceptSet:
    """Load every image in ``directory``; any unreadable file fails the whole load."""
    d = Path(directory)
    if not d.is_dir():
        raise DataError(f"concept directory not found: {d}")
    meta = {DESCRIPTOR_FILE, "attributes.json"}
    files = sorted(p for p in d.iterdir() if p.is_file() and p.name not in meta and not p.name.startswith("."))
    if not files:
        raise DataError(f"no images in {d}")
    if len(files) > MAX_CONCEPT_IMAGES:
        raise DataError(f"{d} holds {len(files)} files, maximum is {MAX_CONCEPT_IMAGES}")
    images = [load_png(p) for p in files]
    if descriptor is None:
        desc_path = d / DESCRIPTOR_FILE
        if not desc_path.exists():
            raise DataError(f"no descriptor given and {desc_path} missing")
        descriptor = desc_path.read_text().strip()
    attrs = {}
    if (d / "attributes.json").exists():
        attrs = json.loads((d / "attributes.json").read_text())
    return ConceptSet(np.stack(images), descriptor=descriptor, name=d.name, source="ingested", attributes=attrs)


def corpus_vocabulary_words() -> list[str]:
    words = set(SHAPES) | set(COLORS) | set(TEXTURES) | set(BACKGROUNDS) | {"a", "on", "background"}
    return sorted(words)


def spec_dict(spec: AttributeSpec) -> dict:
    return asdict(spec)


def env_path(name: str, default: str) -> Path:
    return Path(os.environ.get(name, default))
