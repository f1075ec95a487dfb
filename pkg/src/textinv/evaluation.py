"""Similarity oracle and the reconstruction / editability protocol.

A small contrastively trained dual encoder stands in for a large image-text
model. Reconstruction is the mean pairwise image-image cosine between samples
and the concept's training images; editability is the cosine between the
renormalized mean sample embedding and the prompt text with placeholders
removed.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from . import nn
from .autograd import Tensor
from .data import ConceptSet, Corpus, DataError
from .diffusion import GuidanceConfig
from .hashing import canonical_json, config_hash
from .inversion import InversionConfig, InversionResult, bind_pseudowords, textual_invert
from .model import FrozenModel
from .optim import Adam
from .text import EVAL_PROMPTS, RECONSTRUCTION_PROMPT, Vocabulary, strip_placeholders, tokenize

log = logging.getLogger(__name__)

MIN_PAIRS = 256
SETSIZE_DEFAULTS = (1, 3, 5, 10, 25)


class EvaluationError(ValueError):
    pass


# ---------------------------------------------------------------------------
# dual encoder
# ---------------------------------------------------------------------------

class ImageTower(nn.Module):
    def __init__(self, rng, dim: int = 64, width: int = 32):
        self.c1 = nn.Conv2d(rng, 3, width // 2, 3)
        self.c2 = nn.Conv2d(rng, width // 2, width, 3, stride=2)
        self.c3 = nn.Conv2d(rng, width, 2 * width, 3, stride=2)
        self.c4 = nn.Conv2d(rng, 2 * width, 2 * width, 3, stride=2)
        self.proj = nn.Linear(rng, 2 * width, dim)

    def forward(self, x: Tensor) -> Tensor:
        h = ag.silu(self.c1(x))
        h = ag.silu(self.c2(h))
        h = ag.silu(self.c3(h))
        h = ag.silu(self.c4(h))
        return self.proj(ag.mean(h, axis=(1, 2)))


class TextTower(nn.Module):
    def __init__(self, rng, vocab_size: int, dim: int = 64, context_length: int = 16):
        self.embedding = nn.param(rng.standard_normal((vocab_size, dim)) * 0.5)
        self.position = nn.param(rng.standard_normal((context_length, dim)) * 0.1)
        self.block = nn.TransformerBlock(rng, dim, 4)
        self.ln = nn.LayerNorm(dim)
        self.proj = nn.Linear(rng, dim, dim)
        self.context_length = context_length

    def forward(self, ids: np.ndarray, mask: np.ndarray) -> Tensor:
        x = ag.gather_rows(self.embedding, ids) + self.position
        x = self.ln(self.block(x, mask))
        w = Tensor((mask / np.maximum(mask.sum(1, keepdims=True), 1))[..., None].astype(x.dtype))
        return self.proj(ag.sum_(x * w, axis=1))


@dataclass
class DualEncoderConfig:
    dim: int = 64
    temperature: float = 0.07
    steps: int = 3000
    batch_size: int = 64
    lr: float = 1e-3
    seed: int = 0


class DualEncoder:
    """Paired image / text towers with unit-norm outputs in a shared space."""

    def __init__(self, cfg: DualEncoderConfig, vocab: Vocabulary | None = None):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 21]))
        self.cfg = cfg
        self.vocab = vocab or Vocabulary.default()
        self.image_tower = ImageTower(rng, cfg.dim)
        self.text_tower = TextTower(rng, self.vocab.base_size, cfg.dim)

    def parameters(self) -> list:
        return self.image_tower.parameters() + self.text_tower.parameters()

    def checksum(self) -> str:
        return ag.parameters_checksum(self.parameters())

    def freeze(self) -> "DualEncoder":
        self.image_tower.freeze()
        self.text_tower.freeze()
        return self

    def _ids(self, texts) -> tuple[np.ndarray, np.ndarray]:
        L = self.text_tower.context_length
        ids = np.full((len(texts), L), self.vocab.pad_id, dtype=np.int64)
        mask = np.zeros((len(texts), L), dtype=bool)
        for i, t in enumerate(texts):
            toks = [self.vocab.bos_id] + [k if k < self.vocab.base_size else self.vocab.unk_id
                                          for k in tokenize(t, self.vocab)]
            toks = toks[:L]
            ids[i, :len(toks)] = toks
            mask[i, :len(toks)] = True
        return ids, mask

    def image_features(self, images) -> Tensor:
        return ag.l2_normalize(self.image_tower(ag.as_tensor(images)))

    def text_features(self, texts) -> Tensor:
        ids, mask = self._ids(list(texts))
        return ag.l2_normalize(self.text_tower(ids, mask))

    def embed_images(self, images, batch: int = 256) -> np.ndarray:
        images = np.asarray(images, dtype=np.float32)
        if len(images) == 0:
            raise EvaluationError("no images to embed")
        with ag.no_grad():
            return np.concatenate([self.image_features(images[i:i + batch]).data
                                   for i in range(0, len(images), batch)])

    def embed_texts(self, texts) -> np.ndarray:
        with ag.no_grad():
            return self.text_features(list(texts)).data

    # -- persistence --------------------------------------------------------
    def save(self, path) -> str:
        from .checkpoint import write_checkpoint

        arrays = {f"image.{k}": v for k, v in self.image_tower.state_dict().items()}
        arrays.update({f"text.{k}": v for k, v in self.text_tower.state_dict().items()})
        return write_checkpoint(path, arrays, {"kind": "dual-encoder", "config": vars(self.cfg),
                                               "vocab": self.vocab.words, "checksum": self.checksum()})

    @classmethod
    def load(cls, path) -> "DualEncoder":
        from .checkpoint import CheckpointError, read_checkpoint

        header, arrays = read_checkpoint(path)
        if header.get("kind") != "dual-encoder":
            raise CheckpointError(f"{path}: not a dual-encoder checkpoint")
        enc = cls(DualEncoderConfig(**header["config"]), Vocabulary(header["vocab"]))
        enc.image_tower.load_state_dict({k[6:]: v for k, v in arrays.items() if k.startswith("image.")})
        enc.text_tower.load_state_dict({k[5:]: v for k, v in arrays.items() if k.startswith("text.")})
        if enc.checksum() != header["checksum"]:
            raise CheckpointError(f"{path}: dual-encoder checksum mismatch")
        return enc.freeze()


def contrastive_loss(img: Tensor, txt: Tensor, temperature: float) -> Tensor:
    """Symmetric cross-entropy over the in-batch similarity matrix."""
    logits = ag.matmul(img, txt.transpose(1, 0)) * (1.0 / temperature)
    eye = Tensor(np.eye(img.shape[0], dtype=img.dtype))
    rows = ag.sum_(ag.log_softmax(logits, axis=1) * eye)
    cols = ag.sum_(ag.log_softmax(logits, axis=0) * eye)
    return (rows + cols) * (-0.5 / img.shape[0])


def train_dual_encoder(corpus: Corpus, cfg: DualEncoderConfig | None = None,
                       curve: list | None = None) -> DualEncoder:
    cfg = cfg or DualEncoderConfig()
    if len(corpus) < MIN_PAIRS:
        raise EvaluationError(f"dual encoder needs at least {MIN_PAIRS} pairs, got {len(corpus)}")
    enc = DualEncoder(cfg)
    opt = Adam(enc.parameters(), lr=cfg.lr)
    for step in range(cfg.steps):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 22, step]))
        idx = rng.choice(len(corpus), cfg.batch_size, replace=False)
        opt.lr = cfg.lr * 0.5 * (1 + math.cos(math.pi * step / cfg.steps))
        loss = contrastive_loss(enc.image_features(corpus.float_images(idx)),
                                enc.text_features([corpus.captions[i] for i in idx]), cfg.temperature)
        opt.zero_grad()
        loss.backward()
        opt.step()
        if curve is not None:
            curve.append(float(loss.data))
    return enc.freeze()


def retrieval_accuracy(enc: DualEncoder, corpus: Corpus, way: int = 32, trials: int = 20, seed: int = 0) -> float:
    """Top-1 image-to-caption accuracy within random ``way``-sized batches."""
    rng = np.random.default_rng(seed)
    hits = 0
    for _ in range(trials):
        idx = rng.choice(len(corpus), way, replace=False)
        sims = enc.embed_images(corpus.float_images(idx)) @ enc.embed_texts([corpus.captions[i] for i in idx]).T
        hits += int(np.sum(sims.argmax(axis=1) == np.arange(way)))
    return hits / (way * trials)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def reconstruction_score(generated, training, enc: DualEncoder) -> float:
    """Mean cosine over all (generated, training) image pairs."""
    if len(generated) == 0 or len(training) == 0:
        raise EvaluationError("reconstruction_score needs non-empty image sets")
    g = enc.embed_images(generated).astype(np.float64)
    t = enc.embed_images(training).astype(np.float64)
    return float(np.clip((g @ t.T).mean(), -1.0, 1.0))


def editability_score(generated, prompt: str, enc: DualEncoder) -> float:
    """Cosine between the renormalized mean image embedding and the placeholder-free prompt."""
    if len(generated) == 0:
        raise EvaluationError("editability_score needs generated images")
    m = enc.embed_images(generated).astype(np.float64).mean(axis=0)
    m /= max(np.linalg.norm(m), 1e-12)
    txt = enc.embed_texts([strip_placeholders(prompt)])[0].astype(np.float64)
    return float(np.clip(m @ txt, -1.0, 1.0))


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    """Flat list of score records plus provenance. Wall-clock lives in ``timings``,
    outside the serialized records, so re-runs serialize byte-identically."""

    records: list = field(default_factory=list)
    provenance: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)

    def add(self, setup: str, metric: str, value: float, prompt: str = "", **extra) -> None:
        if not -1.0 <= value <= 1.0:
            raise EvaluationError(f"score {value} outside [-1, 1]")
        self.records.append({"setup": setup, "metric": metric, "prompt": prompt, "value": float(value), **extra})

    def extend(self, other: "EvalReport") -> "EvalReport":
        self.records.extend(other.records)
        self.timings.update(other.timings)
        return self

    def setups(self) -> list[str]:
        seen = []
        for r in self.records:
            if r["setup"] not in seen:
                seen.append(r["setup"])
        return seen

    def value(self, setup: str, metric: str, prompt: str = "") -> float:
        for r in self.records:
            if r["setup"] == setup and r["metric"] == metric and r["prompt"] == prompt:
                return r["value"]
        raise KeyError((setup, metric, prompt))

    def _by_seed(self, setup: str, metric: str) -> dict:
        groups: dict = {}
        for r in self.records:
            if r["setup"] == setup and r["metric"] == metric:
                groups.setdefault(r.get("inversion_seed"), []).append(r["value"])
        if not groups:
            raise KeyError((setup, metric))
        return groups

    def reconstruction(self, setup: str) -> float:
        """Median over inversion seeds (a single run has one)."""
        return median([np.mean(v) for v in self._by_seed(setup, "reconstruction").values()])

    def editability(self, setup: str) -> float:
        """Mean over prompts, then median over inversion seeds."""
        return median([np.mean(v) for v in self._by_seed(setup, "editability").values()])

    def summary(self) -> list[dict]:
        return [{"setup": s, "reconstruction": self.reconstruction(s), "editability": self.editability(s)}
                for s in self.setups()]

    def to_jsonl(self) -> str:
        lines = [canonical_json({"record": "provenance", **self.provenance})]
        lines += [canonical_json({"record": "score", **r}) for r in self.records]
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.to_jsonl())

    @classmethod
    def read(cls, path) -> "EvalReport":
        rep = cls()
        for line in Path(path).read_text().splitlines():
            doc = json.loads(line)
            kind = doc.pop("record")
            if kind == "provenance":
                rep.provenance = doc
            else:
                rep.records.append(doc)
        return rep

    def tradeoff_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["setup", "reconstruction", "editability"])
        for row in self.summary():
            w.writerow([row["setup"], f"{row['reconstruction']:.6f}", f"{row['editability']:.6f}"])
        return buf.getvalue()


# ---------------------------------------------------------------------------
# protocol
# ---------------------------------------------------------------------------

@dataclass
class EvalConfig:
    n_samples: int = 64
    ddim_steps: int = 50
    guidance: float = 5.0
    prompts: tuple = EVAL_PROMPTS
    seed: int = 0


def _prompt_seed(root: int, k: int) -> int:
    return int(np.random.SeedSequence([root, 31, k]).generate_state(1)[0])


def generate_set(model: FrozenModel, prompt: str, cfg: EvalConfig, k: int, table=None, vocab=None) -> np.ndarray:
    """``cfg.n_samples`` images for one prompt; the noise seed depends on (cfg.seed, k) only."""
    return model.sample_images([prompt] * cfg.n_samples, GuidanceConfig(cfg.guidance), cfg.ddim_steps,
                               seed=_prompt_seed(cfg.seed, k), table=table, vocab=vocab)


def evaluate_pseudoword(model: FrozenModel, enc: DualEncoder, pseudo_word, concept: ConceptSet,
                        cfg: EvalConfig, setup: str) -> EvalReport:
    """Reconstruction and per-prompt editability rows for one learned pseudo-word."""
    table, vocab = bind_pseudowords(model, pseudo_word)
    ph = pseudo_word.placeholder
    rep = EvalReport()
    extra = {"n_samples": cfg.n_samples, "seed": cfg.seed, "ddim_steps": cfg.ddim_steps,
             "config_hash": pseudo_word.config_hash}
    gen = generate_set(model, RECONSTRUCTION_PROMPT.format(ph), cfg, 0, table, vocab)
    rep.add(setup, "reconstruction", reconstruction_score(gen, concept.images, enc), RECONSTRUCTION_PROMPT, **extra)
    for k, tpl in enumerate(cfg.prompts, start=1):
        gen = generate_set(model, tpl.format(ph), cfg, k, table, vocab)
        rep.add(setup, "editability", editability_score(gen, tpl.format(ph), enc), tpl, **extra)
    return rep


def baseline_scores(concept: ConceptSet, enc: DualEncoder, model: FrozenModel, cfg: EvalConfig) -> EvalReport:
    """Image-only (training set as the generation) and prompt-only (placeholder removed) rows."""
    rep = EvalReport()
    rep.add("image-only", "reconstruction", reconstruction_score(concept.images, concept.images, enc),
            RECONSTRUCTION_PROMPT, n_samples=len(concept), seed=cfg.seed)
    for tpl in cfg.prompts:
        rep.add("image-only", "editability", editability_score(concept.images, tpl.format(""), enc), tpl,
                n_samples=len(concept), seed=cfg.seed)
    table = model.embedding_table()
    extra = {"n_samples": cfg.n_samples, "seed": cfg.seed, "ddim_steps": cfg.ddim_steps}
    gen = generate_set(model, strip_placeholders(RECONSTRUCTION_PROMPT.format("")), cfg, 0, table)
    rep.add("prompt-only", "reconstruction", reconstruction_score(gen, concept.images, enc),
            RECONSTRUCTION_PROMPT, **extra)
    for k, tpl in enumerate(cfg.prompts, start=1):
        gen = generate_set(model, strip_placeholders(tpl.format("")), cfg, k, table)
        rep.add("prompt-only", "editability", editability_score(gen, tpl.format(""), enc), tpl, **extra)
    if table.override_lookups:
        raise EvaluationError("prompt-only baseline consulted a placeholder embedding")
    rep.provenance["prompt_only_override_lookups"] = table.override_lookups
    return rep


# named inversion variants; values override InversionConfig defaults
SETUPS = {
    "base": {},
    "high-lr": {"base_lr": 2e-2},
    "low-lr": {"base_lr": 1e-4},
    "2-word": {"num_vectors": 2},
    "3-word": {"num_vectors": 3},
    "progressive": {"num_vectors": 3, "progressive": True},
    "reg": {"reg_lambda": 0.01},
    "per-image": {"per_image_tokens": True},
}


def setup_config(name: str, **overrides) -> InversionConfig:
    if name not in SETUPS:
        raise EvaluationError(f"unknown setup {name!r}; choose from {sorted(SETUPS)}")
    return InversionConfig(**{**SETUPS[name], **overrides})


class Benchmark:
    """Runs (setup, concept, seed) inversions and their scoring, caching both on disk.

    Cache keys hash the model weights, concept pixels, inversion config and
    evaluation config, so any change forces a recompute.
    """

    def __init__(self, model: FrozenModel, enc: DualEncoder, cache_dir=None, eval_cfg: EvalConfig | None = None):
        self.model = model
        self.enc = enc
        self.eval_cfg = eval_cfg or EvalConfig()
        self.cache = Path(cache_dir) if cache_dir else None
        if self.cache:
            self.cache.mkdir(parents=True, exist_ok=True)
        self._model_id = config_hash(model.component_checksums())
        self._enc_id = enc.checksum()[:12]
        # (kind, key) -> compute seconds, restored from sidecars when served from cache
        self.seconds: dict = {}

    def _timed(self, kind: str, key: str, compute):
        side = self.cache / f"{kind}-{key}.seconds" if self.cache else None
        t0 = time.perf_counter()
        out = compute()
        dt = time.perf_counter() - t0
        if side:
            side.write_text(f"{dt:.3f}\n")
        self.seconds[(kind, key)] = dt
        return out

    def _recall_seconds(self, kind: str, key: str) -> None:
        side = self.cache / f"{kind}-{key}.seconds" if self.cache else None
        if side and side.exists():
            self.seconds[(kind, key)] = float(side.read_text())

    def compute_seconds(self) -> float:
        """Wall-clock spent computing everything this benchmark has served, cached or not."""
        return float(sum(self.seconds.values()))

    def _key(self, *parts) -> str:
        return config_hash([self._model_id, self._enc_id, *parts], 16)

    def _concept_id(self, concept: ConceptSet) -> str:
        import hashlib

        return hashlib.sha256(np.ascontiguousarray(concept.images, dtype="<f4").tobytes()).hexdigest()[:12]

    def invert(self, concept: ConceptSet, cfg: InversionConfig) -> InversionResult:
        from .text import PseudoWord

        key = self._key("invert", self._concept_id(concept), cfg)
        path = self.cache / f"pw-{key}.json" if self.cache else None
        if path and path.exists():
            self._recall_seconds("pw", key)
            doc = json.loads(path.read_text())
            img = np.asarray(doc["image_vectors"], dtype=np.float32) if doc["image_vectors"] else None
            return InversionResult(PseudoWord.from_dict(doc["pseudo_word"]), doc["losses"], img,
                                   doc["trainable_vectors"], doc["active_counts"])
        res = self._timed("pw", key, lambda: textual_invert(self.model, concept, cfg))
        if path:
            doc = {"pseudo_word": res.pseudo_word.to_dict(), "losses": res.losses,
                   "image_vectors": None if res.image_vectors is None else res.image_vectors.tolist(),
                   "trainable_vectors": res.trainable_vectors, "active_counts": res.active_counts}
            path.write_text(json.dumps(doc))
        return res

    def _cached_report(self, key: str, compute) -> EvalReport:
        path = self.cache / f"report-{key}.jsonl" if self.cache else None
        if path and path.exists():
            self._recall_seconds("report", key)
            return EvalReport.read(path)
        rep = self._timed("report", key, compute)
        if path:
            rep.write(path)
        return rep

    def score(self, pseudo_word, concept: ConceptSet, setup: str) -> EvalReport:
        key = self._key("score", self._concept_id(concept), pseudo_word.to_dict(), self.eval_cfg, setup)
        return self._cached_report(key, lambda: evaluate_pseudoword(self.model, self.enc, pseudo_word, concept,
                                                                    self.eval_cfg, setup))

    def run(self, setup: str, concept: ConceptSet, seed: int, **overrides) -> tuple[InversionResult, EvalReport]:
        cfg = setup_config(setup, seed=seed, **overrides)
        res = self.invert(concept, cfg)
        return res, self.score(res.pseudo_word, concept, setup)

    def baselines(self, concept: ConceptSet) -> EvalReport:
        key = self._key("baselines", self._concept_id(concept), self.eval_cfg)
        return self._cached_report(key, lambda: baseline_scores(concept, self.enc, self.model, self.eval_cfg))


def setsize_sweep(bench: Benchmark, pool: ConceptSet, sizes=SETSIZE_DEFAULTS, seed: int = 0,
                  setup: str = "base", **overrides) -> EvalReport:
    """Invert on the first ``n`` pool images for each size and score against those same images."""
    if len(pool) < max(sizes):
        raise DataError(f"concept pool has {len(pool)} images, sweep needs {max(sizes)}")
    rep = EvalReport(provenance={"sizes": list(sizes), "seed": seed, "setup": setup})
    for n in sizes:
        sub = pool.subset(n)
        _, r = bench.run(setup, sub, seed, **overrides)
        for rec in r.records:
            rep.add(f"size-{n}", rec["metric"], rec["value"], rec["prompt"],
                    **{k: v for k, v in rec.items() if k not in ("setup", "metric", "value", "prompt")})
    return rep


def median(values) -> float:
    return float(np.median(np.asarray(values, dtype=np.float64)))
