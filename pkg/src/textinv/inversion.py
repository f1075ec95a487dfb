"""Learning pseudo-word embeddings against the frozen model, and the editing
tools built on top of them (pivotal tuning, bipartite DDIM edits)."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from . import diffusion
from .autograd import Tensor
from .data import ConceptSet
from .diffusion import GuidanceConfig
from .hashing import config_hash
from .model import FrozenModel
from .optim import Adam
from .text import (RECONSTRUCTION_PROMPT, EmbeddingTable, PseudoWord, Vocabulary, image_token_name,
                   placeholder_name, sample_template, template_bank)

log = logging.getLogger(__name__)

# base learning rates before the devices x batch multiplier
LR_PRESETS = {"base": 0.005, "high": 2e-2, "low": 1e-4}
DEFAULT_REG_LAMBDA = 0.01
# fixed-point passes per inverted DDIM step; 0 is the plain closed form
INVERT_REFINE_ITERS = 0


class InversionError(ValueError):
    pass


class FrozenModelMutated(RuntimeError):
    pass


@dataclass
class InversionConfig:
    num_vectors: int = 1
    progressive: bool = False
    progressive_steps: tuple = (2000, 4000)
    reg_lambda: float = 0.0
    per_image_tokens: bool = False
    base_lr: float = LR_PRESETS["base"]
    lr_scaling: float = 8.0
    steps: int = 5000
    batch_size: int = 4
    template_mode: str = "object"
    seed: int = 0
    placeholder: str = placeholder_name(0)

    def __post_init__(self):
        if not 1 <= self.num_vectors <= 3:
            raise InversionError(f"num_vectors must be 1-3, got {self.num_vectors}")
        if self.progressive and self.num_vectors < 2:
            raise InversionError("a progressive schedule needs num_vectors >= 2")
        if self.steps < 1:
            raise InversionError(f"steps must be >= 1, got {self.steps}")
        if self.batch_size < 1:
            raise InversionError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.reg_lambda < 0:
            raise InversionError(f"reg_lambda must be >= 0, got {self.reg_lambda}")
        template_bank(self.template_mode)
        self.progressive_steps = tuple(int(s) for s in self.progressive_steps)

    @property
    def lr(self) -> float:
        return self.base_lr * self.lr_scaling

    def hash(self) -> str:
        return config_hash(self)


def progressive_vector_count(step: int, cfg: InversionConfig) -> int:
    """How many of the placeholder's vectors are live at ``step``."""
    if not cfg.progressive:
        return cfg.num_vectors
    return min(cfg.num_vectors, 1 + sum(step >= s for s in cfg.progressive_steps))


@dataclass
class InversionResult:
    pseudo_word: PseudoWord
    losses: list
    image_vectors: np.ndarray | None = None
    trainable_vectors: int = 0
    active_counts: list = field(default_factory=list)

    def descriptor_distance(self, model: FrozenModel) -> float:
        v0 = model.text_encoder.token_embedding.data[model.vocab.id(self.pseudo_word.descriptor)]
        return float(np.linalg.norm(self.pseudo_word.vectors - v0[None]))


def _check_descriptor(model: FrozenModel, descriptor: str) -> int:
    vocab = model.vocab
    if descriptor not in vocab or vocab.id(descriptor) in (vocab.pad_id, vocab.unk_id, vocab.bos_id) \
            or vocab.is_placeholder_id(vocab.id(descriptor)):
        raise InversionError(f"descriptor {descriptor!r} is not a vocabulary word")
    return vocab.id(descriptor)


def _step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, 3, step]))


def textual_invert(model: FrozenModel, concept: ConceptSet, cfg: InversionConfig | None = None,
                   log_every: int = 0) -> InversionResult:
    """Optimize the placeholder's vectors so the frozen model reconstructs ``concept``.

    Only the override vectors (and the per-image vectors when enabled) receive
    updates; every model checksum is verified unchanged at the end.
    """
    cfg = cfg or InversionConfig()
    if concept is None or len(concept) == 0:
        raise InversionError("concept set is empty")
    desc_id = _check_descriptor(model, concept.descriptor)
    before = model.component_checksums()

    n = len(concept)
    image_tokens = [image_token_name(i) for i in range(n)] if cfg.per_image_tokens else []
    vocab = model.vocab.extended(cfg.placeholder, *image_tokens)
    table = model.embedding_table()
    v_desc = model.text_encoder.token_embedding.data[desc_id].copy()

    def fresh():
        return Tensor(v_desc[None].copy(), requires_grad=True)

    vectors = [fresh() for _ in range(cfg.num_vectors)]
    pid = vocab.id(cfg.placeholder)
    table.set_override(pid, vectors, active=progressive_vector_count(0, cfg))
    image_vectors = []
    for tok in image_tokens:
        v = fresh()
        image_vectors.append(v)
        table.set_override(vocab.id(tok), [v])

    with ag.no_grad():
        latents = model.codec.encode(concept.images)
    bank = template_bank(cfg.template_mode)
    opt = Adam(vectors + image_vectors, lr=cfg.lr)
    v_desc_t = Tensor(v_desc[None])
    losses, active_counts = [], []

    for step in range(cfg.steps):
        rng = _step_rng(cfg.seed, step)
        active = progressive_vector_count(step, cfg)
        table.active[pid] = active
        idx = rng.choice(n, cfg.batch_size, replace=n < cfg.batch_size)
        prompts = []
        for i in idx:
            slot = f"{cfg.placeholder} with {image_tokens[i]}" if image_tokens else cfg.placeholder
            prompts.append(sample_template(bank, slot, rng))
        t = rng.integers(1, model.schedule.T + 1, size=cfg.batch_size)
        eps = rng.standard_normal((cfg.batch_size,) + latents.shape[1:]).astype(np.float32)
        ctx, mask = model.condition(prompts, table, vocab)
        loss = diffusion.ldm_loss(lambda zt, tt: model.eps(zt, tt, ctx, mask), model.schedule,
                                  Tensor(latents[idx]), t, eps)
        total = loss
        if cfg.reg_lambda > 0:
            for v in vectors[:active]:
                total = total + cfg.reg_lambda * ag.sum_((v - v_desc_t) ** 2)
        opt.zero_grad()
        total.backward()
        opt.step()
        losses.append(float(loss.data))
        active_counts.append(active)
        if log_every and step % log_every == 0:
            log.info("invert step %d loss %.5f active %d", step, losses[-1], active)

    if model.component_checksums() != before:
        raise FrozenModelMutated("textual inversion changed frozen model parameters")
    final = np.concatenate([v.data for v in vectors[:progressive_vector_count(cfg.steps - 1, cfg)]])
    pw = PseudoWord(cfg.placeholder, final, concept.descriptor, cfg.hash(), before["embedding_table"], cfg.seed,
                    meta={"steps": cfg.steps, "concept": concept.name, "images": n})
    img = np.concatenate([v.data for v in image_vectors]) if image_vectors else None
    return InversionResult(pw, losses, img, len(opt.params), active_counts)


def bind_pseudowords(model: FrozenModel, *words: PseudoWord) -> tuple[EmbeddingTable, Vocabulary]:
    """A (table, vocab) pair in which each pseudo-word's placeholder resolves to its vectors."""
    vocab = model.vocab.extended(*(w.placeholder for w in words))
    table = model.embedding_table()
    for w in words:
        if w.vectors.shape[1] != table.dim:
            raise InversionError(f"pseudo-word dim {w.vectors.shape[1]} != embedding dim {table.dim}")
        table.set_override(vocab.id(w.placeholder), [Tensor(v[None].copy()) for v in w.vectors])
    return table, vocab


# ---------------------------------------------------------------------------
# pivotal tuning
# ---------------------------------------------------------------------------

@dataclass
class PivotalConfig:
    lr: float = 1e-5
    steps: int = 500
    batch_size: int = 4
    seed: int = 0


def pivotal_tune(model: FrozenModel, pseudo_word: PseudoWord, concept: ConceptSet,
                 cfg: PivotalConfig | None = None) -> FrozenModel:
    """Fine-tune a copy of the denoiser on the concept with the pseudo-word held fixed."""
    if pseudo_word is None:
        raise InversionError("pivotal tuning needs an optimized pseudo-word")
    cfg = cfg or PivotalConfig()
    pivot = pseudo_word.vectors.copy()
    tuned = model.copy()
    params = tuned.unet.parameters()
    for p in params:
        p.requires_grad = True
    opt = Adam(params, lr=cfg.lr)
    table, vocab = bind_pseudowords(tuned, pseudo_word)
    prompt = RECONSTRUCTION_PROMPT.format(pseudo_word.placeholder)
    with ag.no_grad():
        latents = tuned.codec.encode(concept.images)
        ctx, mask = tuned.condition([prompt] * cfg.batch_size, table, vocab)
    n = len(latents)
    for step in range(cfg.steps):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 4, step]))
        idx = rng.choice(n, cfg.batch_size, replace=n < cfg.batch_size)
        t = rng.integers(1, tuned.schedule.T + 1, size=cfg.batch_size)
        eps = rng.standard_normal((cfg.batch_size,) + latents.shape[1:]).astype(np.float32)
        loss = diffusion.ldm_loss(lambda zt, tt: tuned.eps(zt, tt, ctx, mask), tuned.schedule,
                                  Tensor(latents[idx]), t, eps)
        opt.zero_grad()
        loss.backward()
        opt.step()
    if not np.array_equal(pivot, pseudo_word.vectors):
        raise FrozenModelMutated("pivot vectors changed during tuning")
    tuned.meta = {**model.meta, "pivotal_tune": {"lr": cfg.lr, "steps": cfg.steps, "seed": cfg.seed,
                                                  "pseudo_word": pseudo_word.config_hash}}
    return tuned.freeze()


# ---------------------------------------------------------------------------
# bipartite editing
# ---------------------------------------------------------------------------

def bipartite_edit_latent(model: FrozenModel, z0: np.ndarray, src_prompt: str, tgt_prompt: str,
                          guidance: GuidanceConfig, steps: int = 50, table=None, vocab=None,
                          fixed_point_iters: int = INVERT_REFINE_ITERS) -> np.ndarray:
    """Invert ``z0`` under ``src_prompt`` to x_T, then regenerate from the same x_T under ``tgt_prompt``."""
    z0 = np.asarray(z0, dtype=np.float32)
    single = z0.ndim == 3
    z = z0[None] if single else z0
    x_T = model.invert_latents(z, [src_prompt] * len(z), guidance, steps, table, vocab, fixed_point_iters)
    fn = model.guided_eps_fn([tgt_prompt] * len(z), guidance, table, vocab)
    out = diffusion.ddim_sample_loop(fn, x_T, model.schedule, steps)
    return out[0] if single else out


def bipartite_edit(model: FrozenModel, image: np.ndarray, src_prompt: str, tgt_prompt: str,
                   guidance: GuidanceConfig | None = None, steps: int = 50, table=None, vocab=None,
                   fixed_point_iters: int = INVERT_REFINE_ITERS) -> np.ndarray:
    guidance = guidance or GuidanceConfig()
    z0 = model.codec.encode(image)
    return model.codec.decode(bipartite_edit_latent(model, z0, src_prompt, tgt_prompt, guidance, steps,
                                                    table, vocab, fixed_point_iters))
