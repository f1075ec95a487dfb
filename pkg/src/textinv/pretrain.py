"""Two-stage toy pretraining: the latent codec first, then denoiser and text encoder jointly."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from . import diffusion
from .autograd import NonFiniteError, Tensor
from .checkpoint import read_checkpoint, write_checkpoint
from .codec import psnr
from .data import Corpus
from .hashing import config_hash, plain
from .model import FrozenModel, ModelConfig
from .optim import Adam

log = logging.getLogger(__name__)


@dataclass
class PretrainConfig:
    seed: int = 0
    codec_steps: int = 4000
    codec_batch: int = 32
    codec_lr: float = 1e-3
    steps: int = 30000
    batch_size: int = 32
    lr: float = 2e-4
    caption_dropout: float = 0.1
    checkpoint_every: int = 5000
    log_every: int = 500
    model: ModelConfig = field(default_factory=ModelConfig)


class PretrainDiverged(RuntimeError):
    def __init__(self, step: int, last_checkpoint):
        super().__init__(f"loss became non-finite at step {step}; last good checkpoint: {last_checkpoint}")
        self.step = step
        self.last_checkpoint = last_checkpoint


def _step_rng(seed: int, stage: int, step: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, stage, step]))


def train_codec(model: FrozenModel, corpus: Corpus, cfg: PretrainConfig, curve: list | None = None) -> None:
    """Plain reconstruction MSE; afterwards sets ``codec.scale`` to unit latent std."""
    codec = model.codec
    opt = Adam(codec.parameters(), lr=cfg.codec_lr)
    n = len(corpus)
    for step in range(cfg.codec_steps):
        rng = _step_rng(cfg.seed, 1, step)
        x = Tensor(corpus.float_images(np.sort(rng.choice(n, cfg.codec_batch, replace=False))))
        # cosine decay keeps the last steps fine-grained
        opt.lr = cfg.codec_lr * 0.5 * (1 + np.cos(np.pi * step / cfg.codec_steps))
        loss = ag.mse(codec.decoder(codec.encoder(x)), x)
        opt.zero_grad()
        loss.backward()
        opt.step()
        if curve is not None:
            curve.append(float(loss.data))
        if cfg.log_every and step % cfg.log_every == 0:
            log.info("codec step %d loss %.5f", step, float(loss.data))
    with ag.no_grad():
        z = codec.encoder(Tensor(corpus.float_images(np.arange(min(n, 1024))))).data
    codec.scale = float(1.0 / z.std())


def encode_corpus(model: FrozenModel, corpus: Corpus) -> np.ndarray:
    with ag.no_grad():
        return np.concatenate([model.codec.encode(corpus.float_images(np.arange(i, min(i + 256, len(corpus)))))
                               for i in range(0, len(corpus), 256)])


def _denoiser_params(model: FrozenModel) -> list:
    return model.unet.parameters() + model.text_encoder.parameters()


def denoiser_loss(model: FrozenModel, latents: np.ndarray, captions, rng: np.random.Generator,
                  batch_size: int, caption_dropout: float) -> Tensor:
    idx = rng.choice(len(latents), batch_size, replace=False)
    t = rng.integers(1, model.schedule.T + 1, size=batch_size)
    eps = rng.standard_normal((batch_size,) + latents.shape[1:]).astype(np.float32)
    drop = rng.random(batch_size) < caption_dropout
    prompts = ["" if d else captions[i] for i, d in zip(idx, drop)]
    ctx, mask = model.condition(prompts)
    return diffusion.ldm_loss(lambda zt, tt: model.eps(zt, tt, ctx, mask), model.schedule,
                              Tensor(latents[idx]), t, eps)


def save_training_state(path, model: FrozenModel, opt: Adam, step: int, cfg: PretrainConfig) -> None:
    arrays = {f"param.{i}": p.data for i, p in enumerate(_denoiser_params(model))}
    arrays.update({f"adam.{k}": v for k, v in opt.state_arrays().items()})
    write_checkpoint(path, arrays, {"kind": "pretrain-state", "step": step, "seed": cfg.seed})


def load_training_state(path, model: FrozenModel, opt: Adam) -> int:
    header, arrays = read_checkpoint(path)
    for i, p in enumerate(_denoiser_params(model)):
        p.data = arrays[f"param.{i}"].copy()
    opt.load_state_arrays({k[5:]: v for k, v in arrays.items() if k.startswith("adam.")})
    return int(header["step"])


def train_denoiser(model: FrozenModel, latents: np.ndarray, captions, cfg: PretrainConfig,
                   start_step: int = 0, stop_step: int | None = None, opt: Adam | None = None,
                   checkpoint_dir=None, curve: list | None = None) -> Adam:
    """Minimize the denoising loss over (latent, caption) pairs, steps [start_step, stop_step)."""
    stop_step = cfg.steps if stop_step is None else stop_step
    params = _denoiser_params(model)
    for p in params:
        p.requires_grad = True
    opt = opt or Adam(params, lr=cfg.lr)
    last_ckpt = None
    for step in range(start_step, stop_step):
        rng = _step_rng(cfg.seed, 2, step)
        try:
            # every op checks finiteness itself, so numpy's overflow warnings add nothing
            with np.errstate(all="ignore"):
                loss = denoiser_loss(model, latents, captions, rng, cfg.batch_size, cfg.caption_dropout)
                opt.zero_grad()
                loss.backward()
                opt.step()
            for p in params:
                if not np.isfinite(p.data).all():
                    raise NonFiniteError("parameter update produced non-finite values")
        except NonFiniteError as exc:
            raise PretrainDiverged(step, last_ckpt) from exc
        if curve is not None:
            curve.append(float(loss.data))
        if cfg.log_every and step % cfg.log_every == 0:
            log.info("denoiser step %d loss %.5f", step, float(loss.data))
        if checkpoint_dir and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            last_ckpt = Path(checkpoint_dir) / f"pretrain-state-{step + 1:06d}.ckpt"
            save_training_state(last_ckpt, model, opt, step + 1, cfg)
    return opt


def pretrain(corpus: Corpus, cfg: PretrainConfig, checkpoint_dir=None, codec_from: FrozenModel | None = None):
    """Run both stages and return (frozen model, training curves)."""
    model = FrozenModel.build(cfg.model, cfg.seed)
    curves = {"codec": [], "denoiser": []}
    if codec_from is not None:
        model.codec = codec_from.copy().codec
    else:
        train_codec(model, corpus, cfg, curves["codec"])
    model.codec.freeze()
    latents = encode_corpus(model, corpus)
    train_denoiser(model, latents, corpus.captions, cfg, checkpoint_dir=checkpoint_dir, curve=curves["denoiser"])
    model.meta = {"pretrain_config": plain(cfg), "config_hash": config_hash(cfg), "seed": cfg.seed}
    return model.freeze(), curves


def codec_report(model: FrozenModel, images: np.ndarray) -> dict:
    recon = model.codec.decode(model.codec.encode(images))
    return {"psnr": psnr(recon, images), "mse": float(np.mean((recon - images) ** 2))}

