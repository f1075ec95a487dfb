"""The frozen text-to-image bundle and its sampling / inversion entry points."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from . import diffusion
from .autograd import Tensor
from .checkpoint import CheckpointError, read_checkpoint, write_checkpoint
from .codec import LatentCodec
from .diffusion import GuidanceConfig, NoiseSchedule
from .text import EmbeddingTable, TextEncoder, Vocabulary, pack_prompts
from .unet import UNet

COMPONENTS = ("codec", "unet", "text_encoder")


@dataclass
class ModelConfig:
    latent_channels: int = 4
    codec_width: int = 32
    unet_width: int = 32
    text_dim: int = 64
    text_blocks: int = 2
    text_heads: int = 4
    context_length: int = 16
    T: int = 1000
    beta_start: float = 8.5e-4
    beta_end: float = 1.2e-2


@dataclass
class FrozenModel:
    codec: LatentCodec
    unet: UNet
    text_encoder: TextEncoder
    vocab: Vocabulary
    schedule: NoiseSchedule
    config: ModelConfig
    meta: dict = field(default_factory=dict)

    @classmethod
    def build(cls, config: ModelConfig, seed: int) -> "FrozenModel":
        rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
        vocab = Vocabulary.default()
        codec = LatentCodec(rng, config.latent_channels, config.codec_width)
        text = TextEncoder(rng, vocab.base_size, config.text_dim, config.text_blocks, config.text_heads,
                           config.context_length)
        unet = UNet(rng, config.latent_channels, config.unet_width, config.text_dim)
        schedule = diffusion.make_schedule(config.T, config.beta_start, config.beta_end)
        return cls(codec, unet, text, vocab, schedule, config)

    # -- integrity ----------------------------------------------------------
    def component_checksums(self) -> dict:
        return {
            "codec": self.codec.checksum(),
            "unet": self.unet.checksum(),
            "text_encoder": ag.parameters_checksum(
                [p for n, p in self.text_encoder.named_parameters() if n != "token_embedding"]),
            "embedding_table": ag.parameters_checksum([self.text_encoder.token_embedding]),
        }

    def freeze(self) -> "FrozenModel":
        for m in (self.codec, self.unet, self.text_encoder):
            m.freeze()
        return self

    def copy(self) -> "FrozenModel":
        """Deep copy with writable, independent parameter buffers."""
        twin = copy.deepcopy(self)
        for m in (twin.codec, twin.unet, twin.text_encoder):
            for p in m.parameters():
                p.data = np.array(p.data, copy=True)
        return twin

    # -- conditioning -------------------------------------------------------
    def embedding_table(self) -> EmbeddingTable:
        return EmbeddingTable(self.text_encoder.token_embedding)

    def condition(self, prompts, table: EmbeddingTable | None = None, vocab: Vocabulary | None = None):
        table = table or self.embedding_table()
        vocab = vocab or self.vocab
        emb, mask = pack_prompts(prompts, vocab, table, self.config.context_length)
        return self.text_encoder(emb, mask), mask

    def eps(self, x: Tensor, t, context: Tensor, mask: np.ndarray) -> Tensor:
        return self.unet(x, np.asarray(t), context, mask)

    def latent_shape(self) -> tuple[int, int, int]:
        return self.codec.latent_shape(32, 32)

    # -- sampling -----------------------------------------------------------
    def guided_eps_fn(self, prompts, guidance: GuidanceConfig, table=None, vocab=None):
        """eps(x, t) for a batch whose i-th row is conditioned on ``prompts[i]``."""
        with ag.no_grad():
            ctx, mask = self.condition(prompts, table, vocab)
            if guidance.scale != 1.0:
                uctx, umask = self.condition([guidance.unconditional_prompt] * len(prompts))
                both = Tensor(np.concatenate([uctx.data, ctx.data]))
                both_mask = np.concatenate([umask, mask])
        n = len(prompts)

        def fn(x: np.ndarray, t: int) -> np.ndarray:
            with ag.no_grad():
                if guidance.scale == 1.0:
                    return self.eps(Tensor(x), np.full(n, t), ctx, mask).data
                xx = Tensor(np.concatenate([x, x]))
                out = self.eps(xx, np.full(2 * n, t), both, both_mask).data
                return diffusion.cfg_combine(out[:n], out[n:], guidance.scale)

        return fn

    def initial_noise(self, n: int, seed: int) -> np.ndarray:
        rng = np.random.default_rng(np.random.SeedSequence([seed, 11]))
        return rng.standard_normal((n,) + self.latent_shape()).astype(np.float32)

    def sample_latents(self, prompts, guidance: GuidanceConfig, steps: int = 50, seed: int = 0,
                       table=None, vocab=None, x_T: np.ndarray | None = None, batch: int = 64) -> np.ndarray:
        """DDIM (eta = 0) from seeded Gaussian noise; one sample per prompt."""
        prompts = list(prompts)
        if x_T is None:
            x_T = self.initial_noise(len(prompts), seed)
        out = []
        for i in range(0, len(prompts), batch):
            fn = self.guided_eps_fn(prompts[i:i + batch], guidance, table, vocab)
            out.append(diffusion.ddim_sample_loop(fn, x_T[i:i + batch], self.schedule, steps))
        return np.concatenate(out)

    def invert_latents(self, z0: np.ndarray, prompts, guidance: GuidanceConfig, steps: int = 50,
                       table=None, vocab=None, fixed_point_iters: int = 0) -> np.ndarray:
        fn = self.guided_eps_fn(list(prompts), guidance, table, vocab)
        return diffusion.ddim_invert_loop(fn, z0, self.schedule, steps, fixed_point_iters)

    def sample_images(self, prompts, guidance: GuidanceConfig, steps: int = 50, seed: int = 0,
                      table=None, vocab=None) -> np.ndarray:
        return self.codec.decode(self.sample_latents(prompts, guidance, steps, seed, table, vocab))

    # -- persistence --------------------------------------------------------
    def save(self, path, extra_meta: dict | None = None) -> str:
        arrays = {}
        for comp in COMPONENTS:
            for name, arr in getattr(self, comp).state_dict().items():
                arrays[f"{comp}.{name}"] = arr
        meta = {**self.meta, **(extra_meta or {})}
        header = {
            "kind": "frozen-model",
            "schedule": self.schedule.to_dict(),
            "config": vars(self.config),
            "codec_scale": self.codec.scale,
            "vocab": self.vocab.words,
            "checksums": self.component_checksums(),
            "meta": meta,
        }
        return write_checkpoint(path, arrays, header)

    @classmethod
    def load(cls, path) -> "FrozenModel":
        header, arrays = read_checkpoint(path)
        if header.get("kind") != "frozen-model":
            raise CheckpointError(f"{path}: not a model checkpoint")
        model = cls.build(ModelConfig(**header["config"]), seed=0)
        model.vocab = Vocabulary([w for w in header["vocab"]])
        if model.vocab.words != header["vocab"]:
            raise CheckpointError(f"{path}: vocabulary does not round-trip")
        for comp in COMPONENTS:
            prefix = comp + "."
            getattr(model, comp).load_state_dict(
                {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)})
        model.codec.scale = float(header["codec_scale"])
        model.meta = header.get("meta", {})
        if model.component_checksums() != header["checksums"]:
            raise CheckpointError(f"{path}: parameter checksums differ from the stored values")
        return model.freeze()
