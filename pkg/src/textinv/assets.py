"""On-disk cache for the expensive shared artifacts: corpus, pretrained model, dual encoder.

Every cached file name carries the hash of the configuration that produced it,
so a changed config never silently reuses a stale artifact.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass
from pathlib import Path

from .data import Corpus, ConceptSet, generate_corpus, load_concept_set, save_concept_set
from .hashing import config_hash
from .model import FrozenModel
from .pretrain import PretrainConfig, codec_report, encode_corpus, pretrain, train_codec

log = logging.getLogger(__name__)

CACHE_ENV = "TEXTINV_CACHE"


def default_cache_dir() -> Path:
    return Path(os.environ.get(CACHE_ENV, Path.cwd() / ".textinv-cache"))


@dataclass(frozen=True)
class CorpusConfig:
    seed: int = 0
    n_pairs: int = 6000
    holdout_fraction: float = 0.1
    concept_images: int = 25


def corpus_assets(cache: Path, cfg: CorpusConfig = CorpusConfig()) -> tuple[Corpus, Corpus, list[ConceptSet]]:
    """(train split, held-out split, held-out concept pools)."""
    d = Path(cache) / f"corpus-{config_hash(cfg)}"
    if not (d / "corpus.npz").exists():
        corpus, concepts = generate_corpus(cfg.seed, cfg.n_pairs, concept_images=cfg.concept_images)
        d.mkdir(parents=True, exist_ok=True)
        for k, c in enumerate(concepts):
            save_concept_set(c, d / f"concept-{k}")
        tmp = d / "corpus.tmp.npz"
        corpus.save(tmp)
        tmp.rename(d / "corpus.npz")
    corpus = Corpus.load(d / "corpus.npz")
    concepts = sorted((p for p in d.iterdir() if p.name.startswith("concept-")), key=lambda p: int(p.name[8:]))
    train, test = corpus.split(cfg.holdout_fraction)
    return train, test, [load_concept_set(p) for p in concepts]


def _model_key(corpus_cfg: CorpusConfig, cfg: PretrainConfig, stage: str) -> str:
    if stage == "codec":
        return config_hash({"corpus": corpus_cfg, "seed": cfg.seed, "codec_steps": cfg.codec_steps,
                            "codec_batch": cfg.codec_batch, "codec_lr": cfg.codec_lr, "model": cfg.model})
    return config_hash({"corpus": corpus_cfg, "pretrain": cfg})


def pretrained_model(cache: Path, corpus_cfg: CorpusConfig = CorpusConfig(),
                     cfg: PretrainConfig = PretrainConfig()) -> FrozenModel:
    """Load the pretrained model for these configs, training (and caching) it when absent."""
    cache = Path(cache)
    path = cache / f"model-{_model_key(corpus_cfg, cfg, 'full')}.ckpt"
    if path.exists():
        return FrozenModel.load(path)
    train, test, _ = corpus_assets(cache, corpus_cfg)
    codec_path = cache / f"codec-{_model_key(corpus_cfg, cfg, 'codec')}.ckpt"
    if codec_path.exists():
        codec_model = FrozenModel.load(codec_path)
    else:
        codec_model = FrozenModel.build(cfg.model, cfg.seed)
        curve = []
        train_codec(codec_model, train, cfg, curve)
        codec_model.meta = {"codec_curve": curve[:: max(1, len(curve) // 200)],
                            "codec_report": codec_report(codec_model, test.float_images())}
        codec_model.freeze().save(codec_path)
        log.info("codec held-out report: %s", codec_model.meta["codec_report"])
    ckpt_dir = cache / f"pretrain-{_model_key(corpus_cfg, cfg, 'full')}"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    model, curves = pretrain(train, cfg, checkpoint_dir=ckpt_dir, codec_from=codec_model)
    model.meta["codec_report"] = codec_model.meta.get("codec_report")
    model.save(path)
    (cache / f"curves-{_model_key(corpus_cfg, cfg, 'full')}.json").write_text(
        json.dumps({"codec": codec_model.meta.get("codec_curve", []), "denoiser": curves["denoiser"]}))
    return FrozenModel.load(path)


def training_curves(cache: Path, corpus_cfg: CorpusConfig = CorpusConfig(),
                    cfg: PretrainConfig = PretrainConfig()) -> dict | None:
    p = Path(cache) / f"curves-{_model_key(corpus_cfg, cfg, 'full')}.json"
    return json.loads(p.read_text()) if p.exists() else None


def dual_encoder(cache: Path, corpus_cfg: CorpusConfig = CorpusConfig(), cfg=None):
    """The frozen similarity oracle trained on the corpus' training split (cached)."""
    from .evaluation import DualEncoder, DualEncoderConfig, train_dual_encoder

    cfg = cfg or DualEncoderConfig()
    path = Path(cache) / f"dual-{config_hash({'corpus': corpus_cfg, 'encoder': cfg})}.ckpt"
    if path.exists():
        return DualEncoder.load(path)
    train, _, _ = corpus_assets(cache, corpus_cfg)
    train_dual_encoder(train, cfg).save(path)
    return DualEncoder.load(path)
