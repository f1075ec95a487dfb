from dataclasses import replace

import numpy as np
import pytest

from conftest import TINY
from textinv.checkpoint import CheckpointError, read_checkpoint, write_checkpoint
from textinv.data import generate_corpus
from textinv.model import FrozenModel
from textinv.pretrain import (PretrainConfig, PretrainDiverged, encode_corpus, load_training_state, pretrain,
                              save_training_state, train_codec, train_denoiser)

CFG = PretrainConfig(codec_steps=2, codec_batch=4, steps=4, batch_size=4, log_every=0, checkpoint_every=0,
                     model=TINY)


@pytest.fixture(scope="module")
def corpus():
    return generate_corpus(seed=2, n_pairs=40)[0]


def _fresh(corpus):
    m = FrozenModel.build(TINY, 0)
    latents = encode_corpus(m, corpus)
    return m, latents


def _unet_bytes(m):
    return b"".join(p.data.tobytes() for p in m.unet.parameters() + m.text_encoder.parameters())


def test_resume_is_bit_identical(corpus, tmp_path):
    m1, lat = _fresh(corpus)
    train_denoiser(m1, lat, corpus.captions, CFG)

    m2, _ = _fresh(corpus)
    opt = train_denoiser(m2, lat, corpus.captions, CFG, stop_step=2)
    save_training_state(tmp_path / "s.ckpt", m2, opt, 2, CFG)

    m3, _ = _fresh(corpus)
    from textinv.optim import Adam
    from textinv.pretrain import _denoiser_params

    opt3 = Adam(_denoiser_params(m3), lr=CFG.lr)
    start = load_training_state(tmp_path / "s.ckpt", m3, opt3)
    assert start == 2
    train_denoiser(m3, lat, corpus.captions, CFG, start_step=start, opt=opt3)
    assert _unet_bytes(m3) == _unet_bytes(m1)


def test_divergence_aborts_with_step(corpus, tmp_path):
    m, lat = _fresh(corpus)
    cfg = replace(CFG, lr=1e38, checkpoint_every=1)
    with pytest.raises(PretrainDiverged) as info:
        train_denoiser(m, lat, corpus.captions, cfg, checkpoint_dir=tmp_path)
    assert info.value.step >= 1
    assert info.value.last_checkpoint is not None and info.value.last_checkpoint.exists()


def test_codec_training_sets_scale(corpus):
    m = FrozenModel.build(TINY, 0)
    curve = []
    train_codec(m, corpus, CFG, curve)
    assert len(curve) == 2 and m.codec.scale != 1.0
    z = m.codec.encode(corpus.float_images(np.arange(40)))
    assert z.std() == pytest.approx(1.0, rel=1e-3)


def test_pretrain_end_to_end_and_model_round_trip(corpus, tmp_path):
    model, curves = pretrain(corpus, CFG)
    assert len(curves["codec"]) == 2 and len(curves["denoiser"]) == 4
    assert model.meta["seed"] == 0 and len(model.meta["config_hash"]) == 12
    model.save(tmp_path / "m.ckpt")
    back = FrozenModel.load(tmp_path / "m.ckpt")
    assert back.component_checksums() == model.component_checksums()
    assert back.codec.scale == pytest.approx(model.codec.scale)
    again, _ = pretrain(corpus, CFG)
    assert again.component_checksums() == model.component_checksums()


def test_checkpoint_corruption_detected(tmp_path):
    p = tmp_path / "c.ckpt"
    write_checkpoint(p, {"w": np.arange(6, dtype=np.float32).reshape(2, 3), "n": np.array(3)}, {"kind": "x"})
    header, arrays = read_checkpoint(p)
    assert header["kind"] == "x" and arrays["w"].shape == (2, 3) and int(arrays["n"]) == 3
    data = bytearray(p.read_bytes())
    data[-1] ^= 0xFF
    p.write_bytes(bytes(data))
    with pytest.raises(CheckpointError):
        read_checkpoint(p)
    (tmp_path / "junk").write_bytes(b"hello")
    with pytest.raises(CheckpointError):
        read_checkpoint(tmp_path / "junk")
