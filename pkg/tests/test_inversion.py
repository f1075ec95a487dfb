import numpy as np
import pytest

from conftest import build_tiny
from textinv import diffusion
from textinv.autograd import Tensor
from textinv.diffusion import GuidanceConfig
from textinv.gradcheck import numerical_grad, relative_error
from textinv.inversion import (FrozenModelMutated, InversionConfig, InversionError, PivotalConfig,
                               bind_pseudowords, bipartite_edit, bipartite_edit_latent, pivotal_tune,
                               progressive_vector_count, textual_invert)
from textinv.text import PseudoWord


def invert(model, concept, steps=6, **kw):
    return textual_invert(model, concept, InversionConfig(steps=steps, **kw))


# -- gradient of the denoising loss w.r.t. the learned vector ----------------

@pytest.fixture(scope="module")
def f64_model():
    m = build_tiny().copy()
    for mod in (m.codec, m.unet, m.text_encoder):
        for p in mod.parameters():
            p.data = p.data.astype(np.float64)
    return m


def _loss_setup(model, seed):
    rng = np.random.default_rng(seed)
    vocab = model.vocab.extended("<concept-0>")
    table = model.embedding_table()
    v = Tensor(table.row(vocab.id("star"))[None] + 0.1 * rng.standard_normal((1, table.dim)),
               requires_grad=True, dtype=np.float64)
    table.set_override(vocab.id("<concept-0>"), [v])
    z0 = rng.standard_normal((2, 8, 8, 4))
    eps = rng.standard_normal(z0.shape)
    t = rng.integers(1, model.schedule.T + 1, size=2)

    def f():
        ctx, mask = model.condition(["a photo of a <concept-0>.", "a rendition of the <concept-0>."], table, vocab)
        return diffusion.ldm_loss(lambda zt, tt: model.eps(zt, tt, ctx, mask), model.schedule,
                                  Tensor(z0, dtype=np.float64), t, eps)

    return v, f, rng


def test_loss_gradient_wrt_vector_full(f64_model):
    v, f, _ = _loss_setup(f64_model, 0)
    f().backward()
    num = numerical_grad(f, v, h=1e-5)
    assert relative_error(v.grad, num) < 1e-3


@pytest.mark.parametrize("seed", range(100))
def test_loss_gradient_wrt_vector_directional(f64_model, seed):
    # central difference along a random direction: 2 evaluations per seeded case
    v, f, rng = _loss_setup(f64_model, 1000 + seed)
    f().backward()
    d = rng.standard_normal(v.shape)
    d /= np.linalg.norm(d)
    base = v.data.copy()
    h = 1e-5
    v.data = base + h * d
    fp = float(f().data)
    v.data = base - h * d
    fm = float(f().data)
    v.data = base
    num = (fp - fm) / (2 * h)
    ana = float(np.sum(v.grad * d))
    assert abs(ana - num) <= 1e-3 * max(abs(num), abs(ana), 1e-8)


# -- config -------------------------------------------------------------------

def test_config_validation():
    with pytest.raises(InversionError):
        InversionConfig(num_vectors=4)
    with pytest.raises(InversionError):
        InversionConfig(progressive=True, num_vectors=1)
    with pytest.raises(InversionError):
        InversionConfig(reg_lambda=-1)
    with pytest.raises(ValueError):
        InversionConfig(template_mode="scene")
    assert InversionConfig().lr == pytest.approx(0.04)


def test_progressive_transitions_exact():
    cfg = InversionConfig(num_vectors=3, progressive=True)
    counts = [progressive_vector_count(s, cfg) for s in range(5000)]
    assert counts[0] == 1 and counts[1999] == 1
    assert counts[2000] == 2 and counts[3999] == 2
    assert counts[4000] == 3 and counts[4999] == 3
    changes = [s for s in range(1, 5000) if counts[s] != counts[s - 1]]
    assert changes == [2000, 4000]
    assert progressive_vector_count(4500, InversionConfig(num_vectors=2, progressive=True)) == 2
    assert progressive_vector_count(0, InversionConfig(num_vectors=3)) == 3


def test_progressive_run_records_counts(tiny_model, tiny_concept):
    res = invert(tiny_model, tiny_concept, steps=6, num_vectors=3, progressive=True, progressive_steps=(2, 4))
    assert res.active_counts == [1, 1, 2, 2, 3, 3]
    assert res.pseudo_word.num_vectors == 3


# -- inversion ------------------------------------------------------------------

def test_zero_learning_rate_keeps_descriptor_init(tiny_model, tiny_concept):
    res = invert(tiny_model, tiny_concept, steps=2, base_lr=0.0, num_vectors=2)
    row = tiny_model.text_encoder.token_embedding.data[tiny_model.vocab.id("star")]
    np.testing.assert_array_equal(res.pseudo_word.vectors, np.stack([row, row]))
    assert res.descriptor_distance(tiny_model) == 0.0


@pytest.mark.parametrize("setup", [
    {}, {"num_vectors": 2}, {"num_vectors": 3, "progressive": True, "progressive_steps": (1, 2)},
    {"reg_lambda": 0.01}, {"per_image_tokens": True}, {"base_lr": 2e-2}, {"template_mode": "style"},
])
def test_model_checksums_unchanged(tiny_model, tiny_concept, setup):
    before = tiny_model.component_checksums()
    res = invert(tiny_model, tiny_concept, steps=3, **setup)
    assert tiny_model.component_checksums() == before
    assert res.pseudo_word.base_checksum == before["embedding_table"]
    assert len(tiny_model.vocab) == tiny_model.vocab.base_size


def test_vector_moves_on_first_step(tiny_model, tiny_concept):
    res = invert(tiny_model, tiny_concept, steps=1)
    assert res.descriptor_distance(tiny_model) > 0
    assert np.isfinite(res.losses[0])


def test_per_image_parameter_count(tiny_model, tiny_concept):
    res = invert(tiny_model, tiny_concept, steps=2, per_image_tokens=True, num_vectors=2)
    assert res.trainable_vectors == 2 + len(tiny_concept)
    assert res.image_vectors.shape == (len(tiny_concept), tiny_model.config.text_dim)
    assert invert(tiny_model, tiny_concept, steps=1).image_vectors is None


def test_regularization_pulls_toward_descriptor(tiny_model, tiny_concept):
    free = invert(tiny_model, tiny_concept, steps=30, base_lr=0.02)
    reg = invert(tiny_model, tiny_concept, steps=30, base_lr=0.02, reg_lambda=5.0)
    assert reg.descriptor_distance(tiny_model) < free.descriptor_distance(tiny_model)


def test_inversion_deterministic(tiny_model, tiny_concept):
    a = invert(tiny_model, tiny_concept, steps=4, seed=3)
    b = invert(tiny_model, tiny_concept, steps=4, seed=3)
    assert a.pseudo_word.vectors.tobytes() == b.pseudo_word.vectors.tobytes()
    assert a.losses == b.losses
    c = invert(tiny_model, tiny_concept, steps=4, seed=4)
    assert c.losses != a.losses


def test_small_set_samples_with_replacement(tiny_model, tiny_concept):
    res = invert(tiny_model, tiny_concept.subset(1), steps=2)
    assert len(res.losses) == 2


def test_errors(tiny_model, tiny_concept):
    from dataclasses import replace

    with pytest.raises(InversionError):
        invert(tiny_model, replace(tiny_concept, descriptor="zebra"))
    with pytest.raises(InversionError):
        invert(tiny_model, replace(tiny_concept, descriptor="<pad>"))


def test_mutation_detected(tiny_model, tiny_concept, monkeypatch):
    m = tiny_model.copy()
    calls = iter(range(10))
    real = m.component_checksums

    def drifting():
        out = real()
        if next(calls):
            out["unet"] = "changed"
        return out

    monkeypatch.setattr(m, "component_checksums", drifting)
    with pytest.raises(FrozenModelMutated):
        invert(m, tiny_concept, steps=1)


def test_bind_pseudowords(tiny_model):
    pw = PseudoWord("<concept-0>", np.ones((2, 16)), "star")
    table, vocab = bind_pseudowords(tiny_model, pw)
    out = table.embed([vocab.id("<concept-0>")])
    np.testing.assert_array_equal(out.data, np.ones((2, 16)))
    with pytest.raises(InversionError):
        bind_pseudowords(tiny_model, PseudoWord("<concept-1>", np.ones((1, 8)), "star"))


# -- pivotal tuning -----------------------------------------------------------------

def test_pivotal_tune_copy_on_write(tiny_model, tiny_concept):
    pw = invert(tiny_model, tiny_concept, steps=2).pseudo_word
    pivot = pw.vectors.copy()
    before = tiny_model.component_checksums()
    tuned = pivotal_tune(tiny_model, pw, tiny_concept, PivotalConfig(lr=1e-3, steps=3))
    assert tiny_model.component_checksums() == before
    after = tuned.component_checksums()
    assert after["unet"] != before["unet"]
    assert after["codec"] == before["codec"]
    assert after["text_encoder"] == before["text_encoder"]
    assert after["embedding_table"] == before["embedding_table"]
    assert pw.vectors.tobytes() == pivot.tobytes()
    assert tuned.meta["pivotal_tune"]["steps"] == 3


def test_pivotal_tune_needs_pseudoword(tiny_model, tiny_concept):
    with pytest.raises(InversionError):
        pivotal_tune(tiny_model, None, tiny_concept)


# -- bipartite editing ----------------------------------------------------------------

def test_bipartite_same_prompt_is_reconstruction(tiny_model, tiny_concept):
    z0 = tiny_model.codec.encode(tiny_concept.images[:2])
    g = GuidanceConfig(1.0)
    out = bipartite_edit_latent(tiny_model, z0, "a photo of a star", "a photo of a star", g, steps=10)
    x_T = tiny_model.invert_latents(z0, ["a photo of a star"] * 2, g, 10)
    ref = diffusion.ddim_sample_loop(tiny_model.guided_eps_fn(["a photo of a star"] * 2, g), x_T,
                                     tiny_model.schedule, 10)
    assert out.tobytes() == ref.tobytes()


def test_bipartite_deterministic_and_shapes(tiny_model, tiny_concept):
    img = tiny_concept.images[0]
    for s in (1.0, 2.0, 5.0):
        a = bipartite_edit(tiny_model, img, "a photo of a star", "a photo of a star on a sky background",
                           GuidanceConfig(s), steps=5)
        b = bipartite_edit(tiny_model, img, "a photo of a star", "a photo of a star on a sky background",
                           GuidanceConfig(s), steps=5)
        assert a.shape == img.shape and a.tobytes() == b.tobytes()


def test_bipartite_refinement_tightens_fixed_point(tiny_model, tiny_concept):
    z0 = tiny_model.codec.encode(tiny_concept.images[:2])
    g = GuidanceConfig(1.0)
    err = [float(np.mean((bipartite_edit_latent(tiny_model, z0, "a star", "a star", g, steps=10,
                                                fixed_point_iters=k) - z0) ** 2)) for k in (0, 3)]
    assert err[1] < err[0]
