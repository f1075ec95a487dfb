import numpy as np
import pytest

from textinv.data import Corpus, render_concept
from textinv.evaluation import (SETUPS, DualEncoder, DualEncoderConfig, EvalConfig, EvalReport, EvaluationError,
                                baseline_scores, contrastive_loss, editability_score, evaluate_pseudoword,
                                reconstruction_score, retrieval_accuracy, setup_config, train_dual_encoder)
from textinv.autograd import Tensor
from textinv.text import RECONSTRUCTION_PROMPT, PseudoWord


class VectorEncoder:
    """Oracle encoder: images are already embeddings (rows normalized); texts map via a dict."""

    def __init__(self, texts=None):
        self.texts = texts or {}

    def embed_images(self, images):
        x = np.asarray(images, dtype=np.float64).reshape(len(images), -1)
        return x / np.linalg.norm(x, axis=1, keepdims=True)

    def embed_texts(self, texts):
        return np.stack([self.texts[t] for t in texts])


def test_reconstruction_matches_double_loop():
    rng = np.random.default_rng(0)
    g, t = rng.standard_normal((5, 6)), rng.standard_normal((3, 6))
    enc = VectorEncoder()
    gn, tn = enc.embed_images(g), enc.embed_images(t)
    ref = sum(float(gn[i] @ tn[j]) for i in range(5) for j in range(3)) / 15
    assert reconstruction_score(g, t, enc) == pytest.approx(ref, abs=1e-12)


def test_reconstruction_symmetric_and_self():
    rng = np.random.default_rng(1)
    a, b = rng.standard_normal((4, 3)), rng.standard_normal((7, 3))
    enc = VectorEncoder()
    assert reconstruction_score(a, b, enc) == pytest.approx(reconstruction_score(b, a, enc), abs=1e-12)
    one = rng.standard_normal((1, 3))
    assert reconstruction_score(one, one, enc) == pytest.approx(1.0)


def test_editability_strips_placeholders_and_hits_one():
    d = np.array([0.0, 1.0, 0.0])
    enc = VectorEncoder({"a photo of on a sky background": d})
    imgs = np.array([[0.1, 1.0, 0.0], [-0.1, 1.0, 0.0]])
    assert editability_score(imgs, "a photo of <concept-0> on a sky background", enc) == pytest.approx(1.0)


def test_empty_inputs_raise():
    enc = VectorEncoder()
    with pytest.raises(EvaluationError):
        reconstruction_score(np.zeros((0, 3)), np.ones((1, 3)), enc)
    with pytest.raises(EvaluationError):
        editability_score(np.zeros((0, 3)), "x", enc)


def test_report_accessors_and_csv():
    rep = EvalReport(provenance={"seed": 0})
    rep.add("base", "reconstruction", 0.8, RECONSTRUCTION_PROMPT)
    rep.add("base", "editability", 0.2, "p1")
    rep.add("base", "editability", 0.4, "p2")
    rep.add("reg", "reconstruction", 0.7, RECONSTRUCTION_PROMPT)
    rep.add("reg", "editability", 0.5, "p1")
    assert rep.setups() == ["base", "reg"]
    assert rep.editability("base") == pytest.approx(0.3)
    assert rep.reconstruction("reg") == 0.7
    assert rep.tradeoff_csv().splitlines()[1] == "base,0.800000,0.300000"
    with pytest.raises(KeyError):
        rep.editability("missing")
    with pytest.raises(EvaluationError):
        rep.add("base", "reconstruction", 1.5)


def test_report_jsonl_round_trip_excludes_timings(tmp_path):
    rep = EvalReport(provenance={"b": 1, "a": 2}, timings={"invert_s": 12.3})
    rep.add("base", "reconstruction", 0.5, RECONSTRUCTION_PROMPT, seed=0)
    rep.write(tmp_path / "r.jsonl")
    text = (tmp_path / "r.jsonl").read_text()
    assert "invert_s" not in text
    back = EvalReport.read(tmp_path / "r.jsonl")
    assert back.records == rep.records and back.provenance == rep.provenance
    assert back.to_jsonl() == text


def test_contrastive_loss_prefers_matched_pairs():
    eye = Tensor(np.eye(4))
    shuffled = Tensor(np.eye(4)[[1, 0, 3, 2]])
    assert float(contrastive_loss(eye, eye, 0.1).data) < float(contrastive_loss(eye, shuffled, 0.1).data)
    uniform = Tensor(np.ones((4, 4)) / 2)
    assert float(contrastive_loss(uniform, uniform, 1.0).data) == pytest.approx(np.log(4))


def test_dual_encoder_needs_enough_pairs():
    tiny = Corpus(np.zeros((10, 32, 32, 3), np.uint8), ["a circle"] * 10, 0)
    with pytest.raises(EvaluationError):
        train_dual_encoder(tiny)


def test_dual_encoder_short_training_and_io(tmp_path):
    from textinv.data import generate_corpus

    corpus, _ = generate_corpus(seed=1, n_pairs=300)
    enc = train_dual_encoder(corpus, DualEncoderConfig(steps=3, batch_size=16))
    acc = retrieval_accuracy(enc, corpus, way=8, trials=2)
    assert 0.0 <= acc <= 1.0
    enc.save(tmp_path / "d.ckpt")
    back = DualEncoder.load(tmp_path / "d.ckpt")
    imgs = corpus.float_images(np.arange(4))
    assert back.embed_images(imgs).tobytes() == enc.embed_images(imgs).tobytes()
    e = back.embed_texts(["a red circle", "a photo of <concept-0>"])
    np.testing.assert_allclose(np.linalg.norm(e, axis=1), 1.0, rtol=1e-5)


def test_setups_table():
    assert set(SETUPS) == {"base", "high-lr", "low-lr", "2-word", "3-word", "progressive", "reg", "per-image"}
    assert setup_config("high-lr").lr == pytest.approx(0.16)
    assert setup_config("progressive", seed=2).num_vectors == 3
    with pytest.raises(EvaluationError):
        setup_config("nope")


@pytest.fixture(scope="module")
def small_enc():
    return DualEncoder(DualEncoderConfig(seed=0)).freeze()


def test_evaluate_and_baselines_deterministic(tiny_model, small_enc):
    concept = render_concept(("star", "teal", "dotted"), 2, seed=5)
    cfg = EvalConfig(n_samples=2, ddim_steps=3, prompts=("a photo of {} on a sky background",))
    pw = PseudoWord("<concept-0>", tiny_model.text_encoder.token_embedding.data[[tiny_model.vocab.id("star")]],
                    "star")
    a = evaluate_pseudoword(tiny_model, small_enc, pw, concept, cfg, "base")
    b = evaluate_pseudoword(tiny_model, small_enc, pw, concept, cfg, "base")
    assert a.to_jsonl() == b.to_jsonl()
    assert [r["metric"] for r in a.records] == ["reconstruction", "editability"]
    base = baseline_scores(concept, small_enc, tiny_model, cfg)
    assert base.setups() == ["image-only", "prompt-only"]
    assert base.provenance["prompt_only_override_lookups"] == 0
    assert base.reconstruction("image-only") <= 1.0


def test_report_median_over_inversion_seeds():
    rep = EvalReport()
    for seed, rec, edits in [(0, 0.1, (0.2, 0.4)), (1, 0.5, (0.0, 0.2)), (2, 0.9, (0.9, 0.9))]:
        rep.add("base", "reconstruction", rec, RECONSTRUCTION_PROMPT, inversion_seed=seed)
        for k, e in enumerate(edits):
            rep.add("base", "editability", e, f"p{k}", inversion_seed=seed)
    assert rep.reconstruction("base") == pytest.approx(0.5)
    assert rep.editability("base") == pytest.approx(0.3)
