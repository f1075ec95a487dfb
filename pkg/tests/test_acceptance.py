"""Acceptance suite against the pretrained toy model.

The first run trains the shared artifacts (corpus, codec, denoiser, dual encoder)
and every inversion it needs; all of them are cached under ``$TEXTINV_CACHE``
(default ``./.textinv-cache``), so re-runs only re-check. Each criterion writes
one PASS/FAIL line, collected into the ``acceptance criteria`` summary section.
Compute times reported for cached work are the ones recorded when it was computed.
"""

import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from textinv import diffusion
from textinv.assets import CACHE_ENV, corpus_assets, default_cache_dir, dual_encoder, pretrained_model
from textinv.diffusion import GuidanceConfig
from textinv.evaluation import Benchmark, EvalConfig, evaluate_pseudoword, median, setsize_sweep
from textinv.inversion import PivotalConfig, bipartite_edit_latent, pivotal_tune
from textinv.text import OBJECT_TEMPLATES

pytestmark = pytest.mark.slow

SEEDS = (0, 1, 2)
SLACK = 0.01
REFINED = 2  # fixed-point passes for the reported refined inversion


def record(n: int, name: str, ok: bool, detail: str) -> None:
    ACCEPTANCE_LINES[n] = f"AC{n:<2d} {'PASS' if ok else 'FAIL'}  {name}: {detail}"


@pytest.fixture(scope="module")
def env():
    cache = default_cache_dir()
    t0 = time.perf_counter()
    model = pretrained_model(cache)
    enc = dual_encoder(cache)
    train, test, concepts = corpus_assets(cache)
    bench = Benchmark(model, enc, cache / "bench", EvalConfig())
    return {"cache": cache, "model": model, "enc": enc, "test": test, "pool": concepts[0],
            "concept": concepts[0].subset(5), "bench": bench, "setup_s": time.perf_counter() - t0}


_RUNS: dict = {}


def runs(env, setup):
    """(InversionResult, EvalReport) for each seed, inverted on the default 5-image set."""
    if setup not in _RUNS:
        _RUNS[setup] = [env["bench"].run(setup, env["concept"], s) for s in SEEDS]
    return _RUNS[setup]


def recon(env, setup):
    return median([r.reconstruction(setup) for _, r in runs(env, setup)])


def edit(env, setup):
    return median([r.editability(setup) for _, r in runs(env, setup)])


# ---------------------------------------------------------------------------

def test_ac1_gradients():
    from test_autograd import CASES, OPS, TOL
    from test_inversion import _loss_setup
    from textinv.gradcheck import check_gradients

    from conftest import build_tiny

    t0 = time.perf_counter()
    worst, n_cases = {}, 0
    for name, make in OPS.items():
        worst[name] = 0.0
        for seed in range(CASES):
            fn, leaves = make(np.random.default_rng(seed))
            worst[name] = max(worst[name], check_gradients(fn, leaves, h=1e-3))
            n_cases += 1
    m = build_tiny().copy()
    for mod in (m.codec, m.unet, m.text_encoder):
        for p in mod.parameters():
            p.data = p.data.astype(np.float64)
    worst["loss wrt v"] = 0.0
    for seed in range(CASES):
        v, f, rng = _loss_setup(m, 1000 + seed)
        f().backward()
        d = rng.standard_normal(v.shape)
        d /= np.linalg.norm(d)
        base, h = v.data.copy(), 1e-5
        v.data = base + h * d
        fp = float(f().data)
        v.data = base - h * d
        fm = float(f().data)
        v.data = base
        num, ana = (fp - fm) / (2 * h), float(np.sum(v.grad * d))
        worst["loss wrt v"] = max(worst["loss wrt v"], abs(ana - num) / max(abs(num), abs(ana), 1e-8))
        n_cases += 1
    dt = time.perf_counter() - t0
    top = max(worst, key=worst.get)
    ok = worst[top] < TOL and dt < 60 and all(v < TOL for v in worst.values())
    record(1, "gradient correctness", ok,
           f"{len(worst)} ops, {n_cases} cases, worst rel err {worst[top]:.1e} ({top}); {dt:.0f} s")
    assert ok


def test_ac2_diffusion_math(env):
    t0 = time.perf_counter()
    model = env["model"]
    sched = model.schedule
    rng = np.random.default_rng(0)
    n, t = 10_000, 400
    z0 = np.array([0.7, -1.3, 2.0])
    a = sched.alpha_bar(t)
    zt = diffusion.q_sample(sched, np.broadcast_to(z0, (n, 3)).copy(), t, rng.standard_normal((n, 3)))
    var = 1 - a
    z_mean = np.abs(zt.mean(0) - np.sqrt(a) * z0) / np.sqrt(var / n)
    z_var = np.abs(zt.var(0, ddof=1) - var) / (var * np.sqrt(2.0 / (n - 1)))
    moments_ok = bool(np.all(z_mean < 3) and np.all(z_var < 3))

    test = env["test"]
    idx = np.arange(16)
    z = model.codec.encode(test.float_images(idx))
    prompts = [test.captions[i] for i in idx]
    g = GuidanceConfig(1.0)
    fn = model.guided_eps_fn(prompts, g)
    mse = {}
    for iters in (0, REFINED):
        x_T = model.invert_latents(z, prompts, g, 50, fixed_point_iters=iters)
        back = diffusion.ddim_sample_loop(fn, x_T, sched, 50)
        mse[iters] = float(np.mean((back - z) ** 2))
    dt = time.perf_counter() - t0
    # gated on the closed-form inversion; the refined figure is reported alongside
    ok = moments_ok and mse[0] < 1e-3 and dt < 300
    record(2, "diffusion math", ok,
           f"q_sample max |z| mean {z_mean.max():.2f} var {z_var.max():.2f} (< 3); closed-form round-trip MSE "
           f"{mse[0]:.2e} (< 1e-3); with {REFINED} fixed-point passes {mse[REFINED]:.2e}; {dt:.0f} s")
    assert ok


def test_ac3_frozen_model_invariance(env):
    from textinv.evaluation import SETUPS, setup_config
    from textinv.inversion import textual_invert

    model = env["model"]
    before = model.component_checksums()
    bad = []
    for name in SETUPS:
        cfg = setup_config(name, steps=5)
        if cfg.progressive:
            cfg = setup_config(name, steps=5, progressive_steps=(2, 4))
        textual_invert(model, env["concept"], cfg)
        if model.component_checksums() != before:
            bad.append(name)
    ok = not bad
    record(3, "frozen-model invariance", ok,
           f"codec/denoiser/text-encoder/embedding checksums unchanged across {len(SETUPS)} variants"
           if ok else f"changed after {bad}")
    assert ok


def test_ac4_inversion_efficacy(env):
    base = runs(env, "base")
    refs = env["bench"].baselines(env["concept"])
    inv, po, io = recon(env, "base"), refs.reconstruction("prompt-only"), refs.reconstruction("image-only")
    secs = env["bench"].compute_seconds()
    ok = po + 0.05 < inv and inv >= io - 0.10 and secs < 1800
    record(4, "inversion efficacy", ok,
           f"recon inverted {inv:.3f} vs prompt-only {po:.3f} (+0.05) and image-only {io:.3f} (-0.10); "
           f"inversion losses {np.mean(base[0][0].losses[:100]):.3f} -> {np.mean(base[0][0].losses[-100:]):.3f}; "
           f"{secs:.0f} s compute")
    assert ok


def test_ac5_tradeoff_direction(env):
    r = {s: recon(env, s) for s in ("high-lr", "base", "low-lr")}
    e = {s: edit(env, s) for s in ("high-lr", "base", "low-lr", "3-word")}
    checks = {
        "recon high>=base": r["high-lr"] >= r["base"] - SLACK,
        "recon base>=low": r["base"] >= r["low-lr"] - SLACK,
        "edit low>=base": e["low-lr"] >= e["base"] - SLACK,
        "edit base>=high": e["base"] >= e["high-lr"] - SLACK,
        "edit 1w>=3w": e["base"] >= e["3-word"] - SLACK,
    }
    ok = all(checks.values())
    failed = [k for k, v in checks.items() if not v]
    record(5, "distortion-editability direction", ok,
           "recon high/base/low " + "/".join(f"{r[s]:.3f}" for s in ("high-lr", "base", "low-lr"))
           + "; edit high/base/low/3-word " + "/".join(f"{e[s]:.3f}" for s in ("high-lr", "base", "low-lr", "3-word"))
           + (f"; failed {failed}" if failed else ""))
    assert ok


def test_ac6_regularization(env):
    model = env["model"]
    pairs = [(u.descriptor_distance(model), g.descriptor_distance(model))
             for (u, _), (g, _) in zip(runs(env, "base"), runs(env, "reg"))]
    closer = all(g < u for u, g in pairs)
    eu, eg = edit(env, "base"), edit(env, "reg")
    ok = closer and eg >= eu - SLACK
    record(6, "regularization direction", ok,
           "||v - v_desc|| unreg/reg " + ", ".join(f"{u:.2f}/{g:.2f}" for u, g in pairs)
           + f"; edit reg {eg:.3f} vs unreg {eu:.3f}")
    assert ok


def test_ac7_progressive_schedule():
    from textinv.inversion import InversionConfig, progressive_vector_count

    cfg = InversionConfig(num_vectors=3, progressive=True)
    counts = [progressive_vector_count(s, cfg) for s in range(cfg.steps)]
    changes = [s for s in range(1, cfg.steps) if counts[s] != counts[s - 1]]
    ok = changes == [2000, 4000] and counts[0] == 1 and counts[-1] == 3
    record(7, "progressive schedule", ok, f"active count changes at steps {changes}")
    assert ok


def test_ac8_setsize_sweep(env):
    sizes = (1, 3, 5, 10, 25)
    bench = env["bench"]
    t0 = bench.compute_seconds()
    reps = [setsize_sweep(bench, env["pool"], sizes, seed) for seed in SEEDS]
    secs = bench.compute_seconds() - t0
    e = {n: median([r.editability(f"size-{n}") for r in reps]) for n in sizes}
    rc = {n: median([r.reconstruction(f"size-{n}") for r in reps]) for n in sizes}
    ok = e[5] >= e[25] - SLACK and secs < 3 * 3600
    record(8, "set-size sweep", ok,
           "edit " + " ".join(f"{n}:{e[n]:.3f}" for n in sizes) + "; recon "
           + " ".join(f"{n}:{rc[n]:.3f}" for n in sizes) + f"; {secs:.0f} s compute")
    assert ok


def test_ac9_template_bank():
    from test_text import EXPECTED_OBJECT_TEMPLATES

    ok = len(OBJECT_TEMPLATES) == 27 and \
        "\n".join(OBJECT_TEMPLATES).encode() == "\n".join(EXPECTED_OBJECT_TEMPLATES).encode()
    record(9, "template bank", ok, "27 object templates byte-identical" if ok else "mismatch")
    assert ok


def test_ac10_determinism(env, tmp_path, monkeypatch):
    from textinv import cli
    from textinv.data import save_concept_set, save_png

    t0 = time.perf_counter()
    model_path = tmp_path / "model.ckpt"
    env["model"].save(model_path)
    enc_path = tmp_path / "enc.ckpt"
    env["enc"].save(enc_path)
    concept_dir = tmp_path / "concept"
    save_concept_set(env["concept"], concept_dir)
    save_png(env["pool"].images[7], tmp_path / "img.png")
    commands = {
        "gen-data": ["--n-pairs", "300", "--set", "corpus.concept_images=3"],
        "pretrain": ["--n-pairs", "300", "--steps", "3", "--codec-steps", "2", "--set", "corpus.concept_images=3"],
        "invert": ["--model", model_path, "--concept", concept_dir, "--steps", "20"],
        "sample": ["--model", model_path, "--n", "4"],
        "evaluate": ["--model", model_path, "--encoder", enc_path, "--concept", concept_dir, "--steps", "5",
                     "--n", "4", "--set", "eval.ddim_steps=10"],
        "sweep": ["--model", model_path, "--encoder", enc_path, "--concept", concept_dir, "--sizes", "1,2",
                  "--steps", "5", "--n", "4", "--set", "eval.ddim_steps=10"],
        "ddim-edit": ["--model", model_path, "--image", tmp_path / "img.png", "--src", "a photo of a circle",
                      "--tgt", "a photo of a circle on a sky background", "--steps", "20"],
    }
    differs = []
    for name, args in commands.items():
        outs = []
        for k in range(2):
            # separate caches so the second run recomputes instead of reading the first run's artifacts
            monkeypatch.setenv(CACHE_ENV, str(tmp_path / f"cache-{name}-{k}"))
            argv = [name, *map(str, args), "--out", str(tmp_path / f"{name}-{k}")]
            assert cli.dispatch(argv) == 0, name
            d = tmp_path / f"{name}-{k}"
            outs.append({p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(d.rglob("*"))
                         if p.is_file() and p.name != "timings.json"})
        if outs[0] != outs[1]:
            differs.append(name)
    pw = tmp_path / "invert-0" / "pseudoword.json"
    outs = []
    for k in range(2):
        argv = ["pivotal-tune", "--model", str(model_path), "--encoder", str(enc_path), "--pseudoword", str(pw),
                "--concept", str(concept_dir), "--steps", "5", "--n", "4", "--set", "eval.ddim_steps=10",
                "--out", str(tmp_path / f"pt-{k}")]
        assert cli.dispatch(argv) == 0
        d = tmp_path / f"pt-{k}"
        outs.append({p.name: p.read_bytes() for p in sorted(d.iterdir())})
    if outs[0] != outs[1]:
        differs.append("pivotal-tune")
    ok = not differs
    record(10, "determinism", ok, f"{len(commands) + 1} subcommands re-run byte-identical "
                                  f"(reports, latents, figures); {time.perf_counter() - t0:.0f} s"
           if ok else f"outputs differ for {differs}")
    assert ok


def test_ac11_bipartite_fixed_point(env):
    model = env["model"]
    z0 = model.codec.encode(env["pool"].images[:8])
    src = "a photo of a circle"
    tgt = "a photo of a circle on a sky background"
    vs_recon, vs_input, moved = {}, {}, {}
    for s in (1.0, 2.0, 5.0):
        g = GuidanceConfig(s)
        same = bipartite_edit_latent(model, z0, src, src, g)
        x_T = model.invert_latents(z0, [src] * len(z0), g, 50)
        recon = diffusion.ddim_sample_loop(model.guided_eps_fn([src] * len(z0), g), x_T, model.schedule, 50)
        vs_recon[s] = float(np.mean((same - recon) ** 2))
        vs_input[s] = float(np.mean((same - z0) ** 2))
        moved[s] = float(np.mean((bipartite_edit_latent(model, z0, src, tgt, g) - same) ** 2))
    ok = all(v < 1e-3 for v in vs_recon.values()) and all(np.isfinite(list(moved.values())))
    record(11, "bipartite edit fixed point", ok,
           "src==tgt vs DDIM reconstruction MSE " + ", ".join(f"s={s:g} {v:.1e}" for s, v in vs_recon.items())
           + "; vs input latent " + ", ".join(f"s={s:g} {v:.1e}" for s, v in vs_input.items())
           + "; edit shift " + ", ".join(f"s={s:g} {v:.3f}" for s, v in moved.items()))
    assert ok


def test_ac12_pivotal_tuning(env):
    model, enc = env["model"], env["enc"]
    ecfg = EvalConfig(prompts=())
    pre, post, unchanged = [], [], True
    for res, rep in runs(env, "base"):
        pw = res.pseudo_word
        before = pw.vectors.tobytes()
        tuned = pivotal_tune(model, pw, env["concept"], PivotalConfig(seed=pw.seed))
        unchanged &= pw.vectors.tobytes() == before
        pre.append(rep.reconstruction("base"))
        post.append(evaluate_pseudoword(tuned, enc, pw, env["concept"], ecfg, "post").reconstruction("post"))
    ok = median(post) >= median(pre) and unchanged
    record(12, "pivotal tuning direction", ok,
           f"recon pre {median(pre):.4f} post {median(post):.4f} (per seed "
           + ", ".join(f"{a:.4f}->{b:.4f}" for a, b in zip(pre, post)) + f"); vectors unchanged {unchanged}")
    assert ok
