"""``textinv`` command line: gen-data, pretrain, invert, sample, evaluate, ddim-edit, pivotal-tune, sweep.

Configuration is a flat ``key = value`` file; lines starting with ``#`` are comments. Values
are parsed as JSON when possible and as bare strings otherwise. Command-line
flags and ``--set key=value`` override the file; unknown keys are rejected.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

log = logging.getLogger("textinv")

RUNS_ENV = "TEXTINV_RUNS"
EXIT_OK, EXIT_DOMAIN, EXIT_USAGE = 0, 1, 2

# key -> (default, help)
SCHEMA: dict[str, tuple] = {
    "seed": (0, "root seed for the run"),
    "cache_dir": ("", "artifact cache (default: $TEXTINV_CACHE or ./.textinv-cache)"),
    "descriptor": ("", "coarse single-word descriptor of the concept"),
    "corpus.seed": (0, "corpus generation seed"),
    "corpus.n_pairs": (6000, "image/caption pairs"),
    "corpus.concept_images": (25, "renderings per held-out concept pool"),
    "schedule.T": (1000, "diffusion steps"),
    "schedule.beta_start": (8.5e-4, "first beta"),
    "schedule.beta_end": (1.2e-2, "last beta"),
    "pretrain.codec_steps": (4000, "codec training steps"),
    "pretrain.steps": (30000, "denoiser training steps"),
    "pretrain.batch_size": (32, "denoiser batch size"),
    "pretrain.lr": (2e-4, "denoiser learning rate"),
    "pretrain.caption_dropout": (0.1, "fraction of empty captions"),
    "pretrain.checkpoint_every": (5000, "steps between resumable checkpoints"),
    "invert.steps": (5000, "optimization steps"),
    "invert.vectors": (1, "vectors per pseudo-word (1-3)"),
    "invert.progressive": (False, "introduce vectors progressively"),
    "invert.progressive_steps": ("2000,4000", "steps at which vectors 2 and 3 appear"),
    "invert.reg_lambda": (0.0, "weight of the squared distance to the descriptor embedding"),
    "invert.per_image_tokens": (False, "train with 'S_* with S_i' prompts"),
    "invert.base_lr": (0.005, "learning rate before scaling"),
    "invert.lr_scaling": (8.0, "devices x batch multiplier"),
    "invert.batch_size": (4, "images per step"),
    "invert.template_mode": ("object", "object or style templates"),
    "invert.placeholder": ("<concept-0>", "placeholder string"),
    "sample.prompt": ("a photo of <concept-0>", "prompt to sample"),
    "sample.n": (64, "number of samples"),
    "sample.steps": (50, "DDIM steps"),
    "sample.guidance": (5.0, "classifier-free guidance scale"),
    "eval.n_samples": (64, "samples per prompt"),
    "eval.ddim_steps": (50, "DDIM steps"),
    "eval.guidance": (5.0, "guidance scale"),
    "eval.setups": ("base", "comma-separated setup names"),
    "eval.seeds": ("0", "comma-separated inversion seeds"),
    "sweep.sizes": ("1,3,5,10,25", "training-set sizes"),
    "tune.lr": (1e-5, "pivotal tuning learning rate"),
    "tune.steps": (500, "pivotal tuning steps"),
    "tune.batch_size": (4, "pivotal tuning batch size"),
    "edit.src": ("a photo of <concept-0>", "prompt used for inversion"),
    "edit.tgt": ("a photo of <concept-0> on a sky background", "prompt used for regeneration"),
    "edit.guidance": ("1,2,5", "comma-separated guidance scales"),
    "edit.steps": (50, "DDIM steps"),
    "edit.refine": (0, "fixed-point passes per inverted DDIM step (0 = closed form)"),
    "paths.model": ("", "model checkpoint"),
    "paths.encoder": ("", "dual-encoder checkpoint (default: cached)"),
    "paths.pseudoword": ("", "pseudo-word file"),
    "paths.concept": ("", "concept directory"),
    "paths.image": ("", "input image for ddim-edit"),
}


class UsageError(Exception):
    pass


class DomainError(Exception):
    pass


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

def _parse_value(raw: str):
    raw = raw.strip()
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        low = raw.lower()
        if low in ("true", "false"):
            return low == "true"
        return raw


def _coerce(key: str, value):
    default = SCHEMA[key][0]
    try:
        if isinstance(default, bool):
            if isinstance(value, str):
                value = _parse_value(value)
            if not isinstance(value, bool):
                raise ValueError
            return value
        if isinstance(default, int):
            if isinstance(value, float) and value.is_integer():
                value = int(value)
            if isinstance(value, str):
                value = int(value)
            if not isinstance(value, int) or isinstance(value, bool):
                raise ValueError
            return value
        if isinstance(default, float):
            return float(value)
        return str(value)
    except (TypeError, ValueError):
        raise UsageError(f"config key {key!r}: cannot use {value!r} (expected {type(default).__name__})") from None


def parse_config_text(text: str, origin: str = "<config>") -> dict:
    cfg = {}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"{origin}:{n}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in SCHEMA:
            raise UsageError(f"{origin}:{n}: unknown config key {key!r}")
        cfg[key] = _coerce(key, _parse_value(raw))
    return cfg


def resolve_config(file_path=None, overrides: dict | None = None) -> dict:
    cfg = {k: v[0] for k, v in SCHEMA.items()}
    if file_path:
        p = Path(file_path)
        if not p.exists():
            raise UsageError(f"config file not found: {p}")
        cfg.update(parse_config_text(p.read_text(), str(p)))
    for k, v in (overrides or {}).items():
        if k not in SCHEMA:
            raise UsageError(f"unknown config key {k!r}")
        cfg[k] = _coerce(k, v)
    return cfg


# where artifacts live, not what gets computed; kept out of the hash
LOCATION_KEYS = ("cache_dir",)


def config_digest(cfg: dict) -> str:
    cfg = {k: v for k, v in cfg.items() if k not in LOCATION_KEYS}
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:12]


def format_config(cfg: dict) -> str:
    return "".join(f"{k} = {json.dumps(v)}\n" for k, v in sorted(cfg.items()))


def _ints(text: str) -> list[int]:
    try:
        return [int(x) for x in str(text).split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from None


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in str(text).split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"expected comma-separated numbers, got {text!r}") from None


# ---------------------------------------------------------------------------
# shared helpers
# ---------------------------------------------------------------------------

class Run:
    """Resolved config plus the output directory every artifact is written into."""

    def __init__(self, command: str, cfg: dict, out: str | None):
        self.command = command
        self.cfg = cfg
        self.hash = config_digest({"command": command, **cfg})
        if out:
            self.dir = Path(out)
        else:
            root = Path(os.environ.get(RUNS_ENV, "runs"))
            stamp = _dt.datetime.now().strftime("%Y%m%d-%H%M%S")
            self.dir = root / f"{stamp}-{self.hash}"
        self.dir.mkdir(parents=True, exist_ok=True)
        (self.dir / "config.txt").write_text(f"# command: {command}\n# config_hash: {self.hash}\n"
                                             + format_config(cfg))
        log.info("%s: config hash %s, output %s", command, self.hash, self.dir)

    @property
    def seed(self) -> int:
        return int(self.cfg["seed"])

    @property
    def stamp(self) -> dict:
        return {"config_hash": self.hash, "seed": self.seed, "command": self.command}

    def path(self, name: str) -> Path:
        return self.dir / name

    def write_jsonl(self, name: str, records: list[dict]) -> Path:
        from .hashing import canonical_json

        p = self.path(name)
        p.write_text("".join(canonical_json({**self.stamp, **r}) + "\n" for r in records))
        return p

    def write_latents(self, name: str, latents: np.ndarray) -> Path:
        p = self.path(name)
        with open(p, "wb") as f:
            np.savez(f, latents=np.ascontiguousarray(latents, dtype="<f4"),
                     config_hash=np.array(self.hash), seed=np.array(self.seed))
        return p


def _cache(cfg: dict) -> Path:
    from .assets import default_cache_dir

    return Path(cfg["cache_dir"]) if cfg["cache_dir"] else default_cache_dir()


def _corpus_cfg(cfg: dict):
    from .assets import CorpusConfig

    return CorpusConfig(seed=cfg["corpus.seed"], n_pairs=cfg["corpus.n_pairs"],
                        concept_images=cfg["corpus.concept_images"])


def _pretrain_cfg(cfg: dict):
    from .model import ModelConfig
    from .pretrain import PretrainConfig

    mc = ModelConfig(T=cfg["schedule.T"], beta_start=cfg["schedule.beta_start"], beta_end=cfg["schedule.beta_end"])
    return PretrainConfig(seed=cfg["seed"], codec_steps=cfg["pretrain.codec_steps"], steps=cfg["pretrain.steps"],
                          batch_size=cfg["pretrain.batch_size"], lr=cfg["pretrain.lr"],
                          caption_dropout=cfg["pretrain.caption_dropout"],
                          checkpoint_every=cfg["pretrain.checkpoint_every"], model=mc)


def _inversion_cfg(cfg: dict):
    from .inversion import InversionConfig

    return InversionConfig(num_vectors=cfg["invert.vectors"], progressive=cfg["invert.progressive"],
                           progressive_steps=tuple(_ints(cfg["invert.progressive_steps"])),
                           reg_lambda=cfg["invert.reg_lambda"], per_image_tokens=cfg["invert.per_image_tokens"],
                           base_lr=cfg["invert.base_lr"], lr_scaling=cfg["invert.lr_scaling"],
                           steps=cfg["invert.steps"], batch_size=cfg["invert.batch_size"],
                           template_mode=cfg["invert.template_mode"], seed=cfg["seed"],
                           placeholder=cfg["invert.placeholder"])


def _eval_cfg(cfg: dict):
    from .evaluation import EvalConfig

    return EvalConfig(n_samples=cfg["eval.n_samples"], ddim_steps=cfg["eval.ddim_steps"],
                      guidance=cfg["eval.guidance"], seed=cfg["seed"])


def _require(cfg: dict, key: str, flag: str) -> str:
    if not cfg[key]:
        raise UsageError(f"missing {flag} (config key {key})")
    return cfg[key]


def _load_model(cfg: dict):
    from .model import FrozenModel

    return FrozenModel.load(_require(cfg, "paths.model", "--model"))


def _load_encoder(cfg: dict):
    from .assets import dual_encoder
    from .evaluation import DualEncoder

    if cfg["paths.encoder"]:
        return DualEncoder.load(cfg["paths.encoder"])
    return dual_encoder(_cache(cfg), _corpus_cfg(cfg))


def _load_concept(cfg: dict):
    from .data import load_concept_set

    return load_concept_set(_require(cfg, "paths.concept", "--concept"), cfg["descriptor"] or None)


def _load_pseudoword(cfg: dict):
    from .text import PseudoWord

    return PseudoWord.load(_require(cfg, "paths.pseudoword", "--pseudoword"))


def _bind(model, cfg: dict):
    from .inversion import bind_pseudowords

    if cfg["paths.pseudoword"]:
        return bind_pseudowords(model, _load_pseudoword(cfg))
    return None, None


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(run: Run) -> None:
    from .assets import corpus_assets
    from .data import save_concept_set
    from .reporting import emit_gallery

    train, test, concepts = corpus_assets(_cache(run.cfg), _corpus_cfg(run.cfg))
    images = np.concatenate([train.images, test.images])
    captions = train.captions + test.captions
    with open(run.path("corpus.npz"), "wb") as f:
        np.savez_compressed(f, images=images, captions=np.array(captions), seed=run.cfg["corpus.seed"],
                            config_hash=np.array(run.hash))
    run.path("captions.txt").write_text("\n".join(captions) + "\n")
    for k, c in enumerate(concepts):
        save_concept_set(c, run.path(f"concepts/concept-{k}"))
    emit_gallery(images[:64], run.path("corpus.png"), 8, 8, run.stamp)
    run.write_jsonl("gen-data.jsonl", [{"pairs": len(captions), "train": len(train), "held_out": len(test),
                                        "concepts": [c.name for c in concepts]}])


def cmd_pretrain(run: Run) -> None:
    from .assets import corpus_assets, pretrained_model, training_curves
    from .diffusion import GuidanceConfig
    from .pretrain import codec_report
    from .reporting import emit_gallery, plot_curves

    cache = _cache(run.cfg)
    model = pretrained_model(cache, _corpus_cfg(run.cfg), _pretrain_cfg(run.cfg))
    model.save(run.path("model.ckpt"), extra_meta=run.stamp)
    curves = training_curves(cache, _corpus_cfg(run.cfg), _pretrain_cfg(run.cfg)) or {}
    if curves:
        plot_curves(curves, run.path("curves.png"))
    _, test, _ = corpus_assets(cache, _corpus_cfg(run.cfg))
    rep = codec_report(model, test.float_images())
    prompts = [c for c in test.captions[:16]]
    imgs = model.sample_images(prompts, GuidanceConfig(5.0), 50, seed=run.seed)
    emit_gallery(imgs, run.path("samples.png"), 4, 4, run.stamp)
    run.path("samples.txt").write_text("\n".join(prompts) + "\n")
    den = curves.get("denoiser", [])
    run.write_jsonl("pretrain.jsonl", [{
        "codec_psnr_held_out": round(rep["psnr"], 6),
        "denoiser_loss_first_500": float(np.mean(den[:500])) if den else None,
        "denoiser_loss_last_500": float(np.mean(den[-500:])) if den else None,
        "checksums": model.component_checksums()}])


def cmd_invert(run: Run) -> None:
    from .inversion import textual_invert
    from .reporting import plot_curves

    model = _load_model(run.cfg)
    concept = _load_concept(run.cfg)
    icfg = _inversion_cfg(run.cfg)
    res = textual_invert(model, concept, icfg, log_every=500)
    res.pseudo_word.meta.update(run.stamp)
    res.pseudo_word.save(run.path("pseudoword.json"))
    plot_curves({"inversion loss": res.losses}, run.path("loss.png"))
    chunk = max(1, len(res.losses) // 20)
    rows = [{"step_end": min(i + chunk, len(res.losses)), "mean_loss": float(np.mean(res.losses[i:i + chunk]))}
            for i in range(0, len(res.losses), chunk)]
    rows.append({"descriptor_distance": res.descriptor_distance(model), "trainable_vectors": res.trainable_vectors,
                 "vectors": res.pseudo_word.num_vectors, "inversion_config_hash": icfg.hash()})
    run.write_jsonl("invert.jsonl", rows)


def cmd_sample(run: Run) -> None:
    from .diffusion import GuidanceConfig
    from .reporting import emit_gallery

    model = _load_model(run.cfg)
    table, vocab = _bind(model, run.cfg)
    n, prompt = run.cfg["sample.n"], run.cfg["sample.prompt"]
    if n < 1:
        raise UsageError("--n must be >= 1")
    z = model.sample_latents([prompt] * n, GuidanceConfig(run.cfg["sample.guidance"]), run.cfg["sample.steps"],
                             seed=run.seed, table=table, vocab=vocab)
    run.write_latents("latents.npz", z)
    emit_gallery(model.codec.decode(z), run.path("gallery.png"), metadata=run.stamp)
    run.write_jsonl("sample.jsonl", [{"prompt": prompt, "n": n, "steps": run.cfg["sample.steps"],
                                      "guidance": run.cfg["sample.guidance"],
                                      "latents_sha256": hashlib.sha256(
                                          np.ascontiguousarray(z, "<f4").tobytes()).hexdigest()}])


def _write_report(run: Run, rep, name: str = "report") -> None:
    from .reporting import plot_tradeoff

    rep.provenance.update(run.stamp)
    rep.write(run.path(f"{name}.jsonl"))
    run.path(f"{name}-tradeoff.csv").write_text(rep.tradeoff_csv())
    plot_tradeoff(rep.summary(), run.path(f"{name}-tradeoff.png"))
    run.path("timings.json").write_text(json.dumps(rep.timings, indent=1, sort_keys=True) + "\n")
    for row in rep.summary():
        print(f"{row['setup']:>14s}  recon {row['reconstruction']:.4f}  edit {row['editability']:.4f}")


def cmd_evaluate(run: Run) -> None:
    import time

    from .evaluation import Benchmark, EvalReport, evaluate_pseudoword

    model = _load_model(run.cfg)
    enc = _load_encoder(run.cfg)
    concept = _load_concept(run.cfg)
    ecfg = _eval_cfg(run.cfg)
    bench = Benchmark(model, enc, _cache(run.cfg) / "bench", ecfg)
    rep = EvalReport(provenance={"concept": concept.name, "images": len(concept), "eval": vars(ecfg)})
    t0 = time.perf_counter()
    if run.cfg["paths.pseudoword"]:
        rep.extend(evaluate_pseudoword(model, enc, _load_pseudoword(run.cfg), concept, ecfg, "pseudoword"))
    else:
        for setup in [s.strip() for s in run.cfg["eval.setups"].split(",") if s.strip()]:
            for seed in _ints(run.cfg["eval.seeds"]):
                _, r = bench.run(setup, concept, seed, steps=run.cfg["invert.steps"])
                for rec in r.records:
                    rec["inversion_seed"] = seed
                rep.extend(r)
    rep.extend(bench.baselines(concept))
    rep.timings["evaluate_seconds"] = time.perf_counter() - t0
    _write_report(run, rep)


def cmd_sweep(run: Run) -> None:
    import time

    from .evaluation import Benchmark, EvalReport, setsize_sweep
    from .reporting import plot_setsize

    model = _load_model(run.cfg)
    enc = _load_encoder(run.cfg)
    pool = _load_concept(run.cfg)
    sizes = _ints(run.cfg["sweep.sizes"])
    bench = Benchmark(model, enc, _cache(run.cfg) / "bench", _eval_cfg(run.cfg))
    t0 = time.perf_counter()
    rep = EvalReport(provenance={"concept": pool.name, "sizes": sizes})
    for seed in _ints(run.cfg["eval.seeds"]):
        r = setsize_sweep(bench, pool, sizes, seed, steps=run.cfg["invert.steps"])
        for rec in r.records:
            rec["inversion_seed"] = seed
        rep.extend(r)
    rep.timings["sweep_seconds"] = time.perf_counter() - t0
    plot_setsize(sizes, [rep.reconstruction(f"size-{n}") for n in sizes],
                 [rep.editability(f"size-{n}") for n in sizes], run.path("setsize.png"))
    _write_report(run, rep)


def cmd_ddim_edit(run: Run) -> None:
    from .data import load_png
    from .diffusion import GuidanceConfig
    from .inversion import bipartite_edit_latent
    from .reporting import emit_gallery

    model = _load_model(run.cfg)
    table, vocab = _bind(model, run.cfg)
    image = load_png(_require(run.cfg, "paths.image", "--image"))
    z0 = model.codec.encode(image)
    src, tgt, steps = run.cfg["edit.src"], run.cfg["edit.tgt"], run.cfg["edit.steps"]
    refine = run.cfg["edit.refine"]
    tiles, rows, lat = [image], [], {}
    for s in _floats(run.cfg["edit.guidance"]):
        g = GuidanceConfig(s)
        recon = bipartite_edit_latent(model, z0, src, src, g, steps, table, vocab, refine)
        edited = bipartite_edit_latent(model, z0, src, tgt, g, steps, table, vocab, refine)
        lat[f"recon_s{s:g}"], lat[f"edit_s{s:g}"] = recon, edited
        tiles += [model.codec.decode(recon), model.codec.decode(edited)]
        rows.append({"guidance": s, "recon_latent_mse": float(np.mean((recon - z0) ** 2)),
                     "edit_vs_recon_latent_mse": float(np.mean((edited - recon) ** 2))})
    with open(run.path("latents.npz"), "wb") as f:
        np.savez(f, z0=z0, config_hash=np.array(run.hash), seed=np.array(run.seed), **lat)
    emit_gallery(tiles, run.path("edit.png"), rows=1, metadata=run.stamp)
    run.write_jsonl("edit.jsonl", [{"src": src, "tgt": tgt, "steps": steps, "refine": refine, **r} for r in rows])


def cmd_pivotal_tune(run: Run) -> None:
    from .evaluation import EvalConfig, evaluate_pseudoword
    from .inversion import PivotalConfig, pivotal_tune

    model = _load_model(run.cfg)
    pw = _load_pseudoword(run.cfg)
    concept = _load_concept(run.cfg)
    tuned = pivotal_tune(model, pw, concept, PivotalConfig(run.cfg["tune.lr"], run.cfg["tune.steps"],
                                                           run.cfg["tune.batch_size"], run.seed))
    tuned.save(run.path("model.ckpt"), extra_meta=run.stamp)
    enc = _load_encoder(run.cfg)
    ecfg = EvalConfig(n_samples=run.cfg["eval.n_samples"], ddim_steps=run.cfg["eval.ddim_steps"],
                      guidance=run.cfg["eval.guidance"], prompts=(), seed=run.seed)
    pre = evaluate_pseudoword(model, enc, pw, concept, ecfg, "pre-tune").reconstruction("pre-tune")
    post = evaluate_pseudoword(tuned, enc, pw, concept, ecfg, "post-tune").reconstruction("post-tune")
    run.write_jsonl("pivotal-tune.jsonl", [{"reconstruction_pre": pre, "reconstruction_post": post,
                                            "unet_checksum_before": model.unet.checksum(),
                                            "unet_checksum_after": tuned.unet.checksum()}])
    print(f"reconstruction pre {pre:.4f} post {post:.4f}")


COMMANDS = {
    "gen-data": (cmd_gen_data, "generate the synthetic corpus and held-out concept pools"),
    "pretrain": (cmd_pretrain, "pretrain codec, denoiser and text encoder (cached by config)"),
    "invert": (cmd_invert, "learn a pseudo-word for a concept directory"),
    "sample": (cmd_sample, "DDIM-sample a prompt, optionally with a pseudo-word"),
    "evaluate": (cmd_evaluate, "reconstruction / editability report with reference baselines"),
    "ddim-edit": (cmd_ddim_edit, "bipartite DDIM inversion edit of one image"),
    "pivotal-tune": (cmd_pivotal_tune, "fine-tune the denoiser around a fixed pseudo-word"),
    "sweep": (cmd_sweep, "training-set-size sweep"),
}

# flag -> (config key, argparse kwargs); which subcommands get which flags
FLAGS = {
    "--model": ("paths.model", {}),
    "--encoder": ("paths.encoder", {}),
    "--pseudoword": ("paths.pseudoword", {}),
    "--concept": ("paths.concept", {}),
    "--image": ("paths.image", {}),
    "--descriptor": ("descriptor", {}),
    "--steps": (None, {"type": int}),
    "--vectors": ("invert.vectors", {"type": int}),
    "--progressive": ("invert.progressive", {"action": "store_const", "const": True}),
    "--reg-lambda": ("invert.reg_lambda", {"type": float}),
    "--per-image-tokens": ("invert.per_image_tokens", {"action": "store_const", "const": True}),
    "--lr": (None, {"type": float}),
    "--template-mode": ("invert.template_mode", {"choices": ["object", "style"]}),
    "--prompt": ("sample.prompt", {}),
    "--n": (None, {"type": int}),
    "--guidance": (None, {}),
    "--setups": ("eval.setups", {}),
    "--seeds": ("eval.seeds", {}),
    "--sizes": ("sweep.sizes", {}),
    "--src": ("edit.src", {}),
    "--tgt": ("edit.tgt", {}),
    "--codec-steps": ("pretrain.codec_steps", {"type": int}),
    "--n-pairs": ("corpus.n_pairs", {"type": int}),
}
COMMAND_FLAGS = {
    "gen-data": ["--n-pairs"],
    "pretrain": ["--steps", "--codec-steps", "--n-pairs"],
    "invert": ["--model", "--concept", "--descriptor", "--steps", "--vectors", "--progressive", "--reg-lambda",
               "--per-image-tokens", "--lr", "--template-mode"],
    "sample": ["--model", "--pseudoword", "--prompt", "--steps", "--n", "--guidance"],
    "evaluate": ["--model", "--encoder", "--pseudoword", "--concept", "--descriptor", "--setups", "--seeds",
                 "--steps", "--n", "--guidance"],
    "ddim-edit": ["--model", "--pseudoword", "--image", "--src", "--tgt", "--steps", "--guidance"],
    "pivotal-tune": ["--model", "--encoder", "--pseudoword", "--concept", "--descriptor", "--steps", "--lr", "--n"],
    "sweep": ["--model", "--encoder", "--concept", "--descriptor", "--sizes", "--seeds", "--steps", "--n"],
}
# flags whose config key depends on the subcommand
CONTEXT_KEYS = {
    ("pretrain", "--steps"): "pretrain.steps",
    ("invert", "--steps"): "invert.steps",
    ("sample", "--steps"): "sample.steps",
    ("evaluate", "--steps"): "invert.steps",
    ("sweep", "--steps"): "invert.steps",
    ("ddim-edit", "--steps"): "edit.steps",
    ("pivotal-tune", "--steps"): "tune.steps",
    ("invert", "--lr"): "invert.base_lr",
    ("pivotal-tune", "--lr"): "tune.lr",
    ("sample", "--n"): "sample.n",
    ("evaluate", "--n"): "eval.n_samples",
    ("sweep", "--n"): "eval.n_samples",
    ("pivotal-tune", "--n"): "eval.n_samples",
    ("sample", "--guidance"): "sample.guidance",
    ("evaluate", "--guidance"): "eval.guidance",
    ("ddim-edit", "--guidance"): "edit.guidance",
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="textinv", description="Toy textual-inversion laboratory.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
        p.add_argument("--out", help="output directory (default: $TEXTINV_RUNS/<time>-<hash> or runs/...)")
        p.add_argument("--seed", type=int)
        for flag in COMMAND_FLAGS[name]:
            key, kwargs = FLAGS[flag]
            key = CONTEXT_KEYS.get((name, flag), key)
            p.add_argument(flag, dest="opt_" + flag[2:].replace("-", "_"), metavar=None if "action" in kwargs
                           else "VALUE", help=f"sets {key}", **kwargs)
    return parser


def _overrides(args) -> dict:
    over = {}
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        over[k.strip()] = _parse_value(v)
    for flag in COMMAND_FLAGS[args.command]:
        val = getattr(args, "opt_" + flag[2:].replace("-", "_"))
        if val is not None:
            over[CONTEXT_KEYS.get((args.command, flag), FLAGS[flag][0])] = val
    if args.seed is not None:
        over["seed"] = args.seed
    return over


def dispatch(argv=None) -> int:
    """Run one subcommand; returns 0 (ok), 1 (domain error) or 2 (usage error)."""
    from .autograd import NonFiniteError, ShapeError
    from .checkpoint import CheckpointError
    from .data import DataError
    from .diffusion import ScheduleError
    from .evaluation import EvaluationError
    from .inversion import FrozenModelMutated, InversionError

    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parser.parse_args(argv)
        if not args.command:
            raise UsageError(parser.format_help())
        cfg = resolve_config(args.config, _overrides(args))
    except UsageError as exc:
        print(str(exc).rstrip(), file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    if args.verbose and not logging.getLogger().handlers:
        logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    try:
        run = Run(args.command, cfg, args.out)
        COMMANDS[args.command][0](run)
    except UsageError as exc:
        print(f"textinv {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DomainError, DataError, InversionError, FrozenModelMutated, CheckpointError, EvaluationError,
            ScheduleError, ShapeError, NonFiniteError, FileNotFoundError, KeyError, ValueError) as exc:
        print(f"textinv {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_DOMAIN
    print(run.dir)
    return EXIT_OK


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
