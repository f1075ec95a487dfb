"""Toy textual-inversion laboratory.

A NumPy autodiff engine, a tiny latent diffusion model pretrained on procedural
shapes, pseudo-word optimization against the frozen model, and a dual-encoder
evaluation of reconstruction vs. editability.
"""

from .assets import corpus_assets, dual_encoder, pretrained_model
from .autograd import Tensor, backward, no_grad
from .data import ConceptSet, Corpus, generate_corpus, load_concept_set
from .diffusion import GuidanceConfig, NoiseSchedule, make_schedule
from .inversion import InversionConfig, PivotalConfig, bipartite_edit, pivotal_tune, textual_invert
from .model import FrozenModel, ModelConfig
from .text import PseudoWord

__version__ = "0.1.0"

__all__ = [
    "corpus_assets", "dual_encoder", "pretrained_model",
    "Tensor", "backward", "no_grad", "ConceptSet", "Corpus", "generate_corpus", "load_concept_set",
    "GuidanceConfig", "NoiseSchedule", "make_schedule", "InversionConfig", "PivotalConfig", "bipartite_edit",
    "pivotal_tune", "textual_invert", "FrozenModel", "ModelConfig", "PseudoWord",
]
