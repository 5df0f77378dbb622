"""Staged categorical graph diffusion for single-step retrosynthesis."""

from .chem import AtomVocab, BondVocab, MolGraph, Tag, is_valid, splice, strip_dummies
from .canon import CanonicalForm, canonical_form
from .smiles import SmilesError, parse_molecule, write_molecule
from .diffusion import NoiseSchedule, Prior, TransitionKernel, build_kernel
from .pipeline import SampleTrace, StageConfig, StageOrder, post_adapt, sample, train
from .model import ArchConfig, DenoiserParams, init_params

__version__ = "0.1.0"

__all__ = [
    "AtomVocab", "BondVocab", "MolGraph", "Tag", "is_valid", "splice",
    "strip_dummies", "CanonicalForm", "canonical_form", "SmilesError",
    "parse_molecule", "write_molecule", "NoiseSchedule", "Prior",
    "TransitionKernel", "build_kernel", "SampleTrace", "StageConfig",
    "StageOrder", "post_adapt", "sample", "train", "ArchConfig",
    "DenoiserParams", "init_params", "__version__",
]
