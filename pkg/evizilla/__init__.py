# ========================================
# File: evizilla/__init__.py
# ========================================
from .config import TrainConfig, load_config
from .data import DatasetBundle, SbmSpec, generate_sbm, inject_ood_noise, load_citation_raw, load_generic
from .errors import (
    DogmaticFusionError,
    DomainError,
    EvizillaError,
    InputError,
    ParseError,
    TrainingError,
)
from .evidence_model import ModelParams, forward_evidence, fuse_forward, load_checkpoint, save_checkpoint
from .graph_core import FeatureMatrix, SparseAdjacency, normalize_adjacency, propagate
from .subjective_logic import DirichletParams, Evidence, Opinion
from .training import evaluate, grid_search, train

__all__ = [
    "DatasetBundle",
    "DirichletParams",
    "DogmaticFusionError",
    "DomainError",
    "Evidence",
    "EvizillaError",
    "FeatureMatrix",
    "InputError",
    "ModelParams",
    "Opinion",
    "ParseError",
    "SbmSpec",
    "SparseAdjacency",
    "TrainConfig",
    "TrainingError",
    "evaluate",
    "forward_evidence",
    "fuse_forward",
    "generate_sbm",
    "grid_search",
    "inject_ood_noise",
    "load_checkpoint",
    "load_citation_raw",
    "load_config",
    "load_generic",
    "normalize_adjacency",
    "propagate",
    "save_checkpoint",
    "train",
]
