"""Hierarchical transformer descriptors for point-cloud place recognition."""

from .descriptor import HiTPRConfig, ModelParams, extract_descriptor, init_model, param_count, tiny_config
from .harness import evaluate, gen_synthetic, load_catalog, train

__all__ = [
    "HiTPRConfig",
    "ModelParams",
    "evaluate",
    "extract_descriptor",
    "gen_synthetic",
    "init_model",
    "load_catalog",
    "param_count",
    "tiny_config",
    "train",
]
