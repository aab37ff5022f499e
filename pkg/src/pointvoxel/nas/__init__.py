"""Architecture search: search space, weight-sharing supernet, resource
models (MACs and learned latency), and evolutionary search."""

from .resource import (LatencyPredictor, MacsEstimator, ResourceConstraint,
                       estimate_macs, fit_latency_predictor, load_pairs,
                       make_constraint_fn, save_pairs)
from .search import SearchResult, evolutionary_search
from .space import (ArchSpec, SearchSpace, StageSpec, canonical, decode,
                    default_channel_choices, depth_shrink_schedule, encode,
                    enumerate_archs, max_arch, min_arch, model_config_for,
                    sample_uniform, validate_arch)
from .supernet import SuperNet, recalibrate_bn, slice_weights, supernet_train_step

__all__ = [
    "ArchSpec", "LatencyPredictor", "MacsEstimator", "ResourceConstraint",
    "SearchResult", "SearchSpace", "StageSpec", "SuperNet", "canonical",
    "decode", "default_channel_choices", "depth_shrink_schedule", "encode",
    "enumerate_archs", "estimate_macs", "evolutionary_search",
    "fit_latency_predictor", "load_pairs", "make_constraint_fn", "max_arch",
    "min_arch", "model_config_for", "recalibrate_bn", "sample_uniform",
    "save_pairs", "slice_weights", "supernet_train_step", "validate_arch",
]
