"""Continual low-rank adaptation in a shared, evolving subspace.

Adapters for many tasks are compressed into one set of principal factors per
layer plus small per-task coefficients. New tasks are learned by briefly
unfreezing a few factor columns and then merged back without revisiting old
data.
"""
from .adapt import TrainConfig, TemporaryFactors, fit_baseline_lora, spawn_temporary, train_coefficients_only, train_temporary
from .analytics import EvalGrid, forgetting_and_bwt, savings
from .config import RunConfig, load_run_config, parse_run_config
from .estimators import ShareCompressor, ShareRegressor
from .formats import export_adapter, import_adapter, load_state, save_state
from .merge import MergeReport, compress_adapters, merge
from .model import (
    HyperParams,
    LayerShape,
    LoraAdapter,
    MergeEvent,
    ShareFactors,
    ShareState,
    TaskCoefficients,
    forward_delta,
    reconstruct_adapter,
)
from .sim import StreamConfig, gen_stream, run_continual, run_fig1_experiment, theorem1_probe
from .subspace import init_coefficients, init_factors, project_known_adapters

__version__ = "0.1.0"
