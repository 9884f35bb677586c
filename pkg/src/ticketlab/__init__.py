"""Desk-scale lottery-ticket laboratory.

Train small dense networks, prune them by global weight magnitude, retrain
the surviving subnetworks from their original initialization, and probe how
architecture and training-recipe tweaks change what sparse retraining can
reach. Everything runs on CPU with numpy.
"""

__version__ = "0.1.0"

from .archive import load_archive, save_archive
from .autograd import Tensor, Graph, forward_eval, backward_grad, grad_check
from .config import echo_config, parse_config, parse_config_text
from .datasets import load_dataset, split_train_val
from .diagnostics import (
    CurvatureProbe,
    LandscapeGrid,
    hvp,
    landscape,
    power_iteration,
    probe_batches,
    top_eigenvalue,
)
from .models import (
    ArchSpec,
    activation_sparsity,
    build_graph,
    build_model,
    inject_skips,
    make_arch,
)
from .pruning import (
    Mask,
    PruneSchedule,
    apply_mask,
    full_mask,
    global_magnitude_prune,
    imp_schedule,
)
from .recipe import ce_loss, kd_loss, smooth_labels
from .report import (
    build_report,
    load_checkpoint,
    load_mask,
    load_report,
    save_checkpoint,
    save_mask,
    save_report,
    write_sparsity_csv,
)
from .training import (
    evaluate,
    find_masks,
    model_logits,
    retrain_level,
    run_pipeline,
    train_dense,
)

__all__ = [
    "__version__",
    "Tensor", "Graph", "forward_eval", "backward_grad", "grad_check",
    "parse_config", "parse_config_text", "echo_config",
    "load_dataset", "split_train_val",
    "ArchSpec", "make_arch", "build_model", "build_graph", "inject_skips",
    "activation_sparsity",
    "Mask", "PruneSchedule", "imp_schedule", "global_magnitude_prune",
    "full_mask", "apply_mask",
    "smooth_labels", "ce_loss", "kd_loss",
    "train_dense", "find_masks", "retrain_level", "run_pipeline",
    "model_logits", "evaluate",
    "CurvatureProbe", "LandscapeGrid", "probe_batches", "hvp",
    "power_iteration", "top_eigenvalue", "landscape",
    "build_report", "save_report", "load_report", "write_sparsity_csv",
    "save_checkpoint", "load_checkpoint", "save_mask", "load_mask",
    "save_archive", "load_archive",
]
