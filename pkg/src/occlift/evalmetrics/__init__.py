"""Pose error metrics and the ablation harness."""
from .ablation import AblationSpec, parse_dropout, run_ablation, train_and_evaluate
from .metrics import (MetricReport, evaluate, mpjpe, nmpjpe, pck3d, pmpjpe, predict_tracks,
                      report, similarity_align)

__all__ = ["AblationSpec", "MetricReport", "evaluate", "mpjpe", "nmpjpe", "parse_dropout",
           "pck3d", "pmpjpe", "predict_tracks", "report", "run_ablation", "similarity_align",
           "train_and_evaluate"]
