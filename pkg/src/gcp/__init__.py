"""Graph of concept predictors with graph-aware acquisition and counterfactual module retraining."""
from .acquisition import AcquisitionConfig, SelectionResult, acquire, consensus_select, score_pool
from .checkpoint import checkpoint_load, checkpoint_save
from .counterfactual import delta_scores, rerun, retrain_submodules, select_retrain_set
from .data import AnnotatedSample, ConceptPair, DatasetBundle, Sample
from .graph import ConceptGraph, build_graph, load_graph
from .model import GcpModel, TrainConfig, fit, fit_arrays, forward, marginal_label_distribution
from .oracle import RemoteAnnotator, RemoteConfig, SyntheticTask, SyntheticTeacher, load_task, synth_generate
from .pipeline import LoopConfig, RoundRecord, emit_metrics, evaluate, run_active_loop

__version__ = "0.1.0"

__all__ = [
    "AcquisitionConfig",
    "AnnotatedSample",
    "ConceptGraph",
    "ConceptPair",
    "DatasetBundle",
    "GcpModel",
    "LoopConfig",
    "RemoteAnnotator",
    "RemoteConfig",
    "RoundRecord",
    "Sample",
    "SelectionResult",
    "SyntheticTask",
    "SyntheticTeacher",
    "TrainConfig",
    "acquire",
    "build_graph",
    "checkpoint_load",
    "checkpoint_save",
    "consensus_select",
    "delta_scores",
    "emit_metrics",
    "evaluate",
    "fit",
    "fit_arrays",
    "forward",
    "load_graph",
    "load_task",
    "marginal_label_distribution",
    "rerun",
    "retrain_submodules",
    "run_active_loop",
    "score_pool",
    "select_retrain_set",
    "synth_generate",
]
