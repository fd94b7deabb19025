"""Synthetic temporal causal discovery: lagged graphs, TSCM simulation, corpora,
baseline scorers, evaluation statistics and a small correlation-feature model."""

from .baselines import BootstrapConfig, ScoreKind, ScoreTensor, bootstrap_probabilities, corr_scorer, var_granger_scorer
from .corpus import CorpusSpec, SeriesInstance, build_corpus, example_instance, minmax_normalize, pad_instance, unpad
from .graph import GraphConfig, LaggedGraph, sample_er_graph, summary_graph
from .model import ArchConfig, LossConfig, ToyPredictor, TrainConfig, composite_loss, param_count, predict, train
from .stats import EvalReport, auc, bonferroni, lagged_crosscorr, normalize_cc, wilcoxon_signed_rank
from .tscm import Kind, MechanismPolicy, SimConfig, Tscm, sample_tscm, simulate, stability_screen

__version__ = "0.1.0"

__all__ = [
    "ArchConfig", "BootstrapConfig", "CorpusSpec", "EvalReport", "GraphConfig", "Kind", "LaggedGraph",
    "LossConfig", "MechanismPolicy", "ScoreKind", "ScoreTensor", "SeriesInstance", "SimConfig",
    "ToyPredictor", "TrainConfig", "Tscm", "auc", "bonferroni", "bootstrap_probabilities", "build_corpus",
    "composite_loss", "corr_scorer", "example_instance", "lagged_crosscorr", "minmax_normalize",
    "normalize_cc", "pad_instance", "param_count", "predict", "sample_er_graph", "sample_tscm", "simulate",
    "stability_screen", "summary_graph", "train", "unpad", "var_granger_scorer", "wilcoxon_signed_rank",
]
