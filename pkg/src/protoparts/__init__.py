"""Prototypical-part image classification on a from-scratch numpy autodiff engine."""
from .backbone import BackboneConfig, build_backbone, receptive_field
from .baseline import BaselineNet, baseline_train
from .checkpoint import load_checkpoint, save_checkpoint
from .data import CLASS_NAMES, DatasetManifest, NormalizationStats, build_dataset, load_dataset, synth_dataset
from .embedding import EmbeddingConfig, activation_vectors, embed, knn_purity
from .explain import activation_heatmap, descriptor_profile, explain
from .metrics import MetricsReport, weighted_metrics
from .prototypes import ProtoPNet, prototype_diversity
from .training import TrainConfig, fit, push_prototypes

__all__ = [
    "BackboneConfig", "build_backbone", "receptive_field", "BaselineNet", "baseline_train",
    "load_checkpoint", "save_checkpoint", "CLASS_NAMES", "DatasetManifest", "NormalizationStats",
    "build_dataset", "load_dataset", "synth_dataset", "EmbeddingConfig", "activation_vectors", "embed",
    "knn_purity", "activation_heatmap", "descriptor_profile", "explain", "MetricsReport",
    "weighted_metrics", "ProtoPNet", "prototype_diversity", "TrainConfig", "fit", "push_prototypes",
]
