"""Graph attention networks with margin constraints on attention scores."""

from .attention import LayerConfig, network_forward
from .constraints import MarginConfig
from .graph import Dataset, DatasetError, Graph, PerturbationSpec, generate_sbm, load_dataset, perturb_edges
from .train import (Metrics, Model, TrainConfig, cgat_config, evaluate, gat_config, load_checkpoint,
                    multi_run, save_checkpoint, train)

__version__ = "0.1.0"

__all__ = [
    "Dataset", "DatasetError", "Graph", "LayerConfig", "MarginConfig", "Metrics", "Model",
    "PerturbationSpec", "TrainConfig", "cgat_config", "evaluate", "gat_config", "generate_sbm",
    "load_checkpoint", "load_dataset", "multi_run", "network_forward", "perturb_edges",
    "save_checkpoint", "train",
]
