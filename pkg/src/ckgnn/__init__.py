"""Graph neural networks with learned composite kernels, on numpy."""
from .autodiff import Tape, Tensor, backward, grad_check
from .data import DatasetBundle, gen_sbm, load_dataset, save_dataset
from .graph import Graph, SparseMatrix, check_psd_decomposition, normalized_adjacency
from .kernel import KernelModel, mmd_squared
from .models import MODEL_KINDS, build_model
from .train import TrainConfig, fit, train

__all__ = [
    "Tape", "Tensor", "backward", "grad_check",
    "DatasetBundle", "gen_sbm", "load_dataset", "save_dataset",
    "Graph", "SparseMatrix", "check_psd_decomposition", "normalized_adjacency",
    "KernelModel", "mmd_squared", "MODEL_KINDS", "build_model",
    "TrainConfig", "fit", "train",
]
