"""Learned image degradation with an adaptive bank of anisotropic Gaussian blurs."""
from .degnet import DegradationModel, NetConfig, load_model, save_model
from .gausskernel import BankSpec, KernelBank, build_bank, covariance, discretize, rescale_bank
from .trainpipe import SyntheticSpec, TrainConfig, evaluate_l1, synth_pairs, train

__all__ = [
    "BankSpec", "DegradationModel", "KernelBank", "NetConfig", "SyntheticSpec", "TrainConfig",
    "build_bank", "covariance", "discretize", "evaluate_l1", "load_model", "rescale_bank",
    "save_model", "synth_pairs", "train",
]
__version__ = "0.1.0"
