"""Sparse autoencoders with learnable B-spline activations (KAN-SAE) and a ReLU baseline."""

from .data import ActivationStore, GridMeta, SynthConfig, load_checkpoint, read_activations, save_checkpoint, \
    synth_generate, write_activations
from .model import SaeParams, backward, decode, encode, forward, grad_check, init_params, loss
from .spline import KnotVector, SplineBank, alive_set, basis_deriv, basis_eval, build_knots, fit_tau, shape_profile
from .train import TrainConfig

__version__ = "0.1.0"
