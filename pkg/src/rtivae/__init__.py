"""Mutual-information-reduced VAE with a reordered, gated Transformer encoder.

Modules
-------
diffcore       reverse-mode automatic differentiation on numpy arrays
distributions  Gaussian / categorical / mixture KL terms
blocks         attention, gated Transformer blocks, recurrent baseline
model          encoder, decoder, loss decomposition, checkpoints
synthgen       synthetic styled-sequence corpus
metrics        cluster validity indices, pitch/pause measurement, probes
training       optimiser, schedule, training loop
cli            command-line entry point
"""

from .diffcore import Tensor, backward, grad_check, no_grad
from .model import ModelConfig, forward_train, init_params, load_checkpoint, save_checkpoint
from .synthgen import DatasetConfig, generate_dataset, read_dataset, write_dataset
from .training import TrainConfig, train

__version__ = "0.1.0"

__all__ = ["Tensor", "backward", "grad_check", "no_grad", "ModelConfig", "forward_train",
           "init_params", "load_checkpoint", "save_checkpoint", "DatasetConfig",
           "generate_dataset", "read_dataset", "write_dataset", "TrainConfig", "train"]
