from project.numerics import functional
from project.numerics.module import MLP, Linear, Module, make_rng, parameter, uniform_init
from project.numerics.optim import SGD, Adam, Optimizer, make_optimizer
from project.numerics.serialization import load_tensors, save_tensors
from project.numerics.tensor import Tape, Tensor, backward, no_grad

__all__ = [
    "functional",
    "MLP",
    "Linear",
    "Module",
    "make_rng",
    "parameter",
    "uniform_init",
    "SGD",
    "Adam",
    "Optimizer",
    "make_optimizer",
    "load_tensors",
    "save_tensors",
    "Tape",
    "Tensor",
    "backward",
    "no_grad",
]
