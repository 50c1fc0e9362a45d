"""Minimal reverse-mode differentiation core: tensors, layers, Adam, checkpoints."""

from . import tensor as ops
from .checkpoint import CheckpointError, load_into, read_checkpoint, save_checkpoint
from .layers import (
    Adjacency,
    DenseLayer,
    GraphAttentionLayer,
    MissingSelfLoop,
    attention_weights,
    forward_dense,
    forward_gat,
)
from .optim import AdamState, adam_step, cosine_lr, zero_grad
from .tensor import BackwardTwice, DiffError, ShapeMismatch, Tensor

__all__ = [
    "AdamState",
    "Adjacency",
    "BackwardTwice",
    "CheckpointError",
    "DenseLayer",
    "DiffError",
    "GraphAttentionLayer",
    "MissingSelfLoop",
    "ShapeMismatch",
    "Tensor",
    "adam_step",
    "attention_weights",
    "forward_dense",
    "forward_gat",
    "load_into",
    "ops",
    "read_checkpoint",
    "save_checkpoint",
    "zero_grad",
]
