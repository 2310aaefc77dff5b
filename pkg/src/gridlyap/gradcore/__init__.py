"""Minimal reverse-mode gradient engine, optimizer and checkpoint I/O."""

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .engine import GraphError, Node, Tape
from .optim import Adam

__all__ = [
    "Adam",
    "Checkpoint",
    "GraphError",
    "Node",
    "Tape",
    "load_checkpoint",
    "save_checkpoint",
]
