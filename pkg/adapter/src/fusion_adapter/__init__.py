"""Reference fusion wire protocol v1 adapter for causal LM checkpoints."""

from .backend import CheckpointBackend
from .server import build_app
from .vocabhash import token_table_hash

__version__ = "0.1.0"

__all__ = ["CheckpointBackend", "build_app", "token_table_hash"]
