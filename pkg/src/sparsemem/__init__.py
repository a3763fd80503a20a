"""Sparse-access external memory for sequence models.

The package couples an LSTM controller to a slot memory that is read
by approximate nearest-neighbour content lookup and written through a
least-recently-used interpolation. Reads, writes and the optional
temporal-linkage pathway all touch a bounded number of slots per step,
and every step is journaled so training can run backward through time
by reverting the memory instead of checkpointing it.
"""

from .ann import AnnConfig, AnnIndex
from .container import ContainerError, dump, load, load_file, save_file
from .controller import ControllerConfig, init_params
from .linkage import LinkageConfig, LinkageState
from .memory import (
    MemoryConfig,
    MemoryState,
    init_state,
    maintain_index,
    state_fingerprint,
)
from .model import MODEL_NAMES, Forward, Margins, Model, ModelConfig, build_model
from .sparse import ContractViolation, SparseRowMatrix, SparseVector

__version__ = "0.1.0"

__all__ = [
    "AnnConfig",
    "AnnIndex",
    "ContainerError",
    "ContractViolation",
    "ControllerConfig",
    "Forward",
    "LinkageConfig",
    "LinkageState",
    "Margins",
    "MemoryConfig",
    "MemoryState",
    "Model",
    "ModelConfig",
    "MODEL_NAMES",
    "SparseRowMatrix",
    "SparseVector",
    "build_model",
    "dump",
    "init_params",
    "init_state",
    "load",
    "load_file",
    "maintain_index",
    "save_file",
    "state_fingerprint",
    "__version__",
]
