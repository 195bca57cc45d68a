"""Memory-augmented multi-agent feature generation for tabular data."""

from .data import Preprocessor, SplitSpec, Table, load_csv, metadata_text, split
from .errors import (
    BackendError,
    ConfigError,
    DataError,
    DslError,
    DslTypeError,
    EvalError,
    MalmasError,
    MemoryStateError,
)
from .memory import FeedRecord, MemoryBank, MemoryFlags, ProcRecord
from .orchestrator import RoundReport, RunConfig, RunResult, run, select_top_n

__version__ = "0.1.0"

__all__ = [
    "BackendError", "ConfigError", "DataError", "DslError", "DslTypeError",
    "EvalError", "FeedRecord", "MalmasError", "MemoryBank", "MemoryFlags",
    "Preprocessor", "ProcRecord", "RoundReport", "RunConfig", "RunResult",
    "SplitSpec", "Table", "load_csv", "metadata_text", "run", "select_top_n",
    "split",
]
