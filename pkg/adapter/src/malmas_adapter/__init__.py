"""Reference external evaluator speaking the malmas JSON-lines protocol.

The package serves one purpose: score candidate feature matrices with a
gradient-boosted tree model under seeded k-fold cross-validation, over a
line-oriented stdin/stdout protocol, so a malmas run can use it as its
downstream model (``--model external:malmas-adapter``).
"""

from .core import AdapterConfig, evaluate_request
from .folds import fold_assignment
from .serve import main, serve

__all__ = [
    "AdapterConfig",
    "evaluate_request",
    "fold_assignment",
    "main",
    "serve",
]

__version__ = "0.1.0"
