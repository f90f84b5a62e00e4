"""Evolutionary feature engineering for tabular data.

An LLM-backed proposer writes feature transformation programs, a sandbox
runs them under resource limits, prediction models score them on held-out
validation data, and an island-structured memory steers the next round of
proposals.
"""

from .dataset import Dataset, SplitSpec, anonymize, inject_noise, load_dataset, save_dataset, split
from .evaluation import Evaluator, Score, base_score, feature_score
from .memory import MemoryBuffer, ScoredProgram
from .sandbox import ExecutionLimits, ExecutionOutcome, FeatureProgram, execute, identity_program
from .search import SearchConfig, SearchResult, ensemble_predict, run, run_protocol, top_programs

__version__ = "0.1.0"

__all__ = [
    "Dataset",
    "SplitSpec",
    "anonymize",
    "inject_noise",
    "load_dataset",
    "save_dataset",
    "split",
    "Evaluator",
    "Score",
    "base_score",
    "feature_score",
    "MemoryBuffer",
    "ScoredProgram",
    "ExecutionLimits",
    "ExecutionOutcome",
    "FeatureProgram",
    "execute",
    "identity_program",
    "SearchConfig",
    "SearchResult",
    "ensemble_predict",
    "run",
    "run_protocol",
    "top_programs",
    "__version__",
]
