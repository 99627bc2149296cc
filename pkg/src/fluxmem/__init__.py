"""Three-layer conversational memory: short-term buffer, episodic sessions, semantic store."""

from .bmm import BetaMixture, GateDecision, decide_fusion, decide_threshold
from .core import EngineConfig, FluxMemError, HashEmbedder, Page, ProviderError, StructureKind
from .engine import Engine, IngestionTrace, Policy
from .evalkit import BenchmarkCase, EvalReport, load_cases, replay
from .retrieval import ExtractiveResponder, FusedContext
from .selector import StructureSelector, extract_features

__version__ = "0.1.0"

__all__ = [
    "BenchmarkCase", "BetaMixture", "Engine", "EngineConfig", "EvalReport", "ExtractiveResponder",
    "FluxMemError", "FusedContext", "GateDecision", "HashEmbedder", "IngestionTrace", "Page",
    "Policy", "ProviderError", "StructureKind", "StructureSelector", "decide_fusion",
    "decide_threshold", "extract_features", "load_cases", "replay",
]
