"""
Exception hierarchy shared by every pipeline stage.

Each error carries a stable snake_case ``code`` so the command line can
print a machine-readable failure and the run manifest can record per-item
problems without keeping exception objects around.
"""
import re
from typing import Any, Dict, List, Optional


def _snake_case(name: str) -> str:
    return re.sub(r"(?<!^)(?=[A-Z])", "_", name).lower()


class RuleForgeError(Exception):
    """Base class for all RuleForge failures."""

    @property
    def code(self) -> str:
        return _snake_case(type(self).__name__)

    def to_dict(self) -> Dict[str, Any]:
        return {"error": self.code, "message": str(self)}


# Configuration / stage wiring

class ConfigError(RuleForgeError):
    pass


class StageInputMissing(RuleForgeError):
    def __init__(self, stage: str, missing: str):
        super().__init__(f"stage '{stage}' needs {missing}; run the earlier stage first")
        self.stage = stage
        self.missing = missing

    def to_dict(self) -> Dict[str, Any]:
        data = super().to_dict()
        data.update({"stage": self.stage, "missing": self.missing})
        return data


# Corpus

class UnsupportedFormat(RuleForgeError):
    pass


class CorruptArchive(RuleForgeError):
    pass


class PathTraversal(RuleForgeError):
    """Archive member escapes the extraction directory (hostile archive)."""


class NoMetadataFound(RuleForgeError):
    def __init__(self, message: str, fallback=None):
        super().__init__(message)
        self.fallback = fallback


# Remote backends

class BackendUnavailable(RuleForgeError):
    pass


class ReplayMiss(RuleForgeError):
    def __init__(self, digest: str):
        super().__init__(f"no recorded response for request digest {digest}")
        self.digest = digest


# Embedding / clustering

class DimensionMismatch(RuleForgeError):
    pass


class EmptyInput(RuleForgeError):
    pass


class KTooLarge(RuleForgeError):
    pass


class ClusterTooSmall(RuleForgeError):
    pass


# Rule generation

class UnitTooLarge(RuleForgeError):
    pass


class NoRuleFound(RuleForgeError):
    pass


class AlignmentFailure(RuleForgeError):
    """The fix loop ran out of attempts; ``history`` keeps every error list seen."""

    def __init__(self, rule_name: str, attempts: int, history: List[List[Any]]):
        super().__init__(
            f"rule '{rule_name}' still fails to compile after {attempts} fix attempts"
        )
        self.rule_name = rule_name
        self.attempts = attempts
        self.history = history

    def to_dict(self) -> Dict[str, Any]:
        data = super().to_dict()
        data["rule"] = self.rule_name
        data["attempts"] = self.attempts
        data["history"] = [[e.to_dict() for e in errors] for errors in self.history]
        return data


class EngineTimeout(RuleForgeError):
    def __init__(self, rule_id: str, file: str, budget: float):
        super().__init__(f"rule '{rule_id}' exceeded {budget:g}s on {file}")
        self.rule_id = rule_id
        self.file = file
        self.budget = budget

    def to_dict(self) -> Dict[str, Any]:
        return {"rule_id": self.rule_id, "file": self.file, "budget": self.budget}


# Baseline / analytics

class DegenerateCorpus(RuleForgeError):
    pass


class NoSignal(RuleForgeError):
    pass


class BadTaxonomyFile(RuleForgeError):
    pass


class RuleCompileFailed(RuleForgeError):
    """A rule handed to a stage that requires compiled rules did not compile."""

    def __init__(self, name: str, errors: Optional[List[Any]] = None):
        errors = errors or []
        detail = "; ".join(e.message for e in errors)
        super().__init__(f"rule '{name}' does not compile: {detail}")
        self.name = name
        self.errors = errors

    def to_dict(self) -> Dict[str, Any]:
        return {
            "error": "compile_error",
            "rule": self.name,
            "errors": [e.to_dict() for e in self.errors],
        }
