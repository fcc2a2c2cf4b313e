"""
Domain types passed between pipeline stages.
"""
import hashlib
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, FrozenSet, List, Optional, Tuple

import numpy as np


class Ecosystem(str, Enum):
    PYPI = "pypi"
    NPM = "npm"

    @property
    def source_extension(self) -> str:
        return ".py" if self is Ecosystem.PYPI else ".js"


class Label(str, Enum):
    MALICIOUS = "malicious"
    LEGITIMATE = "legitimate"
    UNKNOWN = "unknown"


class MetadataSource(str, Enum):
    PKG_INFO = "pkg_info"
    SETUP_FILE = "setup_file"
    EGG_INFO = "egg_info"
    REGISTRY_API = "registry_api"
    ARCHIVE_NAME = "archive_name"


class RuleFormat(str, Enum):
    YARA = "yara"
    SEMGREP = "semgrep"

    @property
    def display_name(self) -> str:
        return "YARA" if self is RuleFormat.YARA else "SemGrep"

    @property
    def file_suffix(self) -> str:
        return ".yar" if self is RuleFormat.YARA else ".yaml"


class UnitKind(str, Enum):
    MODULE_PRELUDE = "module_prelude"
    FUNCTION = "function"
    CLASS = "class"
    CONTROL_BLOCK = "control_block"
    OVERFLOW_CHUNK = "overflow_chunk"


class FlagKind(str, Enum):
    EMPTY_INFORMATION = "empty_information"
    RELEASE_ZERO = "release_zero"
    TYPOSQUATTING = "typosquatting"
    MALICIOUS_DEPENDENCY = "malicious_dependency"


class PromptStage(str, Enum):
    CRAFT = "craft"
    REFINE = "refine"
    FIX = "fix"


class CompileErrorCode(str, Enum):
    MISSING_SECTION = "missing_section"
    SYNTAX = "syntax"
    UNDEFINED_STRING = "undefined_string"
    BAD_REGEX = "bad_regex"
    BAD_META = "bad_meta"
    ENCODING = "encoding"
    YAML_STRUCTURE = "yaml_structure"


# ---------------------------------------------------------------------------
# corpus

@dataclass(frozen=True)
class PackageArchive:
    path: str
    ecosystem: Ecosystem = Ecosystem.PYPI
    label: Label = Label.UNKNOWN


@dataclass(frozen=True)
class PackageMetadata:
    name: str
    version: str = ""
    description: str = ""
    author: str = ""
    author_email: str = ""
    dependencies: Tuple[Tuple[str, str], ...] = ()
    urls: Tuple[str, ...] = ()
    source: MetadataSource = MetadataSource.PKG_INFO

    def __post_init__(self):
        if not self.name:
            raise ValueError("package metadata needs a non-empty name")
        for dep_name, _ in self.dependencies:
            if not dep_name:
                raise ValueError(f"empty dependency name in metadata of '{self.name}'")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "name": self.name,
            "version": self.version,
            "description": self.description,
            "author": self.author,
            "author_email": self.author_email,
            "dependencies": [list(dep) for dep in self.dependencies],
            "urls": list(self.urls),
            "source": self.source.value,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "PackageMetadata":
        return cls(
            name=data["name"],
            version=data.get("version", ""),
            description=data.get("description", ""),
            author=data.get("author", ""),
            author_email=data.get("author_email", ""),
            dependencies=tuple((d[0], d[1]) for d in data.get("dependencies", [])),
            urls=tuple(data.get("urls", [])),
            source=MetadataSource(data.get("source", MetadataSource.PKG_INFO.value)),
        )


@dataclass(frozen=True)
class SourceFile:
    relative_path: str
    content: str
    byte_len: int
    loc: int
    raw: bytes = field(default=b"", repr=False, compare=False)

    @classmethod
    def from_bytes(cls, relative_path: str, data: bytes) -> "SourceFile":
        content = data.decode("utf-8", errors="replace")
        loc = content.count("\n") + 1 if content else 0
        return cls(relative_path, content, len(data), loc, data)

    @property
    def digest(self) -> str:
        return hashlib.sha256(self.raw).hexdigest()

    @property
    def extension(self) -> str:
        name = self.relative_path.rsplit("/", 1)[-1]
        return "." + name.rsplit(".", 1)[-1].lower() if "." in name else ""


@dataclass(frozen=True)
class PackageRecord:
    metadata: PackageMetadata
    files: Tuple[SourceFile, ...]
    signature: str
    label: Label
    ecosystem: Ecosystem = Ecosystem.PYPI
    archive: str = ""
    root: str = ""
    # PKG-INFO / METADATA documents; not part of the signature
    metadata_documents: Tuple[SourceFile, ...] = ()

    @property
    def name(self) -> str:
        return self.metadata.name


# ---------------------------------------------------------------------------
# segmenter

@dataclass(frozen=True)
class Token:
    kind: str
    text: str
    start: int
    end: int


@dataclass(frozen=True)
class CodeSegment:
    index: int
    tokens: Tuple[Token, ...]
    file: str
    start: int
    end: int

    @property
    def token_count(self) -> int:
        return len(self.tokens)


@dataclass(frozen=True, order=True)
class MemberRef:
    package: str
    file: str
    unit_index: int

    def to_list(self) -> List[Any]:
        return [self.package, self.file, self.unit_index]


@dataclass(frozen=True)
class BasicUnit:
    text: str
    kind: UnitKind
    file: str
    line_start: int
    line_end: int
    package: str = ""
    index: int = 0

    def __post_init__(self):
        if not self.text:
            raise ValueError("basic units cannot be empty")

    @property
    def char_len(self) -> int:
        return len(self.text)

    @property
    def ref(self) -> MemberRef:
        return MemberRef(self.package, self.file, self.index)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "package": self.package,
            "file": self.file,
            "index": self.index,
            "kind": self.kind.value,
            "line_start": self.line_start,
            "line_end": self.line_end,
            "text": self.text,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "BasicUnit":
        return cls(
            text=data["text"],
            kind=UnitKind(data["kind"]),
            file=data["file"],
            line_start=data["line_start"],
            line_end=data["line_end"],
            package=data.get("package", ""),
            index=data.get("index", 0),
        )


@dataclass(frozen=True, order=True)
class MetadataFlag:
    kind: FlagKind
    evidence: str

    def __post_init__(self):
        if not self.evidence:
            raise ValueError("metadata flags need evidence")

    def to_dict(self) -> Dict[str, str]:
        return {"kind": self.kind.value, "evidence": self.evidence}

    @classmethod
    def from_dict(cls, data: Dict[str, str]) -> "MetadataFlag":
        return cls(FlagKind(data["kind"]), data["evidence"])


# ---------------------------------------------------------------------------
# embedding / clustering

@dataclass(frozen=True, eq=False)
class CodeVector:
    values: np.ndarray
    source: Optional[MemberRef] = None

    @property
    def dim(self) -> int:
        return int(self.values.shape[0])

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.values))


@dataclass(frozen=True, eq=False)
class CodeCluster:
    id: int
    members: Tuple[MemberRef, ...]
    centroid: CodeVector
    intra_similarity: float
    # euclidean member-to-centroid distances, aligned with ``members``
    distances: Tuple[float, ...] = ()

    @property
    def packages(self) -> List[str]:
        return sorted({m.package for m in self.members})

    def to_dict(self) -> Dict[str, Any]:
        return {
            "id": self.id,
            "size": len(self.members),
            "intra_similarity": self.intra_similarity,
            "members": [m.to_list() for m in self.members],
            "distances": list(self.distances),
        }


# ---------------------------------------------------------------------------
# llm

@dataclass(frozen=True)
class Prompt:
    system_text: str
    user_text: str
    stage: PromptStage
    rule_format: RuleFormat
    few_shot: str = ""
    # structured copies of what went into user_text
    samples: Tuple[str, ...] = ()
    rule_text: str = ""
    errors: Tuple[str, ...] = ()


@dataclass(frozen=True)
class LlmResponse:
    text: str
    backend_id: str
    request_digest: str


@dataclass(frozen=True)
class RuleScores:
    confidence: Optional[float] = None
    maliciousness: Optional[float] = None
    risk: Optional[float] = None

    def __post_init__(self):
        for name in ("confidence", "maliciousness", "risk"):
            value = getattr(self, name)
            if value is not None and not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} score {value} outside [0, 1]")

    def merged(self, newer: "RuleScores") -> "RuleScores":
        return RuleScores(
            confidence=newer.confidence if newer.confidence is not None else self.confidence,
            maliciousness=newer.maliciousness if newer.maliciousness is not None else self.maliciousness,
            risk=newer.risk if newer.risk is not None else self.risk,
        )

    def to_dict(self) -> Dict[str, Optional[float]]:
        return {"confidence": self.confidence, "maliciousness": self.maliciousness, "risk": self.risk}


@dataclass(frozen=True)
class Provenance:
    cluster_id: Optional[int] = None
    package: Optional[str] = None
    flags: Tuple[str, ...] = ()
    representatives: Tuple[str, ...] = ()
    generator: str = "llm"

    def to_dict(self) -> Dict[str, Any]:
        return {
            "cluster_id": self.cluster_id,
            "package": self.package,
            "flags": list(self.flags),
            "representatives": list(self.representatives),
            "generator": self.generator,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "Provenance":
        return cls(
            cluster_id=data.get("cluster_id"),
            package=data.get("package"),
            flags=tuple(data.get("flags", [])),
            representatives=tuple(data.get("representatives", [])),
            generator=data.get("generator", "llm"),
        )


@dataclass(frozen=True)
class RuleDraft:
    analysis_text: str
    rule_text: str
    rule_format: RuleFormat
    provenance: Provenance = field(default_factory=Provenance)
    scores: RuleScores = field(default_factory=RuleScores)

    def __post_init__(self):
        if not self.rule_text.strip():
            raise ValueError("rule drafts need rule text")


# ---------------------------------------------------------------------------
# validator

@dataclass(frozen=True)
class CompileError:
    code: CompileErrorCode
    message: str

    def __post_init__(self):
        if not self.message:
            raise ValueError("compile errors need a message")

    def to_dict(self) -> Dict[str, str]:
        return {"code": self.code.value, "message": self.message}


@dataclass(frozen=True)
class SemgrepRuleSpec:
    id: str
    message: str
    languages: Tuple[str, ...]
    severity: str
    clause_key: str
    clause: Any


@dataclass(frozen=True, order=True)
class TaxonomyTag:
    category: str
    subcategory: str


@dataclass(frozen=True)
class Rule:
    text: str
    rule_format: RuleFormat
    name: str
    # YaraRuleAst for yara, tuple of SemgrepRuleSpec for semgrep
    sections: Any = field(repr=False, compare=False)
    provenance: Provenance = field(default_factory=Provenance)
    scores: RuleScores = field(default_factory=RuleScores)
    attempts: int = 0
    taxonomy_tags: FrozenSet[TaxonomyTag] = frozenset()


# ---------------------------------------------------------------------------
# matcher

@dataclass(frozen=True)
class MatchResult:
    rule_id: str
    package: str
    file: str
    offsets: Tuple[int, ...]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "rule_id": self.rule_id,
            "package": self.package,
            "file": self.file,
            "offsets": list(self.offsets),
        }


@dataclass(frozen=True)
class PackageVerdict:
    package: str
    matched_rules: FrozenSet[str]
    label: Label
    threshold: int = 1

    @property
    def matched_count(self) -> int:
        return len(self.matched_rules)

    @property
    def predicted(self) -> bool:
        return self.matched_count >= self.threshold

    def to_dict(self) -> Dict[str, Any]:
        return {
            "package": self.package,
            "label": self.label.value,
            "matched_rules": sorted(self.matched_rules),
            "matched_count": self.matched_count,
            "predicted": self.predicted,
        }


@dataclass
class ScanReport:
    verdicts: List[PackageVerdict]
    # rule id -> sorted package names it matched
    tallies: Dict[str, List[str]]
    matches: List[MatchResult]
    timeouts: List[Dict[str, Any]] = field(default_factory=list)
    threshold: int = 1
    approximate: bool = False

    @property
    def labels(self) -> Dict[str, Label]:
        return {v.package: v.label for v in self.verdicts}


# ---------------------------------------------------------------------------
# baseline / analytics

@dataclass(frozen=True)
class ScoredString:
    text: str
    iso_score: float
    tfidf_score: float
    entropy_score: float
    combined: float


@dataclass(frozen=True)
class Metrics:
    tp: int
    fp: int
    tn: int
    fn: int
    accuracy: float
    precision: Optional[float]
    recall: Optional[float]
    f1: Optional[float]

    def to_dict(self) -> Dict[str, Any]:
        def pct(value: Optional[float]) -> Optional[float]:
            return None if value is None else round(value * 100.0, 1)

        return {
            "tp": self.tp,
            "fp": self.fp,
            "tn": self.tn,
            "fn": self.fn,
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "percent": {
                "accuracy": pct(self.accuracy),
                "precision": pct(self.precision),
                "recall": pct(self.recall),
                "f1": pct(self.f1),
            },
        }
