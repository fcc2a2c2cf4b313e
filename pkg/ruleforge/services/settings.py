"""
Run configuration.

One YAML file describes a run; relative paths inside it resolve against the
file's own directory. Secrets never live in the file, only the names of the
environment variables that hold them.
"""
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from ruleforge.services.errors import ConfigError
from ruleforge.services.models import Ecosystem, RuleFormat

PACKAGE_DIR = Path(__file__).resolve().parent.parent
DATA_DIR = PACKAGE_DIR / "data"
PROMPTS_DIR = PACKAGE_DIR / "prompts"


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class CorpusSettings(_Section):
    malicious: List[Path] = Field(default_factory=list)
    legitimate: List[Path] = Field(default_factory=list)
    ecosystem: Ecosystem = Ecosystem.PYPI
    allow_network: bool = False
    registry_endpoints: Dict[str, str] = Field(
        default_factory=lambda: {
            "npm": "https://registry.npmjs.org/{package_name}",
            "pypi": "https://pypi.org/pypi/{package_name}/json",
        }
    )
    registry_timeout: float = 10.0
    max_member_bytes: int = Field(50 * 1024 * 1024, ge=1)
    max_archive_bytes: int = Field(500 * 1024 * 1024, ge=1)


class SegmenterSettings(_Section):
    segment_threshold: int = Field(512, ge=1)
    unit_char_cap: int = Field(4000, ge=1)
    min_unit_chars: int = Field(40, ge=0)
    popular_packages: Path = DATA_DIR / "popular_packages.txt"
    denylist: Path = DATA_DIR / "denylist.txt"
    typosquat_max_distance: int = Field(2, ge=0)
    typosquat_min_length: int = Field(4, ge=1)


class EmbeddingSettings(_Section):
    backend: Literal["local", "remote"] = "local"
    dim: int = Field(256, ge=1)
    aggregation: Literal["mean", "concat"] = "mean"
    endpoint: Optional[str] = None
    api_key_env: str = "RULEFORGE_EMBEDDING_API_KEY"
    max_in_flight: int = Field(4, ge=1)
    timeout: float = 30.0
    max_tries: int = Field(3, ge=1)
    fallback_to_local: bool = True


class ClusterSettings(_Section):
    k: Optional[int] = Field(None, ge=1)
    seed: int = 42
    max_iter: int = Field(500, ge=1)
    intra_threshold: float = 0.85
    similarity: Literal["inverse_distance", "cosine"] = "inverse_distance"
    representatives: int = Field(2, ge=1, le=4)


class LlmSettings(_Section):
    backend: Literal["openai", "replay", "record", "heuristic"] = "heuristic"
    record_inner: Literal["openai", "heuristic"] = "heuristic"
    model: str = "gpt-4o"
    temperature: float = 0.0
    max_tokens: int = 2048
    api_key_env: str = "OPENAI_API_KEY"
    base_url: Optional[str] = None
    fixtures: Optional[Path] = None
    max_in_flight: int = Field(4, ge=1)
    timeout: float = 60.0
    max_tries: int = Field(3, ge=1)


class GenerateSettings(_Section):
    formats: List[RuleFormat] = Field(default_factory=lambda: [RuleFormat.YARA, RuleFormat.SEMGREP])
    refine: bool = True
    align: bool = True
    metadata_rules: bool = True
    max_fix_attempts: int = Field(5, ge=0)
    memory_size: int = Field(2, ge=1)
    prompts_dir: Path = PROMPTS_DIR
    few_shot_yara: Path = DATA_DIR / "fewshot" / "example.yar"
    few_shot_semgrep: Path = DATA_DIR / "fewshot" / "example.yaml"


class ValidatorSettings(_Section):
    external_yara: bool = False
    yara_binary: Optional[str] = None
    semgrep_binary: Optional[str] = None
    semgrep_flags: List[str] = Field(default_factory=lambda: ["--validate", "--metrics=off"])
    line_endings: Literal["lf", "crlf"] = "lf"


class MatcherSettings(_Section):
    threshold: int = Field(1, ge=0)
    timeout_seconds: float = Field(2.0, gt=0)
    semgrep_binary: Optional[str] = None


class BaselineWeights(_Section):
    iso: float = 1.2
    tfidf: float = 1.0
    entropy: float = 0.8


class BaselineSettings(_Section):
    weights: BaselineWeights = Field(default_factory=BaselineWeights)
    threshold: float = 0.9
    template: Path = DATA_DIR / "baseline_template.yar"
    seed: int = 42
    n_estimators: int = Field(100, ge=1)
    min_length: int = Field(6, ge=1)
    max_strings: int = Field(20, ge=1)
    max_pairs: int = Field(50, ge=1)
    rule_date: str = "1970-01-01"


class AnalyticsSettings(_Section):
    overlap_threshold: float = 0.8
    taxonomy: Path = DATA_DIR / "taxonomy.yaml"
    reference_rules: Optional[Path] = None
    sweep_thresholds: List[int] = Field(default_factory=lambda: list(range(1, 11)))


class RunConfig(_Section):
    output_dir: Path = Path("runs/latest")
    jobs: int = Field(4, ge=1)
    corpus: CorpusSettings = Field(default_factory=CorpusSettings)
    segmenter: SegmenterSettings = Field(default_factory=SegmenterSettings)
    embedding: EmbeddingSettings = Field(default_factory=EmbeddingSettings)
    cluster: ClusterSettings = Field(default_factory=ClusterSettings)
    llm: LlmSettings = Field(default_factory=LlmSettings)
    generate: GenerateSettings = Field(default_factory=GenerateSettings)
    validator: ValidatorSettings = Field(default_factory=ValidatorSettings)
    matcher: MatcherSettings = Field(default_factory=MatcherSettings)
    baseline: BaselineSettings = Field(default_factory=BaselineSettings)
    analytics: AnalyticsSettings = Field(default_factory=AnalyticsSettings)

    @model_validator(mode="after")
    def _check_backend_mode(self) -> "RunConfig":
        if self.llm.backend == "replay" and self.corpus.allow_network:
            raise ValueError("replay mode forbids allow_network")
        if self.llm.backend in ("replay", "record") and self.llm.fixtures is None:
            raise ValueError(f"llm backend '{self.llm.backend}' needs llm.fixtures")
        return self

    @property
    def seeds(self) -> Dict[str, int]:
        return {"cluster": self.cluster.seed, "baseline": self.baseline.seed}

    def dump(self) -> Dict[str, Any]:
        return self.model_dump(mode="json")


def _set_dotted(data: Dict[str, Any], dotted: str, value: Any) -> None:
    node = data
    parts = dotted.split(".")
    for part in parts[:-1]:
        node = node.setdefault(part, {})
    node[parts[-1]] = value


def _resolve_paths(model: BaseModel, base: Path) -> None:
    for name in type(model).model_fields:
        value = getattr(model, name)
        if isinstance(value, BaseModel):
            _resolve_paths(value, base)
        elif isinstance(value, Path) and not value.is_absolute():
            setattr(model, name, (base / value).resolve())
        elif isinstance(value, list) and value and all(isinstance(v, Path) for v in value):
            setattr(model, name, [v if v.is_absolute() else (base / v).resolve() for v in value])


def load_config(path: Optional[Path] = None, overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """
    Load and validate a run configuration.

    Args:
        path: YAML config file; None means built-in defaults
        overrides: dotted keys (e.g. ``"cluster.seed"``) applied on top of the file

    Returns:
        Validated RunConfig with absolute paths
    """
    data: Dict[str, Any] = {}
    base = Path.cwd()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            loaded = yaml.safe_load(path.read_text(encoding="utf-8"))
        except yaml.YAMLError as exc:
            raise ConfigError(f"config file {path} is not valid YAML: {exc}") from exc
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"config file {path} must contain a mapping")
        data = loaded
        base = path.resolve().parent

    for dotted, value in (overrides or {}).items():
        if value is not None:
            _set_dotted(data, dotted, value)

    try:
        config = RunConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(f"invalid configuration: {exc}") from exc

    _resolve_paths(config, base)
    return config
