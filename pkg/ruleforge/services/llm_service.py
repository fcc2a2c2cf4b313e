"""
Prompt building, LLM backends and rule-output parsing.

Prompts come from editable templates in ``ruleforge/prompts``. Every
request is identified by a digest of its canonical form, which is what the
replay fixtures are keyed on.
"""
import hashlib
import json
import os
import re
import threading
from pathlib import Path
from typing import Dict, List, Optional, Protocol, Sequence, Tuple

import backoff
import httpx
import regex
import yaml
from loguru import logger
from openai import APIConnectionError, APIStatusError, APITimeoutError, OpenAI, RateLimitError

from ruleforge.services.errors import BackendUnavailable, NoRuleFound, ReplayMiss, UnitTooLarge
from ruleforge.services.models import (
    BasicUnit,
    LlmResponse,
    MetadataFlag,
    PackageMetadata,
    Prompt,
    PromptStage,
    RuleDraft,
    RuleFormat,
    RuleScores,
)
from ruleforge.services.settings import DATA_DIR, PROMPTS_DIR
from ruleforge.services.yara_language import escape_text

MAX_UNIT_CHARS = 4000
MAX_SAMPLES = 4
FIX_ERROR_MEMORY = 2


def request_digest(prompt: Prompt) -> str:
    """sha256 over the canonical JSON of the prompt's system, user, stage and format."""
    canonical = json.dumps(
        {
            "system": prompt.system_text,
            "user": prompt.user_text,
            "stage": prompt.stage.value,
            "format": prompt.rule_format.value,
        },
        sort_keys=True,
        separators=(",", ":"),
        ensure_ascii=False,
    )
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# prompts

def _block(kind: str, n: Optional[int], body: str) -> str:
    label = f"{kind} {n}" if n is not None else kind
    return f"----- BEGIN {label} -----\n{body.rstrip()}\n----- END {label} -----"


def metadata_sample(metadata: PackageMetadata, flags: Sequence[MetadataFlag]) -> str:
    payload = {"metadata": metadata.to_dict(), "flags": [f.to_dict() for f in sorted(flags)]}
    return json.dumps(payload, sort_keys=True, indent=2, ensure_ascii=False)


class PromptBuilder:
    """Fills the craft, refine and fix templates. Pure: same inputs, same prompt."""

    def __init__(
        self,
        prompts_dir: Path = PROMPTS_DIR,
        few_shot: Optional[Dict[RuleFormat, Path]] = None,
        error_memory: int = FIX_ERROR_MEMORY,
    ):
        self.prompts_dir = Path(prompts_dir)
        self.error_memory = error_memory
        paths = few_shot or {
            RuleFormat.YARA: DATA_DIR / "fewshot" / "example.yar",
            RuleFormat.SEMGREP: DATA_DIR / "fewshot" / "example.yaml",
        }
        self.few_shot = {fmt: Path(path).read_text(encoding="utf-8").rstrip("\n") for fmt, path in paths.items()}
        self._templates: Dict[str, str] = {}

    @classmethod
    def from_settings(cls, settings) -> "PromptBuilder":
        return cls(
            settings.prompts_dir,
            {RuleFormat.YARA: settings.few_shot_yara, RuleFormat.SEMGREP: settings.few_shot_semgrep},
            settings.memory_size,
        )

    def _template(self, name: str) -> str:
        if name not in self._templates:
            self._templates[name] = (self.prompts_dir / f"{name}.txt").read_text(encoding="utf-8").rstrip("\n")
        return self._templates[name]

    def build_craft_prompt(
        self,
        rule_format: RuleFormat,
        units: Sequence[BasicUnit] = (),
        metadata: Optional[PackageMetadata] = None,
        flags: Sequence[MetadataFlag] = (),
        few_shot: Optional[str] = None,
    ) -> Prompt:
        """
        Craft prompt for 1-4 code samples, or for one package's metadata.

        Args:
            rule_format: YARA or Semgrep
            units: Representative basic units of one cluster
            metadata: Package metadata (metadata path; ``units`` must be empty)
            flags: Audit flags raised for ``metadata``
            few_shot: Example rule; defaults to the configured one

        Returns:
            Prompt with numbered sample blocks and the few-shot rule
        """
        few_shot = self.few_shot[rule_format] if few_shot is None else few_shot
        format_name = rule_format.display_name
        if metadata is not None:
            if units:
                raise ValueError("craft prompts take either code units or metadata, not both")
            samples = (metadata_sample(metadata, flags),)
            template = "craft_metadata_user"
        else:
            if not 1 <= len(units) <= MAX_SAMPLES:
                raise ValueError(f"craft prompts take 1 to {MAX_SAMPLES} units, got {len(units)}")
            for unit in units:
                if unit.char_len > MAX_UNIT_CHARS:
                    raise UnitTooLarge(
                        f"unit {unit.package}:{unit.file}#{unit.index} has {unit.char_len} chars "
                        f"(limit {MAX_UNIT_CHARS})"
                    )
            samples = tuple(unit.text for unit in units)
            template = "craft_user"

        sample_text = "\n\n".join(
            f"Sample {n}:\n{_block('SAMPLE', n, body)}" for n, body in enumerate(samples, start=1)
        )
        return Prompt(
            system_text=self._template("craft_system").format(format_name=format_name),
            user_text=self._template(template).format(format_name=format_name, samples=sample_text, few_shot=few_shot),
            stage=PromptStage.CRAFT,
            rule_format=rule_format,
            few_shot=few_shot,
            samples=samples,
        )

    def build_refine_prompt(self, analysis: str, rule: str, rule_format: RuleFormat) -> Prompt:
        if not analysis.strip():
            raise ValueError("refine prompts need a non-empty analysis")
        if not rule.strip():
            raise ValueError("refine prompts need a non-empty rule")
        format_name = rule_format.display_name
        return Prompt(
            system_text=self._template("refine_system").format(format_name=format_name),
            user_text=self._template("refine_user").format(analysis=analysis.rstrip(), rule=rule.rstrip()),
            stage=PromptStage.REFINE,
            rule_format=rule_format,
            rule_text=rule,
        )

    def build_fix_prompt(self, analysis: str, rule: str, errors: Sequence[str], rule_format: RuleFormat) -> Prompt:
        """
        Fix prompt carrying only the newest error messages.

        Args:
            errors: Error blocks, oldest first; only the last ``error_memory`` are kept
        """
        if not errors:
            raise ValueError("fix prompts need at least one error message")
        kept = list(errors)[-self.error_memory:]
        error_text = "\n\n".join(
            f"Error message {n}:\n{message.rstrip()}" for n, message in enumerate(kept, start=1)
        )
        format_name = rule_format.display_name
        return Prompt(
            system_text=self._template("fix_system").format(format_name=format_name),
            user_text=self._template("fix_user").format(
                errors=error_text,
                analysis=analysis.rstrip() or "(none)",
                rule=rule.rstrip(),
            ),
            stage=PromptStage.FIX,
            rule_format=rule_format,
            rule_text=rule,
            errors=tuple(kept),
        )


_prompt_builder: Optional[PromptBuilder] = None


def get_prompt_builder() -> PromptBuilder:
    global _prompt_builder
    if _prompt_builder is None:
        _prompt_builder = PromptBuilder()
    return _prompt_builder


# ---------------------------------------------------------------------------
# backends

class LlmBackend(Protocol):
    backend_id: str

    def generate(self, prompt: Prompt) -> str:
        ...


def complete(prompt: Prompt, backend: LlmBackend) -> LlmResponse:
    text = backend.generate(prompt)
    return LlmResponse(text=text, backend_id=backend.backend_id, request_digest=request_digest(prompt))


_RETRYABLE = (APIConnectionError, APITimeoutError, RateLimitError)


class OpenAIChatBackend:
    """Chat-completion backend on the OpenAI API (or any compatible ``base_url``)."""

    def __init__(
        self,
        api_key: Optional[str] = None,
        model: str = "gpt-4o",
        temperature: float = 0.0,
        max_tokens: int = 2048,
        base_url: Optional[str] = None,
        max_in_flight: int = 4,
        timeout: float = 60.0,
        max_tries: int = 3,
    ):
        self.api_key = api_key or os.getenv("OPENAI_API_KEY")
        if not self.api_key:
            raise BackendUnavailable(
                "OpenAI API key required. Set OPENAI_API_KEY environment variable "
                "or pass api_key parameter."
            )
        # Explicit httpx client; OpenAI's internal wrapper has changed its proxy arguments between versions.
        self.http_client = httpx.Client(timeout=timeout)
        self.client = OpenAI(api_key=self.api_key, http_client=self.http_client, base_url=base_url)
        self.model = model
        self.temperature = temperature
        self.max_tokens = max_tokens
        self.max_tries = max_tries
        self.backend_id = f"openai:{model}"
        self._slots = threading.BoundedSemaphore(max_in_flight)
        logger.info(f"✅ OpenAI chat backend ready (model: {model}, temperature: {temperature})")

    def _create(self, prompt: Prompt) -> str:
        response = self.client.chat.completions.create(
            model=self.model,
            temperature=self.temperature,
            max_tokens=self.max_tokens,
            messages=[
                {"role": "system", "content": prompt.system_text},
                {"role": "user", "content": prompt.user_text},
            ],
        )
        return response.choices[0].message.content or ""

    def generate(self, prompt: Prompt) -> str:
        create = backoff.on_exception(backoff.expo, _RETRYABLE, max_tries=self.max_tries)(self._create)
        with self._slots:
            try:
                return create(prompt)
            except (APIConnectionError, APITimeoutError, RateLimitError, APIStatusError) as exc:
                raise BackendUnavailable(f"chat completion failed: {exc}") from exc


def _read_fixtures(path: Path) -> Dict[str, str]:
    entries: Dict[str, str] = {}
    if not path.exists():
        return entries
    for number, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            item = json.loads(line)
            entries[item["request_digest"]] = item["response_text"]
        except (ValueError, KeyError) as exc:
            raise BackendUnavailable(f"fixture file {path} line {number} is malformed: {exc}") from exc
    return entries


class ReplayBackend:
    """Answers from a JSON-lines fixture file keyed by request digest; never touches the network."""

    def __init__(self, path: Path):
        self.path = Path(path)
        if not self.path.is_file():
            raise BackendUnavailable(f"replay fixture file not found: {self.path}")
        self.entries = _read_fixtures(self.path)
        self.backend_id = "replay"
        logger.info(f"✅ Replay backend ready ({len(self.entries)} recorded responses)")

    def generate(self, prompt: Prompt) -> str:
        digest = request_digest(prompt)
        if digest not in self.entries:
            raise ReplayMiss(digest)
        return self.entries[digest]


class RecordingBackend:
    """
    Wraps another backend and stores every response in a fixture file.

    The file is rewritten sorted by digest after each new response, so two
    recordings of the same run are byte-identical.
    """

    def __init__(self, inner: LlmBackend, path: Path):
        self.inner = inner
        self.path = Path(path)
        self.entries = _read_fixtures(self.path)
        self.backend_id = f"record:{inner.backend_id}"
        self._lock = threading.Lock()

    def generate(self, prompt: Prompt) -> str:
        digest = request_digest(prompt)
        with self._lock:
            if digest in self.entries:
                return self.entries[digest]
        text = self.inner.generate(prompt)
        with self._lock:
            self.entries[digest] = text
            self._flush()
        return text

    def _flush(self) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        lines = [
            json.dumps({"request_digest": d, "response_text": self.entries[d]}, sort_keys=True, ensure_ascii=False)
            for d in sorted(self.entries)
        ]
        self.path.write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# offline heuristic backend

_CALL = re.compile(r"\b([A-Za-z_]\w*(?:\.[A-Za-z_]\w*)+)\s*\(")
_LITERAL = re.compile(r"\"([^\"\\\n]{6,})\"|'([^'\\\n]{6,})'")
_URL_LIKE = re.compile(r"https?://|\b\d{1,3}(?:\.\d{1,3}){3}\b|\.(?:com|net|org|io|ru|xyz)\b|webhook")
_JS_HINTS = re.compile(r"\brequire\s*\(|\bconst\s|\blet\s|=>|\bfunction\b")

SUSPICIOUS_NAMES = (
    "base64", "ctypes", "eval", "exec", "getpass", "gethostname", "getcwd", "marshal",
    "os.environ", "os.system", "platform", "popen", "socket", "subprocess", "urllib",
    "urlopen", "requests.post", "requests.get", "http", "child_process", "zlib",
    "shutil", "chmod", "crontab", "discord", "webhook",
)
MAX_HEURISTIC_STRINGS = 6
_SCORE_LINES = "confidence: 0.80\nmaliciousness: 0.90\nrisk: 0.70"


def _candidate_rank(candidate: str) -> Tuple[int, str]:
    lowered = candidate.lower()
    if any(name in lowered for name in SUSPICIOUS_NAMES):
        return 0, candidate
    if _URL_LIKE.search(lowered):
        return 1, candidate
    return 2, candidate


def _sample_features(text: str) -> Dict[str, set]:
    literals = {a or b for a, b in _LITERAL.findall(text)}
    return {"calls": set(_CALL.findall(text)), "literals": {lit for lit in literals if lit.strip()}}


def _semgrep_language(samples: Sequence[str]) -> str:
    return "javascript" if any(_JS_HINTS.search(s) for s in samples) else "python"


def _fence(rule_format: RuleFormat, body: str) -> str:
    return f"```{rule_format.value}\n{body.rstrip()}\n```"


class HeuristicBackend:
    """
    Deterministic local rule synthesiser.

    Craft answers mine the API calls and string literals shared by all
    samples; refine answers echo the rule; fix answers apply mechanical
    repairs keyed on the error messages. Runs offline.
    """

    backend_id = "heuristic"

    def generate(self, prompt: Prompt) -> str:
        if prompt.stage is PromptStage.CRAFT:
            return self._craft(prompt)
        if prompt.stage is PromptStage.REFINE:
            return (
                "Analysis Result:\nThe rule already targets the shared behaviors; no changes.\n"
                f"{_SCORE_LINES}\n\n{_fence(prompt.rule_format, prompt.rule_text)}\n"
            )
        fixed = repair_rule(prompt.rule_text, prompt.errors, prompt.rule_format)
        return f"Analysis Result:\nApplied mechanical repairs.\n\n{_fence(prompt.rule_format, fixed)}\n"

    def _craft(self, prompt: Prompt) -> str:
        metadata = _metadata_payload(prompt.samples)
        if metadata is not None:
            return self._craft_metadata(metadata, prompt.rule_format)

        features = [_sample_features(sample) for sample in prompt.samples]
        calls = set.intersection(*(f["calls"] for f in features)) or features[0]["calls"]
        literals = set.intersection(*(f["literals"] for f in features)) or features[0]["literals"]
        calls = {c for c in calls if len(c) >= 6}
        candidates = sorted(calls | literals, key=_candidate_rank)[:MAX_HEURISTIC_STRINGS]
        if not candidates:
            return "Analysis Result:\nThe samples share no distinctive calls or literals; no rule proposed.\n"

        digest = hashlib.sha256("\n".join(candidates).encode("utf-8")).hexdigest()[:10]
        name = f"ruleforge_code_{digest}"
        analysis = (
            "Analysis Result:\n"
            f"The {len(prompt.samples)} sample(s) share these indicators: {', '.join(candidates)}.\n"
            f"{_SCORE_LINES}\n"
        )
        if prompt.rule_format is RuleFormat.YARA:
            lines = [f'        $s{n} = "{escape_text(c)}"' for n, c in enumerate(candidates, start=1)]
            condition = "any of them" if len(candidates) <= 2 else "2 of them"
            rule = _yara_rule(name, "code shared by one malware cluster", lines, condition)
        else:
            either = []
            for candidate in candidates:
                if candidate in calls:
                    either.append({"pattern": f"{candidate}(...)"})
                else:
                    either.append({"pattern-regex": regex.escape(candidate)})
            rule = _semgrep_rule(name, "code shared by one malware cluster", _semgrep_language(prompt.samples),
                                 {"pattern-either": either})
        return f"{analysis}\n{_fence(prompt.rule_format, rule)}\n"

    def _craft_metadata(self, payload: Dict, rule_format: RuleFormat) -> str:
        meta = payload["metadata"]
        package = meta["name"]
        sanitized = re.sub(r"[^A-Za-z0-9_]", "_", package)
        name = f"ruleforge_meta_{sanitized}"
        denied = sorted({
            m.group(1)
            for flag in payload.get("flags", [])
            if flag["kind"] == "malicious_dependency"
            for m in [re.search(r"'([^']+)'", flag["evidence"])]
            if m
        })
        kinds = ", ".join(sorted({flag["kind"] for flag in payload.get("flags", [])})) or "none"
        analysis = (
            "Analysis Result:\n"
            f"Package '{package}' raised metadata indicators: {kinds}.\n"
            f"{_SCORE_LINES}\n"
        )
        if rule_format is RuleFormat.YARA:
            lines = [f'        $name = "{escape_text(package)}" fullword']
            lines += [f'        $dep{n} = "{escape_text(dep)}" fullword' for n, dep in enumerate(denied, start=1)]
            rule = _yara_rule(name, f"metadata of package {escape_text(package)}", lines, "any of them")
        else:
            pattern = r"""name\s*[=:]\s*['"]""" + regex.escape(package) + r"""['"]"""
            rule = _semgrep_rule(name, f"metadata of package {package}", "generic", {"pattern-regex": pattern})
        return f"{analysis}\n{_fence(rule_format, rule)}\n"


def _metadata_payload(samples: Sequence[str]) -> Optional[Dict]:
    if len(samples) != 1 or not samples[0].lstrip().startswith("{"):
        return None
    try:
        payload = json.loads(samples[0])
    except ValueError:
        return None
    return payload if isinstance(payload, dict) and "metadata" in payload else None


def _yara_rule(name: str, description: str, string_lines: List[str], condition: str) -> str:
    return "\n".join([
        f"rule {name}",
        "{",
        "    meta:",
        f'        description = "{description}"',
        '        author = "ruleforge"',
        "    strings:",
        *string_lines,
        "    condition:",
        f"        {condition}",
        "}",
    ]) + "\n"


def _semgrep_rule(name: str, message: str, language: str, clause: Dict) -> str:
    document = {"rules": [dict({
        "id": name,
        "message": message,
        "languages": [language],
        "severity": "WARNING",
    }, **clause)]}
    return yaml.safe_dump(document, sort_keys=False, default_flow_style=False, allow_unicode=True)


def repair_rule(text: str, errors: Sequence[str], rule_format: RuleFormat) -> str:
    """Mechanical repairs for the common compile errors named in ``errors``."""
    fixed = text.lstrip("\ufeff").replace("\r\n", "\n")
    if rule_format is not RuleFormat.YARA:
        return fixed
    joined = "\n".join(errors)

    opened, closed = fixed.count("{"), fixed.count("}")
    if "unbalanced '{'" in joined and opened > closed:
        fixed = fixed.rstrip() + "\n" + "}" * (opened - closed) + "\n"

    if "missing 'condition:'" in joined:
        head, _, _ = fixed.rstrip().rpartition("}")
        fixed = head.rstrip() + "\n    condition:\n        any of them\n}\n"

    if "undefined string" in joined or "matches no defined string" in joined:
        fixed = re.sub(
            r"(condition:\s*\n)[\s\S]*?(\n\s*\}\s*)$",
            r"\g<1>        any of them\g<2>",
            fixed,
        )

    if "[bad_meta]" in joined:
        def quote(match: "re.Match[str]") -> str:
            value = match.group(2).strip()
            if re.fullmatch(r"-?\d+|true|false|\".*\"", value):
                return match.group(0)
            return f'{match.group(1)}"{escape_text(value)}"'

        head, sep, tail = fixed.partition("strings:")
        head = re.sub(r"^(\s+\w+\s*=\s*)(.+)$", quote, head, flags=re.MULTILINE)
        fixed = head + sep + tail
    return fixed


def create_backend(settings) -> LlmBackend:
    """Build the configured backend from LlmSettings."""

    def live(kind: str) -> LlmBackend:
        if kind == "heuristic":
            return HeuristicBackend()
        return OpenAIChatBackend(
            api_key=os.getenv(settings.api_key_env),
            model=settings.model,
            temperature=settings.temperature,
            max_tokens=settings.max_tokens,
            base_url=settings.base_url,
            max_in_flight=settings.max_in_flight,
            timeout=settings.timeout,
            max_tries=settings.max_tries,
        )

    if settings.backend == "replay":
        return ReplayBackend(settings.fixtures)
    if settings.backend == "record":
        return RecordingBackend(live(settings.record_inner), settings.fixtures)
    return live(settings.backend)


# ---------------------------------------------------------------------------
# output parsing

_FENCE = re.compile(r"```[^\n]*\n(.*?)```", re.DOTALL)
_YARA_HEADER = re.compile(r"^[ \t]*(?:(?:private|global)[ \t]+)*rule[ \t]+[A-Za-z_]", re.MULTILINE)
# outside a fence the body brace must follow on the header line or the next one
_YARA_BARE_HEADER = re.compile(
    r"^[ \t]*(?:(?:private|global)[ \t]+)*rule[ \t]+[A-Za-z_]\w*"
    r"(?:[ \t]*:(?:[ \t]*[A-Za-z_]\w*)+)?[ \t]*(?:\r?\n[ \t]*)?\{",
    re.MULTILINE,
)
_SEMGREP_HEADER = re.compile(r"^rules:", re.MULTILINE)
_SCORE = re.compile(
    r"^[ \t*\-]*(confidence|maliciousness|malicious|risk)(?:[ \t]+score)?[ \t*]*[:=][ \t]*([0-9]*\.?[0-9]+)",
    re.IGNORECASE | re.MULTILINE,
)


def _yara_block_end(text: str, start: int) -> int:
    """Index just past the brace closing the rule body, or len(text)."""
    depth = 0
    in_string = False
    i = text.find("{", start)
    if i < 0:
        return len(text)
    while i < len(text):
        char = text[i]
        if in_string:
            if char == "\\":
                i += 1
            elif char == '"' or char == "\n":
                in_string = False
        elif char == '"':
            in_string = True
        elif char == "{":
            depth += 1
        elif char == "}":
            depth -= 1
            if depth == 0:
                return i + 1
        i += 1
    return len(text)


def _semgrep_block_end(text: str, start: int) -> int:
    lines = text[start:].split("\n")
    consumed = len(lines[0]) + 1
    for line in lines[1:]:
        if line and not line[0].isspace() and not line.startswith("-"):
            break
        consumed += len(line) + 1
    return min(start + consumed, len(text))


def _find_rule_block(text: str, rule_format: RuleFormat) -> Optional[Tuple[int, int, str]]:
    header = _YARA_HEADER if rule_format is RuleFormat.YARA else _SEMGREP_HEADER
    for match in _FENCE.finditer(text):
        if header.search(match.group(1)):
            return match.start(), match.end(), match.group(1)
    bare = _YARA_BARE_HEADER if rule_format is RuleFormat.YARA else _SEMGREP_HEADER
    match = bare.search(text)
    if match is None:
        return None
    start = match.start()
    end = _yara_block_end(text, start) if rule_format is RuleFormat.YARA else _semgrep_block_end(text, start)
    return start, end, text[start:end]


def parse_scores(text: str) -> RuleScores:
    values: Dict[str, float] = {}
    for key, raw in _SCORE.findall(text):
        field_name = "maliciousness" if key.lower().startswith("malicious") else key.lower()
        value = float(raw)
        if field_name in values:
            continue
        if not 0.0 <= value <= 1.0:
            logger.warning(f"⚠️  Ignoring out-of-range {field_name} score {value}")
            continue
        values[field_name] = value
    return RuleScores(**values)


def parse_rule_output(response: LlmResponse, rule_format: RuleFormat) -> RuleDraft:
    """
    Split an LLM answer into rule text, analysis and scores.

    The first fenced block holding a rule wins; without fences the rule is
    delimited by its header and closing brace (YARA) or by the end of the
    ``rules:`` YAML block (Semgrep).

    Raises:
        NoRuleFound: the response holds no rule of ``rule_format``
    """
    found = _find_rule_block(response.text, rule_format)
    if found is None or not found[2].strip():
        raise NoRuleFound(f"response {response.request_digest[:12]} contains no {rule_format.display_name} rule")
    start, end, block = found
    analysis = (response.text[:start] + response.text[end:]).strip()
    return RuleDraft(
        analysis_text=analysis,
        rule_text=block.strip() + "\n",
        rule_format=rule_format,
        scores=parse_scores(analysis),
    )
