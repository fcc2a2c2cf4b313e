"""
Rule validation and the compile-and-fix loop.

compile_yara / check_semgrep are structural compilers for the supported
rule subsets. align_rule drives the LLM through fix prompts until the rule
compiles or the attempt budget runs out.
"""
import re
import shutil
import subprocess
import tempfile
from collections import deque
from pathlib import Path
from typing import Any, Deque, Dict, List, Optional, Sequence, Union

import regex
import yaml
from loguru import logger

from ruleforge.services import llm_service
from ruleforge.services.errors import AlignmentFailure, NoRuleFound, RuleCompileFailed
from ruleforge.services.models import (
    CompileError,
    CompileErrorCode,
    Provenance,
    Rule,
    RuleDraft,
    RuleFormat,
    RuleScores,
    SemgrepRuleSpec,
)
from ruleforge.services.yara_language import (
    HexStringError,
    TextEscapeError,
    YaraRuleAst,
    YaraSyntaxError,
    condition_refs,
    hex_to_regex,
    lex_yara,
    parse_yara_tokens,
    resolve_items,
    unescape_text,
)

try:
    import yara
    YARA_AVAILABLE = True
except ImportError:
    YARA_AVAILABLE = False

DEFAULT_MAX_FIX_ATTEMPTS = 5
DEFAULT_MEMORY_SIZE = 2

# Fix prompts quote these messages, so their wording is part of the interface.
MESSAGES = {
    "bom": "file starts with a UTF-8 byte order mark; save as UTF-8 without BOM",
    "not_utf8": "rule text is not valid UTF-8 (byte {position})",
    "unbalanced": "unbalanced '{open}' / '{close}': {opened} opened, {closed} closed",
    "lexical": "line {line}: {detail}",
    "no_rule_header": "missing rule header: a rule must start with the keyword 'rule' followed by its identifier",
    "no_section": "missing '{section}:' section",
    "parse": "{detail}",
    "undefined_string": "line {line}: condition references undefined string {identifier}",
    "empty_wildcard": "line {line}: string set {identifier} matches no defined string",
    "duplicate_string": "line {line}: duplicate string identifier {identifier}",
    "bad_regex": "line {line}: regular expression for {identifier} does not compile: {detail}",
    "bad_hex": "line {line}: hex string {identifier} is malformed: {detail}",
    "bad_escape": "line {line}: text string {identifier} has {detail}",
    "bad_meta": "line {line}: meta field '{key}' has invalid value {value}; use a quoted string, an integer or true/false",
    "yaml_parse": "YAML does not parse: {detail}",
    "yaml_rules": "top-level 'rules' must be a non-empty list",
    "yaml_missing": "rule #{index}: missing {field}",
    "yaml_languages": "rule #{index}: languages must be a non-empty list",
    "yaml_pattern_count": "rule #{index}: needs exactly one of pattern, patterns, pattern-either, pattern-regex (found {found})",
    "yaml_clause": "rule #{index}: malformed {clause} clause",
    "yaml_regex": "rule #{index}: pattern-regex does not compile: {detail}",
    "external": "external compiler: {detail}",
}

PATTERN_KEYS = ("pattern", "patterns", "pattern-either", "pattern-regex")
_NESTED_KEYS = PATTERN_KEYS + ("pattern-not", "pattern-inside", "pattern-not-inside", "pattern-not-regex")


def _error(code: CompileErrorCode, key: str, /, **fields: Any) -> CompileError:
    return CompileError(code, MESSAGES[key].format(**fields))


def _decode(text: Union[str, bytes]) -> Union[str, CompileError]:
    if isinstance(text, bytes):
        if text.startswith(b"\xef\xbb\xbf"):
            return _error(CompileErrorCode.ENCODING, "bom")
        try:
            return text.decode("utf-8")
        except UnicodeDecodeError as exc:
            return _error(CompileErrorCode.ENCODING, "not_utf8", position=exc.start)
    if text.startswith("\ufeff"):
        return _error(CompileErrorCode.ENCODING, "bom")
    return text


def compile_regex_body(body: str, flags: str = "") -> "regex.Pattern":
    options = regex.DOTALL if "s" in flags else 0
    if "i" in flags:
        options |= regex.IGNORECASE
    return regex.compile(body.encode("utf-8"), options)


# ---------------------------------------------------------------------------
# YARA

def _check_yara_semantics(ast: YaraRuleAst) -> List[CompileError]:
    errors: List[CompileError] = []

    seen = set()
    for s in ast.strings:
        if s.identifier != "$" and s.identifier in seen:
            errors.append(_error(CompileErrorCode.SYNTAX, "duplicate_string", line=s.lineno, identifier=s.identifier))
        seen.add(s.identifier)

    for s in ast.strings:
        if s.kind == "hex":
            try:
                hex_to_regex(s.value)
            except HexStringError as exc:
                errors.append(_error(CompileErrorCode.SYNTAX, "bad_hex", line=s.lineno, identifier=s.identifier, detail=exc))
        elif s.kind == "text":
            try:
                unescape_text(s.value)
            except TextEscapeError as exc:
                errors.append(_error(CompileErrorCode.SYNTAX, "bad_escape", line=s.lineno, identifier=s.identifier, detail=exc))

    condition_line = max([s.lineno for s in ast.strings] + [0]) + 1
    ids = ast.string_ids
    for kind, identifier in condition_refs(ast.condition):
        if identifier == "$":
            continue
        if identifier.endswith("*"):
            if not resolve_items((identifier,), ids):
                errors.append(_error(CompileErrorCode.UNDEFINED_STRING, "empty_wildcard", line=condition_line, identifier=identifier))
        elif identifier not in ids:
            errors.append(_error(CompileErrorCode.UNDEFINED_STRING, "undefined_string", line=condition_line, identifier=identifier))

    for s in ast.strings:
        if s.kind != "regex":
            continue
        try:
            compile_regex_body(s.value, s.flags)
        except regex.error as exc:
            errors.append(_error(CompileErrorCode.BAD_REGEX, "bad_regex", line=s.lineno, identifier=s.identifier, detail=exc))

    for entry in ast.meta:
        if entry.kind in ("float", "identifier"):
            errors.append(_error(CompileErrorCode.BAD_META, "bad_meta", line=entry.lineno, key=entry.key, value=entry.value))

    return errors


def _yara_structure(text: str) -> Union[YaraRuleAst, List[CompileError]]:
    tokens, lex_errors = lex_yara(text)
    if lex_errors:
        return [_error(CompileErrorCode.SYNTAX, "lexical", line=line, detail=detail) for line, detail in lex_errors]

    types = [t.type for t in tokens]
    balance = []
    for open_type, close_type, open_char, close_char in (
        ("LBRACE", "RBRACE", "{", "}"),
        ("LPAREN", "RPAREN", "(", ")"),
    ):
        opened, closed = types.count(open_type), types.count(close_type)
        if opened != closed:
            balance.append(_error(
                CompileErrorCode.SYNTAX, "unbalanced",
                open=open_char, close=close_char, opened=opened, closed=closed,
            ))
    if balance:
        return balance

    missing = []
    if "RULE" not in types:
        missing.append(_error(CompileErrorCode.MISSING_SECTION, "no_rule_header"))
    for section in ("META", "STRINGS", "CONDITION"):
        if section not in types:
            missing.append(_error(CompileErrorCode.MISSING_SECTION, "no_section", section=section.lower()))
    if missing:
        return missing

    try:
        ast = parse_yara_tokens(tokens)
    except YaraSyntaxError as exc:
        return [_error(CompileErrorCode.SYNTAX, "parse", detail=exc)]

    semantic = _check_yara_semantics(ast)
    return semantic if semantic else ast


class ExternalYaraCompiler:
    """Second opinion from a real YARA compiler (yara-python or a ``yarac`` binary)."""

    def __init__(self, binary: Optional[str] = None):
        self.binary = binary

    @property
    def available(self) -> bool:
        return YARA_AVAILABLE or bool(self.binary and shutil.which(self.binary))

    def check(self, text: str) -> List[CompileError]:
        if YARA_AVAILABLE:
            try:
                yara.compile(source=text)
            except yara.SyntaxError as exc:
                return [_error(CompileErrorCode.SYNTAX, "external", detail=exc)]
            return []
        if not self.binary:
            return []
        with tempfile.TemporaryDirectory() as tmp:
            source = Path(tmp) / "rule.yar"
            source.write_text(text, encoding="utf-8")
            result = subprocess.run(
                [self.binary, str(source), str(Path(tmp) / "rule.yarc")],
                capture_output=True, text=True, timeout=60,
            )
        if result.returncode != 0:
            detail = (result.stderr or result.stdout).strip() or f"exit code {result.returncode}"
            return [_error(CompileErrorCode.SYNTAX, "external", detail=detail)]
        return []


# ---------------------------------------------------------------------------
# Semgrep

def _check_clause(key: str, value: Any, index: int) -> List[CompileError]:
    if key in ("pattern", "pattern-not", "pattern-inside", "pattern-not-inside"):
        if not isinstance(value, str) or not value.strip():
            return [_error(CompileErrorCode.YAML_STRUCTURE, "yaml_clause", index=index, clause=key)]
        return []
    if key in ("pattern-regex", "pattern-not-regex"):
        if not isinstance(value, str) or not value:
            return [_error(CompileErrorCode.YAML_STRUCTURE, "yaml_clause", index=index, clause=key)]
        try:
            regex.compile(value)
        except regex.error as exc:
            return [_error(CompileErrorCode.BAD_REGEX, "yaml_regex", index=index, detail=exc)]
        return []
    if key in ("patterns", "pattern-either"):
        if not isinstance(value, list) or not value:
            return [_error(CompileErrorCode.YAML_STRUCTURE, "yaml_clause", index=index, clause=key)]
        errors = []
        for item in value:
            keys = [k for k in item if k in _NESTED_KEYS] if isinstance(item, dict) else []
            if len(keys) != 1:
                errors.append(_error(CompileErrorCode.YAML_STRUCTURE, "yaml_clause", index=index, clause=key))
                continue
            errors.extend(_check_clause(keys[0], item[keys[0]], index))
        return errors
    return [_error(CompileErrorCode.YAML_STRUCTURE, "yaml_clause", index=index, clause=key)]


def _semgrep_structure(text: str) -> Union[List[SemgrepRuleSpec], List[CompileError]]:
    try:
        document = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        detail = str(exc).replace("\n", " ")
        return [_error(CompileErrorCode.YAML_STRUCTURE, "yaml_parse", detail=detail)]

    rules = document.get("rules") if isinstance(document, dict) else None
    if not isinstance(rules, list) or not rules:
        return [_error(CompileErrorCode.YAML_STRUCTURE, "yaml_rules")]

    errors: List[CompileError] = []
    specs: List[SemgrepRuleSpec] = []
    for index, entry in enumerate(rules, start=1):
        if not isinstance(entry, dict):
            errors.append(_error(CompileErrorCode.YAML_STRUCTURE, "yaml_missing", index=index, field="id"))
            continue
        entry_errors = []
        for field_name in ("id", "message", "languages", "severity"):
            if field_name not in entry or entry[field_name] in (None, ""):
                entry_errors.append(_error(CompileErrorCode.YAML_STRUCTURE, "yaml_missing", index=index, field=field_name))
        languages = entry.get("languages")
        if "languages" in entry and (not isinstance(languages, list) or not languages):
            entry_errors.append(_error(CompileErrorCode.YAML_STRUCTURE, "yaml_languages", index=index))
        present = [k for k in PATTERN_KEYS if k in entry]
        if len(present) != 1:
            entry_errors.append(_error(
                CompileErrorCode.YAML_STRUCTURE, "yaml_pattern_count", index=index, found=", ".join(present) or "none",
            ))
        else:
            entry_errors.extend(_check_clause(present[0], entry[present[0]], index))
        if entry_errors:
            errors.extend(entry_errors)
            continue
        specs.append(SemgrepRuleSpec(
            id=str(entry["id"]),
            message=str(entry["message"]),
            languages=tuple(str(lang) for lang in languages),
            severity=str(entry["severity"]),
            clause_key=present[0],
            clause=entry[present[0]],
        ))
    return errors if errors else specs


class ExternalSemgrepValidator:
    def __init__(self, binary: str, flags: Sequence[str] = ("--validate", "--metrics=off")):
        self.binary = binary
        self.flags = list(flags)

    def check(self, text: str) -> List[CompileError]:
        if not shutil.which(self.binary):
            logger.warning(f"⚠️  Semgrep binary '{self.binary}' not found; skipping external validation")
            return []
        with tempfile.TemporaryDirectory() as tmp:
            config = Path(tmp) / "rule.yaml"
            config.write_text(text, encoding="utf-8")
            result = subprocess.run(
                [self.binary, *self.flags, "--config", str(config)],
                capture_output=True, text=True, timeout=120,
            )
        if result.returncode != 0:
            detail = (result.stderr or result.stdout).strip() or f"exit code {result.returncode}"
            return [_error(CompileErrorCode.YAML_STRUCTURE, "external", detail=detail)]
        return []


# ---------------------------------------------------------------------------
# service

class RuleValidator:
    """Compiles rules with the built-in checkers plus optional external tools."""

    def __init__(
        self,
        external_yara: Optional[ExternalYaraCompiler] = None,
        external_semgrep: Optional[ExternalSemgrepValidator] = None,
    ):
        self.external_yara = external_yara
        self.external_semgrep = external_semgrep

    @classmethod
    def from_settings(cls, settings) -> "RuleValidator":
        external_yara = None
        if settings.external_yara:
            external_yara = ExternalYaraCompiler(settings.yara_binary)
            if not external_yara.available:
                logger.warning("⚠️  No external YARA compiler available; using the built-in checker only")
                external_yara = None
        external_semgrep = None
        if settings.semgrep_binary:
            external_semgrep = ExternalSemgrepValidator(settings.semgrep_binary, settings.semgrep_flags)
        return cls(external_yara, external_semgrep)

    def compile_yara(self, text: Union[str, bytes]) -> Union[Rule, List[CompileError]]:
        """
        Compile one YARA rule.

        Checks run in order: encoding, lexical balance, rule header and
        sections, grammar, then string references, regexes, hex strings
        and meta values. The first failing stage returns its errors.

        Returns:
            Rule on success, otherwise a non-empty list of CompileError
        """
        decoded = _decode(text)
        if isinstance(decoded, CompileError):
            return [decoded]
        result = _yara_structure(decoded)
        if isinstance(result, list):
            return result
        if self.external_yara is not None:
            external = self.external_yara.check(decoded)
            if external:
                return external
        return Rule(text=decoded, rule_format=RuleFormat.YARA, name=result.name, sections=result)

    def check_semgrep(self, text: Union[str, bytes]) -> Union[Rule, List[CompileError]]:
        decoded = _decode(text)
        if isinstance(decoded, CompileError):
            return [decoded]
        result = _semgrep_structure(decoded)
        if result and isinstance(result[0], CompileError):
            return result
        if self.external_semgrep is not None:
            external = self.external_semgrep.check(decoded)
            if external:
                return external
        return Rule(text=decoded, rule_format=RuleFormat.SEMGREP, name=result[0].id, sections=tuple(result))

    def validate(self, text: Union[str, bytes], rule_format: RuleFormat) -> Union[Rule, List[CompileError]]:
        if rule_format is RuleFormat.YARA:
            return self.compile_yara(text)
        return self.check_semgrep(text)


_validator: Optional[RuleValidator] = None


def get_validator() -> RuleValidator:
    """Shared built-in validator (no external tools)."""
    global _validator
    if _validator is None:
        _validator = RuleValidator()
    return _validator


def compile_yara(text: Union[str, bytes]) -> Union[Rule, List[CompileError]]:
    return get_validator().compile_yara(text)


def check_semgrep(text: Union[str, bytes]) -> Union[Rule, List[CompileError]]:
    return get_validator().check_semgrep(text)


# ---------------------------------------------------------------------------
# fix loop

class AgentMemory:
    """Keeps the newest ``size`` error lists for prompts and the full history for reports."""

    def __init__(self, size: int = DEFAULT_MEMORY_SIZE, max_attempts: int = DEFAULT_MAX_FIX_ATTEMPTS):
        self.recent_errors: Deque[List[CompileError]] = deque(maxlen=size)
        self.history: List[List[CompileError]] = []
        self.attempt = 0
        self.max_attempts = max_attempts

    def remember(self, errors: List[CompileError]) -> None:
        self.recent_errors.append(list(errors))
        self.history.append(list(errors))

    def next_attempt(self) -> int:
        if self.attempt >= self.max_attempts:
            raise RuntimeError("fix attempt budget exhausted")
        self.attempt += 1
        return self.attempt

    @property
    def exhausted(self) -> bool:
        return self.attempt >= self.max_attempts


def format_error_block(errors: Sequence[CompileError]) -> str:
    return "\n".join(f"[{e.code.value}] {e.message}" for e in errors)


def align_rule(
    draft: RuleDraft,
    backend,
    validator: Optional[RuleValidator] = None,
    max_attempts: int = DEFAULT_MAX_FIX_ATTEMPTS,
    memory_size: int = DEFAULT_MEMORY_SIZE,
    prompt_builder=None,
) -> Rule:
    """
    Compile a draft, asking the LLM to fix it until it compiles.

    The first compile is attempt 0; each of up to ``max_attempts`` fix
    rounds sends the newest ``memory_size`` error lists, the analysis and
    the current rule text.

    Returns:
        Rule stamped with the number of fix attempts used

    Raises:
        AlignmentFailure: still failing after the last fix attempt
    """
    validator = validator or get_validator()
    build_fix_prompt = prompt_builder or llm_service.get_prompt_builder().build_fix_prompt
    memory = AgentMemory(memory_size, max_attempts)
    rule_text = draft.rule_text
    analysis = draft.analysis_text

    while True:
        result = validator.validate(rule_text, draft.rule_format)
        if isinstance(result, Rule):
            if memory.attempt:
                logger.info(f"✅ Rule '{result.name}' compiles after {memory.attempt} fix attempt(s)")
            return Rule(
                text=result.text,
                rule_format=result.rule_format,
                name=result.name,
                sections=result.sections,
                provenance=draft.provenance,
                scores=draft.scores,
                attempts=memory.attempt,
            )

        memory.remember(result)
        if memory.exhausted:
            raise AlignmentFailure(_draft_name(rule_text), memory.attempt, memory.history)

        memory.next_attempt()
        prompt = build_fix_prompt(
            analysis,
            rule_text,
            [format_error_block(errors) for errors in memory.recent_errors],
            draft.rule_format,
        )
        response = llm_service.complete(prompt, backend)
        try:
            fixed = llm_service.parse_rule_output(response, draft.rule_format)
        except NoRuleFound:
            logger.warning(f"⚠️  Fix attempt {memory.attempt} returned no rule")
            continue
        rule_text = fixed.rule_text
        if fixed.analysis_text:
            analysis = fixed.analysis_text


def _draft_name(rule_text: str) -> str:
    match = re.search(r"\brule\s+([A-Za-z_]\w*)", rule_text) or re.search(r"\bid:\s*(\S+)", rule_text)
    return match.group(1) if match else "<unnamed>"


def ensure_unique_name(rule: Rule, taken: set, validator: Optional[RuleValidator] = None) -> Rule:
    """Rename a rule whose identifier collides with ``taken``; the new name is added to ``taken``."""
    if rule.name not in taken:
        taken.add(rule.name)
        return rule
    suffix = 2
    while f"{rule.name}_{suffix}" in taken:
        suffix += 1
    new_name = f"{rule.name}_{suffix}"
    if rule.rule_format is RuleFormat.YARA:
        text = re.sub(rf"\brule\s+{re.escape(rule.name)}\b", f"rule {new_name}", rule.text, count=1)
    else:
        text = re.sub(rf"(\bid:\s*['\"]?){re.escape(rule.name)}", rf"\g<1>{new_name}", rule.text, count=1)
    compiled = (validator or get_validator()).validate(text, rule.rule_format)
    if not isinstance(compiled, Rule):
        raise AlignmentFailure(new_name, 0, [compiled])
    taken.add(new_name)
    return Rule(
        text=compiled.text,
        rule_format=rule.rule_format,
        name=compiled.name,
        sections=compiled.sections,
        provenance=rule.provenance,
        scores=rule.scores,
        attempts=rule.attempts,
        taxonomy_tags=rule.taxonomy_tags,
    )


def write_rule(rule: Rule, directory: Path, line_endings: str = "lf") -> Path:
    """Write a rule as ``<name>.yar`` / ``<name>.yaml`` in UTF-8."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / f"{rule.name}{rule.rule_format.file_suffix}"
    text = rule.text if rule.text.endswith("\n") else rule.text + "\n"
    text = text.replace("\r\n", "\n")
    if line_endings == "crlf":
        text = text.replace("\n", "\r\n")
    path.write_bytes(text.encode("utf-8"))
    return path


def rule_from_record(text: str, rule_format: RuleFormat, record: Dict[str, Any],
                     validator: Optional[RuleValidator] = None) -> Rule:
    """Recompile a stored rule and reattach its provenance and scores."""
    compiled = (validator or get_validator()).validate(text, rule_format)
    if not isinstance(compiled, Rule):
        raise RuleCompileFailed(record.get("name", "<unnamed>"), compiled)
    scores = record.get("scores") or {}
    return Rule(
        text=compiled.text,
        rule_format=rule_format,
        name=compiled.name,
        sections=compiled.sections,
        provenance=Provenance.from_dict(record.get("provenance") or {}),
        scores=RuleScores(**{k: scores.get(k) for k in ("confidence", "maliciousness", "risk")}),
        attempts=record.get("attempts", 0),
    )
