"""
Rule execution over unpacked packages.

YARA-subset rules run on the built-in engine: every string is searched in
the raw file bytes, then the condition is evaluated over the hit counts.
Semgrep rules go to the ``semgrep`` binary when one is configured, else to
an approximate pattern matcher whose results are flagged as such.
"""
import json
import shutil
import subprocess
import tempfile
import time
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import regex
import yaml
from loguru import logger

from ruleforge.services.errors import EngineTimeout, RuleCompileFailed
from ruleforge.services.models import (
    Label,
    MatchResult,
    PackageRecord,
    PackageVerdict,
    Rule,
    RuleFormat,
    ScanReport,
    SemgrepRuleSpec,
    SourceFile,
)
from ruleforge.services.yara_language import YaraRuleAst, YaraString, evaluate_condition, hex_to_regex, unescape_text

DEFAULT_TIMEOUT = 2.0

_WORD_BEFORE = rb"(?<![A-Za-z0-9])"
_WORD_AFTER = rb"(?![A-Za-z0-9])"

LANGUAGE_EXTENSIONS = {
    "python": (".py",),
    "javascript": (".js", ".mjs", ".cjs"),
    "js": (".js", ".mjs", ".cjs"),
    "typescript": (".ts",),
    "json": (".json",),
    "yaml": (".yaml", ".yml"),
}


# ---------------------------------------------------------------------------
# YARA strings

def _variants(s: YaraString) -> List[bytes]:
    """Byte forms searched for a text string (ascii and/or wide)."""
    raw = unescape_text(s.value)
    wide = b"".join(bytes([b, 0]) for b in raw)
    if "wide" in s.modifiers and "ascii" in s.modifiers:
        return [raw, wide]
    if "wide" in s.modifiers:
        return [wide]
    return [raw]


def _find_all(data: bytes, needle: bytes) -> List[int]:
    offsets = []
    start = data.find(needle)
    while start >= 0:
        offsets.append(start)
        start = data.find(needle, start + 1)
    return offsets


def compile_string(s: YaraString) -> Optional["regex.Pattern"]:
    """Bytes pattern for a string, or None for a plain literal searched with ``bytes.find``."""
    if s.kind == "hex":
        return regex.compile(hex_to_regex(s.value), regex.DOTALL)
    if s.kind == "regex":
        options = regex.DOTALL if "s" in s.flags else 0
        if "i" in s.flags or "nocase" in s.modifiers:
            options |= regex.IGNORECASE
        return regex.compile(s.value.encode("utf-8"), options)
    if "nocase" not in s.modifiers and "fullword" not in s.modifiers:
        return None
    body = b"|".join(regex.escape(v) for v in _variants(s))
    if "fullword" in s.modifiers:
        body = _WORD_BEFORE + b"(?:" + body + b")" + _WORD_AFTER
    return regex.compile(body, regex.IGNORECASE if "nocase" in s.modifiers else 0)


def string_offsets(s: YaraString, pattern: Optional["regex.Pattern"], data: bytes, deadline: float) -> List[int]:
    """
    Offsets of every hit of one string in ``data``.

    Text and hex strings report overlapping hits; regex strings report
    non-overlapping ones.

    Raises:
        TimeoutError: the deadline passed
    """
    if pattern is None:
        offsets = set()
        for needle in _variants(s):
            offsets.update(_find_all(data, needle))
        return sorted(offsets)
    remaining = deadline - time.monotonic()
    if remaining <= 0:
        raise TimeoutError("time budget exhausted")
    overlapped = s.kind != "regex"
    return sorted({m.start() for m in pattern.finditer(data, overlapped=overlapped, timeout=remaining)})


class CompiledYaraRule:
    def __init__(self, rule: Rule):
        if not isinstance(rule.sections, YaraRuleAst):
            raise RuleCompileFailed(rule.name)
        self.rule = rule
        self.ast: YaraRuleAst = rule.sections
        self.patterns = [(s, compile_string(s)) for s in self.ast.strings]

    def match(self, data: bytes, budget: float) -> Optional[Tuple[int, ...]]:
        """Sorted union of string offsets when the condition holds, else None."""
        deadline = time.monotonic() + budget
        counts: Dict[str, int] = {}
        offsets = set()
        for s, pattern in self.patterns:
            hits = string_offsets(s, pattern, data, deadline)
            counts[s.identifier] = counts.get(s.identifier, 0) + len(hits)
            offsets.update(hits)
        if not evaluate_condition(self.ast.condition, counts, self.ast.string_ids, len(data)):
            return None
        return tuple(sorted(offsets))


# ---------------------------------------------------------------------------
# Semgrep fallback

_PATTERN_TOKEN = regex.compile(r"\.\.\.|\$[A-Z_][A-Z0-9_]*|\w+|\S")


def pattern_to_regex(pattern: str) -> str:
    """
    Approximate a Semgrep ``pattern`` by a regex over source text.

    Tokens may be separated by any whitespace, ``...`` matches anything and
    a metavariable matches one identifier or literal.
    """
    parts = []
    for token in _PATTERN_TOKEN.findall(pattern):
        if token == "...":
            parts.append(r"[\s\S]*?")
        elif token.startswith("$") and len(token) > 1:
            parts.append(r"(?:\w+(?:\.\w+)*|\"[^\"\n]*\"|'[^'\n]*')")
        else:
            parts.append(regex.escape(token))
    return r"\s*".join(parts)


def _clause_lines(key: str, value, text: str, deadline: float) -> Optional[set]:
    """Lines matched by a clause; None means "no constraint" (negative-only clauses)."""
    remaining = max(deadline - time.monotonic(), 1e-3)
    if key in ("pattern", "pattern-regex"):
        source = pattern_to_regex(value) if key == "pattern" else value
        compiled = regex.compile(source, regex.MULTILINE)
        return {text.count("\n", 0, m.start()) + 1 for m in compiled.finditer(text, timeout=remaining)}
    if key == "pattern-either":
        lines = set()
        for item in value:
            sub_key = next(iter(item))
            lines |= _clause_lines(sub_key, item[sub_key], text, deadline) or set()
        return lines
    if key == "patterns":
        positive: Optional[set] = None
        negative = set()
        for item in value:
            sub_key = next(iter(item))
            if sub_key in ("pattern-not", "pattern-not-regex", "pattern-not-inside"):
                base = "pattern-regex" if sub_key == "pattern-not-regex" else "pattern"
                negative |= _clause_lines(base, item[sub_key], text, deadline) or set()
            elif sub_key == "pattern-inside":
                found = _clause_lines("pattern", item[sub_key], text, deadline)
                if not found:
                    return set()
            else:
                found = _clause_lines(sub_key, item[sub_key], text, deadline) or set()
                positive = found if positive is None else positive & found
        return (positive or set()) - negative
    return set()


def _applies_to(spec: SemgrepRuleSpec, file: SourceFile) -> bool:
    if "generic" in spec.languages or "regex" in spec.languages:
        return True
    return any(file.extension in LANGUAGE_EXTENSIONS.get(lang, ()) for lang in spec.languages)


class SemgrepFallback:
    """Approximate Semgrep execution over decoded file text."""

    def __init__(self, rule: Rule):
        self.rule = rule
        self.specs: Sequence[SemgrepRuleSpec] = rule.sections

    def match(self, file: SourceFile, budget: float) -> Optional[Tuple[int, ...]]:
        deadline = time.monotonic() + budget
        lines = set()
        for spec in self.specs:
            if not _applies_to(spec, file):
                continue
            lines |= _clause_lines(spec.clause_key, spec.clause, file.content, deadline) or set()
        return tuple(sorted(lines)) if lines else None


class SemgrepBinary:
    """Runs rules through the ``semgrep`` CLI and reads its JSON findings."""

    def __init__(self, binary: str, timeout: float = DEFAULT_TIMEOUT):
        self.binary = binary
        self.timeout = timeout

    @property
    def available(self) -> bool:
        return shutil.which(self.binary) is not None

    def scan_package(self, rules: Sequence[Rule], record: PackageRecord) -> List[MatchResult]:
        with tempfile.TemporaryDirectory() as tmp:
            config = Path(tmp) / "rules.yaml"
            specs = [spec for r in rules for spec in (yaml.safe_load(r.text) or {}).get("rules", [])]
            config.write_text(yaml.safe_dump({"rules": specs}, sort_keys=False), encoding="utf-8")
            result = subprocess.run(
                [self.binary, "--json", "--metrics=off", "--quiet", "--timeout", str(int(max(1, self.timeout))),
                 "--config", str(config), record.root],
                capture_output=True, text=True,
            )
        if result.returncode not in (0, 1):
            logger.warning(f"⚠️  semgrep failed on {record.name}: {result.stderr.strip()[:200]}")
            return []
        findings: Dict[Tuple[str, str], set] = defaultdict(set)
        ids = {spec.id: r.name for r in rules for spec in r.sections}
        for item in json.loads(result.stdout or "{}").get("results", []):
            check_id = item.get("check_id", "").rsplit(".", 1)[-1]
            rule_id = ids.get(check_id, check_id)
            path = Path(item["path"])
            try:
                relative = path.resolve().relative_to(Path(record.root).resolve()).as_posix()
            except ValueError:
                relative = path.as_posix()
            findings[(rule_id, relative)].add(item.get("start", {}).get("line", 0))
        return [
            MatchResult(rule_id, record.name, file, tuple(sorted(lines)))
            for (rule_id, file), lines in sorted(findings.items())
        ]


# ---------------------------------------------------------------------------
# scanning

class RuleEngine:
    """
    Compiled rule set.

    Args:
        rules: Compiled YARA and/or Semgrep rules
        timeout: Per (rule, file) time budget in seconds
        semgrep_binary: Semgrep CLI; the approximate matcher is used when missing
    """

    def __init__(self, rules: Sequence[Rule], timeout: float = DEFAULT_TIMEOUT, semgrep_binary: Optional[str] = None):
        self.timeout = timeout
        self.yara = [CompiledYaraRule(r) for r in rules if r.rule_format is RuleFormat.YARA]
        semgrep_rules = [r for r in rules if r.rule_format is RuleFormat.SEMGREP]
        self.semgrep_binary = None
        if semgrep_rules and semgrep_binary:
            binary = SemgrepBinary(semgrep_binary, timeout)
            if binary.available:
                self.semgrep_binary = binary
            else:
                logger.warning(f"⚠️  semgrep binary '{semgrep_binary}' not found; using the approximate matcher")
        self.semgrep_rules = semgrep_rules
        self.semgrep_fallback = [] if self.semgrep_binary else [SemgrepFallback(r) for r in semgrep_rules]

    @property
    def approximate(self) -> bool:
        return bool(self.semgrep_fallback)

    def scan_file(self, file: SourceFile, package: str = "", timeouts: Optional[List[EngineTimeout]] = None) -> List[MatchResult]:
        results = []
        data = file.raw if file.raw else file.content.encode("utf-8")
        for engine in [*self.yara, *self.semgrep_fallback]:
            try:
                if isinstance(engine, CompiledYaraRule):
                    offsets = engine.match(data, self.timeout)
                else:
                    offsets = engine.match(file, self.timeout)
            except TimeoutError:
                timeout = EngineTimeout(engine.rule.name, f"{package}/{file.relative_path}", self.timeout)
                logger.warning(f"⚠️  {timeout}")
                if timeouts is not None:
                    timeouts.append(timeout)
                continue
            if offsets is not None:
                results.append(MatchResult(engine.rule.name, package, file.relative_path, offsets))
        return results

    def scan_package(self, record: PackageRecord) -> Tuple[List[MatchResult], List[EngineTimeout]]:
        timeouts: List[EngineTimeout] = []
        matches = []
        for file in record.files:
            matches.extend(self.scan_file(file, record.name, timeouts))
        if self.semgrep_binary is not None and record.root:
            matches.extend(self.semgrep_binary.scan_package(self.semgrep_rules, record))
        return matches, timeouts


def scan_file(rules: Sequence[Rule], file: SourceFile, package: str = "",
              timeout: float = DEFAULT_TIMEOUT) -> List[MatchResult]:
    """Matches of ``rules`` in one file; timeouts are logged and skipped."""
    return RuleEngine(rules, timeout).scan_file(file, package)


def build_verdicts(tallies: Dict[str, List[str]], labels: Dict[str, Label], threshold: int) -> List[PackageVerdict]:
    matched: Dict[str, set] = defaultdict(set)
    for rule_id, packages in tallies.items():
        for package in packages:
            matched[package].add(rule_id)
    return [
        PackageVerdict(package, frozenset(matched.get(package, ())), labels[package], threshold)
        for package in sorted(labels)
    ]


def scan_corpus(
    rules: Sequence[Rule],
    packages: Sequence[PackageRecord],
    threshold: int = 1,
    jobs: int = 1,
    timeout: float = DEFAULT_TIMEOUT,
    semgrep_binary: Optional[str] = None,
) -> ScanReport:
    """
    Scan every package and decide verdicts.

    A package is predicted malicious when at least ``threshold`` distinct
    rules match any of its files.

    Returns:
        ScanReport with verdicts sorted by package name and per-rule tallies
    """
    engine = RuleEngine(rules, timeout, semgrep_binary)
    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        outcomes = list(pool.map(engine.scan_package, packages))

    tallies: Dict[str, set] = {r.name: set() for r in rules}
    matches: List[MatchResult] = []
    timeouts: List[Dict] = []
    for (package_matches, package_timeouts) in outcomes:
        matches.extend(package_matches)
        timeouts.extend(t.to_dict() for t in package_timeouts)
        for match in package_matches:
            tallies.setdefault(match.rule_id, set()).add(match.package)

    labels = {p.name: p.label for p in packages}
    sorted_tallies = {rule_id: sorted(pkgs) for rule_id, pkgs in sorted(tallies.items())}
    report = ScanReport(
        verdicts=build_verdicts(sorted_tallies, labels, threshold),
        tallies=sorted_tallies,
        matches=sorted(matches, key=lambda m: (m.package, m.file, m.rule_id)),
        timeouts=sorted(timeouts, key=lambda t: (t["rule_id"], t["file"])),
        threshold=threshold,
        approximate=engine.approximate,
    )
    predicted = sum(1 for v in report.verdicts if v.predicted)
    logger.info(f"✅ Scanned {len(packages)} packages with {len(rules)} rules: {predicted} flagged (T={threshold})")
    return report


def rescore(report: ScanReport, threshold: int) -> ScanReport:
    """Same scan, verdicts recomputed for another matched-rule threshold."""
    return ScanReport(
        verdicts=[PackageVerdict(v.package, v.matched_rules, v.label, threshold) for v in report.verdicts],
        tallies=report.tallies,
        matches=report.matches,
        timeouts=report.timeouts,
        threshold=threshold,
        approximate=report.approximate,
    )


def write_findings_jsonl(matches: Iterable[MatchResult], path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [json.dumps(m.to_dict(), sort_keys=True) for m in matches]
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def report_to_dict(report: ScanReport) -> Dict:
    return {
        "threshold": report.threshold,
        "approximate": report.approximate,
        "verdicts": [v.to_dict() for v in report.verdicts],
        "timeouts": report.timeouts,
    }


def report_from_files(verdicts: Dict, tallies: Dict[str, List[str]]) -> ScanReport:
    """Rebuild a ScanReport from the scan stage's verdicts and tallies files."""
    return ScanReport(
        verdicts=[
            PackageVerdict(v["package"], frozenset(v["matched_rules"]), Label(v["label"]), verdicts["threshold"])
            for v in verdicts["verdicts"]
        ],
        tallies=tallies,
        matches=[],
        timeouts=verdicts.get("timeouts", []),
        threshold=verdicts["threshold"],
        approximate=verdicts.get("approximate", False),
    )
