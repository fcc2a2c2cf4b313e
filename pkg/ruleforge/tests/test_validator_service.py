import pytest

from ruleforge.services.errors import AlignmentFailure, RuleCompileFailed
from ruleforge.services.llm_service import HeuristicBackend, PromptBuilder
from ruleforge.services.models import CompileError, CompileErrorCode, Provenance, Rule, RuleDraft, RuleFormat, RuleScores
from ruleforge.services.validator_service import (
    AgentMemory,
    ExternalYaraCompiler,
    align_rule,
    ensure_unique_name,
    format_error_block,
    rule_from_record,
    write_rule,
)
from ruleforge.tests.conftest import BASE_SEMGREP, BASE_YARA, ScriptedBackend

YARA_MUTATIONS = [
    ("bom", b"\xef\xbb\xbf" + BASE_YARA.encode("utf-8"), CompileErrorCode.ENCODING),
    ("not_utf8", BASE_YARA.encode("utf-8").replace(b"ruleforge", b"rule\xffforge"), CompileErrorCode.ENCODING),
    ("no_closing_brace", BASE_YARA.rstrip().rstrip("}"), CompileErrorCode.SYNTAX),
    ("no_open_paren", BASE_YARA.replace("2 of (", "2 of "), CompileErrorCode.SYNTAX),
    ("no_condition", BASE_YARA.replace("    condition:\n", ""), CompileErrorCode.MISSING_SECTION),
    ("no_strings", BASE_YARA.replace("    strings:\n", ""), CompileErrorCode.MISSING_SECTION),
    ("no_header", BASE_YARA.replace("rule pypi", "rulee pypi"), CompileErrorCode.MISSING_SECTION),
    ("undefined", BASE_YARA.replace("$post)", "$gone)"), CompileErrorCode.UNDEFINED_STRING),
    ("empty_set", BASE_YARA.replace("2 of ($host, $user, $post)", "2 of ($z*)"), CompileErrorCode.UNDEFINED_STRING),
    ("bad_regex", BASE_YARA.replace(r"/requests\.post\(/", "/requests(post/"), CompileErrorCode.BAD_REGEX),
    ("float_meta", BASE_YARA.replace("version = 2", "version = 2.5"), CompileErrorCode.BAD_META),
    ("bare_meta", BASE_YARA.replace("reviewed = true", "reviewed = yes"), CompileErrorCode.BAD_META),
    ("bare_words_meta", BASE_YARA.replace('author = "ruleforge"', "author = John Doe"), CompileErrorCode.BAD_META),
    ("keyword_words_meta", BASE_YARA.replace('description = "collects host details and posts them"',
                                             "description = grabs all of them"), CompileErrorCode.BAD_META),
    ("duplicate", BASE_YARA.replace("$user = ", "$host = "), CompileErrorCode.SYNTAX),
    ("bad_hex", BASE_YARA.replace("{ 73 6F 63 6B", "{ 73 6F 6 6B"), CompileErrorCode.SYNTAX),
    ("bad_escape", BASE_YARA.replace('"socket.gethostname"', r'"socket\qgethostname"'), CompileErrorCode.SYNTAX),
    ("unterminated", BASE_YARA.replace('"getpass.getuser"', '"getpass.getuser'), CompileErrorCode.SYNTAX),
]

SEMGREP_MUTATIONS = [
    ("no_message", BASE_SEMGREP.replace("    message: host details posted to a remote collector\n", ""),
     CompileErrorCode.YAML_STRUCTURE),
    ("bad_regex", BASE_SEMGREP.split("    patterns:")[0] + "    pattern-regex: 'requests(post'\n",
     CompileErrorCode.BAD_REGEX),
    ("two_patterns", BASE_SEMGREP + "    pattern: requests.post(...)\n", CompileErrorCode.YAML_STRUCTURE),
    ("bad_yaml", BASE_SEMGREP.replace("languages: [python]", "languages: [python"), CompileErrorCode.YAML_STRUCTURE),
]


def _fenced(text, fmt="yara"):
    return f"Analysis Result:\nfixed it\n\n```{fmt}\n{text.rstrip()}\n```\n"


def test_base_rules_compile(validator):
    yara_rule = validator.compile_yara(BASE_YARA)
    assert isinstance(yara_rule, Rule)
    assert yara_rule.name == "pypi_hostinfo_stealer"
    assert yara_rule.sections.string_ids == ["$host", "$user", "$post", "$hex"]

    semgrep_rule = validator.check_semgrep(BASE_SEMGREP)
    assert isinstance(semgrep_rule, Rule)
    assert semgrep_rule.name == "hostinfo-post"
    assert semgrep_rule.sections[0].clause_key == "patterns"


@pytest.mark.parametrize("label, text, code", YARA_MUTATIONS, ids=[m[0] for m in YARA_MUTATIONS])
def test_yara_mutations_report_expected_code(validator, label, text, code):
    errors = validator.compile_yara(text)
    assert isinstance(errors, list) and errors
    assert errors[0].code is code
    assert all(e.message for e in errors)


@pytest.mark.parametrize("label, text, code", SEMGREP_MUTATIONS, ids=[m[0] for m in SEMGREP_MUTATIONS])
def test_semgrep_mutations_report_expected_code(validator, label, text, code):
    errors = validator.check_semgrep(text)
    assert isinstance(errors, list) and errors
    assert errors[0].code is code


def test_messages_are_specific(validator):
    errors = validator.compile_yara(BASE_YARA.replace("$post)", "$gone)"))
    assert "undefined string $gone" in errors[0].message

    errors = validator.compile_yara(BASE_YARA.replace('author = "ruleforge"', "author = John Doe"))
    assert [e.code for e in errors] == [CompileErrorCode.BAD_META]
    assert "meta field 'author' has invalid value John Doe" in errors[0].message

    errors = validator.compile_yara(BASE_YARA.replace("    condition:\n", ""))
    assert errors[0].message == "missing 'condition:' section"


def test_missing_pattern_clause(validator):
    text = BASE_SEMGREP.split("    patterns:")[0]
    errors = validator.check_semgrep(text)
    assert errors[0].code is CompileErrorCode.YAML_STRUCTURE
    assert "found none" in errors[0].message


def test_agent_memory_keeps_newest_errors():
    memory = AgentMemory(size=2, max_attempts=2)
    for n in range(3):
        memory.remember([n])
    assert list(memory.recent_errors) == [[1], [2]]
    assert len(memory.history) == 3
    assert memory.next_attempt() == 1
    assert memory.next_attempt() == 2
    assert memory.exhausted
    with pytest.raises(RuntimeError):
        memory.next_attempt()


def test_align_passes_compiling_drafts_through():
    backend = ScriptedBackend(["unused"])
    provenance = Provenance(cluster_id=3, generator="scripted")
    draft = RuleDraft("analysis", BASE_YARA, RuleFormat.YARA, provenance, RuleScores(confidence=0.5))
    rule = align_rule(draft, backend)
    assert rule.attempts == 0
    assert rule.provenance == provenance
    assert rule.scores.confidence == 0.5
    assert backend.prompts == []


def test_align_gives_up_after_budget():
    broken = BASE_YARA.replace("$post)", "$gone)")
    backend = ScriptedBackend([_fenced(broken)])
    draft = RuleDraft("analysis", broken, RuleFormat.YARA)
    with pytest.raises(AlignmentFailure) as info:
        align_rule(draft, backend, max_attempts=5, memory_size=2, prompt_builder=PromptBuilder().build_fix_prompt)

    assert info.value.attempts == 5
    assert len(info.value.history) == 6
    assert info.value.rule_name == "pypi_hostinfo_stealer"
    assert len(backend.prompts) == 5
    assert [len(p.errors) for p in backend.prompts] == [1, 2, 2, 2, 2]
    assert all(p.user_text.count("Error message ") == len(p.errors) for p in backend.prompts)


def test_align_counts_answers_without_rules():
    fixed = BASE_YARA
    broken = BASE_YARA.replace("$post)", "$gone)")
    backend = ScriptedBackend(["I cannot help with that.", _fenced(fixed)])
    rule = align_rule(RuleDraft("", broken, RuleFormat.YARA), backend)
    assert rule.attempts == 2
    assert rule.text.strip() == fixed.strip()


def test_heuristic_backend_repairs_missing_brace():
    broken = BASE_YARA.rstrip().rstrip("}")
    rule = align_rule(RuleDraft("analysis", broken, RuleFormat.YARA), HeuristicBackend())
    assert rule.attempts == 1
    assert rule.name == "pypi_hostinfo_stealer"


def test_heuristic_backend_repairs_undefined_reference():
    broken = BASE_YARA.replace("$post)", "$gone)")
    rule = align_rule(RuleDraft("analysis", broken, RuleFormat.YARA), HeuristicBackend())
    assert rule.attempts == 1
    assert "any of them" in rule.text


def test_unique_names(validator):
    yara_rule = validator.compile_yara(BASE_YARA)
    taken = {"pypi_hostinfo_stealer", "pypi_hostinfo_stealer_2"}
    renamed = ensure_unique_name(yara_rule, taken, validator)
    assert renamed.name == "pypi_hostinfo_stealer_3"
    assert renamed.text.startswith("rule pypi_hostinfo_stealer_3 : stealer")
    assert "pypi_hostinfo_stealer_3" in taken

    semgrep_rule = validator.check_semgrep(BASE_SEMGREP)
    taken = set()
    assert ensure_unique_name(semgrep_rule, taken, validator) is semgrep_rule
    assert ensure_unique_name(semgrep_rule, taken, validator).name == "hostinfo-post_2"


def test_write_rule_line_endings(tmp_path, validator):
    rule = validator.compile_yara(BASE_YARA)
    path = write_rule(rule, tmp_path / "rules")
    assert path.name == "pypi_hostinfo_stealer.yar"
    assert path.read_bytes() == BASE_YARA.encode("utf-8")

    crlf = write_rule(rule, tmp_path / "crlf", line_endings="crlf")
    data = crlf.read_bytes()
    assert data.count(b"\r\n") == BASE_YARA.count("\n")
    assert b"\r\r" not in data

    semgrep = write_rule(validator.check_semgrep(BASE_SEMGREP), tmp_path / "rules")
    assert semgrep.name == "hostinfo-post.yaml"


def test_rule_from_record(validator):
    record = {
        "name": "pypi_hostinfo_stealer",
        "provenance": {"cluster_id": 1, "package": None, "flags": [], "representatives": [], "generator": "heuristic"},
        "scores": {"confidence": 0.8, "maliciousness": None, "risk": 0.7},
        "attempts": 2,
    }
    rule = rule_from_record(BASE_YARA, RuleFormat.YARA, record, validator)
    assert rule.attempts == 2
    assert rule.scores.confidence == 0.8
    assert rule.provenance.cluster_id == 1

    with pytest.raises(RuleCompileFailed) as info:
        rule_from_record(BASE_YARA.replace("$post)", "$gone)"), RuleFormat.YARA, record, validator)
    payload = info.value.to_dict()
    assert payload["error"] == "compile_error"
    assert payload["errors"][0]["code"] == "undefined_string"


def test_error_blocks():
    errors = [CompileError(CompileErrorCode.SYNTAX, "line 3: oops"), CompileError(CompileErrorCode.BAD_META, "bad")]
    assert format_error_block(errors) == "[syntax] line 3: oops\n[bad_meta] bad"


def test_real_yara_agrees_on_base_rule():
    pytest.importorskip("yara")
    assert ExternalYaraCompiler().check(BASE_YARA) == []
    assert ExternalYaraCompiler().check(BASE_YARA.replace("$post)", "$gone)")) != []
