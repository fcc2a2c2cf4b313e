import re

import pytest

from ruleforge.services.yara_language import (
    BinaryExpr,
    HexStringError,
    OfExpr,
    TextEscapeError,
    YaraSyntaxError,
    condition_refs,
    escape_text,
    evaluate_condition,
    hex_to_regex,
    lex_yara,
    parse_int,
    parse_yara,
    render_yara,
    resolve_items,
    unescape_text,
)
from ruleforge.tests.conftest import BASE_YARA


def _rule(condition: str) -> str:
    return (
        "rule sample\n{\n    meta:\n        k = 1\n    strings:\n"
        '        $a1 = "one"\n        $a2 = "two"\n        $b = "three"\n'
        f"    condition:\n        {condition}\n}}\n"
    )


def _evaluate(condition, counts, filesize=100):
    ast = parse_yara(_rule(condition))
    return evaluate_condition(ast.condition, counts, ast.string_ids, filesize)


def test_parse_full_rule():
    ast = parse_yara(BASE_YARA)
    assert ast.name == "pypi_hostinfo_stealer"
    assert ast.tags == ("stealer",)
    assert [(m.key, m.kind, m.value) for m in ast.meta] == [
        ("description", "text", "collects host details and posts them"),
        ("author", "text", "ruleforge"),
        ("version", "int", 2),
        ("reviewed", "bool", True),
    ]
    assert [(s.identifier, s.kind, s.modifiers) for s in ast.strings] == [
        ("$host", "text", ("ascii",)),
        ("$user", "text", ("nocase",)),
        ("$post", "regex", ()),
        ("$hex", "hex", ()),
    ]
    assert ast.strings[2].value == r"requests\.post\("
    assert ast.strings[3].value == "73 6F 63 6B ?? 74"
    assert isinstance(ast.condition, BinaryExpr)


def test_render_gives_back_canonical_text():
    assert render_yara(parse_yara(BASE_YARA)) == BASE_YARA


def test_render_keeps_needed_parentheses():
    grouped = parse_yara(render_yara(parse_yara(_rule("($a1 or $a2) and $b"))))
    assert _evaluate("($a1 or $a2) and $b", {"$a1": 1}) is False
    assert "($a1 or $a2) and $b" in render_yara(grouped)
    assert "        $a1 or $a2 and $b\n" in render_yara(parse_yara(_rule("$a1 or $a2 and $b")))


def test_bare_meta_words_fold_into_one_value():
    text = BASE_YARA.replace('author = "ruleforge"', "author = John Doe").replace(
        "version = 2", "version = strings of them")
    ast = parse_yara(text)
    meta = {m.key: (m.kind, m.value) for m in ast.meta}
    assert meta["author"] == ("identifier", "John Doe")
    assert meta["version"] == ("identifier", "strings of them")
    assert meta["reviewed"] == ("bool", True)
    assert [s.identifier for s in ast.strings] == ["$host", "$user", "$post", "$hex"]


def test_modifiers_and_private_rules():
    text = _rule("any of them").replace("rule sample", "private global rule sample : a b")
    ast = parse_yara(text)
    assert ast.modifiers == ("private", "global")
    assert ast.tags == ("a", "b")


@pytest.mark.parametrize("condition, counts, filesize, expected", [
    ("2 of ($a*)", {"$a1": 1, "$a2": 3}, 100, True),
    ("2 of ($a*)", {"$a1": 1, "$b": 1}, 100, False),
    ("any of them", {"$b": 1}, 100, True),
    ("none of them", {}, 100, True),
    ("all of them", {"$a1": 1, "$a2": 1}, 100, False),
    ("#a1 >= 2 and filesize < 1KB", {"$a1": 2}, 100, True),
    ("#a1 >= 2 and filesize < 1KB", {"$a1": 2}, 2048, False),
    ("not $a1 or $b", {}, 100, True),
    ("not $a1 or $b", {"$a1": 1}, 100, False),
    ("$a1 or $a2 and $b", {"$a1": 1}, 100, True),
    ("$a1 and ($a2 or $b)", {"$a1": 1, "$b": 1}, 100, True),
    ("filesize == 0x64", {}, 100, True),
    ("true and not false", {}, 100, True),
])
def test_condition_evaluation(condition, counts, filesize, expected):
    assert _evaluate(condition, counts, filesize) is expected


def test_string_sets_and_references():
    ids = ["$a1", "$a2", "$b"]
    assert resolve_items(("$a*", "$a1"), ids) == ["$a1", "$a2"]
    assert resolve_items(None, ids) == ids
    assert resolve_items(("$*",), ids) == ids

    ast = parse_yara(_rule("#a1 > 0 and any of ($b, $z*) and not $a2"))
    assert condition_refs(ast.condition) == [("count", "$a1"), ("set", "$b"), ("set", "$z*"), ("ref", "$a2")]
    assert isinstance(parse_yara(_rule("1 of them")).condition, OfExpr)


@pytest.mark.parametrize("text, value", [("12", 12), ("0x1F", 31), ("2KB", 2048), ("1MB", 1048576)])
def test_parse_int(text, value):
    assert parse_int(text) == value


def test_hex_strings_translate_to_byte_patterns():
    pattern = re.compile(hex_to_regex("73 6F ?? 7?"), re.DOTALL)
    assert pattern.fullmatch(b"\x73\x6f\x00\x74")
    assert not pattern.fullmatch(b"\x73\x6f\x00\x84")

    nibble = re.compile(hex_to_regex("?4"), re.DOTALL)
    assert nibble.fullmatch(b"\x34") and nibble.fullmatch(b"\xf4")
    assert not nibble.fullmatch(b"\x35")

    jumps = re.compile(hex_to_regex("41 [2-3] 42 ( 43 | 44 45 )"), re.DOTALL)
    assert jumps.fullmatch(b"A..BC")
    assert jumps.fullmatch(b"A...BDE")
    assert not jumps.fullmatch(b"A.BC")
    assert re.compile(hex_to_regex("41 [2] 42"), re.DOTALL).fullmatch(b"A..B")
    assert re.compile(hex_to_regex("41 [1-] 42"), re.DOTALL).fullmatch(b"A....B")


@pytest.mark.parametrize("body", ["", "4", "( 41", "41 | 42", "41 [4-2] 42", "41 )", "GG"])
def test_bad_hex_strings(body):
    with pytest.raises(HexStringError):
        hex_to_regex(body)


def test_text_escapes():
    assert unescape_text(r"a\x41\n\"\\") == b'aA\n"\\'
    for value in ["plain", 'quote " and \\', "tab\tline\n", "café"]:
        assert unescape_text(escape_text(value)) == value.encode("utf-8")
    with pytest.raises(TextEscapeError):
        unescape_text(r"socket\qgethostname")
    with pytest.raises(TextEscapeError):
        unescape_text("dangling\\")


def test_lexer_reports_unterminated_strings():
    _, errors = lex_yara('rule a {\n meta:\n  k = "open\n}')
    assert errors == [(3, "unterminated text string")]


@pytest.mark.parametrize("text", [
    BASE_YARA.rstrip().rstrip("}"),
    BASE_YARA.replace("2 of (", "2 of "),
    BASE_YARA.replace("    strings:\n", ""),
    "rule x { condition: true }",
])
def test_syntax_errors(text):
    with pytest.raises(YaraSyntaxError):
        parse_yara(text)
