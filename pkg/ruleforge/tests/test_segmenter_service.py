import pytest

from ruleforge.services.models import FlagKind, PackageMetadata, SourceFile, UnitKind
from ruleforge.services.segmenter_service import (
    SegmenterService,
    audit_metadata,
    extract_basic_units,
    load_name_list,
    normalize_name,
    split_segments,
    tokenize_source,
)
from ruleforge.services.settings import SegmenterSettings

TOKEN_SAMPLE = 'import os  # comment\nx = os.getenv("HOME", \'x\')\nprint(x ** 2)\n'

TOKEN_GOLDEN = [
    ("ident", "import"), ("ident", "os"),
    ("ident", "x"), ("op", "="), ("ident", "os"), ("punct", "."), ("ident", "getenv"), ("punct", "("),
    ("str", '"HOME"'), ("punct", ","), ("str", "'x'"), ("punct", ")"),
    ("ident", "print"), ("punct", "("), ("ident", "x"), ("op", "**"), ("num", "2"), ("punct", ")"),
]

SETUP_SAMPLE = (
    "import os\n"
    "import base64\n"
    "\n"
    'URL = "http://203.0.113.7/x"\n'
    "\n"
    "class Installer:\n"
    "    def run(self):\n"
    "        return 1\n"
    "\n"
    "\n"
    "def stage():\n"
    "    data = base64.b64decode(URL)\n"
    "    exec(data)\n"
)


def _file(text, path="pkg/setup.py"):
    return SourceFile.from_bytes(path, text.encode("utf-8"))


def test_tokenizer_golden():
    tokens = tokenize_source(_file(TOKEN_SAMPLE))
    assert [(t.kind, t.text) for t in tokens] == TOKEN_GOLDEN
    x = tokens[2]
    assert (x.start, x.end) == (21, 22)
    assert all(TOKEN_SAMPLE[t.start:t.end] == t.text for t in tokens)


def test_tokenizer_reads_javascript_comments():
    tokens = tokenize_source(_file("// header\nconst a = require('fs'); /* x */\n", "index.js"))
    assert [t.text for t in tokens] == ["const", "a", "=", "require", "(", "'fs'", ")", ";"]


def test_split_segments_windows():
    tokens = tokenize_source(_file(TOKEN_SAMPLE))
    segments = split_segments(tokens, 8, "pkg/setup.py")
    assert [s.token_count for s in segments] == [8, 8, 2]
    assert [s.index for s in segments] == [0, 1, 2]
    assert segments[0].start == 0
    assert segments[-1].end == len(TOKEN_SAMPLE.rstrip("\n"))
    assert split_segments([], 8) == []
    with pytest.raises(ValueError):
        split_segments(tokens, 0)


def test_basic_units_golden():
    units = extract_basic_units(_file(SETUP_SAMPLE), package="evil")
    assert [(u.kind, u.line_start, u.line_end) for u in units] == [
        (UnitKind.MODULE_PRELUDE, 1, 5),
        (UnitKind.CLASS, 6, 10),
        (UnitKind.FUNCTION, 11, 13),
    ]
    assert "".join(u.text for u in units) == SETUP_SAMPLE
    assert [u.index for u in units] == [0, 1, 2]
    assert {u.package for u in units} == {"evil"}


def test_decorator_stays_with_definition():
    text = '@app.route("/x")\n@login_required\ndef handler():\n    return 1\n'
    units = extract_basic_units(_file(text))
    assert [(u.kind, u.line_start, u.line_end) for u in units] == [(UnitKind.FUNCTION, 1, 4)]


def test_long_units_continue_as_overflow_chunks():
    body = "".join(f"    value_{i} = compute({i})\n" for i in range(40))
    text = "def big():\n" + body
    units = extract_basic_units(_file(text), char_cap=200)
    assert units[0].kind is UnitKind.FUNCTION
    assert {u.kind for u in units[1:]} == {UnitKind.OVERFLOW_CHUNK}
    assert all(u.char_len <= 200 for u in units)
    assert "".join(u.text for u in units) == text


def test_javascript_units():
    text = "const http = require('http');\nfunction send(data) {\n  http.request('http://x');\n}\n"
    units = extract_basic_units(_file(text, "pkg/index.js"))
    assert [(u.kind, u.line_start, u.line_end) for u in units] == [
        (UnitKind.MODULE_PRELUDE, 1, 1),
        (UnitKind.FUNCTION, 2, 4),
    ]


def test_empty_file_has_no_units():
    assert extract_basic_units(_file("")) == []


def test_audit_flags_each_kind():
    meta = PackageMetadata(name="reqeusts", version="0.0.0", dependencies=(("Colourama", ">=0.1"),))
    flags = audit_metadata(meta, popular=["requests", "numpy"], denylist=["colourama"])
    assert [f.kind for f in flags] == [
        FlagKind.EMPTY_INFORMATION,
        FlagKind.MALICIOUS_DEPENDENCY,
        FlagKind.RELEASE_ZERO,
        FlagKind.TYPOSQUATTING,
    ]
    assert "requests" in flags[-1].evidence


def test_audit_clean_metadata():
    meta = PackageMetadata(name="requests", version="2.31.0", description="HTTP for humans",
                           dependencies=(("idna", ""),))
    assert audit_metadata(meta, popular=["requests", "reqeusts-like"], denylist=["colourama"]) == []


@pytest.mark.parametrize("version, flagged", [("0.0.0", True), ("v0.0", True), ("0", True),
                                              ("0.0.1", False), ("", False), ("0.0.0a1", False)])
def test_release_zero(version, flagged):
    meta = PackageMetadata(name="somepackage", version=version, description="x")
    kinds = {f.kind for f in audit_metadata(meta, [], [])}
    assert (FlagKind.RELEASE_ZERO in kinds) is flagged


def test_short_names_are_not_typosquats():
    meta = PackageMetadata(name="sax", version="1.0", description="x")
    assert audit_metadata(meta, popular=["six"], denylist=[], min_length=4) == []


def test_name_lists_and_normalization(tmp_path):
    path = tmp_path / "names.txt"
    path.write_text("# header\nrequests\n\nFlask  # web\n", encoding="utf-8")
    assert load_name_list(path) == ["requests", "Flask"]
    assert load_name_list(tmp_path / "missing.txt") == []
    assert normalize_name(" Foo_Bar.baz ") == "foo-bar-baz"


def test_service_uses_bundled_lists():
    service = SegmenterService.from_settings(SegmenterSettings())
    assert "requests" in service.popular
    assert "colourama" in service.denylist
    flags = service.audit(PackageMetadata(name="reqeusts", version="1.0", description="x"))
    assert [f.kind for f in flags] == [FlagKind.TYPOSQUATTING]
