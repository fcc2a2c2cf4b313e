"""
Source segmentation and metadata auditing.

- tokenize_source / split_segments: fixed-length token windows for embedding
- extract_basic_units: self-contained code blocks handed to the LLM
- audit_metadata: suspicious-metadata flags (empty info, 0.0.0 releases,
  typosquatting, known-bad dependencies)
"""
import re
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple

from loguru import logger
from rapidfuzz.distance import Levenshtein

from ruleforge.services.models import (
    BasicUnit,
    CodeSegment,
    FlagKind,
    MetadataFlag,
    PackageMetadata,
    PackageRecord,
    SourceFile,
    Token,
    UnitKind,
)

DEFAULT_SEGMENT_THRESHOLD = 512
DEFAULT_UNIT_CHAR_CAP = 4000

_STRING = (
    r"(?:[rRbBuUfF]{1,2})?"
    r"(?:'''[\s\S]*?'''|\"\"\"[\s\S]*?\"\"\"|'(?:\\.|[^'\\\n])*'|\"(?:\\.|[^\"\\\n])*\")"
)
_TOKEN_PATTERNS = [
    ("str", _STRING + r"|`(?:\\.|[^`\\])*`"),
    ("num", r"0[xX][0-9a-fA-F]+|(?:\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?"),
    ("ident", r"[A-Za-z_$][A-Za-z0-9_$]*"),
    ("op", r"\*\*=|//=|>>=|<<=|===|!==|\*\*|//|==|!=|<=|>=|->|=>|\+=|-=|\*=|/=|%=|&=|\|=|\^=|<<|>>|&&|\|\||[-+*/%=<>!&|^~@?]"),
    ("punct", r"[()\[\]{},:;.]"),
    ("unknown", r"[\s\S]"),
]


def _master_pattern(comment: str) -> "re.Pattern[str]":
    parts = [rf"(?P<ws>\s+)", rf"(?P<comment>{comment})"]
    parts += [f"(?P<{kind}>{pattern})" for kind, pattern in _TOKEN_PATTERNS]
    return re.compile("|".join(parts))


_PYTHON_LEXER = _master_pattern(r"\#[^\n]*")
_JS_LEXER = _master_pattern(r"//[^\n]*|/\*[\s\S]*?\*/")

_PY_STARTERS = (
    ("async def ", UnitKind.FUNCTION),
    ("def ", UnitKind.FUNCTION),
    ("class ", UnitKind.CLASS),
    ("if ", UnitKind.CONTROL_BLOCK),
    ("for ", UnitKind.CONTROL_BLOCK),
    ("while ", UnitKind.CONTROL_BLOCK),
    ("try:", UnitKind.CONTROL_BLOCK),
    ("with ", UnitKind.CONTROL_BLOCK),
    ("async with ", UnitKind.CONTROL_BLOCK),
    ("async for ", UnitKind.CONTROL_BLOCK),
)
_JS_STARTERS = (
    ("async function ", UnitKind.FUNCTION),
    ("function ", UnitKind.FUNCTION),
    ("export function ", UnitKind.FUNCTION),
    ("class ", UnitKind.CLASS),
    ("export class ", UnitKind.CLASS),
    ("if ", UnitKind.CONTROL_BLOCK),
    ("if(", UnitKind.CONTROL_BLOCK),
    ("for ", UnitKind.CONTROL_BLOCK),
    ("for(", UnitKind.CONTROL_BLOCK),
    ("while ", UnitKind.CONTROL_BLOCK),
    ("while(", UnitKind.CONTROL_BLOCK),
    ("try ", UnitKind.CONTROL_BLOCK),
    ("try{", UnitKind.CONTROL_BLOCK),
)
_DECORATOR = "@"


def _is_javascript(file: SourceFile) -> bool:
    return file.extension in (".js", ".mjs", ".cjs", ".json")


def tokenize_source(file: SourceFile) -> List[Token]:
    """
    Lexical tokens of a source file.

    Whitespace and comments are dropped; every token keeps its character
    offsets into ``file.content``. Bytes the lexer does not recognise come
    out as single-character ``unknown`` tokens.
    """
    lexer = _JS_LEXER if _is_javascript(file) else _PYTHON_LEXER
    text = file.content
    tokens: List[Token] = []
    pos = 0
    while pos < len(text):
        match = lexer.match(text, pos)
        kind = match.lastgroup
        if kind not in ("ws", "comment"):
            tokens.append(Token(kind, match.group(), match.start(), match.end()))
        pos = match.end()
    return tokens


def split_segments(
    tokens: Sequence[Token],
    threshold: int = DEFAULT_SEGMENT_THRESHOLD,
    file: str = "",
) -> List[CodeSegment]:
    """Cut a token list into consecutive windows of at most ``threshold`` tokens."""
    if threshold < 1:
        raise ValueError("segment threshold must be >= 1")
    segments = []
    for index, begin in enumerate(range(0, len(tokens), threshold)):
        window = tuple(tokens[begin:begin + threshold])
        segments.append(CodeSegment(index, window, file, window[0].start, window[-1].end))
    return segments


def _indent(line: str) -> int:
    return len(line) - len(line.lstrip(" \t"))


def _starter_kind(stripped: str, starters) -> Optional[object]:
    if stripped.startswith(_DECORATOR):
        return _DECORATOR
    for prefix, kind in starters:
        if stripped.startswith(prefix):
            return kind
    return None


def _split_capped(text: str, start: int, end: int, cap: int) -> List[Tuple[int, int]]:
    """Pieces of ``text[start:end]`` no longer than ``cap``, cut after a newline when possible."""
    pieces = []
    pos = start
    while end - pos > cap:
        newline = text.rfind("\n", pos, pos + cap)
        cut = newline + 1 if newline >= pos else pos + cap
        pieces.append((pos, cut))
        pos = cut
    pieces.append((pos, end))
    return pieces


def extract_basic_units(
    file: SourceFile,
    char_cap: int = DEFAULT_UNIT_CHAR_CAP,
    package: str = "",
) -> List[BasicUnit]:
    """
    Split a file into basic units.

    A unit starts at every line of the file's outermost indentation level
    that begins with a starter (``def``, ``class``, ``if`` ...); decorators
    stay with the definition they decorate. Lines before the first starter
    form the module prelude. Units longer than ``char_cap`` continue as
    overflow chunks. Concatenating the unit texts gives back the file.
    """
    text = file.content
    if not text:
        return []

    starters = _JS_STARTERS if _is_javascript(file) else _PY_STARTERS
    lines = text.splitlines(keepends=True)
    indents = [_indent(line) for line in lines if line.strip()]
    top = min(indents) if indents else 0

    blocks: List[List] = []  # [offset, kind]
    decorator_open = False
    offset = 0
    for line in lines:
        if line.strip() and _indent(line) == top:
            kind = _starter_kind(line.lstrip(" \t"), starters)
            if kind is None:
                decorator_open = False
            elif decorator_open:
                if kind in (UnitKind.FUNCTION, UnitKind.CLASS):
                    blocks[-1][1] = kind
                    decorator_open = False
                elif kind is not _DECORATOR:
                    blocks.append([offset, kind])
                    decorator_open = False
            else:
                blocks.append([offset, kind])
                decorator_open = kind is _DECORATOR
        offset += len(line)

    spans: List[Tuple[int, int, UnitKind]] = []
    if not blocks:
        pieces = _split_capped(text, 0, len(text), char_cap)
        kind = UnitKind.MODULE_PRELUDE if len(pieces) == 1 else UnitKind.OVERFLOW_CHUNK
        spans = [(s, e, kind) for s, e in pieces]
    else:
        if blocks[0][0] > 0:
            blocks.insert(0, [0, UnitKind.MODULE_PRELUDE])
        for i, (start, kind) in enumerate(blocks):
            if kind is _DECORATOR:
                kind = UnitKind.FUNCTION
            end = blocks[i + 1][0] if i + 1 < len(blocks) else len(text)
            for j, (s, e) in enumerate(_split_capped(text, start, end, char_cap)):
                spans.append((s, e, kind if j == 0 else UnitKind.OVERFLOW_CHUNK))

    units = []
    for index, (s, e, kind) in enumerate(spans):
        units.append(BasicUnit(
            text=text[s:e],
            kind=kind,
            file=file.relative_path,
            line_start=text.count("\n", 0, s) + 1,
            line_end=text.count("\n", 0, e - 1) + 1,
            package=package,
            index=index,
        ))
    return units


# ---------------------------------------------------------------------------
# metadata audit

def normalize_name(name: str) -> str:
    return re.sub(r"[-_.]+", "-", name.strip().lower())


def _is_release_zero(version: str) -> bool:
    version = version.strip()
    if version[:1] in ("v", "V"):
        version = version[1:]
    if not version:
        return False
    components = version.split(".")
    return all(c.isdigit() and int(c) == 0 for c in components)


def audit_metadata(
    meta: PackageMetadata,
    popular: Sequence[str],
    denylist: Sequence[str],
    max_distance: int = 2,
    min_length: int = 4,
) -> List[MetadataFlag]:
    """
    Flag suspicious metadata.

    Args:
        meta: Package metadata
        popular: Popular package names (typosquatting targets)
        denylist: Known malicious dependency names
        max_distance: Largest edit distance still counted as a squat
        min_length: Names shorter than this are never flagged as squats

    Returns:
        Sorted list of flags (empty for clean metadata)
    """
    flags = set()

    if not meta.description.strip():
        flags.add(MetadataFlag(FlagKind.EMPTY_INFORMATION, "description is empty"))

    if _is_release_zero(meta.version):
        flags.add(MetadataFlag(FlagKind.RELEASE_ZERO, f"version {meta.version} has only zero components"))

    name = normalize_name(meta.name)
    popular_names = {normalize_name(p) for p in popular if p.strip()}
    if len(name) >= min_length and name not in popular_names:
        closest = None
        for candidate in sorted(popular_names):
            distance = Levenshtein.distance(name, candidate, score_cutoff=max_distance)
            if distance <= max_distance and (closest is None or distance < closest[0]):
                closest = (distance, candidate)
        if closest is not None:
            flags.add(MetadataFlag(
                FlagKind.TYPOSQUATTING,
                f"name '{meta.name}' is {closest[0]} edit(s) from popular package '{closest[1]}'",
            ))

    banned = {normalize_name(d) for d in denylist if d.strip()}
    for dep_name, _ in meta.dependencies:
        if normalize_name(dep_name) in banned:
            flags.add(MetadataFlag(FlagKind.MALICIOUS_DEPENDENCY, f"depends on denylisted package '{dep_name}'"))

    return sorted(flags, key=lambda f: (f.kind.value, f.evidence))


def load_name_list(path: Path) -> List[str]:
    """Newline-delimited name list; blank lines and ``#`` comments ignored."""
    path = Path(path)
    if not path.is_file():
        logger.warning(f"⚠️  Name list not found: {path}")
        return []
    names = []
    for line in path.read_text(encoding="utf-8").splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            names.append(line)
    return names


class SegmenterService:
    """Segments package sources and audits their metadata."""

    def __init__(
        self,
        popular: Iterable[str] = (),
        denylist: Iterable[str] = (),
        segment_threshold: int = DEFAULT_SEGMENT_THRESHOLD,
        unit_char_cap: int = DEFAULT_UNIT_CHAR_CAP,
        typosquat_max_distance: int = 2,
        typosquat_min_length: int = 4,
    ):
        self.popular = list(popular)
        self.denylist = list(denylist)
        self.segment_threshold = segment_threshold
        self.unit_char_cap = unit_char_cap
        self.typosquat_max_distance = typosquat_max_distance
        self.typosquat_min_length = typosquat_min_length

    @classmethod
    def from_settings(cls, settings) -> "SegmenterService":
        return cls(
            popular=load_name_list(settings.popular_packages),
            denylist=load_name_list(settings.denylist),
            segment_threshold=settings.segment_threshold,
            unit_char_cap=settings.unit_char_cap,
            typosquat_max_distance=settings.typosquat_max_distance,
            typosquat_min_length=settings.typosquat_min_length,
        )

    def units_for_record(self, record: PackageRecord) -> List[BasicUnit]:
        units = []
        for file in record.files:
            units.extend(extract_basic_units(file, self.unit_char_cap, package=record.name))
        return units

    def segments_for_unit(self, unit: BasicUnit) -> List[CodeSegment]:
        source = SourceFile.from_bytes(unit.file, unit.text.encode("utf-8"))
        return split_segments(tokenize_source(source), self.segment_threshold, unit.file)

    def audit(self, meta: PackageMetadata) -> List[MetadataFlag]:
        return audit_metadata(
            meta,
            self.popular,
            self.denylist,
            self.typosquat_max_distance,
            self.typosquat_min_length,
        )
