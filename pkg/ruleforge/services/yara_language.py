"""
The YARA subset understood by RuleForge.

One grammar serves both the validator and the matcher: whatever parses
here can be evaluated there. Supported:

- rule modifiers ``private`` / ``global``, tags
- meta values (validated later: string, integer, boolean)
- text strings with ``nocase``/``wide``/``ascii``/``fullword``, regex
  strings ``/.../is``, hex strings with ``??``, nibble wildcards, jumps and
  alternatives
- conditions over ``$a``, ``#a``, ``filesize`` (``KB``/``MB``), integer
  comparisons, ``all``/``any``/``none``/``N`` ``of them`` or of a string
  set (``$a*`` wildcards), ``and``/``or``/``not``, parentheses
"""
import re
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

from sly import Lexer, Parser


class YaraSyntaxError(Exception):
    def __init__(self, message: str, lineno: Optional[int] = None):
        super().__init__(message)
        self.lineno = lineno


class HexStringError(ValueError):
    pass


class TextEscapeError(ValueError):
    pass


# ---------------------------------------------------------------------------
# AST

@dataclass(frozen=True)
class MetaEntry:
    key: str
    value: Union[str, int, bool]
    kind: str  # text, int, bool, float, identifier
    lineno: int = 0


@dataclass(frozen=True)
class YaraString:
    identifier: str
    kind: str  # text, regex, hex
    value: str  # source form without delimiters
    modifiers: Tuple[str, ...] = ()
    flags: str = ""  # regex flags
    lineno: int = 0


@dataclass(frozen=True)
class BoolConst:
    value: bool


@dataclass(frozen=True)
class StringRef:
    identifier: str


@dataclass(frozen=True)
class CountRef:
    identifier: str


@dataclass(frozen=True)
class IntConst:
    text: str

    @property
    def value(self) -> int:
        return parse_int(self.text)


@dataclass(frozen=True)
class Filesize:
    pass


@dataclass(frozen=True)
class OfExpr:
    quantifier: Union[str, int]  # all, any, none or a count
    items: Optional[Tuple[str, ...]]  # None means "them"


@dataclass(frozen=True)
class NotExpr:
    operand: object


@dataclass(frozen=True)
class BinaryExpr:
    op: str  # and, or
    left: object
    right: object


@dataclass(frozen=True)
class Comparison:
    op: str
    left: object
    right: object


@dataclass(frozen=True)
class YaraRuleAst:
    name: str
    modifiers: Tuple[str, ...]
    tags: Tuple[str, ...]
    meta: Tuple[MetaEntry, ...]
    strings: Tuple[YaraString, ...]
    condition: object

    @property
    def string_ids(self) -> List[str]:
        return [s.identifier for s in self.strings]


def parse_int(text: str) -> int:
    if text.lower().startswith("0x"):
        return int(text, 16)
    if text.endswith("KB"):
        return int(text[:-2]) * 1024
    if text.endswith("MB"):
        return int(text[:-2]) * 1024 * 1024
    return int(text)


# ---------------------------------------------------------------------------
# lexer / parser

class YaraLexer(Lexer):
    tokens = {
        RULE, PRIVATE, GLOBAL, META, STRINGS, CONDITION, TRUE, FALSE,
        NOT, AND, OR, OF, THEM, ALL, ANY, NONE, FILESIZE,
        NOCASE, WIDE, ASCII, FULLWORD,
        ID, STRING_ID, STRING_WILDCARD, STRING_COUNT,
        FLOAT, NUMBER, TEXT, REGEX, HEXSTRING,
        LBRACE, RBRACE, LPAREN, RPAREN, COLON, ASSIGN, COMMA, MINUS,
        EQ, NE, LE, GE, LT, GT,
    }

    ignore = ' \t\r'
    ignore_line_comment = r'//[^\n]*'

    @_(r'/\*(.|\n)*?\*/')
    def ignore_block_comment(self, t):
        self.lineno += t.value.count('\n')

    @_(r'\n+')
    def ignore_newline(self, t):
        self.lineno += len(t.value)

    @_(r'\{[0-9A-Fa-f?\s\[\]\-|()]*\}')
    def HEXSTRING(self, t):
        self.lineno += t.value.count('\n')
        return t

    TEXT = r'"(?:\\.|[^"\\\n])*"'
    REGEX = r'/(?:\\.|[^/\\\n])+/[is]*'
    STRING_WILDCARD = r'\$[A-Za-z0-9_]*\*'
    STRING_ID = r'\$[A-Za-z0-9_]*'
    STRING_COUNT = r'\#[A-Za-z0-9_]+'
    FLOAT = r'\d+\.\d+'
    NUMBER = r'0x[0-9A-Fa-f]+|\d+(?:KB|MB)?'

    ID = r'[A-Za-z_][A-Za-z0-9_]*'
    ID['rule'] = RULE
    ID['private'] = PRIVATE
    ID['global'] = GLOBAL
    ID['meta'] = META
    ID['strings'] = STRINGS
    ID['condition'] = CONDITION
    ID['true'] = TRUE
    ID['false'] = FALSE
    ID['not'] = NOT
    ID['and'] = AND
    ID['or'] = OR
    ID['of'] = OF
    ID['them'] = THEM
    ID['all'] = ALL
    ID['any'] = ANY
    ID['none'] = NONE
    ID['filesize'] = FILESIZE
    ID['nocase'] = NOCASE
    ID['wide'] = WIDE
    ID['ascii'] = ASCII
    ID['fullword'] = FULLWORD

    EQ = r'=='
    NE = r'!='
    LE = r'<='
    GE = r'>='
    LT = r'<'
    GT = r'>'
    ASSIGN = r'='
    LBRACE = r'\{'
    RBRACE = r'\}'
    LPAREN = r'\('
    RPAREN = r'\)'
    COLON = r':'
    COMMA = r','
    MINUS = r'-'

    def __init__(self):
        self.errors: List[Tuple[int, str]] = []

    def error(self, t):
        if t.value[0] == '"':
            self.errors.append((self.lineno, "unterminated text string"))
            newline = t.value.find('\n')
            self.index += newline if newline > 0 else len(t.value)
        else:
            self.errors.append((self.lineno, f"illegal character {t.value[0]!r}"))
            self.index += 1


def _describe(token) -> str:
    return f"'{token.value}'" if token.type not in ("TEXT", "HEXSTRING") else token.type.lower()


class YaraParser(Parser):
    tokens = YaraLexer.tokens
    start = 'rule_decl'

    precedence = (
        ('left', OR),
        ('left', AND),
        ('right', NOT),
    )

    @_('rule_modifiers RULE ID tags LBRACE meta_section strings_section condition_section RBRACE')
    def rule_decl(self, p):
        return YaraRuleAst(
            name=p.ID,
            modifiers=tuple(p.rule_modifiers),
            tags=tuple(p.tags),
            meta=tuple(p.meta_section),
            strings=tuple(p.strings_section),
            condition=p.condition_section,
        )

    @_('rule_modifiers PRIVATE', 'rule_modifiers GLOBAL')
    def rule_modifiers(self, p):
        return p.rule_modifiers + [p[1]]

    @_('empty')
    def rule_modifiers(self, p):
        return []

    @_('COLON tag_list')
    def tags(self, p):
        return p.tag_list

    @_('empty')
    def tags(self, p):
        return []

    @_('tag_list ID')
    def tag_list(self, p):
        return p.tag_list + [p.ID]

    @_('ID')
    def tag_list(self, p):
        return [p.ID]

    @_('META COLON meta_entries')
    def meta_section(self, p):
        return p.meta_entries

    @_('meta_entries meta_entry')
    def meta_entries(self, p):
        return p.meta_entries + [p.meta_entry]

    @_('meta_entry')
    def meta_entries(self, p):
        return [p.meta_entry]

    @_('ID ASSIGN meta_value')
    def meta_entry(self, p):
        kind, value = p.meta_value
        return MetaEntry(p.ID, value, kind, p.lineno)

    @_('TEXT')
    def meta_value(self, p):
        return "text", p.TEXT[1:-1]

    @_('NUMBER')
    def meta_value(self, p):
        return "int", parse_int(p.NUMBER)

    @_('MINUS NUMBER')
    def meta_value(self, p):
        return "int", -parse_int(p.NUMBER)

    @_('TRUE')
    def meta_value(self, p):
        return "bool", True

    @_('FALSE')
    def meta_value(self, p):
        return "bool", False

    @_('FLOAT')
    def meta_value(self, p):
        return "float", p.FLOAT

    @_('ID')
    def meta_value(self, p):
        return "identifier", p.ID

    @_('STRINGS COLON string_defs')
    def strings_section(self, p):
        return p.string_defs

    @_('string_defs string_def')
    def string_defs(self, p):
        return p.string_defs + [p.string_def]

    @_('string_def')
    def string_defs(self, p):
        return [p.string_def]

    @_('STRING_ID ASSIGN TEXT text_modifiers')
    def string_def(self, p):
        return YaraString(p.STRING_ID, "text", p.TEXT[1:-1], tuple(p.text_modifiers), "", p.lineno)

    @_('STRING_ID ASSIGN REGEX text_modifiers')
    def string_def(self, p):
        body, _, flags = p.REGEX[1:].rpartition('/')
        return YaraString(p.STRING_ID, "regex", body, tuple(p.text_modifiers), flags, p.lineno)

    @_('STRING_ID ASSIGN HEXSTRING')
    def string_def(self, p):
        return YaraString(p.STRING_ID, "hex", p.HEXSTRING[1:-1].strip(), (), "", p.lineno)

    @_('text_modifiers modifier')
    def text_modifiers(self, p):
        return p.text_modifiers + [p.modifier]

    @_('empty')
    def text_modifiers(self, p):
        return []

    @_('NOCASE', 'WIDE', 'ASCII', 'FULLWORD')
    def modifier(self, p):
        return p[0]

    @_('CONDITION COLON expr')
    def condition_section(self, p):
        return p.expr

    @_('expr OR expr', 'expr AND expr')
    def expr(self, p):
        return BinaryExpr(p[1], p.expr0, p.expr1)

    @_('NOT expr')
    def expr(self, p):
        return NotExpr(p.expr)

    @_('LPAREN expr RPAREN')
    def expr(self, p):
        return p.expr

    @_('STRING_ID')
    def expr(self, p):
        return StringRef(p.STRING_ID)

    @_('TRUE')
    def expr(self, p):
        return BoolConst(True)

    @_('FALSE')
    def expr(self, p):
        return BoolConst(False)

    @_('quantifier OF THEM')
    def expr(self, p):
        return OfExpr(p.quantifier, None)

    @_('quantifier OF LPAREN string_set RPAREN')
    def expr(self, p):
        return OfExpr(p.quantifier, tuple(p.string_set))

    @_('comparison')
    def expr(self, p):
        return p.comparison

    @_('ALL', 'ANY', 'NONE')
    def quantifier(self, p):
        return p[0]

    @_('NUMBER')
    def quantifier(self, p):
        return parse_int(p.NUMBER)

    @_('string_set COMMA set_item')
    def string_set(self, p):
        return p.string_set + [p.set_item]

    @_('set_item')
    def string_set(self, p):
        return [p.set_item]

    @_('STRING_ID', 'STRING_WILDCARD')
    def set_item(self, p):
        return p[0]

    @_('value EQ value', 'value NE value', 'value LT value',
       'value LE value', 'value GT value', 'value GE value')
    def comparison(self, p):
        return Comparison(p[1], p.value0, p.value1)

    @_('NUMBER')
    def value(self, p):
        return IntConst(p.NUMBER)

    @_('FILESIZE')
    def value(self, p):
        return Filesize()

    @_('STRING_COUNT')
    def value(self, p):
        return CountRef('$' + p.STRING_COUNT[1:])

    @_('')
    def empty(self, p):
        return None

    def error(self, p):
        if p is None:
            raise YaraSyntaxError("unexpected end of rule")
        raise YaraSyntaxError(f"line {p.lineno}: unexpected {_describe(p)}", p.lineno)


_BARE_WORD = re.compile(r"[A-Za-z_][A-Za-z0-9_]*")


def _is_bare_word(token) -> bool:
    return isinstance(token.value, str) and _BARE_WORD.fullmatch(token.value) is not None


def _join_bare_meta_words(tokens: list) -> list:
    """
    Fold an unquoted run of words after a meta ``=`` into one ID token.

    ``author = John Doe`` then parses as an identifier value and is reported
    as an invalid meta value instead of a grammar error. Only words on the
    same line as the ``=`` are folded; the next entry starts on a new line.
    """
    out: list = []
    in_meta = False
    i = 0
    while i < len(tokens):
        token = tokens[i]
        following = tokens[i + 1] if i + 1 < len(tokens) else None
        if following is not None and following.type == "COLON":
            if token.type == "META":
                in_meta = True
            elif token.type in ("STRINGS", "CONDITION"):
                in_meta = False
        out.append(token)
        i += 1
        if not (in_meta and token.type == "ASSIGN"):
            continue
        end = i
        while end < len(tokens) and tokens[end].lineno == token.lineno and _is_bare_word(tokens[end]):
            end += 1
        if end - i > 1:
            merged = tokens[i]
            merged.type = "ID"
            merged.value = " ".join(t.value for t in tokens[i:end])
            out.append(merged)
            i = end
    return out


def lex_yara(text: str) -> Tuple[list, List[Tuple[int, str]]]:
    """Tokens plus (line, message) lexical errors."""
    lexer = YaraLexer()
    tokens = _join_bare_meta_words(list(lexer.tokenize(text)))
    return tokens, lexer.errors


def parse_yara_tokens(tokens: Sequence) -> YaraRuleAst:
    return YaraParser().parse(iter(tokens))


def parse_yara(text: str) -> YaraRuleAst:
    """Parse a single rule; raises YaraSyntaxError on lexical or grammar errors."""
    tokens, errors = lex_yara(text)
    if errors:
        line, message = errors[0]
        raise YaraSyntaxError(f"line {line}: {message}", line)
    return parse_yara_tokens(tokens)


# ---------------------------------------------------------------------------
# string helpers

_ESCAPES = {'\\': b'\\', '"': b'"', 'n': b'\n', 't': b'\t', 'r': b'\r'}


def unescape_text(value: str) -> bytes:
    """Bytes matched by a text string body (``\\n``, ``\\t``, ``\\r``, ``\\\\``, ``\\"``, ``\\xHH``)."""
    out = bytearray()
    i = 0
    while i < len(value):
        char = value[i]
        if char != '\\':
            out += char.encode('utf-8')
            i += 1
            continue
        if i + 1 >= len(value):
            raise TextEscapeError("dangling backslash")
        code = value[i + 1]
        if code in _ESCAPES:
            out += _ESCAPES[code]
            i += 2
        elif code == 'x' and re.fullmatch(r'[0-9A-Fa-f]{2}', value[i + 2:i + 4]):
            out.append(int(value[i + 2:i + 4], 16))
            i += 4
        else:
            raise TextEscapeError(f"invalid escape sequence '\\{code}'")
    return bytes(out)


def escape_text(value: str) -> str:
    """Inverse of :func:`unescape_text` for arbitrary text."""
    out = []
    for byte in value.encode('utf-8'):
        char = chr(byte)
        if char == '\\':
            out.append('\\\\')
        elif char == '"':
            out.append('\\"')
        elif char == '\n':
            out.append('\\n')
        elif char == '\t':
            out.append('\\t')
        elif char == '\r':
            out.append('\\r')
        elif 0x20 <= byte < 0x7f:
            out.append(char)
        else:
            out.append(f'\\x{byte:02x}')
    return ''.join(out)


_HEX_TOKEN = re.compile(
    r'\s*(?:(?P<pair>[0-9A-Fa-f?]{2})|(?P<jump>\[\s*(?P<lo>\d*)\s*(?P<dash>-)?\s*(?P<hi>\d*)\s*\])'
    r'|(?P<open>\()|(?P<alt>\|)|(?P<close>\)))'
)


def hex_to_regex(body: str) -> bytes:
    """
    Translate a hex string body into a bytes regex (compile with DOTALL).

    Raises:
        HexStringError: malformed body
    """
    parts: List[str] = []
    depth = 0
    pairs = 0
    pos = 0
    body = body.strip()
    while pos < len(body):
        match = _HEX_TOKEN.match(body, pos)
        if match is None or match.end() == pos:
            raise HexStringError(f"invalid hex string near {body[pos:pos + 8]!r}")
        pos = match.end()
        if match.group('pair'):
            pair = match.group('pair')
            pairs += 1
            if pair == '??':
                parts.append('.')
            elif pair[0] == '?':
                low = int(pair[1], 16)
                parts.append('[' + ''.join(f'\\x{(h << 4) | low:02x}' for h in range(16)) + ']')
            elif pair[1] == '?':
                high = int(pair[0], 16) << 4
                parts.append(f'[\\x{high:02x}-\\x{high | 0xF:02x}]')
            else:
                parts.append(f'\\x{int(pair, 16):02x}')
        elif match.group('jump'):
            lo, hi, dash = match.group('lo'), match.group('hi'), match.group('dash')
            if not dash:
                if not lo:
                    raise HexStringError("empty jump")
                parts.append(f'.{{{int(lo)}}}')
            else:
                low = int(lo) if lo else 0
                if hi and int(hi) < low:
                    raise HexStringError(f"jump [{lo}-{hi}] has an inverted range")
                parts.append(f'.{{{low},{int(hi) if hi else ""}}}')
        elif match.group('open'):
            depth += 1
            parts.append('(?:')
        elif match.group('alt'):
            if depth == 0:
                raise HexStringError("alternative outside parentheses")
            parts.append('|')
        elif match.group('close'):
            depth -= 1
            if depth < 0:
                raise HexStringError("unbalanced parenthesis in hex string")
            parts.append(')')
        else:
            break
    if depth != 0:
        raise HexStringError("unbalanced parenthesis in hex string")
    if pairs == 0:
        raise HexStringError("hex string has no bytes")
    return ''.join(parts).encode('ascii')


# ---------------------------------------------------------------------------
# condition evaluation

def resolve_items(items: Optional[Tuple[str, ...]], string_ids: Sequence[str]) -> List[str]:
    if items is None:
        return list(string_ids)
    resolved: List[str] = []
    for item in items:
        if item.endswith('*'):
            prefix = item[:-1]
            resolved.extend(s for s in string_ids if s.startswith(prefix) and s not in resolved)
        elif item not in resolved:
            resolved.append(item)
    return resolved


def condition_refs(node) -> List[Tuple[str, str]]:
    """(kind, identifier) pairs referenced by a condition; kind is ``ref``, ``count`` or ``set``."""
    if isinstance(node, StringRef):
        return [("ref", node.identifier)]
    if isinstance(node, CountRef):
        return [("count", node.identifier)]
    if isinstance(node, OfExpr):
        return [("set", item) for item in (node.items or ())]
    if isinstance(node, NotExpr):
        return condition_refs(node.operand)
    if isinstance(node, (BinaryExpr, Comparison)):
        return condition_refs(node.left) + condition_refs(node.right)
    return []


def evaluate_condition(node, counts: Mapping[str, int], string_ids: Sequence[str], filesize: int) -> bool:
    """
    Evaluate a condition.

    Args:
        node: Condition AST
        counts: Number of hits per string identifier
        string_ids: Declared string identifiers, in declaration order
        filesize: Size of the scanned file in bytes
    """
    if isinstance(node, BoolConst):
        return node.value
    if isinstance(node, StringRef):
        return counts.get(node.identifier, 0) > 0
    if isinstance(node, NotExpr):
        return not evaluate_condition(node.operand, counts, string_ids, filesize)
    if isinstance(node, BinaryExpr):
        left = evaluate_condition(node.left, counts, string_ids, filesize)
        if node.op == 'and':
            return left and evaluate_condition(node.right, counts, string_ids, filesize)
        return left or evaluate_condition(node.right, counts, string_ids, filesize)
    if isinstance(node, OfExpr):
        ids = resolve_items(node.items, string_ids)
        hits = sum(1 for i in ids if counts.get(i, 0) > 0)
        if node.quantifier == 'all':
            return hits == len(ids)
        if node.quantifier == 'any':
            return hits >= 1
        if node.quantifier == 'none':
            return hits == 0
        return hits >= node.quantifier
    if isinstance(node, Comparison):
        left = _operand_value(node.left, counts, filesize)
        right = _operand_value(node.right, counts, filesize)
        return {
            '==': left == right,
            '!=': left != right,
            '<': left < right,
            '<=': left <= right,
            '>': left > right,
            '>=': left >= right,
        }[node.op]
    raise TypeError(f"cannot evaluate {type(node).__name__}")


def _operand_value(node, counts: Mapping[str, int], filesize: int) -> int:
    if isinstance(node, IntConst):
        return node.value
    if isinstance(node, Filesize):
        return filesize
    if isinstance(node, CountRef):
        return counts.get(node.identifier, 0)
    raise TypeError(f"not an integer operand: {type(node).__name__}")


# ---------------------------------------------------------------------------
# rendering

_PRECEDENCE = {'or': 1, 'and': 2}


def render_condition(node, parent: int = 0) -> str:
    if isinstance(node, BoolConst):
        return 'true' if node.value else 'false'
    if isinstance(node, StringRef):
        return node.identifier
    if isinstance(node, CountRef):
        return '#' + node.identifier[1:]
    if isinstance(node, IntConst):
        return node.text
    if isinstance(node, Filesize):
        return 'filesize'
    if isinstance(node, OfExpr):
        target = 'them' if node.items is None else '(' + ', '.join(node.items) + ')'
        return f'{node.quantifier} of {target}'
    if isinstance(node, Comparison):
        return f'{render_condition(node.left)} {node.op} {render_condition(node.right)}'
    if isinstance(node, NotExpr):
        return 'not ' + render_condition(node.operand, 3)
    if isinstance(node, BinaryExpr):
        level = _PRECEDENCE[node.op]
        text = f'{render_condition(node.left, level)} {node.op} {render_condition(node.right, level + 1)}'
        return f'({text})' if level < parent else text
    raise TypeError(f"cannot render {type(node).__name__}")


def _render_meta_value(entry: MetaEntry) -> str:
    if entry.kind == 'text':
        return f'"{entry.value}"'
    if entry.kind == 'bool':
        return 'true' if entry.value else 'false'
    return str(entry.value)


def _render_string(s: YaraString) -> str:
    if s.kind == 'text':
        value = f'"{s.value}"'
    elif s.kind == 'regex':
        value = f'/{s.value}/{s.flags}'
    else:
        value = '{ ' + s.value + ' }'
    return ' '.join([s.identifier, '=', value, *s.modifiers])


def render_yara(rule: YaraRuleAst) -> str:
    """Canonical text of a parsed rule."""
    header = ' '.join([*rule.modifiers, 'rule', rule.name])
    if rule.tags:
        header += ' : ' + ' '.join(rule.tags)
    lines = [header, '{', '    meta:']
    lines += [f'        {m.key} = {_render_meta_value(m)}' for m in rule.meta]
    lines.append('    strings:')
    lines += [f'        {_render_string(s)}' for s in rule.strings]
    lines.append('    condition:')
    lines.append(f'        {render_condition(rule.condition)}')
    lines.append('}')
    return '\n'.join(lines) + '\n'
