"""Code preprocessing: identifier splitting, stop-word removal and heuristic
extraction of method names and API-call sequences."""

from __future__ import annotations

import re
import string
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources

from .errors import NotFound, Unsupported

LANGUAGES = ("java", "sql", "generic")

# Order matters: an uppercase run followed by Capitalized word ("HTTPResponse")
# keeps the run whole; digits glue onto whatever precedes them.
_SUBTOKEN_RE = re.compile(
    r"[A-Z]+(?=[A-Z][a-z])\d*"
    r"|[A-Z]+(?![a-z])\d*"
    r"|[A-Z]?[a-z]+\d*"
    r"|[^\W\dA-Za-z_]+\d*"
    r"|\d+"
)
_TEXT_STRIP_RE = re.compile(r"[^\w\s]|_")

_IDENT = r"[A-Za-z_$][\w$]*"
_MEMBER_CALL_RE = re.compile(r"\.\s*(" + _IDENT + r")\s*\(")
_CTOR_CALL_RE = re.compile(
    r"\bnew\s+(" + _IDENT + r"(?:\s*\.\s*" + _IDENT + r")*)\s*(?:<[^;(){}]*>)?\s*\("
)
_DECL_CANDIDATE_RE = re.compile(r"(" + _IDENT + r")\s*\(")

# Keywords that may legitimately sit right before a declared method/constructor name.
_DECL_PRECEDERS = frozenset(
    "void boolean byte char short int long float double public private protected "
    "static final abstract synchronized native strictfp".split()
)


@dataclass(frozen=True)
class LanguageProfile:
    name: str
    keywords: frozenset[str] = field(default_factory=frozenset)
    punctuation: frozenset[str] = field(default_factory=frozenset)
    line_comment: tuple[str, ...] = ()
    quote_chars: tuple[str, ...] = ()

    def __post_init__(self):
        if any(k != k.lower() for k in self.keywords):
            raise ValueError("profile keywords must be lowercase")
        if self.name in ("java", "sql") and not self.punctuation:
            raise ValueError(f"{self.name} profile needs a punctuation set")


def _read_keywords(filename: str) -> frozenset[str]:
    text = resources.files("siamsearch.data").joinpath(filename).read_text("utf-8")
    return frozenset(w.strip().lower() for w in text.splitlines() if w.strip())


@lru_cache(maxsize=None)
def get_profile(name: str) -> LanguageProfile:
    punct = frozenset(string.punctuation)
    if name == "java":
        return LanguageProfile(
            "java", _read_keywords("java_keywords.txt"), punct, ("//",), ('"', "'")
        )
    if name == "sql":
        return LanguageProfile(
            "sql", _read_keywords("sql_keywords.txt"), punct, ("--", "#"), ("'", '"', "`")
        )
    if name == "generic":
        return LanguageProfile("generic", frozenset(), punct, ("//", "#"), ('"', "'"))
    raise ValueError(f"unknown language profile {name!r}; expected one of {LANGUAGES}")


def split_identifier(identifier: str) -> list[str]:
    """Split an identifier on snake_case and camelCase boundaries.

    >>> split_identifier("parse_HTTP_Response2")
    ['parse', 'http', 'response2']
    """
    out = []
    for part in identifier.split("_"):
        out.extend(m.group(0).lower() for m in _SUBTOKEN_RE.finditer(part))
    return out


def tokenize_text(description: str) -> list[str]:
    return _TEXT_STRIP_RE.sub(" ", description.lower()).split()


def strip_literals_and_comments(snippet: str, profile: LanguageProfile) -> str:
    """Blank out block comments, line comments and quoted literals.

    A single left-to-right scan so that comment markers inside strings (and
    quotes inside comments) are handled correctly. Unterminated constructs run
    to the end of the line (literals) or of the snippet (block comments).
    """
    out: list[str] = []
    i, n = 0, len(snippet)
    while i < n:
        if snippet.startswith("/*", i):
            end = snippet.find("*/", i + 2)
            i = n if end < 0 else end + 2
            out.append(" ")
            continue
        marker = next((m for m in profile.line_comment if snippet.startswith(m, i)), None)
        if marker is not None:
            end = snippet.find("\n", i)
            i = n if end < 0 else end
            out.append(" ")
            continue
        ch = snippet[i]
        if ch in profile.quote_chars:
            j = i + 1
            while j < n and snippet[j] != ch and snippet[j] != "\n":
                j += 2 if snippet[j] == "\\" else 1
            i = j + 1
            out.append(" ")
            continue
        out.append(ch)
        i += 1
    return "".join(out)


def _strip_punctuation(text: str, profile: LanguageProfile) -> str:
    punct = profile.punctuation or frozenset(string.punctuation)
    # underscores are identifier characters, not punctuation
    return "".join(" " if (c in punct and c != "_") else c for c in text)


def tokenize_code(snippet: str, profile: LanguageProfile) -> list[str]:
    cleaned = _strip_punctuation(strip_literals_and_comments(snippet, profile), profile)
    tokens = []
    for piece in cleaned.split():
        tokens.extend(t for t in split_identifier(piece) if t not in profile.keywords)
    return tokens


def _is_declaration_site(prefix: str) -> bool:
    prefix = prefix.rstrip()
    if not prefix:
        return False
    last = prefix[-1]
    if last in ">]":
        return True
    if not (last.isalnum() or last in "_$"):
        return False
    word = re.search(r"[\w$]+$", prefix).group(0)
    java_kw = get_profile("java").keywords
    return word not in java_kw or word in _DECL_PRECEDERS


def extract_method_name(snippet: str, profile: LanguageProfile) -> list[str]:
    """Subtokens of the first declared method (or constructor) name.

    A call like ``foo(x)`` only counts when the token before the name looks like
    a return type or modifier, so plain invocations are skipped.
    """
    if profile.name == "sql":
        raise Unsupported("method names are not available for SQL snippets")
    code = strip_literals_and_comments(snippet, profile)
    keywords = get_profile("java").keywords
    for m in _DECL_CANDIDATE_RE.finditer(code):
        name = m.group(1)
        if name in keywords or code[: m.start()].rstrip().endswith("."):
            continue
        if _is_declaration_site(code[: m.start()]):
            return split_identifier(name)
    raise NotFound("no method declaration found in snippet")


def extract_api_sequence(snippet: str, profile: LanguageProfile) -> list[str]:
    code = strip_literals_and_comments(snippet, profile)
    hits: list[tuple[int, str]] = []
    for m in _MEMBER_CALL_RE.finditer(code):
        hits.append((m.start(1), m.group(1)))
    for m in _CTOR_CALL_RE.finditer(code):
        qualified = re.sub(r"\s+", "", m.group(1))
        hits.append((m.start(1), qualified.rsplit(".", 1)[-1]))
    hits.sort()
    seq: list[str] = []
    for _, name in hits:
        seq.extend(split_identifier(name))
    return seq


def preprocess_record(record, profile: LanguageProfile) -> tuple[object, bool]:
    """Fill method_name / api_seq / tokens from ``record.code``.

    Fields that are already populated are kept. Returns the enriched record and
    whether a method name is available for it.
    """
    from dataclasses import replace

    code = record.code or ""
    method_name = record.method_name
    if not method_name and code and profile.name != "sql":
        try:
            method_name = " ".join(extract_method_name(code, profile))
        except NotFound:
            method_name = ""
    elif method_name:
        method_name = " ".join(t for w in method_name.split() for t in split_identifier(w))
    api_seq = list(record.api_seq) or (extract_api_sequence(code, profile) if code else [])
    tokens = list(record.tokens) or (tokenize_code(code, profile) if code else [])
    enriched = replace(record, method_name=method_name, api_seq=api_seq, tokens=tokens)
    return enriched, bool(method_name)
