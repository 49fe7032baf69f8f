"""Deterministic synthetic code/description corpora.

Every record draws a latent concept. The concept fixes three description
words and the concept-bearing parts of a Java-like snippet:

* method-name words, shared by blocks of 4 consecutive concepts,
* API-call words, shared by concepts congruent modulo ``max(4, n_concepts // 4)``,
* two body words, shared by pairs of consecutive concepts.

No single code feature pins down the concept; the combination does. Filler
words (description side) and boilerplate identifiers (code side) vary per
record and carry no signal. Code words are consonant-vowel-consonant and
description words consonant-vowel-consonant-vowel, so the two vocabularies
never overlap.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .codefeat import get_profile, preprocess_record
from .corpus import RawRecord, write_jsonl

_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"
N_NAME_WORDS = 2
N_API_CALLS = 3
N_BODY_WORDS = 2
N_CONCEPT_TEXT_WORDS = 3
N_TEXT_FILLERS = 30
N_BOILERPLATE = 40


@dataclass(frozen=True)
class SynthSpec:
    n_records: int = 64
    n_concepts: int = 8
    noise: float = 0.0
    seed: int = 0
    code_vocab_size: int | None = None
    text_vocab_size: int | None = None

    def __post_init__(self):
        if self.n_records < 1 or self.n_concepts < 1:
            raise ValueError("n_records and n_concepts must be positive")
        if self.n_concepts > self.n_records:
            raise ValueError("n_concepts cannot exceed n_records")
        if not 0.0 <= self.noise < 1.0:
            raise ValueError("noise must lie in [0, 1)")
        if self.code_vocab_size is not None and self.code_vocab_size < self.required_code_words:
            raise ValueError(f"code_vocab_size must be >= {self.required_code_words}")
        if self.text_vocab_size is not None and self.text_vocab_size < self.required_text_words:
            raise ValueError(f"text_vocab_size must be >= {self.required_text_words}")
        if self.required_code_words > len(_code_word_pool()):
            raise ValueError("too many concepts for the code word pool")

    @property
    def n_name_groups(self) -> int:
        return -(-self.n_concepts // 4)

    @property
    def n_api_groups(self) -> int:
        # at least 4 groups so (name block, api group) already separates concepts
        return min(self.n_concepts, max(4, self.n_concepts // 4))

    @property
    def n_body_groups(self) -> int:
        return -(-self.n_concepts // 2)

    @property
    def required_code_words(self) -> int:
        return (
            self.n_name_groups * N_NAME_WORDS
            + self.n_api_groups * N_API_CALLS * 2
            + self.n_body_groups * N_BODY_WORDS
            + N_BOILERPLATE
        )

    @property
    def required_text_words(self) -> int:
        return self.n_concepts * N_CONCEPT_TEXT_WORDS + N_TEXT_FILLERS


def _code_word_pool() -> list[str]:
    reserved = get_profile("java").keywords | get_profile("sql").keywords
    words = ("".join(p) for p in itertools.product(_CONSONANTS, _VOWELS, _CONSONANTS))
    return [w for w in words if w not in reserved]


def _text_word_pool() -> list[str]:
    return ["".join(p) for p in itertools.product(_CONSONANTS, _VOWELS, _CONSONANTS, _VOWELS)]


def _camel(words: list[str], upper_first: bool = False) -> str:
    out = "".join(w.capitalize() for w in words)
    return out if upper_first else out[0].lower() + out[1:]


class _Lexicon:
    def __init__(self, spec: SynthSpec, rng: np.random.Generator):
        code_pool = _code_word_pool()
        text_pool = _text_word_pool()
        code = [code_pool[i] for i in rng.permutation(len(code_pool))[: spec.code_vocab_size or spec.required_code_words]]
        text = [text_pool[i] for i in rng.permutation(len(text_pool))[: spec.text_vocab_size or spec.required_text_words]]
        self.code_vocab, self.text_vocab = code, text
        it = iter(code)
        self.name_words = [[next(it) for _ in range(N_NAME_WORDS)] for _ in range(spec.n_name_groups)]
        self.api_words = [
            [[next(it), next(it)] for _ in range(N_API_CALLS)] for _ in range(spec.n_api_groups)
        ]
        self.body_words = [[next(it) for _ in range(N_BODY_WORDS)] for _ in range(spec.n_body_groups)]
        self.boilerplate = [next(it) for _ in range(N_BOILERPLATE)]
        tt = iter(text)
        self.concept_text = [[next(tt) for _ in range(N_CONCEPT_TEXT_WORDS)] for _ in range(spec.n_concepts)]
        self.fillers = [next(tt) for _ in range(N_TEXT_FILLERS)]


def _noisy(words: list[str], pool: list[str], noise: float, rng: np.random.Generator) -> list[str]:
    if noise == 0:
        return list(words)
    flips = rng.random(len(words)) < noise
    return [pool[rng.integers(len(pool))] if f else w for w, f in zip(words, flips)]


def _render_snippet(name, calls, body, boiler) -> str:
    ret_t, arg_t, arg, var, res = boiler
    ctor, m1, m2 = (_camel(c, upper_first=(k == 0)) for k, c in enumerate(calls))
    local_t = _camel([body[0]], upper_first=True)
    return (
        f"public {_camel([ret_t], True)} {_camel(name)}({_camel([arg_t], True)} {arg}) {{\n"
        f"    {_camel([var], True)} {var} = new {ctor}({arg});\n"
        f"    {var}.{m1}();\n"
        f"    {local_t} {res} = {var}.{m2}({body[1]});\n"
        f"    return {res};\n"
        f"}}"
    )


def generate_records(spec: SynthSpec) -> list[RawRecord]:
    rng = np.random.default_rng(spec.seed)
    lex = _Lexicon(spec, rng)
    concepts = rng.permutation(np.arange(spec.n_records) % spec.n_concepts)
    profile = get_profile("java")
    records = []
    for i, c in enumerate(concepts.tolist()):
        name = _noisy(lex.name_words[c // 4], lex.code_vocab, spec.noise, rng)
        calls = [_noisy(call, lex.code_vocab, spec.noise, rng) for call in lex.api_words[c % spec.n_api_groups]]
        body = _noisy(lex.body_words[c // 2], lex.code_vocab, spec.noise, rng)
        boiler = [lex.boilerplate[j] for j in rng.choice(N_BOILERPLATE, size=5, replace=False)]
        snippet = _render_snippet(name, calls, body, boiler)

        words = list(lex.concept_text[c])
        fill = [lex.fillers[j] for j in rng.choice(N_TEXT_FILLERS, size=3, replace=False)]
        text_words = [fill[0], words[0], fill[1], words[1], words[2], fill[2]]
        text_words = _noisy(text_words, lex.text_vocab, spec.noise, rng)

        raw = RawRecord(id=f"syn{i:06d}", text=" ".join(text_words), code=snippet, extra={"concept": c})
        rec, _ = preprocess_record(raw, profile)
        records.append(rec)
    return records


def generate(spec: SynthSpec, path: str | Path) -> list[RawRecord]:
    """Write the corpus with the spec echoed in a leading ``#`` comment line."""
    records = generate_records(spec)
    write_jsonl(records, path, header="synthspec " + json.dumps(asdict(spec), sort_keys=True))
    return records
