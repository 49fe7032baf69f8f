"""Corpus ingestion, per-field vocabularies, encoding, splitting and in-batch
negative sampling."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .codefeat import split_identifier, tokenize_text
from .errors import CorpusError

FIELDS = ("name", "api", "tokens", "text")
PAD_ID = 0
UNK_ID = 1
PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"

DEFAULT_MIN_FREQ = 2
DEFAULT_MAX_SIZE = 10000
DEFAULT_MAX_LENS = {"name": 6, "api": 30, "tokens": 50, "text": 30}

_RECORD_KEYS = ("id", "code", "method_name", "api_seq", "tokens", "text")


@dataclass(frozen=True)
class RawRecord:
    id: str
    text: str
    code: str = ""
    method_name: str = ""
    api_seq: tuple[str, ...] = ()
    tokens: tuple[str, ...] = ()
    extra: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "api_seq", tuple(self.api_seq))
        object.__setattr__(self, "tokens", tuple(self.tokens))

    def to_json(self) -> dict:
        out = {
            "id": self.id,
            "code": self.code,
            "method_name": self.method_name,
            "api_seq": list(self.api_seq),
            "tokens": list(self.tokens),
            "text": self.text,
        }
        out.update(self.extra)
        return out


def record_from_obj(obj: dict, where: str = "") -> RawRecord:
    if not isinstance(obj, dict):
        raise CorpusError(f"{where}expected a JSON object")
    rid = obj.get("id")
    if not isinstance(rid, str) or not rid:
        raise CorpusError(f"{where}missing or empty 'id'")
    text = obj.get("text")
    if not isinstance(text, str) or not text.strip():
        raise CorpusError(f"{where}missing or empty 'text'")
    code = obj.get("code") or ""
    method_name = obj.get("method_name") or ""
    api_seq = obj.get("api_seq") or []
    tokens = obj.get("tokens") or []
    if not isinstance(api_seq, list) or not isinstance(tokens, list):
        raise CorpusError(f"{where}'api_seq' and 'tokens' must be lists")
    if not (code or method_name or api_seq or tokens):
        raise CorpusError(f"{where}record {rid!r} has no code features")
    extra = {k: v for k, v in obj.items() if k not in _RECORD_KEYS}
    return RawRecord(
        id=rid,
        text=text,
        code=str(code),
        method_name=str(method_name),
        api_seq=tuple(str(a) for a in api_seq),
        tokens=tuple(str(t) for t in tokens),
        extra=extra,
    )


def load_jsonl(path: str | Path) -> list[RawRecord]:
    """Read a line-delimited corpus. Blank lines and ``#`` comment lines are skipped."""
    records: list[RawRecord] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            where = f"{path}:{lineno}: "
            try:
                obj = json.loads(stripped)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{where}malformed JSON ({exc.msg})") from None
            rec = record_from_obj(obj, where)
            if rec.id in seen:
                raise CorpusError(f"{where}duplicate id {rec.id!r}")
            seen.add(rec.id)
            records.append(rec)
    return records


def write_jsonl(records: Iterable[RawRecord], path: str | Path, header: str | None = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        if header is not None:
            fh.write(f"# {header}\n")
        for rec in records:
            fh.write(json.dumps(rec.to_json(), sort_keys=True, ensure_ascii=False) + "\n")


def field_tokens(record: RawRecord, fieldname: str) -> list[str]:
    if fieldname == "name":
        return [t for w in record.method_name.split() for t in split_identifier(w)]
    if fieldname == "api":
        return [t for w in record.api_seq for t in split_identifier(w)]
    if fieldname == "tokens":
        return list(record.tokens)
    if fieldname == "text":
        return tokenize_text(record.text)
    raise ValueError(f"unknown field {fieldname!r}")


@dataclass
class Vocabulary:
    id_to_token: list[str]
    min_freq: int = DEFAULT_MIN_FREQ
    max_size: int = DEFAULT_MAX_SIZE
    token_to_id: dict[str, int] = field(init=False, repr=False)

    pad_id = PAD_ID
    unk_id = UNK_ID

    def __post_init__(self):
        if self.id_to_token[:2] != [PAD_TOKEN, UNK_TOKEN]:
            raise CorpusError("vocabulary must start with the pad and unk specials")
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token) if i >= 2}
        if len(self.token_to_id) != len(self.id_to_token) - 2:
            raise CorpusError("vocabulary contains duplicate tokens")

    def __len__(self) -> int:
        return len(self.id_to_token)

    def lookup(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)

    def to_json(self) -> dict:
        return {
            "token_to_id": self.token_to_id,
            "min_freq": self.min_freq,
            "max_size": self.max_size,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Vocabulary":
        mapping = obj["token_to_id"]
        ordered = sorted(mapping.items(), key=lambda kv: kv[1])
        if [i for _, i in ordered] != list(range(2, len(ordered) + 2)):
            raise CorpusError("vocabulary ids must be contiguous from 2")
        return cls(
            [PAD_TOKEN, UNK_TOKEN] + [t for t, _ in ordered],
            min_freq=int(obj.get("min_freq", DEFAULT_MIN_FREQ)),
            max_size=int(obj.get("max_size", DEFAULT_MAX_SIZE)),
        )


def build_vocab(
    records: Sequence[RawRecord],
    fieldname: str,
    min_freq: int = DEFAULT_MIN_FREQ,
    max_size: int = DEFAULT_MAX_SIZE,
) -> Vocabulary:
    counts = Counter()
    for rec in records:
        counts.update(field_tokens(rec, fieldname))
    kept = [t for t, c in counts.items() if c >= min_freq and t not in (PAD_TOKEN, UNK_TOKEN)]
    kept.sort(key=lambda t: (-counts[t], t))
    return Vocabulary([PAD_TOKEN, UNK_TOKEN] + kept[:max_size], min_freq, max_size)


def build_vocabs(records, min_freq=DEFAULT_MIN_FREQ, max_size=DEFAULT_MAX_SIZE) -> dict[str, Vocabulary]:
    return {f: build_vocab(records, f, min_freq, max_size) for f in FIELDS}


def save_vocabs(vocabs: dict[str, Vocabulary], path: str | Path) -> None:
    payload = {f: vocabs[f].to_json() for f in FIELDS}
    Path(path).write_text(json.dumps(payload, sort_keys=True, ensure_ascii=False), "utf-8")


def load_vocabs(path: str | Path) -> dict[str, Vocabulary]:
    obj = json.loads(Path(path).read_text("utf-8"))
    missing = [f for f in FIELDS if f not in obj]
    if missing:
        raise CorpusError(f"vocabulary file {path} lacks fields {missing}")
    return {f: Vocabulary.from_json(obj[f]) for f in FIELDS}


def _pad(ids: list[int], max_len: int) -> tuple[list[int], int]:
    ids = ids[:max_len]
    return ids + [PAD_ID] * (max_len - len(ids)), len(ids)


@dataclass
class EncodedExample:
    name_ids: list[int]
    api_ids: list[int]
    token_ids: list[int]
    text_ids: list[int]
    name_len: int
    api_len: int
    token_len: int
    text_len: int


def encode(
    record: RawRecord,
    vocabs: dict[str, Vocabulary],
    max_lens: dict[str, int] | None = None,
) -> EncodedExample:
    max_lens = {**DEFAULT_MAX_LENS, **(max_lens or {})}
    seqs = {}
    for f in ("name", "api", "text"):
        v = vocabs[f]
        seqs[f] = _pad([v.lookup(t) for t in field_tokens(record, f)], max_lens[f])
    # bag of words: dedup ids, first occurrence wins
    tok_ids = list(dict.fromkeys(vocabs["tokens"].lookup(t) for t in field_tokens(record, "tokens")))
    tokens = _pad(tok_ids, max_lens["tokens"])
    return EncodedExample(
        name_ids=seqs["name"][0],
        api_ids=seqs["api"][0],
        token_ids=tokens[0],
        text_ids=seqs["text"][0],
        name_len=seqs["name"][1],
        api_len=seqs["api"][1],
        token_len=tokens[1],
        text_len=seqs["text"][1],
    )


def decode(ids: Sequence[int], length: int, vocab: Vocabulary) -> list[str]:
    return [vocab.id_to_token[i] for i in ids[:length]]


class EncodedCorpus:
    """Column-wise int arrays for a list of records, ready for batching.

    Each field ``f`` has ``ids[f]`` of shape (n, max_len) and ``lens[f]`` of
    shape (n,).
    """

    def __init__(self, ids: dict[str, np.ndarray], lens: dict[str, np.ndarray], record_ids: list[str]):
        self.ids = ids
        self.lens = lens
        self.record_ids = record_ids

    @classmethod
    def from_records(cls, records, vocabs, max_lens=None) -> "EncodedCorpus":
        max_lens = {**DEFAULT_MAX_LENS, **(max_lens or {})}
        encoded = [encode(r, vocabs, max_lens) for r in records]
        attr = {"name": "name", "api": "api", "tokens": "token", "text": "text"}
        ids, lens = {}, {}
        for f in FIELDS:
            a = attr[f]
            ids[f] = np.array([getattr(e, f"{a}_ids") for e in encoded], dtype=np.int64).reshape(
                len(encoded), max_lens[f]
            )
            lens[f] = np.array([getattr(e, f"{a}_len") for e in encoded], dtype=np.int64)
        return cls(ids, lens, [r.id for r in records])

    def __len__(self) -> int:
        return len(self.record_ids)

    def subset(self, index) -> "EncodedCorpus":
        index = np.asarray(index)
        return EncodedCorpus(
            {f: a[index] for f, a in self.ids.items()},
            {f: a[index] for f, a in self.lens.items()},
            [self.record_ids[i] for i in index],
        )

    def batch(self, index) -> dict[str, tuple[np.ndarray, np.ndarray]]:
        """Field -> (ids, true lengths), trimmed to the longest sequence in the batch.

        Zero lengths are clamped to one so every sequence feeds at least the pad
        token through the network.
        """
        index = np.asarray(index)
        out = {}
        for f in FIELDS:
            lens = np.maximum(self.lens[f][index], 1)
            width = int(lens.max()) if len(lens) else 1
            out[f] = (self.ids[f][index, :width], lens)
        return out


def split(records: Sequence, ratios=(0.8, 0.1, 0.1), seed: int = 0) -> tuple[list, list, list]:
    if len(ratios) != 3 or any(r < 0 for r in ratios):
        raise ValueError("ratios must be three non-negative numbers")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1.0, got {sum(ratios)!r}")
    n = len(records)
    if all(r > 0 for r in ratios) and n < 3:
        raise CorpusError(f"cannot split {n} records three ways")
    order = np.random.default_rng(seed).permutation(n)
    n_valid = math.floor(n * ratios[1])
    n_test = math.floor(n * ratios[2])
    n_train = n - n_valid - n_test
    shuffled = [records[i] for i in order]
    return (
        shuffled[:n_train],
        shuffled[n_train : n_train + n_valid],
        shuffled[n_train + n_valid :],
    )


def in_batch_negatives(n: int, rng: np.random.Generator) -> np.ndarray:
    """For each position i, a uniformly chosen j != i."""
    if n < 2:
        raise ValueError("in-batch negative sampling needs a batch of at least 2")
    return (np.arange(n) + rng.integers(1, n, size=n)) % n


@dataclass(frozen=True)
class LabeledPair:
    code: object
    text: object
    label: int


@dataclass(frozen=True)
class Triplet:
    anchor_code: object
    positive_text: object
    negative_text: object


def sample_pairs(batch: Sequence[tuple], rng: np.random.Generator) -> list[LabeledPair]:
    """``batch`` holds matching (code, text) pairs; returns positives then one negative per code."""
    neg = in_batch_negatives(len(batch), rng)
    positives = [LabeledPair(c, t, 1) for c, t in batch]
    negatives = [LabeledPair(batch[i][0], batch[j][1], 0) for i, j in enumerate(neg)]
    return positives + negatives


def sample_triplets(batch: Sequence[tuple], rng: np.random.Generator) -> list[Triplet]:
    neg = in_batch_negatives(len(batch), rng)
    return [Triplet(c, t, batch[j][1]) for (c, t), j in zip(batch, neg)]
