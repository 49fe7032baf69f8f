"""MRR evaluation over sampled candidate pools, embedding index and top-k
query, and embedding export."""

from __future__ import annotations

import json
import math
import struct
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .codefeat import tokenize_text
from .corpus import EncodedCorpus, RawRecord
from .errors import DegenerateVector, EmptyQuery, IndexMismatch
from .models import LAYERS, CodeSearchModel, encode_code, encode_text

INDEX_MAGIC = b"SSIDX001"


@dataclass(frozen=True)
class EvalConfig:
    pool_size: int = 50
    layer: str = "siamese"
    seed: int = 0
    success_at: tuple[int, ...] = (1, 5, 10)
    threads: int = 1

    def __post_init__(self):
        if self.pool_size < 2:
            raise ValueError("pool size must be at least 2")
        if self.layer not in LAYERS:
            raise ValueError(f"layer must be one of {LAYERS}")
        if any(k < 1 for k in self.success_at):
            raise ValueError("success@k cutoffs must be >= 1")
        # a cutoff at or beyond the pool size is trivially 1.0
        object.__setattr__(self, "success_at", tuple(sorted(k for k in set(self.success_at) if k < self.pool_size)))


@dataclass
class EvalReport:
    mrr: float
    success_at_k: dict[int, float]
    n_queries: int
    layer: str
    pool_size: int
    seed: int

    def to_json(self) -> dict:
        d = asdict(self)
        d["success_at_k"] = {str(k): v for k, v in self.success_at_k.items()}
        return d

    def line(self) -> str:
        succ = " ".join(f"success@{k}={v:.4f}" for k, v in self.success_at_k.items())
        return (
            f"layer={self.layer} mrr={self.mrr:.6f} {succ} "
            f"n_queries={self.n_queries} pool_size={self.pool_size} seed={self.seed}"
        )


def _unit_rows(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise DegenerateVector("zero-norm embedding")
    return x / norms


def rank_of_positive(query_emb, positive_emb, distractor_embs) -> int:
    """1-based rank of the positive among the candidates; ties count against it."""
    q = _unit_rows(query_emb)
    pos = np.asarray(positive_emb, dtype=np.float64).reshape(1, -1)
    distractors = np.asarray(distractor_embs, dtype=np.float64).reshape(-1, q.shape[-1])
    # one product for all candidates, so an exact duplicate of the positive ties exactly
    sims = _unit_rows(np.concatenate([pos, distractors])) @ q
    return 1 + int(np.count_nonzero(sims[1:] >= sims[0]))


def sample_pools(n: int, pool_size: int, seed: int) -> np.ndarray:
    """Row i holds the K-1 distractor indices for query i (never i itself)."""
    k = min(pool_size, n) - 1
    rng = np.random.default_rng(seed)
    pools = np.empty((n, k), dtype=np.int64)
    for i in range(n):
        picks = rng.choice(n - 1, size=k, replace=False)
        pools[i] = picks + (picks >= i)
    return pools


def ranks_from_embeddings(text_emb, code_emb, pools: np.ndarray, threads: int = 1) -> np.ndarray:
    """Rank of code i for text query i against code rows ``pools[i]``."""
    T = _unit_rows(text_emb)
    C = _unit_rows(code_emb)
    cands = np.concatenate([np.arange(len(T))[:, None], pools], axis=1)

    def chunk(lo: int, hi: int) -> np.ndarray:
        sims = np.einsum("ikd,id->ik", C[cands[lo:hi]], T[lo:hi])
        return 1 + np.count_nonzero(sims[:, 1:] >= sims[:, :1], axis=1)

    n = len(T)
    if threads <= 1 or n < 2 * threads:
        return chunk(0, n)
    bounds = np.linspace(0, n, threads + 1).astype(int)
    with ThreadPoolExecutor(max_workers=threads) as ex:
        parts = list(ex.map(lambda b: chunk(*b), zip(bounds[:-1], bounds[1:])))
    return np.concatenate(parts)


def report_from_ranks(ranks: np.ndarray, config: EvalConfig, pool_size: int) -> EvalReport:
    ranks = np.asarray(ranks)
    n = len(ranks)
    mrr = math.fsum(1.0 / r for r in ranks.tolist()) / n if n else 0.0
    success = {k: float(np.count_nonzero(ranks <= k)) / n if n else 0.0 for k in config.success_at if k < pool_size}
    return EvalReport(mrr, success, n, config.layer, pool_size, config.seed)


def evaluate(model: CodeSearchModel, test: EncodedCorpus, config: EvalConfig = EvalConfig()) -> EvalReport:
    """Embed every text and code once, then score each query against its sampled pool."""
    n = len(test)
    if n < 2:
        raise ValueError("evaluation needs at least two test pairs")
    pool_size = config.pool_size
    if n < pool_size:
        warnings.warn(f"test set has {n} pairs < pool size {pool_size}; pools shrink to {n}")
        pool_size = n
    code = encode_code(model, test, config.layer)
    text = encode_text(model, test, config.layer)
    pools = sample_pools(n, pool_size, config.seed)
    ranks = ranks_from_embeddings(text, code, pools, config.threads)
    return report_from_ranks(ranks, config, pool_size)


@dataclass
class EmbeddingIndex:
    ids: list[str]
    matrix: np.ndarray
    layer: str
    model_digest: str
    previews: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.matrix = np.ascontiguousarray(self.matrix, dtype=np.float32)
        if self.matrix.ndim != 2 or self.matrix.shape[0] != len(self.ids):
            raise ValueError("index matrix must have one row per id")
        if np.any(np.linalg.norm(self.matrix, axis=1) == 0):
            raise DegenerateVector("index contains a zero-norm embedding")

    def save(self, path: str | Path) -> None:
        header = json.dumps(
            {
                "ids": self.ids,
                "layer": self.layer,
                "dim": int(self.matrix.shape[1]),
                "model_digest": self.model_digest,
                "previews": self.previews,
            },
            sort_keys=True,
        ).encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(INDEX_MAGIC)
            fh.write(struct.pack("<Q", len(header)))
            fh.write(header)
            fh.write(self.matrix.astype("<f4").tobytes())

    @classmethod
    def load(cls, path: str | Path) -> "EmbeddingIndex":
        from .errors import CheckpointError

        blob = Path(path).read_bytes()
        if blob[:8] != INDEX_MAGIC or len(blob) < 16:
            raise CheckpointError(f"{path}: not an embedding index file")
        (hlen,) = struct.unpack("<Q", blob[8:16])
        try:
            header = json.loads(blob[16 : 16 + hlen])
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            raise CheckpointError(f"{path}: corrupt index header") from exc
        n, dim = len(header["ids"]), header["dim"]
        data = blob[16 + hlen :]
        if len(data) != 4 * n * dim:
            raise CheckpointError(f"{path}: index data truncated")
        matrix = np.frombuffer(data, dtype="<f4").reshape(n, dim).astype(np.float32)
        return cls(header["ids"], matrix, header["layer"], header["model_digest"], header.get("previews", []))


def _preview(rec: RawRecord, width: int = 60) -> str:
    src = rec.code or rec.method_name or " ".join(rec.api_seq) or " ".join(rec.tokens)
    flat = " ".join(src.split())
    return flat[:width]


def build_index(model: CodeSearchModel, records: Sequence[RawRecord], vocabs, layer: str = "extraction") -> EmbeddingIndex:
    data = EncodedCorpus.from_records(records, vocabs, model.config.max_lens)
    emb = encode_code(model, data, layer)
    return EmbeddingIndex([r.id for r in records], emb, layer, model.digest(), [_preview(r) for r in records])


def query(index: EmbeddingIndex, model: CodeSearchModel, vocabs, text: str, k: int = 10) -> list[tuple[str, float]]:
    """Top-k (id, cosine) pairs, score descending, id ascending on ties."""
    if model.digest() != index.model_digest:
        raise IndexMismatch("index was built with a different model")
    if not tokenize_text(text):
        raise EmptyQuery("query text has no tokens")
    rec = RawRecord(id="<query>", text=text)
    data = EncodedCorpus.from_records([rec], vocabs, model.config.max_lens)
    q = encode_text(model, data, index.layer)[0]
    scores = _unit_rows(index.matrix) @ _unit_rows(q)
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], index.ids[i]))
    return [(index.ids[i], float(scores[i])) for i in order[:k]]


def pca_2d(x: np.ndarray) -> np.ndarray:
    """Projection onto the top-2 principal components.

    Each component's sign is fixed so its largest-magnitude loading is positive.
    """
    x = np.asarray(x, dtype=np.float64)
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / max(len(x) - 1, 1)
    vals, vecs = np.linalg.eigh(cov)
    top = vecs[:, np.argsort(vals)[::-1][:2]]
    for j in range(top.shape[1]):
        if top[np.argmax(np.abs(top[:, j])), j] < 0:
            top[:, j] = -top[:, j]
    return centered @ top


def export_embeddings(
    model: CodeSearchModel,
    records: Sequence[RawRecord],
    vocabs,
    layer: str,
    path: str | Path,
    project_2d: bool = False,
    side: str = "text",
    label_field: str | None = None,
) -> None:
    data = EncodedCorpus.from_records(records, vocabs, model.config.max_lens)
    emb = (encode_text if side == "text" else encode_code)(model, data, layer)
    cols = ["id"] + (["label"] if label_field else []) + [f"d{j}" for j in range(emb.shape[1])]
    extra = pca_2d(emb) if project_2d else None
    if extra is not None:
        cols += ["pca0", "pca1"]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\t".join(cols) + "\n")
        for i, rec in enumerate(records):
            row = [rec.id]
            if label_field:
                row.append(str(rec.extra.get(label_field, "")))
            row += [repr(float(v)) for v in emb[i]]
            if extra is not None:
                row += [repr(float(v)) for v in extra[i]]
            fh.write("\t".join(row) + "\n")
