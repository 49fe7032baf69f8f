"""Extraction networks, the weight-shared Siamese head, and the assembled
code-search model."""

from __future__ import annotations

import hashlib
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .corpus import DEFAULT_MAX_LENS, EncodedCorpus
from .errors import Unsupported
from .nn.core import (
    BatchNorm,
    BiLSTM,
    Dense,
    Embedding,
    Module,
    ReLU,
    RunningStats,
    maxpool_elem,
    maxpool_elem_backward,
    maxpool_time,
    maxpool_time_backward,
)

ARCHS = ("bil_m", "bil_a", "bil_cs", "dcs")
LAYERS = ("extraction", "siamese")
BRANCHES = ("code", "text")
STANDARD_SEMB = (2, 100, 200)
# which encoded field feeds the single code BiLSTM of each bil_* architecture
_BIL_FIELD = {"bil_m": "name", "bil_a": "api", "bil_cs": "tokens"}


@dataclass
class ModelConfig:
    arch: str = "dcs"
    embed_dim: int = 100
    lstm_hidden: int | None = None
    s_emb: int = 100
    loss: str = "cosine_contrastive"
    margin: float | None = None
    max_lens: dict = field(default_factory=lambda: dict(DEFAULT_MAX_LENS))
    seed: int = 0
    fusion: str = "max"
    vocab_sizes: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ValueError(f"unknown arch {self.arch!r}; expected one of {ARCHS}")
        if self.lstm_hidden is None:
            self.lstm_hidden = 400 if self.arch == "dcs" else 200
        if self.fusion not in ("max", "concat"):
            raise ValueError("fusion must be 'max' or 'concat'")
        if min(self.embed_dim, self.lstm_hidden, self.s_emb) <= 0:
            raise ValueError("model dimensions must be positive")
        self.max_lens = {**DEFAULT_MAX_LENS, **self.max_lens}

    @property
    def standard_semb(self) -> bool:
        return self.s_emb in STANDARD_SEMB

    @property
    def extraction_dim(self) -> int:
        return 2 * self.lstm_hidden

    def to_json(self) -> dict:
        return asdict(self)


def head_layer_sizes(extraction_dim: int, s_emb: int, dcs: bool) -> list[tuple[int, int]]:
    """(in, out) of every dense layer in the Siamese head, output layer last."""
    hidden = ([extraction_dim] if dcs else []) + [400, 300]
    if s_emb <= 100:
        hidden.append(200)
    if s_emb == 2:
        hidden.append(50)
    dims = [extraction_dim] + hidden + [s_emb]
    return list(zip(dims[:-1], dims[1:]))


class SiameseHead(Module):
    """dense -> ReLU -> BatchNorm for each hidden layer, then a linear output layer.

    The same instance is applied to each branch separately; there is exactly
    one copy of its parameters. Batchnorm running statistics are kept per
    branch: training normalises each branch with its own batch statistics,
    and code and text activations differ enough in scale that one blended
    running estimate would match neither branch at inference.
    """

    def __init__(self, sizes: list[tuple[int, int]], rng: np.random.Generator):
        self.layer_sizes = sizes
        self.dense = [Dense(i, o, rng) for i, o in sizes]
        self.relu = ReLU()
        self.norms = [BatchNorm(o, own_stats=False) for _, o in sizes[:-1]]
        self.code_stats = [RunningStats(o) for _, o in sizes[:-1]]
        self.text_stats = [RunningStats(o) for _, o in sizes[:-1]]

    def forward(self, x: np.ndarray, train: bool, branch: str):
        if branch not in BRANCHES:
            raise ValueError(f"branch must be one of {BRANCHES}")
        stats = self.code_stats if branch == "code" else self.text_stats
        caches = []
        for k, layer in enumerate(self.dense):
            x, cd = layer.forward(x)
            if k < len(self.norms):
                x, cr = self.relu.forward(x)
                x, cb = self.norms[k].forward(x, train, stats[k])
                caches.append((cd, cr, cb))
            else:
                caches.append((cd, None, None))
        return x, caches

    def backward(self, dy: np.ndarray, caches) -> np.ndarray:
        for k in reversed(range(len(self.dense))):
            cd, cr, cb = caches[k]
            if cb is not None:
                dy = self.norms[k].backward(dy, cb)
                dy = self.relu.backward(dy, cr)
            dy = self.dense[k].backward(dy, cd)
        return dy


class SequenceEncoder(Module):
    """Embedding + BiLSTM, pooled by final hidden state or temporal max."""

    def __init__(self, vocab_size: int, embed_dim: int, hidden: int, pool: str, rng):
        self.embed = Embedding(vocab_size, embed_dim, rng)
        self.lstm = BiLSTM(embed_dim, hidden, rng)
        self.pool = pool

    def forward(self, ids, lens, train: bool):
        x, ce = self.embed.forward(ids)
        (all_h, final), cl = self.lstm.forward(x, lens)
        if self.pool == "final":
            return final, (ce, cl, None)
        out, cp = maxpool_time(all_h, lens)
        return out, (ce, cl, cp)

    def backward(self, dy, cache):
        ce, cl, cp = cache
        if cp is None:
            dx = self.lstm.backward(None, dy, cl)
        else:
            dx = self.lstm.backward(maxpool_time_backward(dy, cp), None, cl)
        self.embed.backward(dx, ce)


class BagEncoder(Module):
    """Embedding -> per-token dense + ReLU -> max over the (unordered) token set."""

    def __init__(self, vocab_size: int, embed_dim: int, out_dim: int, rng):
        self.embed = Embedding(vocab_size, embed_dim, rng)
        self.dense = Dense(embed_dim, out_dim, rng)
        self.relu = ReLU()

    def forward(self, ids, lens, train: bool):
        x, ce = self.embed.forward(ids)
        h, cd = self.dense.forward(x)
        h, cr = self.relu.forward(h)
        out, cp = maxpool_time(h, lens)
        return out, (ce, cd, cr, cp)

    def backward(self, dy, cache):
        ce, cd, cr, cp = cache
        dh = maxpool_time_backward(dy, cp)
        dx = self.dense.backward(self.relu.backward(dh, cr), cd)
        self.embed.backward(dx, ce)


class DCSCodeEncoder(Module):
    """Method name, API sequence and token bag, fused element-wise (max) or by concat + dense."""

    def __init__(self, cfg: ModelConfig, vocab_sizes: dict, rng):
        E, H = cfg.embed_dim, cfg.lstm_hidden
        self.name_net = SequenceEncoder(vocab_sizes["name"], E, H, "max", rng)
        self.api_net = SequenceEncoder(vocab_sizes["api"], E, H, "max", rng)
        self.bag_net = BagEncoder(vocab_sizes["tokens"], E, 2 * H, rng)
        self.fusion = cfg.fusion
        if self.fusion == "concat":
            self.fuse = Dense(6 * H, 2 * H, rng)

    def forward(self, batch: dict, train: bool):
        n, cn = self.name_net.forward(*batch["name"], train)
        a, ca = self.api_net.forward(*batch["api"], train)
        b, cb = self.bag_net.forward(*batch["tokens"], train)
        if self.fusion == "max":
            out, cf = maxpool_elem([n, a, b])
            return out, (cn, ca, cb, cf)
        pre, cd = self.fuse.forward(np.concatenate([n, a, b], axis=1))
        out = np.tanh(pre)
        return out, (cn, ca, cb, (cd, out))

    def backward(self, dy, cache):
        cn, ca, cb, cf = cache
        if self.fusion == "max":
            dn, da, db = maxpool_elem_backward(dy, cf)
        else:
            cd, out = cf
            dcat = self.fuse.backward(dy * (1 - out * out), cd)
            dn, da, db = np.split(dcat, 3, axis=1)
        self.name_net.backward(dn, cn)
        self.api_net.backward(da, ca)
        self.bag_net.backward(db, cb)


class BiLCodeEncoder(Module):
    def __init__(self, cfg: ModelConfig, vocab_sizes: dict, rng):
        self.field = _BIL_FIELD[cfg.arch]
        self.net = SequenceEncoder(vocab_sizes[self.field], cfg.embed_dim, cfg.lstm_hidden, "final", rng)

    def forward(self, batch: dict, train: bool):
        return self.net.forward(*batch[self.field], train)

    def backward(self, dy, cache):
        self.net.backward(dy, cache)


class TextEncoder(Module):
    def __init__(self, cfg: ModelConfig, vocab_sizes: dict, rng):
        pool = "max" if cfg.arch == "dcs" else "final"
        self.net = SequenceEncoder(vocab_sizes["text"], cfg.embed_dim, cfg.lstm_hidden, pool, rng)

    def forward(self, batch: dict, train: bool):
        return self.net.forward(*batch["text"], train)

    def backward(self, dy, cache):
        self.net.backward(dy, cache)


class CodeSearchModel(Module):
    def __init__(self, config: ModelConfig):
        if not config.vocab_sizes:
            raise ValueError("config.vocab_sizes must be set before building a model")
        rng = np.random.default_rng(config.seed)
        self.config = config
        sizes = config.vocab_sizes
        if config.arch == "dcs":
            self.code_extractor = DCSCodeEncoder(config, sizes, rng)
        else:
            self.code_extractor = BiLCodeEncoder(config, sizes, rng)
        self.text_extractor = TextEncoder(config, sizes, rng)
        self.head = SiameseHead(
            head_layer_sizes(config.extraction_dim, config.s_emb, config.arch == "dcs"), rng
        )

    def encode_code_batch(self, batch: dict, layer: str = "siamese", train: bool = False) -> np.ndarray:
        _check_layer(layer)
        out, _ = self.code_extractor.forward(batch, train)
        if layer == "siamese":
            out, _ = self.head.forward(out, train, "code")
        return out

    def encode_text_batch(self, batch: dict, layer: str = "siamese", train: bool = False) -> np.ndarray:
        _check_layer(layer)
        out, _ = self.text_extractor.forward(batch, train)
        if layer == "siamese":
            out, _ = self.head.forward(out, train, "text")
        return out

    def forward_branches(self, batch: dict, train: bool = True):
        """Run both branches through the shared head. Returns (u, v, cache)."""
        ce, cc = self.code_extractor.forward(batch, train)
        te, ct = self.text_extractor.forward(batch, train)
        u, hu = self.head.forward(ce, train, "code")
        v, hv = self.head.forward(te, train, "text")
        return u, v, (cc, ct, hu, hv)

    def backward_branches(self, du: np.ndarray, dv: np.ndarray, cache) -> None:
        cc, ct, hu, hv = cache
        self.code_extractor.backward(self.head.backward(du, hu), cc)
        self.text_extractor.backward(self.head.backward(dv, hv), ct)

    def digest(self) -> str:
        h = hashlib.sha256()
        for name, p in self.named_state():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.value, dtype="<f4").tobytes())
        return h.hexdigest()


def _check_layer(layer: str) -> None:
    if layer not in LAYERS:
        raise ValueError(f"layer must be one of {LAYERS}, got {layer!r}")


def build(config: ModelConfig, has_method_names: bool = True) -> CodeSearchModel:
    if config.arch == "bil_m" and not has_method_names:
        raise Unsupported(
            "BiL-M needs method names, which this corpus lacks (e.g. SQL); "
            "use bil_a, bil_cs or dcs instead"
        )
    if not config.standard_semb:
        warnings.warn(f"non-standard S_emb {config.s_emb}; explored values are {STANDARD_SEMB}")
    return CodeSearchModel(config)


def _batched(model: CodeSearchModel, data: EncodedCorpus, layer: str, side: str, batch_size: int):
    outs = []
    encode = model.encode_code_batch if side == "code" else model.encode_text_batch
    for start in range(0, len(data), batch_size):
        idx = np.arange(start, min(start + batch_size, len(data)))
        outs.append(encode(data.batch(idx), layer, train=False))
    if not outs:
        dim = model.config.extraction_dim if layer == "extraction" else model.config.s_emb
        return np.zeros((0, dim), dtype=np.float32)
    return np.concatenate(outs, axis=0)


def encode_code(model: CodeSearchModel, data: EncodedCorpus, layer: str = "siamese", batch_size: int = 256):
    """Inference-mode code embeddings for every example in ``data``."""
    return _batched(model, data, layer, "code", batch_size)


def encode_text(model: CodeSearchModel, data: EncodedCorpus, layer: str = "siamese", batch_size: int = 256):
    return _batched(model, data, layer, "text", batch_size)
