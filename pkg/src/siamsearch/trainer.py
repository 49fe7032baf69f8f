"""Training loop with plateau LR halving, validation-MRR model selection and
bit-exact checkpoints."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .corpus import FIELDS, EncodedCorpus, Vocabulary, in_batch_negatives
from .errors import CheckpointError, DegenerateVector, TrainingDiverged
from .evalret import EvalConfig, evaluate
from .losses import LossConfig, pair_loss_batch, triplet_batch
from .models import CodeSearchModel, ModelConfig
from .nn.core import Parameter
from .nn.optim import adam_step

log = logging.getLogger(__name__)

CKPT_MAGIC = b"SSCKPT01"
STAGNATION_EPS = 1e-5


@dataclass
class TrainConfig:
    initial_lr: float = 0.001
    patience: int = 40
    max_halvings: int = 4
    batch_size: int = 32
    max_epochs: int = 500
    seed: int = 0
    validate_every: int = 1
    validation_pool_size: int = 50
    validation_layer: str = "siamese"

    def __post_init__(self):
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.max_halvings < 0:
            raise ValueError("max_halvings must be >= 0")
        if self.batch_size < 2:
            raise ValueError("batch size must be >= 2 (in-batch negatives and batchnorm need it)")
        if self.validate_every < 1:
            raise ValueError("validate_every must be >= 1")


@dataclass
class TrainState:
    epoch: int = 0
    lr: float = 0.001
    best_val_mrr: float = -math.inf
    stagnant_epochs: int = 0
    halvings_used: int = 0
    adam_step: int = 0
    best_epoch: int = 0

    def to_json(self) -> dict:
        d = asdict(self)
        # JSON has no -inf
        d["best_val_mrr"] = None if self.best_val_mrr == -math.inf else self.best_val_mrr
        return d

    @classmethod
    def from_json(cls, obj: dict) -> "TrainState":
        obj = dict(obj)
        if obj.get("best_val_mrr") is None:
            obj["best_val_mrr"] = -math.inf
        return cls(**obj)


class PlateauSchedule:
    """Halve the LR after ``patience`` stagnant validations, at most ``max_halvings`` times."""

    def __init__(self, config: TrainConfig, state: TrainState):
        self.config = config
        self.state = state

    def update(self, val_mrr: float) -> tuple[bool, bool]:
        """Record one validation result. Returns (improved, should_stop)."""
        s, c = self.state, self.config
        improved = val_mrr > s.best_val_mrr + STAGNATION_EPS
        if improved:
            s.best_val_mrr = val_mrr
            s.best_epoch = s.epoch
            s.stagnant_epochs = 0
            return True, False
        s.stagnant_epochs += 1
        if s.stagnant_epochs < c.patience:
            return False, False
        if s.halvings_used >= c.max_halvings:
            return False, True
        s.halvings_used += 1
        s.lr = c.initial_lr / 2**s.halvings_used
        s.stagnant_epochs = 0
        log.info("epoch %d: lr halved to %g", s.epoch, s.lr)
        return False, False


def batch_loss(model: CodeSearchModel, batch: dict, loss_cfg: LossConfig, neg: np.ndarray) -> float:
    """Forward both branches, apply the loss with in-batch negatives and backprop.

    Gradients accumulate into the model's parameters; the caller zeroes them.
    """
    u, v, cache = model.forward_branches(batch, train=True)
    B = len(u)
    if loss_cfg.uses_triplets:
        loss, du, dpos, dneg = triplet_batch(u, v, v[neg], loss_cfg.margin)
        dv = dpos
        np.add.at(dv, neg, dneg)
    else:
        U = np.concatenate([u, u])
        V = np.concatenate([v, v[neg]])
        y = np.concatenate([np.ones(B), np.zeros(B)])
        loss, dU, dV = pair_loss_batch(loss_cfg.kind, U, V, y, loss_cfg.margin)
        du = dU[:B] + dU[B:]
        dv = dV[:B].copy()
        np.add.at(dv, neg, dV[B:])
    model.backward_branches(du, dv, cache)
    return loss


def epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch])


def train_epoch(
    model: CodeSearchModel,
    data: EncodedCorpus,
    loss_cfg: LossConfig,
    rng: np.random.Generator,
    state: TrainState,
    batch_size: int,
) -> float:
    """One shuffled pass with an Adam step per batch; returns the mean batch loss.

    A trailing batch of a single example is dropped since it admits no negative.
    """
    if batch_size < 2:
        raise ValueError("batch size must be >= 2")
    n = len(data)
    order = rng.permutation(n)
    params = model.parameters()
    losses = []
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        if len(idx) < 2:
            continue
        model.zero_grad()
        neg = in_batch_negatives(len(idx), rng)
        try:
            loss = batch_loss(model, data.batch(idx), loss_cfg, neg)
        except DegenerateVector as exc:
            raise TrainingDiverged(
                f"zero-norm embedding at epoch {state.epoch + 1}: {exc}",
                [data.record_ids[i] for i in idx],
            ) from exc
        if not math.isfinite(loss) or not all(np.isfinite(p.grad).all() for p in params):
            raise TrainingDiverged(
                f"non-finite loss/gradient at epoch {state.epoch + 1}",
                [data.record_ids[i] for i in idx],
            )
        state.adam_step += 1
        adam_step(params, state.lr, state.adam_step)
        losses.append(loss)
    return math.fsum(losses) / len(losses) if losses else float("nan")


@dataclass
class Checkpoint:
    model: CodeSearchModel
    state: TrainState
    vocabs: dict[str, Vocabulary] = field(default_factory=dict)

    def save(self, path: str | Path) -> None:
        save_checkpoint(self.model, self.state, path, self.vocabs)

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        return cls(*load_checkpoint(path))


def _vocab_payload(vocabs: dict[str, Vocabulary]) -> tuple[dict, str]:
    payload = {f: vocabs[f].to_json() for f in FIELDS if f in vocabs}
    digest = hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()
    return payload, digest


def _tensor_entries(model: CodeSearchModel):
    for name, p in model.named_state():
        yield f"{name}.value", p, "value"
        if isinstance(p, Parameter):
            yield f"{name}.adam_m", p, "adam_m"
            yield f"{name}.adam_v", p, "adam_v"


def save_checkpoint(model: CodeSearchModel, state: TrainState, path: str | Path, vocabs=None) -> None:
    """Header (JSON) then raw little-endian float32 tensors."""
    chunks, manifest, offset = [], [], 0
    for name, obj, slot in _tensor_entries(model):
        raw = np.ascontiguousarray(getattr(obj, slot), dtype="<f4").tobytes()
        manifest.append({"name": name, "shape": list(getattr(obj, slot).shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    data = b"".join(chunks)
    vocab_payload, vocab_digest = _vocab_payload(vocabs or {})
    header = {
        "format": 1,
        "config": model.config.to_json(),
        "state": state.to_json(),
        "vocabs": vocab_payload,
        "vocab_digest": vocab_digest,
        "tensors": manifest,
        "data_bytes": len(data),
        "data_sha256": hashlib.sha256(data).hexdigest(),
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<Q", len(hbytes)))
        fh.write(hbytes)
        fh.write(data)
    tmp.replace(path)


def load_checkpoint(path: str | Path):
    """Returns (model, state, vocabs). Raises CheckpointError on any corruption."""
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(blob) < 16 or blob[:8] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<Q", blob[8:16])
    if 16 + hlen > len(blob):
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(blob[16 : 16 + hlen])
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    data = blob[16 + hlen :]
    if len(data) != header["data_bytes"]:
        raise CheckpointError(f"{path}: truncated tensor data ({len(data)} of {header['data_bytes']} bytes)")
    if hashlib.sha256(data).hexdigest() != header["data_sha256"]:
        raise CheckpointError(f"{path}: tensor data digest mismatch")
    vocabs = {f: Vocabulary.from_json(v) for f, v in header["vocabs"].items()}
    if _vocab_payload(vocabs)[1] != header["vocab_digest"]:
        raise CheckpointError(f"{path}: vocabulary digest mismatch")

    config = ModelConfig(**header["config"])
    model = CodeSearchModel(config)
    expected = {name: (obj, slot) for name, obj, slot in _tensor_entries(model)}
    if set(expected) != {t["name"] for t in header["tensors"]}:
        raise CheckpointError(f"{path}: tensor manifest does not match the model config")
    for entry in header["tensors"]:
        obj, slot = expected[entry["name"]]
        shape = tuple(entry["shape"])
        if shape != getattr(obj, slot).shape:
            raise CheckpointError(f"{path}: shape mismatch for {entry['name']}")
        count = int(np.prod(shape))
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=entry["offset"])
        setattr(obj, slot, arr.reshape(shape).astype(np.float32))
    for p in model.parameters():
        p.grad = np.zeros_like(p.value)
    return model, TrainState.from_json(header["state"]), vocabs


@dataclass
class FitResult:
    best: Checkpoint
    last: Checkpoint
    history: list[dict]


def fit(
    model: CodeSearchModel,
    train: EncodedCorpus,
    valid: EncodedCorpus,
    config: TrainConfig,
    loss_cfg: LossConfig | None = None,
    *,
    state: TrainState | None = None,
    vocabs: dict | None = None,
    out_dir: str | Path | None = None,
    validate: Callable[[CodeSearchModel], float] | None = None,
    on_epoch: Callable[[dict], None] | None = None,
) -> FitResult:
    """Train until the LR schedule is exhausted or ``max_epochs`` is reached.

    Validation runs once before the first epoch so that a run which never
    improves halves its LR after exactly ``patience`` epochs. Pass ``state``
    (from a checkpoint) to resume; the per-epoch RNG is derived from
    (seed, epoch) so a resumed run continues bit-identically.
    """
    loss_cfg = loss_cfg or LossConfig(model.config.loss, model.config.margin)
    vocabs = vocabs or {}
    if validate is None:
        eval_cfg = EvalConfig(
            pool_size=min(config.validation_pool_size, max(len(valid), 2)),
            layer=config.validation_layer,
            seed=config.seed,
        )

        def validate(m):
            return evaluate(m, valid, eval_cfg).mrr

    fresh = state is None
    if fresh:
        state = TrainState(lr=config.initial_lr)
    schedule = PlateauSchedule(config, state)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    history: list[dict] = []
    best_model = copy.deepcopy(model)
    best_state = copy.deepcopy(state)

    if fresh:
        schedule.update(validate(model))
        best_model, best_state = copy.deepcopy(model), copy.deepcopy(state)

    stop = state.epoch >= config.max_epochs
    while not stop:
        rng = epoch_rng(config.seed, state.epoch + 1)
        mean_loss = train_epoch(model, train, loss_cfg, rng, state, config.batch_size)
        state.epoch += 1
        entry = {"epoch": state.epoch, "mean_loss": mean_loss, "lr": state.lr}
        if state.epoch % config.validate_every == 0:
            val = validate(model)
            improved, stop = schedule.update(val)
            if improved:
                best_model, best_state = copy.deepcopy(model), copy.deepcopy(state)
            entry.update(val_mrr=val, improved=improved)
        entry.update(stagnant=state.stagnant_epochs, halvings=state.halvings_used, lr_next=state.lr)
        history.append(entry)
        if out is not None:
            with open(out / "train_log.jsonl", "a", encoding="utf-8") as fh:
                fh.write(json.dumps(entry) + "\n")
        if on_epoch is not None:
            on_epoch(entry)
        log.debug("%s", entry)
        if state.epoch >= config.max_epochs:
            stop = True

    best = Checkpoint(best_model, best_state, vocabs)
    last = Checkpoint(model, state, vocabs)
    if out is not None:
        best.save(out / "best.ckpt")
        last.save(out / "last.ckpt")
    return FitResult(best, last, history)
