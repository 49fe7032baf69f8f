"""Contrastive, triplet and cosine-contrastive objectives.

Scalar functions take single vectors; the ``*_batch`` variants take stacked
rows and return ``(mean loss, grads...)`` for backprop. All arithmetic runs in
float64; gradients are cast back to the caller's dtype.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateVector
from .nn.core import log_branches

LOSS_KINDS = ("contrastive", "triplet", "cosine_contrastive")
DEFAULT_MARGINS = {"contrastive": 1.0, "triplet": 0.3, "cosine_contrastive": 0.3}


@dataclass(frozen=True)
class LossConfig:
    kind: str = "cosine_contrastive"
    margin: float | None = None

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss {self.kind!r}; expected one of {LOSS_KINDS}")
        if self.margin is None:
            object.__setattr__(self, "margin", DEFAULT_MARGINS[self.kind])
        m = self.margin
        if self.kind == "cosine_contrastive":
            if not 0.0 <= m < 1.0:
                raise ValueError("cosine_contrastive margin must lie in [0, 1)")
        elif m <= 0:
            raise ValueError(f"{self.kind} margin must be positive")

    @property
    def uses_triplets(self) -> bool:
        return self.kind == "triplet"


def _rows(x) -> np.ndarray:
    return np.atleast_2d(np.asarray(x, dtype=np.float64))


def _out_dtype(x) -> np.dtype:
    dt = np.asarray(x).dtype
    return dt if np.issubdtype(dt, np.floating) else np.dtype(np.float64)


def _safe_unit(diff: np.ndarray, dist: np.ndarray) -> np.ndarray:
    # subgradient 0 where the distance vanishes
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(dist[:, None] > 0, diff / dist[:, None], 0.0)


def contrastive_batch(u, v, y, margin: float):
    u64, v64 = _rows(u), _rows(v)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    diff = u64 - v64
    d = np.sqrt((diff * diff).sum(axis=1))
    hinge = np.maximum(0.0, margin - d)
    log_branches(np.where(y > 0, 1, hinge > 0))
    per = y * d * d + (1 - y) * hinge * hinge
    n = len(per)
    # d(d^2)/du = 2 diff ; d(hinge^2)/du = -2 hinge * diff/d
    coef_pos = 2.0 * y[:, None] * diff
    coef_neg = -2.0 * ((1 - y) * hinge)[:, None] * _safe_unit(diff, d)
    du = (coef_pos + coef_neg) / n
    dtype = _out_dtype(u)
    return float(per.mean()), du.astype(dtype), (-du).astype(dtype)


def triplet_batch(a, p, n_, margin: float):
    a64, p64, n64 = _rows(a), _rows(p), _rows(n_)
    dp_vec, dn_vec = a64 - p64, a64 - n64
    dp = np.sqrt((dp_vec**2).sum(axis=1))
    dn = np.sqrt((dn_vec**2).sum(axis=1))
    per = np.maximum(0.0, dp - dn + margin)
    log_branches(per > 0)
    active = (per > 0).astype(np.float64)[:, None]
    k = len(per)
    up = _safe_unit(dp_vec, dp)
    un = _safe_unit(dn_vec, dn)
    da = active * (up - un) / k
    dpos = -active * up / k
    dneg = active * un / k
    dtype = _out_dtype(a)
    return float(per.mean()), da.astype(dtype), dpos.astype(dtype), dneg.astype(dtype)


def _cosines(u64: np.ndarray, v64: np.ndarray):
    nu = np.sqrt((u64 * u64).sum(axis=1))
    nv = np.sqrt((v64 * v64).sum(axis=1))
    if np.any(nu == 0) or np.any(nv == 0):
        raise DegenerateVector("cosine of a zero-norm vector")
    c = (u64 * v64).sum(axis=1) / (nu * nv)
    return c, nu, nv


def cosine_contrastive_batch(u, v, y, margin: float):
    u64, v64 = _rows(u), _rows(v)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    c, nu, nv = _cosines(u64, v64)
    per = y * (1.0 - c) + (1 - y) * np.maximum(0.0, c - margin)
    # dL/dc: -1 for positives, +1 for active negatives
    log_branches(np.where(y > 0, 1, c > margin))
    dl_dc = -y + (1 - y) * (c > margin)
    n = len(per)
    dc_du = v64 / (nu * nv)[:, None] - c[:, None] * u64 / (nu * nu)[:, None]
    dc_dv = u64 / (nu * nv)[:, None] - c[:, None] * v64 / (nv * nv)[:, None]
    du = dl_dc[:, None] * dc_du / n
    dv = dl_dc[:, None] * dc_dv / n
    dtype = _out_dtype(u)
    return float(per.mean()), du.astype(dtype), dv.astype(dtype)


def contrastive(u, v, y: int, margin: float = 1.0) -> float:
    return contrastive_batch(u, v, [y], margin)[0]


def triplet(anchor, positive, negative, margin: float = 0.3) -> float:
    return triplet_batch(anchor, positive, negative, margin)[0]


def cosine_contrastive(u, v, y: int, margin: float = 0.3) -> float:
    return cosine_contrastive_batch(u, v, [y], margin)[0]


def pair_loss_batch(kind: str, u, v, y, margin: float):
    if kind == "contrastive":
        return contrastive_batch(u, v, y, margin)
    if kind == "cosine_contrastive":
        return cosine_contrastive_batch(u, v, y, margin)
    raise ValueError(f"{kind!r} is not a pairwise loss")
