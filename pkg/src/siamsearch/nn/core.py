"""Layers with hand-written forward and backward passes.

Every ``forward`` returns ``(output, cache)`` and the matching ``backward``
takes ``(grad_output, cache)``, accumulating into ``Parameter.grad`` and
returning the input gradient. Keeping the cache outside the layer object is
what lets one layer be applied to several branches within a single step.
"""

from __future__ import annotations

import copy
from typing import Iterator

import numpy as np

DTYPE = np.float32

# When a list, piecewise-linear ops append their branch choices (ReLU masks,
# max-pool argmaxes, hinge activity) so a gradient check can tell whether a
# finite-difference probe crossed a kink.
_branch_log: list | None = None


def log_branches(choice: np.ndarray) -> None:
    if _branch_log is not None:
        _branch_log.append(np.array(choice, copy=True))


class record_branches:
    """Context manager collecting branch choices made inside it."""

    def __enter__(self) -> list:
        global _branch_log
        self._saved = _branch_log
        _branch_log = []
        return _branch_log

    def __exit__(self, *exc):
        global _branch_log
        _branch_log = self._saved
        return False


class Parameter:
    __slots__ = ("name", "value", "grad", "adam_m", "adam_v")

    def __init__(self, value: np.ndarray, name: str = ""):
        self.name = name
        self.value = value
        self.grad = np.zeros_like(value)
        self.adam_m = np.zeros_like(value)
        self.adam_v = np.zeros_like(value)

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad[...] = 0

    def astype(self, dtype) -> None:
        for slot in ("value", "grad", "adam_m", "adam_v"):
            setattr(self, slot, getattr(self, slot).astype(dtype))


class Buffer:
    """Non-trainable state that still belongs in a checkpoint."""

    __slots__ = ("name", "value")

    def __init__(self, value: np.ndarray, name: str = ""):
        self.name = name
        self.value = value

    def astype(self, dtype) -> None:
        self.value = self.value.astype(dtype)


class Module:
    def _children(self) -> Iterator[tuple[str, object]]:
        for key, val in vars(self).items():
            if isinstance(val, (Module, Parameter, Buffer)):
                yield key, val
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, (Module, Parameter, Buffer)):
                        yield f"{key}.{i}", item

    def named_state(self, prefix: str = "", _seen=None) -> Iterator[tuple[str, Parameter | Buffer]]:
        """Parameters and buffers in a stable order, each object yielded once."""
        seen = set() if _seen is None else _seen
        for key, val in self._children():
            name = f"{prefix}{key}"
            if isinstance(val, Module):
                yield from val.named_state(name + ".", seen)
            elif id(val) not in seen:
                seen.add(id(val))
                yield name, val

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_state() if isinstance(p, Parameter)]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def astype(self, dtype) -> "Module":
        """Deep copy with every parameter and buffer cast to ``dtype``."""
        clone = copy.deepcopy(self)
        for _, p in clone.named_state():
            p.astype(dtype)
        return clone


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(DTYPE)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign to avoid overflow in exp
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class Embedding(Module):
    def __init__(self, num_rows: int, dim: int, rng: np.random.Generator):
        if num_rows <= 0 or dim <= 0:
            raise ValueError("embedding dims must be positive")
        self.table = Parameter(rng.normal(0.0, 0.1, size=(num_rows, dim)).astype(DTYPE), "table")

    def forward(self, ids: np.ndarray):
        ids = np.asarray(ids)
        if ids.size and (ids.min() < 0 or ids.max() >= self.table.value.shape[0]):
            raise IndexError(f"embedding id out of range [0, {self.table.value.shape[0]})")
        return self.table.value[ids], ids

    def backward(self, dout: np.ndarray, ids) -> None:
        np.add.at(self.table.grad, ids.reshape(-1), dout.reshape(-1, dout.shape[-1]))
        return None


class Dense(Module):
    """y = x W + b over the last axis; leading axes are batch-like."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator):
        if n_in <= 0 or n_out <= 0:
            raise ValueError("dense dims must be positive")
        self.W = Parameter(_uniform(rng, (n_in, n_out), n_in), "W")
        self.b = Parameter(_uniform(rng, (n_out,), n_in), "b")

    def forward(self, x: np.ndarray):
        return x @ self.W.value + self.b.value, x

    def backward(self, dy: np.ndarray, x: np.ndarray) -> np.ndarray:
        n_in, n_out = self.W.value.shape
        self.W.grad += x.reshape(-1, n_in).T @ dy.reshape(-1, n_out)
        self.b.grad += dy.reshape(-1, n_out).sum(axis=0, dtype=np.float64).astype(self.b.grad.dtype)
        return dy @ self.W.value.T


class ReLU(Module):
    def forward(self, x: np.ndarray):
        mask = x > 0
        log_branches(mask)
        return x * mask, mask

    def backward(self, dy: np.ndarray, mask: np.ndarray) -> np.ndarray:
        return dy * mask


class RunningStats(Module):
    """Batchnorm running mean and variance, held apart from the affine parameters."""

    def __init__(self, dim: int):
        self.running_mean = Buffer(np.zeros(dim, dtype=DTYPE), "running_mean")
        self.running_var = Buffer(np.ones(dim, dtype=DTYPE), "running_var")


class BatchNorm(Module):
    """Per-feature batch normalisation over axis 0 of a (batch, features) input."""

    eps = 1e-5
    momentum = 0.1

    def __init__(self, dim: int, own_stats: bool = True):
        self.gamma = Parameter(np.ones(dim, dtype=DTYPE), "gamma")
        self.beta = Parameter(np.zeros(dim, dtype=DTYPE), "beta")
        if own_stats:
            self.running_mean = Buffer(np.zeros(dim, dtype=DTYPE), "running_mean")
            self.running_var = Buffer(np.ones(dim, dtype=DTYPE), "running_var")

    def forward(self, x: np.ndarray, train: bool, stats: "RunningStats | None" = None):
        """``stats`` holds the running mean/var to read (infer) or update (train)
        in place of the layer's own."""
        stats = self if stats is None else stats
        dtype = x.dtype
        if not train:
            std = np.sqrt(stats.running_var.value.astype(np.float64) + self.eps)
            xhat = ((x - stats.running_mean.value) / std).astype(dtype)
            return self.gamma.value * xhat + self.beta.value, None
        n = x.shape[0]
        if n < 2:
            raise ValueError("batchnorm in train mode needs a batch of at least 2")
        x64 = x.astype(np.float64)
        mean = x64.mean(axis=0)
        var = x64.var(axis=0)
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x64 - mean) * inv_std
        rm, rv = stats.running_mean, stats.running_var
        rm.value = ((1 - self.momentum) * rm.value + self.momentum * mean).astype(rm.value.dtype)
        unbiased = var * n / (n - 1)
        rv.value = ((1 - self.momentum) * rv.value + self.momentum * unbiased).astype(rv.value.dtype)
        y = self.gamma.value * xhat.astype(dtype) + self.beta.value
        return y, (xhat, inv_std)

    def backward(self, dy: np.ndarray, cache) -> np.ndarray:
        if cache is None:
            raise RuntimeError("backward through batchnorm requires train mode")
        xhat, inv_std = cache
        dy64 = dy.astype(np.float64)
        self.gamma.grad += (dy64 * xhat).sum(axis=0).astype(self.gamma.grad.dtype)
        self.beta.grad += dy64.sum(axis=0).astype(self.beta.grad.dtype)
        dxhat = dy64 * self.gamma.value
        dx = inv_std * (dxhat - dxhat.mean(axis=0) - xhat * (dxhat * xhat).mean(axis=0))
        return dx.astype(dy.dtype)


def lstm_step(x_proj: np.ndarray, h_prev: np.ndarray, c_prev: np.ndarray, Wh: np.ndarray):
    """One LSTM cell update.

    ``x_proj`` is the input already projected (x Wx + b), shape (B, 4H) with
    gates packed as [input, forget, candidate, output].
    """
    H = h_prev.shape[-1]
    z = x_proj + h_prev @ Wh
    i = sigmoid(z[:, :H])
    f = sigmoid(z[:, H : 2 * H])
    g = np.tanh(z[:, 2 * H : 3 * H])
    o = sigmoid(z[:, 3 * H :])
    c = f * c_prev + i * g
    tc = np.tanh(c)
    h = o * tc
    return h, c, (i, f, g, o, tc)


def lstm_step_backward(dh, dc, h_prev, c_prev, gates, Wh):
    """Returns (dz, dh_prev, dc_prev) for one step; dz is the gradient on the packed pre-activations."""
    i, f, g, o, tc = gates
    do = dh * tc
    dc = dc + dh * o * (1.0 - tc * tc)
    di = dc * g
    dg = dc * i
    df = dc * c_prev
    dz = np.concatenate(
        [di * i * (1.0 - i), df * f * (1.0 - f), dg * (1.0 - g * g), do * o * (1.0 - o)], axis=1
    )
    return dz, dz @ Wh.T, dc * f


class LSTM(Module):
    """Single-direction LSTM over a padded batch with per-row true lengths."""

    def __init__(self, n_in: int, hidden: int, rng: np.random.Generator, reverse: bool = False):
        if n_in <= 0 or hidden <= 0:
            raise ValueError("lstm dims must be positive")
        fan_in = n_in + hidden
        self.hidden = hidden
        self.reverse = reverse
        self.Wx = Parameter(_uniform(rng, (n_in, 4 * hidden), fan_in), "Wx")
        self.Wh = Parameter(_uniform(rng, (hidden, 4 * hidden), fan_in), "Wh")
        b = _uniform(rng, (4 * hidden,), fan_in)
        b[hidden : 2 * hidden] = 1.0
        self.b = Parameter(b, "b")

    def forward(self, x: np.ndarray, lens: np.ndarray):
        """x: (B, T, n_in). Returns (all_h (B, T, H), final (B, H)), cache.

        Steps at or past a row's true length leave that row's state untouched
        and emit zeros, so padding never leaks into results.
        """
        B, T, _ = x.shape
        H = self.hidden
        dtype = self.Wx.value.dtype
        xp = x @ self.Wx.value + self.b.value
        mask = (np.arange(T)[None, :] < np.asarray(lens)[:, None]).astype(dtype)
        h = np.zeros((B, H), dtype=dtype)
        c = np.zeros((B, H), dtype=dtype)
        all_h = np.zeros((B, T, H), dtype=dtype)
        h_prev_all = np.zeros((B, T, H), dtype=dtype)
        steps = []
        order = range(T - 1, -1, -1) if self.reverse else range(T)
        Wh = self.Wh.value
        for t in order:
            m = mask[:, t : t + 1]
            h_new, c_new, gates = lstm_step(xp[:, t], h, c, Wh)
            all_h[:, t] = h_new * m
            h_prev_all[:, t] = h
            steps.append((t, c, gates))
            h = m * h_new + (1 - m) * h
            c = m * c_new + (1 - m) * c
        return (all_h, h), (x, mask, steps, h_prev_all)

    def backward(self, d_all_h: np.ndarray, d_final: np.ndarray, cache) -> np.ndarray:
        x, mask, steps, h_prev_all = cache
        B, T, n_in = x.shape
        H = self.hidden
        Wh = self.Wh.value
        dxp = np.zeros((B, T, 4 * H), dtype=x.dtype)
        dh = d_final.astype(x.dtype, copy=True)
        dc = np.zeros_like(dh)
        for t, c_prev, gates in reversed(steps):
            m = mask[:, t : t + 1]
            dh_new = m * (dh + d_all_h[:, t])
            dc_new = m * dc
            dz, dh_prev, dc_prev = lstm_step_backward(dh_new, dc_new, h_prev_all[:, t], c_prev, gates, Wh)
            dxp[:, t] = dz
            dh = dh_prev + (1 - m) * dh
            dc = dc_prev + (1 - m) * dc
        flat = dxp.reshape(-1, 4 * H)
        self.Wx.grad += x.reshape(-1, n_in).T @ flat
        self.Wh.grad += h_prev_all.reshape(-1, H).T @ flat
        self.b.grad += flat.sum(axis=0, dtype=np.float64).astype(self.b.grad.dtype)
        return dxp @ self.Wx.value.T


class BiLSTM(Module):
    """Forward and backward LSTMs; ``final`` joins forward h at len-1 with backward h at 0."""

    def __init__(self, n_in: int, hidden: int, rng: np.random.Generator):
        self.fwd = LSTM(n_in, hidden, rng)
        self.bwd = LSTM(n_in, hidden, rng, reverse=True)
        self.hidden = hidden

    def forward(self, x: np.ndarray, lens: np.ndarray):
        lens = np.asarray(lens)
        if lens.size and (lens.min() < 1 or lens.max() > x.shape[1]):
            raise ValueError("true lengths must lie in [1, padded length]")
        (hf, ff), cf = self.fwd.forward(x, lens)
        (hb, fb), cb = self.bwd.forward(x, lens)
        all_h = np.concatenate([hf, hb], axis=-1)
        final = np.concatenate([ff, fb], axis=-1)
        return (all_h, final), (cf, cb)

    def backward(self, d_all_h, d_final, cache) -> np.ndarray:
        cf, cb = cache
        H = self.hidden
        if d_all_h is None:
            B, T = cf[1].shape
            d_all_h = np.zeros((B, T, 2 * H), dtype=cf[0].dtype)
        if d_final is None:
            d_final = np.zeros((d_all_h.shape[0], 2 * H), dtype=d_all_h.dtype)
        dx = self.fwd.backward(d_all_h[..., :H], d_final[:, :H], cf)
        dx += self.bwd.backward(d_all_h[..., H:], d_final[:, H:], cb)
        return dx


def maxpool_time(seq: np.ndarray, lens: np.ndarray):
    """Element-wise max over the first ``len`` steps of each row of (B, T, D)."""
    B, T, D = seq.shape
    valid = np.arange(T)[None, :] < np.asarray(lens)[:, None]
    masked = np.where(valid[:, :, None], seq, -np.inf)
    arg = masked.argmax(axis=1)  # first index on ties
    log_branches(arg)
    out = np.take_along_axis(seq, arg[:, None, :], axis=1)[:, 0, :]
    return out, (arg, seq.shape)


def maxpool_time_backward(dy: np.ndarray, cache) -> np.ndarray:
    arg, shape = cache
    dx = np.zeros(shape, dtype=dy.dtype)
    np.put_along_axis(dx, arg[:, None, :], dy[:, None, :], axis=1)
    return dx


def maxpool_elem(vectors):
    """Element-wise max over k same-shape arrays (B, D)."""
    stacked = np.stack(vectors, axis=1)
    arg = stacked.argmax(axis=1)
    log_branches(arg)
    out = np.take_along_axis(stacked, arg[:, None, :], axis=1)[:, 0, :]
    return out, (arg, stacked.shape)


def maxpool_elem_backward(dy: np.ndarray, cache) -> list[np.ndarray]:
    d = maxpool_time_backward(dy, cache)
    return [d[:, k] for k in range(d.shape[1])]


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    from ..errors import DegenerateVector

    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise DegenerateVector("cosine of a zero-norm vector")
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))
