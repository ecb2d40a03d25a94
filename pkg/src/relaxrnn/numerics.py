"""Numerical building blocks: seeded random streams, initializers, layer
normalization, softmax, Adam and a central-difference gradient checker.

Tensors are plain float64 ``numpy`` arrays. Gradients travel in dicts keyed
by the same parameter names as the arrays they belong to.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, NumericError

LN_EPS = 1e-5


class Rng:
    """Seeded PCG64 stream with named child streams.

    A child stream is keyed by the parent seed plus the path of names used
    to reach it, hashed with SHA-256, so ``Rng(7).child("init")`` yields the
    same numbers on every platform and in every process.

    Sampling methods of :class:`numpy.random.Generator` are available
    directly on the instance.
    """

    def __init__(self, seed: int, _path: tuple = ()):
        self.seed = int(seed) % 2**64
        self.path = tuple(_path)
        seq = np.random.SeedSequence(entropy=self.seed, spawn_key=self.path)
        self.gen = np.random.Generator(np.random.PCG64(seq))

    def child(self, name) -> "Rng":
        digest = hashlib.sha256(str(name).encode("utf-8")).digest()
        return Rng(self.seed, self.path + (int.from_bytes(digest[:4], "little"),))

    def child_seed(self, name) -> int:
        """A 63-bit integer seed derived from the named child stream."""
        return int(self.child(name).gen.integers(0, 2**63 - 1))

    def __getattr__(self, name):
        return getattr(self.gen, name)

    def __repr__(self):
        return f"Rng(seed={self.seed}, path={self.path})"


def orthogonal_init(rows: int, cols: int, rng: Rng) -> np.ndarray:
    """Random matrix with orthonormal rows (wide) or columns (tall).

    QR of a standard-normal sample, with columns of Q flipped so that R has
    a nonnegative diagonal; this makes the factorization unique.
    """
    if rows < 1 or cols < 1:
        raise ContractError(f"orthogonal_init needs positive dims, got {rows}x{cols}")
    n, m = max(rows, cols), min(rows, cols)
    a = rng.standard_normal((n, m))
    q, r = np.linalg.qr(a)
    q = q * np.where(np.diag(r) < 0, -1.0, 1.0)
    return q if rows >= cols else q.T.copy()


def uniform_init(shape, fan_in: int, rng: Rng) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def softmax(logits, axis: int = -1) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def softmax_backward(probs: np.ndarray, dprobs: np.ndarray, axis: int = -1) -> np.ndarray:
    """Vector-Jacobian product of softmax along ``axis``."""
    return probs * (dprobs - np.sum(probs * dprobs, axis=axis, keepdims=True))


def layer_norm(v, gain, bias, eps: float = LN_EPS, return_cache: bool = False):
    """Normalize over the last axis with population variance, then scale and shift."""
    v = np.asarray(v, dtype=np.float64)
    mu = v.mean(axis=-1, keepdims=True)
    centered = v - mu
    inv_std = 1.0 / np.sqrt((centered**2).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std
    out = gain * xhat + bias
    if return_cache:
        return out, (xhat, inv_std)
    return out


def layer_norm_backward(dout, gain, cache):
    """Returns (dv, dgain, dbias); gain/bias grads summed over leading axes."""
    xhat, inv_std = cache
    dxhat = dout * gain
    dv = inv_std * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    lead = tuple(range(dout.ndim - 1))
    return dv, (dout * xhat).sum(axis=lead), dout.sum(axis=lead)


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, params: dict, grads: dict) -> dict:
    """Bias-corrected Adam update, applied to ``params`` in place.

    A tensor whose gradient is exactly zero everywhere is treated like a
    parameter that received no gradient: it is not moved and its moment
    buffers are left untouched. The step counter always advances.
    """
    for name, g in grads.items():
        if name not in params:
            raise ContractError(f"gradient for unknown parameter {name!r}")
        if np.shape(g) != np.shape(params[name]):
            raise ContractError(
                f"gradient shape {np.shape(g)} does not match parameter "
                f"{name!r} of shape {np.shape(params[name])}"
            )
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, g in grads.items():
        if not np.any(g):
            continue
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(params[name])
            state.v[name] = np.zeros_like(params[name])
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        params[name] -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


@dataclass
class GradCheckResult:
    max_rel_error: float
    n_checked: int
    worst: tuple | None = None
    kinks: list = field(default_factory=list)

    def __float__(self):
        return self.max_rel_error


def _rel_error(a, n):
    return abs(a - n) / max(1e-8, abs(a) + abs(n))


def grad_check(
    loss_fn,
    params: dict,
    h: float = 1e-5,
    max_coords: int | None = None,
    rng: Rng | None = None,
    kink_tol: float = 1e-4,
) -> GradCheckResult:
    """Compare analytic gradients to central differences coordinate-wise.

    ``loss_fn(params)`` must return ``(loss, grads)`` with ``grads`` keyed
    like ``params``. Up to ``max_coords`` coordinates per tensor are probed
    (all of them when None). Coordinates whose error exceeds ``kink_tol``
    get a second look: if the gap between one-sided differences does not
    shrink with the step size the point sits on a kink, and the coordinate
    is reported in ``kinks`` instead of counting toward the maximum.
    """
    if h <= 0:
        raise ContractError("step size h must be positive")
    base, grads = loss_fn(params)
    if not np.isfinite(base):
        raise NumericError("non-finite loss at the base point")

    def probe(arr, idx, delta):
        old = arr[idx]
        arr[idx] = old + delta
        try:
            val, _ = loss_fn(params)
        finally:
            arr[idx] = old
        if not np.isfinite(val):
            raise NumericError(f"non-finite loss probing coordinate {idx} at offset {delta}")
        return val

    worst_err, worst, checked, kinks = 0.0, None, 0, []
    for name in sorted(params):
        arr = params[name]
        flat_idx = np.arange(arr.size)
        if max_coords is not None and arr.size > max_coords:
            flat_idx = (rng or Rng(0)).choice(arr.size, size=max_coords, replace=False)
        for fi in flat_idx:
            idx = np.unravel_index(int(fi), arr.shape)
            fp, fm = probe(arr, idx, h), probe(arr, idx, -h)
            numeric = (fp - fm) / (2 * h)
            analytic = float(np.asarray(grads[name])[idx])
            err = _rel_error(analytic, numeric)
            checked += 1
            # one-sided slopes differ by (f(+h) + f(-h) - 2 f) / h: about h f'' when
            # smooth, but a jump in slope that does not shrink with h at a kink
            gap = (fp + fm - 2 * base) / h
            if err > kink_tol or abs(gap) > 1e-3 * (1 + abs(base)):
                h2 = h / 10
                gap2 = (probe(arr, idx, h2) + probe(arr, idx, -h2) - 2 * base) / h2
                if abs(gap) > 1e-6 * (1 + abs(base)) and abs(gap2) > 0.5 * abs(gap):
                    kinks.append((name, tuple(int(i) for i in idx)))
                    continue
            if err >= worst_err:
                worst_err, worst = err, (name, tuple(int(i) for i in idx), analytic, numeric)
    return GradCheckResult(worst_err, checked, worst, kinks)
