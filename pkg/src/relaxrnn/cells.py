"""LSTM cell math, the shiftLSTM block schedule, mixLSTM parameter mixing and
sinusoidal temporal encodings.

All step functions are batched over leading axes: ``h_prev`` may be a
vector of length ``hidden`` or an ``(N, hidden)`` matrix.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numpy as np

from .errors import ContractError
from .numerics import (
    LN_EPS,
    Rng,
    layer_norm,
    layer_norm_backward,
    orthogonal_init,
    softmax,
    uniform_init,
)

GATES = ("i", "c", "f", "o")


@dataclass
class CellParams:
    """Weights of one LSTM cell acting on the concatenation ``[h_prev, x]``.

    The output head (``W_y``, ``b_y``) is optional so that lower layers of a
    stacked LSTM can reuse the type; layer-norm gains/biases are present
    only for cells built with layer normalization.
    """

    W_i: np.ndarray
    W_c: np.ndarray
    W_f: np.ndarray
    W_o: np.ndarray
    b_i: np.ndarray
    b_c: np.ndarray
    b_f: np.ndarray
    b_o: np.ndarray
    W_y: np.ndarray | None = None
    b_y: np.ndarray | None = None
    ln_g_i: np.ndarray | None = None
    ln_g_c: np.ndarray | None = None
    ln_g_f: np.ndarray | None = None
    ln_g_o: np.ndarray | None = None
    ln_b_i: np.ndarray | None = None
    ln_b_c: np.ndarray | None = None
    ln_b_f: np.ndarray | None = None
    ln_b_o: np.ndarray | None = None

    @property
    def hidden_size(self) -> int:
        return self.W_i.shape[0]

    @property
    def input_size(self) -> int:
        return self.W_i.shape[1] - self.W_i.shape[0]

    @property
    def has_head(self) -> bool:
        return self.W_y is not None

    @property
    def has_layer_norm(self) -> bool:
        return self.ln_g_i is not None

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self) if getattr(self, f.name) is not None}

    @classmethod
    def from_dict(cls, tensors: dict) -> "CellParams":
        return cls(**tensors)

    def validate(self) -> None:
        H, width = self.W_i.shape
        if width <= H:
            raise ContractError(f"gate matrix {self.W_i.shape} leaves no input columns")
        for g in GATES:
            if getattr(self, f"W_{g}").shape != (H, width):
                raise ContractError(f"W_{g} has shape {getattr(self, f'W_{g}').shape}, expected {(H, width)}")
            if getattr(self, f"b_{g}").shape != (H,):
                raise ContractError(f"b_{g} must have length {H}")
        if self.has_head and (self.W_y.ndim != 2 or self.W_y.shape[1] != H or self.b_y.shape != (self.W_y.shape[0],)):
            raise ContractError("output head shapes inconsistent with hidden size")


def init_cell(
    input_size: int,
    hidden: int,
    out: int | None,
    rng: Rng,
    use_layer_norm: bool = False,
    orthogonal: bool = False,
) -> CellParams:
    """Uniform(+-1/sqrt(fan_in)) weights and biases.

    With ``orthogonal`` the recurrent block of every gate is replaced by an
    orthogonal matrix and gate biases start at zero.
    """
    fan_in = hidden + input_size
    t = {}
    for g in GATES:
        W = uniform_init((hidden, fan_in), fan_in, rng.child(f"W_{g}"))
        if orthogonal:
            W[:, :hidden] = orthogonal_init(hidden, hidden, rng.child(f"U_{g}"))
            t[f"b_{g}"] = np.zeros(hidden)
        else:
            t[f"b_{g}"] = uniform_init(hidden, fan_in, rng.child(f"b_{g}"))
        t[f"W_{g}"] = W
    if out is not None:
        t["W_y"] = uniform_init((out, hidden), hidden, rng.child("W_y"))
        t["b_y"] = uniform_init(out, hidden, rng.child("b_y"))
    if use_layer_norm:
        for g in GATES:
            t[f"ln_g_{g}"] = np.ones(hidden)
            t[f"ln_b_{g}"] = np.zeros(hidden)
    return CellParams(**t)


def cell_parameter_count(input_size: int, hidden: int, out: int | None, use_layer_norm: bool = False) -> int:
    n = 4 * (hidden * (hidden + input_size) + hidden)
    if out is not None:
        n += out * hidden + out
    if use_layer_norm:
        n += 8 * hidden
    return n


def pack_cell(params: CellParams) -> dict:
    """Stack the four gates into one ``(4H, H + d)`` matrix (order i, c, f, o).

    The packed form is what the recurrent engine runs on: one matmul and one
    tanh per step instead of four of each. Keys: ``W``, ``b``, optionally
    ``W_y``/``b_y`` and ``ln_g``/``ln_b`` of shape ``(4, H)``.
    """
    pk = {"W": np.concatenate([getattr(params, f"W_{g}") for g in GATES], axis=0),
          "b": np.concatenate([getattr(params, f"b_{g}") for g in GATES])}
    if params.has_head:
        pk["W_y"], pk["b_y"] = params.W_y, params.b_y
    if params.has_layer_norm:
        pk["ln_g"] = np.stack([getattr(params, f"ln_g_{g}") for g in GATES])
        pk["ln_b"] = np.stack([getattr(params, f"ln_b_{g}") for g in GATES])
    return pk


def unpack_cell(pk: dict) -> dict:
    """Inverse of :func:`pack_cell`, as a ``name -> array`` dict (works for gradients too)."""
    H = pk["W"].shape[0] // 4
    out = {}
    for j, g in enumerate(GATES):
        out[f"W_{g}"] = pk["W"][j * H:(j + 1) * H]
        out[f"b_{g}"] = pk["b"][j * H:(j + 1) * H]
    if "W_y" in pk:
        out["W_y"], out["b_y"] = pk["W_y"], pk["b_y"]
    if "ln_g" in pk:
        for j, g in enumerate(GATES):
            out[f"ln_g_{g}"], out[f"ln_b_{g}"] = pk["ln_g"][j], pk["ln_b"][j]
    return out


def _gate_scale(H: int) -> np.ndarray:
    # sigmoid(a) = (1 + tanh(a/2)) / 2, so one tanh serves all four gates
    s = np.full(4 * H, 0.5)
    s[H:2 * H] = 1.0
    return s


def packed_step(pk: dict, h_prev, C_prev, x_t, use_layer_norm: bool = False, return_cache: bool = False):
    """:func:`lstm_step` on packed weights; inputs are ``(N, .)`` matrices."""
    H = pk["W"].shape[0] // 4
    z = np.concatenate([h_prev, x_t], axis=-1)
    a = z @ pk["W"].T + pk["b"]
    ln_cache = None
    if use_layer_norm:
        a3, ln_cache = layer_norm(a.reshape(-1, 4, H), pk["ln_g"], pk["ln_b"], LN_EPS, True)
        a = a3.reshape(a.shape)
    u = np.tanh(a * _gate_scale(H))
    gates = 0.5 * (1.0 + u)
    gates[:, H:2 * H] = u[:, H:2 * H]
    i, ct, f, o = gates[:, :H], gates[:, H:2 * H], gates[:, 2 * H:3 * H], gates[:, 3 * H:]
    C = i * ct + f * C_prev
    tanh_C = np.tanh(C)
    h = o * tanh_C
    if return_cache:
        return h, C, (z, gates, C_prev, tanh_C, ln_cache)
    return h, C


def packed_step_backward(pk: dict, cache: tuple, dh, dC):
    """Backprop through :func:`packed_step`; returns ``(grads, dh_prev, dC_prev, dx)``
    with ``grads`` keyed like the packed cell (no head)."""
    z, gates, C_prev, tanh_C, ln_cache = cache
    H = gates.shape[1] // 4
    i, ct, f, o = gates[:, :H], gates[:, H:2 * H], gates[:, 2 * H:3 * H], gates[:, 3 * H:]
    dC = dC + dh * o * (1.0 - tanh_C**2)
    da = np.empty_like(gates)
    da[:, :H] = dC * ct * i * (1.0 - i)
    da[:, H:2 * H] = dC * i * (1.0 - ct**2)
    da[:, 2 * H:3 * H] = dC * C_prev * f * (1.0 - f)
    da[:, 3 * H:] = dh * tanh_C * o * (1.0 - o)
    grads = {}
    if ln_cache is not None:
        d3 = da.reshape(-1, 4, H)
        xhat = ln_cache[0]
        grads["ln_g"] = (d3 * xhat).sum(axis=0)
        grads["ln_b"] = d3.sum(axis=0)
        da = layer_norm_backward(d3, pk["ln_g"], ln_cache)[0].reshape(da.shape)
    grads["W"] = da.T @ z
    grads["b"] = da.sum(axis=0)
    dz = da @ pk["W"]
    return grads, dz[:, :H], dC * f, dz[:, H:]


def lstm_step(params: CellParams, h_prev, C_prev, x_t, use_layer_norm: bool = False, return_cache: bool = False):
    """One LSTM transition; returns ``(h, C)`` (plus a cache for backprop).

    With ``use_layer_norm`` each gate pre-activation is layer-normalized
    with the cell's per-gate gain and bias before its nonlinearity.
    """
    h_prev = np.asarray(h_prev, dtype=np.float64)
    C_prev = np.asarray(C_prev, dtype=np.float64)
    x_t = np.asarray(x_t, dtype=np.float64)
    H = params.hidden_size
    if h_prev.shape[-1] != H or C_prev.shape[-1] != H or x_t.shape[-1] != params.input_size:
        raise ContractError(
            f"lstm_step: got h {h_prev.shape}, C {C_prev.shape}, x {x_t.shape} "
            f"for a cell with hidden={H}, input={params.input_size}"
        )
    if use_layer_norm and not params.has_layer_norm:
        raise ContractError("layer norm requested but the cell has no layer-norm parameters")
    single = h_prev.ndim == 1
    h2, C2, x2 = (np.atleast_2d(a) for a in (h_prev, C_prev, x_t))
    h, C, cache = packed_step(pack_cell(params), h2, C2, x2, use_layer_norm, return_cache=True)
    if single:
        h, C = h[0], C[0]
    return (h, C, cache) if return_cache else (h, C)


def lstm_step_backward(params: CellParams, cache: tuple, dh, dC):
    """Backprop through one :func:`lstm_step`.

    Returns ``(grads, dh_prev, dC_prev, dx)`` where ``grads`` holds gate
    weights, biases and (if used) layer-norm parameters, summed over the batch.
    """
    grads, dh_prev, dC_prev, dx = packed_step_backward(pack_cell(params), cache, np.atleast_2d(dh), np.atleast_2d(dC))
    return unpack_cell(grads), dh_prev, dC_prev, dx


def output_head(params: CellParams, h, task: str = "regression"):
    """Affine read-out; regression returns the scalar output, classification
    a two-way probability vector."""
    if not params.has_head:
        raise ContractError("cell has no output head")
    h = np.asarray(h, dtype=np.float64)
    if h.shape[-1] != params.hidden_size:
        raise ContractError(f"hidden vector of length {h.shape[-1]}, expected {params.hidden_size}")
    out = h @ params.W_y.T + params.b_y
    if task == "regression":
        return out[..., 0]
    if task == "classification":
        return softmax(out, axis=-1)
    raise ContractError(f"unknown task {task!r}")


@dataclass
class ShiftSchedule:
    T: int
    K: int
    block: int
    assignment: list = field(default_factory=list)


def shift_schedule(T: int, K: int) -> ShiftSchedule:
    """Cell index per time step: a new cell every ceil(T/K) steps."""
    if not 1 <= K <= T:
        raise ContractError(f"shift schedule needs 1 <= K <= T, got K={K}, T={T}")
    block = math.ceil(T / K)
    return ShiftSchedule(T, K, block, [min((t - 1) // block, K - 1) for t in range(1, T + 1)])


@dataclass
class MixBank:
    """K expert cells plus a T x K table of mixing logits."""

    cells: list
    logits: np.ndarray

    @property
    def K(self) -> int:
        return len(self.cells)

    @property
    def T(self) -> int:
        return self.logits.shape[0]

    def __post_init__(self):
        if len(self.cells) < 1:
            raise ContractError("a mix bank needs at least one cell")
        if self.logits.ndim != 2 or self.logits.shape[1] != len(self.cells):
            raise ContractError(f"logits shape {self.logits.shape} does not match K={len(self.cells)}")


def mixing_coefficients(bank: MixBank) -> np.ndarray:
    return softmax(bank.logits, axis=1)


def mix_cells(cells: list, lam) -> CellParams:
    """Convex combination of cell parameters with weights ``lam``."""
    dicts = [c.as_dict() for c in cells]
    mixed = {}
    for name in dicts[0]:
        acc = lam[0] * dicts[0][name]
        for k in range(1, len(dicts)):
            acc = acc + lam[k] * dicts[k][name]
        mixed[name] = acc
    return CellParams(**mixed)


def mix_params(bank: MixBank, t: int, lam: np.ndarray | None = None) -> CellParams:
    """Parameters of the mixture at 1-indexed step ``t``.

    ``lam`` may carry precomputed mixing coefficients for the whole bank.
    """
    if not 1 <= t <= bank.T:
        raise ContractError(f"time step {t} outside 1..{bank.T}")
    if lam is None:
        lam = mixing_coefficients(bank)
    return mix_cells(bank.cells, lam[t - 1])


def temporal_encoding(t, dim: int = 24) -> np.ndarray:
    """Sinusoidal encoding of 1-indexed step ``t``; sin on even positions,
    cos on odd ones, sharing a frequency within each pair."""
    if dim % 2:
        raise ContractError(f"encoding dimension must be even, got {dim}")
    i = np.arange(dim)
    expo = np.where(i % 2 == 0, i, i - 1) / dim
    angle = np.asarray(t, dtype=np.float64)[..., None] / np.power(10000.0, expo)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
