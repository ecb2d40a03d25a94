"""Sequence predictors: NN, NN+t, LSTM, LSTM+t, LSTM+TE, shiftLSTM-K and
mixLSTM-K.

Every model maps an input batch ``X`` of shape ``(N, T, d)`` to one output
per step. Parameters live in a flat ``name -> array`` dict on
:class:`ModelState`; cells are addressed by prefix (``layer0.``, ``cell3.``)
and the mixLSTM coefficient table is stored as ``logits``.

Backpropagation is hand-written. The recurrent engine runs a list of
per-step packed cells (see :func:`~relaxrnn.cells.pack_cell`) and hands each step's
gradient to a kind-specific accumulator, which is where shared, scheduled
and mixed parameter sharing differ.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .cells import (
    CellParams,
    MixBank,
    cell_parameter_count,
    init_cell,
    pack_cell,
    packed_step,
    packed_step_backward,
    shift_schedule,
    temporal_encoding,
    unpack_cell,
)
from .errors import ContractError, DataFormatError, NumericError
from .numerics import Rng, softmax, softmax_backward, uniform_init

KINDS = ("nn", "nn_t", "lstm", "lstm_t", "lstm_te", "shift_lstm", "mix_lstm")
TASKS = ("regression", "classification")
MODEL_FORMAT_VERSION = 1


@dataclass
class ModelSpec:
    kind: str
    input_dim: int
    hidden: int
    T: int
    K: int | None = None
    num_layers: int = 1
    te_dim: int = 24
    use_layer_norm: bool = False
    task: str = "regression"
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ContractError(f"unknown model kind {self.kind!r}; expected one of {', '.join(KINDS)}")
        if self.task not in TASKS:
            raise ContractError(f"unknown task {self.task!r}")
        if min(self.input_dim, self.hidden, self.T) < 1:
            raise ContractError("input_dim, hidden and T must be positive")
        needs_k = self.kind in ("shift_lstm", "mix_lstm")
        if needs_k != (self.K is not None):
            raise ContractError(f"K must be given exactly for shift_lstm/mix_lstm (kind={self.kind}, K={self.K})")
        if self.kind == "shift_lstm" and not 1 <= self.K <= self.T:
            raise ContractError(f"shift_lstm needs 1 <= K <= T, got K={self.K}, T={self.T}")
        if self.kind == "mix_lstm" and self.K < 1:
            raise ContractError("mix_lstm needs K >= 1")
        if self.te_dim < 2 or self.te_dim % 2:
            raise ContractError("te_dim must be a positive even number")
        if self.num_layers not in (1, 2):
            raise ContractError("num_layers must be 1 or 2")
        if self.num_layers == 2 and self.kind != "lstm":
            raise ContractError("only kind='lstm' supports a second layer")

    @property
    def out_dim(self) -> int:
        return 1 if self.task == "regression" else 2

    @property
    def extra_dim(self) -> int:
        if self.kind in ("nn_t", "lstm_t"):
            return 1
        if self.kind == "lstm_te":
            return self.te_dim
        return 0

    @property
    def is_recurrent(self) -> bool:
        return self.kind not in ("nn", "nn_t")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(**d)


@dataclass
class ModelState:
    spec: ModelSpec
    params: dict
    meta: dict = field(default_factory=dict)

    def copy(self) -> "ModelState":
        return ModelState(self.spec, {k: v.copy() for k, v in self.params.items()}, json.loads(json.dumps(self.meta)))


def _cell_prefixes(spec: ModelSpec) -> list:
    if spec.kind in ("shift_lstm", "mix_lstm"):
        return [f"cell{k}." for k in range(spec.K)]
    if spec.is_recurrent:
        return [f"layer{j}." for j in range(spec.num_layers)]
    return []


def init_model(spec: ModelSpec, rng: Rng | None = None) -> ModelState:
    """Fresh parameters for ``spec``; seeded from ``spec.seed`` unless ``rng`` is given."""
    rng = (rng or Rng(spec.seed)).child("init")
    d_in = spec.input_dim + spec.extra_dim
    params = {}
    if not spec.is_recurrent:
        params["W1"] = uniform_init((spec.hidden, d_in), d_in, rng.child("W1"))
        params["b1"] = uniform_init(spec.hidden, d_in, rng.child("b1"))
        params["W2"] = uniform_init((spec.out_dim, spec.hidden), spec.hidden, rng.child("W2"))
        params["b2"] = uniform_init(spec.out_dim, spec.hidden, rng.child("b2"))
    else:
        ortho = spec.use_layer_norm
        if spec.kind in ("shift_lstm", "mix_lstm"):
            for k in range(spec.K):
                cell = init_cell(d_in, spec.hidden, spec.out_dim, rng.child(f"cell{k}"), spec.use_layer_norm, ortho)
                params.update({f"cell{k}.{n}": v for n, v in cell.as_dict().items()})
            if spec.kind == "mix_lstm":
                params["logits"] = rng.child("logits").uniform(-0.1, 0.1, size=(spec.T, spec.K))
        else:
            for j in range(spec.num_layers):
                top = j == spec.num_layers - 1
                cell = init_cell(d_in if j == 0 else spec.hidden, spec.hidden, spec.out_dim if top else None,
                                 rng.child(f"layer{j}"), spec.use_layer_norm, ortho)
                params.update({f"layer{j}.{n}": v for n, v in cell.as_dict().items()})
    return ModelState(spec, params, {"init_seed": spec.seed})


def parameter_count(spec: ModelSpec) -> int:
    d_in = spec.input_dim + spec.extra_dim
    if not spec.is_recurrent:
        return spec.hidden * (d_in + 1) + spec.out_dim * (spec.hidden + 1)
    if spec.kind in ("shift_lstm", "mix_lstm"):
        n = spec.K * cell_parameter_count(d_in, spec.hidden, spec.out_dim, spec.use_layer_norm)
        return n + (spec.T * spec.K if spec.kind == "mix_lstm" else 0)
    n = 0
    for j in range(spec.num_layers):
        top = j == spec.num_layers - 1
        n += cell_parameter_count(d_in if j == 0 else spec.hidden, spec.hidden,
                                  spec.out_dim if top else None, spec.use_layer_norm)
    return n


def time_features(spec: ModelSpec) -> np.ndarray | None:
    """Per-step features appended to the input, shape ``(T, extra_dim)``."""
    steps = np.arange(1, spec.T + 1, dtype=np.float64)
    if spec.kind in ("nn_t", "lstm_t"):
        return (steps / spec.T)[:, None]
    if spec.kind == "lstm_te":
        return temporal_encoding(steps, spec.te_dim)
    return None


def augment_inputs(spec: ModelSpec, X: np.ndarray) -> np.ndarray:
    extra = time_features(spec)
    if extra is None:
        return X
    return np.concatenate([X, np.broadcast_to(extra, X.shape[:-1] + extra.shape[-1:])], axis=-1)


def _cell_at(params: dict, prefix: str) -> CellParams:
    n = len(prefix)
    return CellParams.from_dict({k[n:]: v for k, v in params.items() if k.startswith(prefix)})


def mixing_table(state: ModelState) -> np.ndarray:
    """Mixing coefficients (T x K) of a mixLSTM model."""
    if state.spec.kind != "mix_lstm":
        raise ContractError("mixing coefficients exist only for mix_lstm models")
    return softmax(state.params["logits"], axis=1)


def mix_bank(state: ModelState) -> MixBank:
    return MixBank([_cell_at(state.params, f"cell{k}.") for k in range(state.spec.K)], state.params["logits"])


class _StepParams:
    """Per-step packed cell parameters plus gradient routing for one recurrent model."""

    def __init__(self, state: ModelState):
        spec = self.spec = state.spec
        self.params = state.params
        self.prefixes = _cell_prefixes(spec)
        self.cells = [pack_cell(_cell_at(state.params, p)) for p in self.prefixes]
        if spec.kind == "shift_lstm":
            self.assign = shift_schedule(spec.T, spec.K).assignment
        if spec.kind == "mix_lstm":
            self.lam = softmax(state.params["logits"], axis=1)
            self.mixed = {}

    def layers_at(self, t: int) -> list:
        """Packed cells (bottom to top) used at 0-indexed step ``t``."""
        kind = self.spec.kind
        if kind == "shift_lstm":
            return [self.cells[self.assign[t]]]
        if kind == "mix_lstm":
            if t not in self.mixed:
                lam_t = self.lam[t]
                self.mixed[t] = {name: sum(lam_t[k] * c[name] for k, c in enumerate(self.cells))
                                 for name in self.cells[0]}
            return [self.mixed[t]]
        return self.cells

    def zero_grads(self) -> list:
        if self.spec.kind == "mix_lstm":
            self.dlam = np.zeros_like(self.lam)
        return [{k: np.zeros_like(v) for k, v in c.items()} for c in self.cells]

    def accumulate(self, G: list, t: int, layer: int, grads: dict) -> None:
        kind = self.spec.kind
        if kind == "mix_lstm":
            lam_t = self.lam[t]
            for k, cell in enumerate(self.cells):
                dl = 0.0
                for name, g in grads.items():
                    G[k][name] += lam_t[k] * g
                    dl += np.vdot(g, cell[name])
                self.dlam[t, k] += dl
            return
        target = G[self.assign[t]] if kind == "shift_lstm" else G[layer]
        for name, g in grads.items():
            target[name] += g

    def finish(self, G: list) -> dict:
        out = {}
        for prefix, g in zip(self.prefixes, G):
            out.update({prefix + n: v for n, v in unpack_cell(g).items()})
        if self.spec.kind == "mix_lstm":
            out["logits"] = softmax_backward(self.lam, self.dlam, axis=1)
        return out


def _check_input(spec: ModelSpec, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 3 or X.shape[1:] != (spec.T, spec.input_dim):
        raise ContractError(f"input of shape {X.shape} does not match (N, T={spec.T}, d={spec.input_dim})")
    return X


def forward_raw(state: ModelState, X: np.ndarray, keep_cache: bool = False):
    """Head outputs of shape ``(N, T, out_dim)`` before the softmax.

    With ``keep_cache`` also returns what :func:`backward` needs.
    """
    spec = state.spec
    X = _check_input(spec, X)
    Xa = augment_inputs(spec, X)
    N = X.shape[0]
    p = state.params
    if not spec.is_recurrent:
        pre = Xa @ p["W1"].T + p["b1"]
        hid = np.maximum(pre, 0.0)
        out = hid @ p["W2"].T + p["b2"]
        cache = dict(Xa=Xa, pre=pre, hid=hid) if keep_cache else None
    else:
        steps = _StepParams(state)
        L = spec.num_layers
        h = [np.zeros((N, spec.hidden)) for _ in range(L)]
        C = [np.zeros((N, spec.hidden)) for _ in range(L)]
        out = np.empty((N, spec.T, spec.out_dim))
        caches, tops = [], []
        for t in range(spec.T):
            layers = steps.layers_at(t)
            inp = Xa[:, t]
            step_cache = []
            for j, cell in enumerate(layers):
                if keep_cache:
                    h[j], C[j], c = packed_step(cell, h[j], C[j], inp, spec.use_layer_norm, return_cache=True)
                    step_cache.append(c)
                else:
                    h[j], C[j] = packed_step(cell, h[j], C[j], inp, spec.use_layer_norm)
                inp = h[j]
            top = layers[-1]
            out[:, t] = h[-1] @ top["W_y"].T + top["b_y"]
            if keep_cache:
                caches.append(step_cache)
                tops.append(h[-1])
        cache = dict(steps=steps, caches=caches, tops=tops, N=N) if keep_cache else None
    if not np.all(np.isfinite(out)):
        raise NumericError("non-finite model output")
    return (out, cache) if keep_cache else out


def backward(state: ModelState, cache: dict, d_out: np.ndarray):
    """Gradients of a scalar loss given ``d_out = dLoss/d(head outputs)``.

    Returns ``(grads, dX)`` with ``dX`` restricted to the original (not
    time-augmented) input columns.
    """
    spec = state.spec
    d_in = spec.input_dim
    p = state.params
    if not spec.is_recurrent:
        Xa, pre, hid = cache["Xa"], cache["pre"], cache["hid"]
        flat = lambda a: a.reshape(-1, a.shape[-1])  # noqa: E731
        G = {"W2": flat(d_out).T @ flat(hid), "b2": flat(d_out).sum(axis=0)}
        dpre = (d_out @ p["W2"]) * (pre > 0)
        G["W1"] = flat(dpre).T @ flat(Xa)
        G["b1"] = flat(dpre).sum(axis=0)
        dX = dpre @ p["W1"][:, :d_in]
        return G, dX
    steps = cache["steps"]
    G = steps.zero_grads()
    N, H, L = cache["N"], spec.hidden, spec.num_layers
    dh_next = [np.zeros((N, H)) for _ in range(L)]
    dC_next = [np.zeros((N, H)) for _ in range(L)]
    dX = np.zeros((N, spec.T, d_in))
    for t in range(spec.T - 1, -1, -1):
        layers = steps.layers_at(t)
        dy = d_out[:, t]
        top = layers[-1]
        dh = dh_next[-1] + dy @ top["W_y"]
        head = {"W_y": dy.T @ cache["tops"][t], "b_y": dy.sum(axis=0)}
        for j in range(L - 1, -1, -1):
            grads, dh_prev, dC_prev, dx = packed_step_backward(layers[j], cache["caches"][t][j], dh, dC_next[j])
            if j == L - 1:
                grads.update(head)
            steps.accumulate(G, t, j, grads)
            dh_next[j], dC_next[j] = dh_prev, dC_prev
            if j > 0:
                dh = dh_next[j - 1] + dx
            else:
                dX[:, t] = dx[:, :d_in]
    return steps.finish(G), dX


def forward(state: ModelState, X) -> np.ndarray:
    """Per-step predictions: ``(N, T)`` values for regression, ``(N, T, 2)``
    class probabilities for classification. A single ``(T, d)`` sequence
    gives ``(T,)`` / ``(T, 2)``."""
    X = np.asarray(X, dtype=np.float64)
    single = X.ndim == 2
    out = forward_raw(state, X[None] if single else X)
    out = out[..., 0] if state.spec.task == "regression" else softmax(out, axis=-1)
    return out[0] if single else out


# -- model files -------------------------------------------------------------


def model_to_dict(state: ModelState) -> dict:
    return {
        "format": "relaxrnn-model",
        "format_version": MODEL_FORMAT_VERSION,
        "spec": state.spec.to_dict(),
        "meta": state.meta,
        "params": {
            k: {"shape": list(v.shape), "values": v.ravel().tolist()} for k, v in sorted(state.params.items())
        },
    }


def model_from_dict(doc: dict) -> ModelState:
    if doc.get("format") != "relaxrnn-model":
        raise DataFormatError("not a model file")
    if doc.get("format_version") != MODEL_FORMAT_VERSION:
        raise DataFormatError(f"unsupported model format version {doc.get('format_version')}")
    spec = ModelSpec.from_dict(doc["spec"])
    params = {k: np.asarray(v["values"], dtype=np.float64).reshape(v["shape"]) for k, v in doc["params"].items()}
    expected = init_model(spec).params
    if set(expected) != set(params) or any(expected[k].shape != params[k].shape for k in expected):
        raise DataFormatError("model parameters do not match the declared spec")
    return ModelState(spec, params, doc.get("meta", {}))


def save_model(state: ModelState, path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(state), indent=1) + "\n", encoding="utf-8")


def load_model(path) -> ModelState:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise DataFormatError(f"{path}: invalid JSON ({e})") from e
    return model_from_dict(doc)
