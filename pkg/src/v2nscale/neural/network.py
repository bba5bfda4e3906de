"""Small forecasting networks (LSTM, GRU, TCN, TCN+LSTM) trained by plain minibatch gradient descent."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable, Literal, Sequence

import numpy as np

from ..features import N_FEATURES, FeatureMatrix, FeatureScaler
from .layers import GRU, LSTM, Conv1D, Dense, Flatten, LastStep, Layer

ModelKind = Literal["lstm", "gru", "tcn", "tcnlstm"]

_DEFAULT_LAYERS = {"tcn": 2, "lstm": 2, "gru": 1, "tcnlstm": 4}
_DEFAULT_HISTORY = {"tcn": 12, "lstm": 12, "gru": 24, "tcnlstm": 12}
_DEFAULT_INPUTS = {"tcn": "all", "lstm": "all", "gru": "flow", "tcnlstm": "all"}


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class NetConfig:
    model: ModelKind = "lstm"
    hidden_layers: int | None = None
    neurons: int = 100
    epochs: int = 100
    batch_size: int = 5
    history: int | None = None
    learning_rate: float = 1e-3
    seed: int = 0
    inputs: Literal["all", "flow"] | None = None
    lookaheads: tuple[int, ...] = (1,)
    online_window: int = 288
    init_scale: float = 0.05

    def __post_init__(self):
        if self.model not in _DEFAULT_LAYERS:
            raise ValueError(f"unknown model {self.model!r}")
        for name, table in (("hidden_layers", _DEFAULT_LAYERS), ("history", _DEFAULT_HISTORY), ("inputs", _DEFAULT_INPUTS)):
            if getattr(self, name) is None:
                object.__setattr__(self, name, table[self.model])
        object.__setattr__(self, "lookaheads", tuple(int(k) for k in self.lookaheads))
        if self.inputs not in ("all", "flow"):
            raise ValueError(f"inputs must be 'all' or 'flow', got {self.inputs!r}")
        if min(self.neurons, self.batch_size, self.history, self.hidden_layers) < 1 or self.epochs < 0:
            raise ValueError("neurons, batch_size, history and hidden_layers must be >= 1; epochs >= 0")
        if not self.lookaheads or min(self.lookaheads) < 1:
            raise ValueError("lookaheads must be a non-empty list of k >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.model in ("tcn", "tcnlstm"):
            tcn_kernel(self.history)
        if self.model == "tcnlstm" and self.hidden_layers < 4:
            raise ValueError("tcnlstm needs >= 4 hidden layers (conv, dense, lstm..., dense)")


def tcn_kernel(h: int) -> int:
    """Temporal kernel length: a quarter of the history window."""
    if h < 4 or h % 4:
        raise ValueError(f"TCN history must be a multiple of 4 and >= 4, got {h}")
    return h // 4


def build_layers(cfg: NetConfig, input_dim: int, n_out: int) -> list[Layer]:
    n, L, h = cfg.neurons, cfg.hidden_layers, cfg.history
    if cfg.model == "lstm":
        return [LSTM(input_dim if i == 0 else n, n) for i in range(L)] + [LastStep(), Dense(n, n_out)]
    if cfg.model == "gru":
        return [GRU(input_dim if i == 0 else n, n) for i in range(L)] + [LastStep(), Dense(n, n_out)]
    K = tcn_kernel(h)
    if cfg.model == "tcn":
        layers: list[Layer] = [Conv1D(input_dim, n, K), Flatten(), Dense((h - K + 1) * n, n, relu=True)]
        layers += [Dense(n, n, relu=True) for _ in range(L - 2)]
        return layers + [Dense(n, n_out)]
    # tcnlstm: conv -> per-step dense -> lstm(s) -> dense
    layers = [Conv1D(input_dim, n, K), Dense(n, n, relu=True)]
    layers += [LSTM(n, n) for _ in range(L - 3)]
    return layers + [LastStep(), Dense(n, n, relu=True), Dense(n, n_out)]


class Network:
    """A layer stack plus its parameters, keyed ``"<layer index>.<name>"``."""

    def __init__(self, layers: Sequence[Layer], params: dict[str, np.ndarray]):
        self.layers = list(layers)
        self.params = params

    @classmethod
    def create(cls, layers: Sequence[Layer], rng: np.random.Generator, scale: float) -> "Network":
        params = {}
        for i, layer in enumerate(layers):
            for k, v in layer.init(rng, scale).items():
                params[f"{i}.{k}"] = v
        return cls(layers, params)

    def _p(self, i: int) -> dict[str, np.ndarray]:
        prefix = f"{i}."
        return {k[len(prefix):]: v for k, v in self.params.items() if k.startswith(prefix)}

    def forward(self, x: np.ndarray):
        caches = []
        for i, layer in enumerate(self.layers):
            x, cache = layer.forward(x, self._p(i))
            caches.append(cache)
        return x, caches

    def backward(self, dy: np.ndarray, caches) -> tuple[np.ndarray, dict[str, np.ndarray]]:
        grads = {}
        for i in reversed(range(len(self.layers))):
            dy, g = self.layers[i].backward(dy, caches[i], self._p(i))
            for k, v in g.items():
                grads[f"{i}.{k}"] = v
        return dy, grads


@dataclass
class NetParams:
    """Trained weights plus everything needed to map windows in and flows out."""

    config: NetConfig
    weights: dict[str, np.ndarray]
    input_dim: int
    x_scaler: FeatureScaler
    y_lo: float
    y_hi: float
    target_index: int = 0
    loss_history: list[float] = field(default_factory=list)

    @property
    def heads(self) -> tuple[int, ...]:
        return self.config.lookaheads

    def network(self) -> Network:
        layers = build_layers(self.config, self.input_dim, len(self.heads))
        return Network(layers, self.weights)

    def copy(self) -> "NetParams":
        return replace(self, weights={k: v.copy() for k, v in self.weights.items()},
                       loss_history=list(self.loss_history))


def _select_inputs(seq: np.ndarray, inputs: str, target_index: int) -> np.ndarray:
    """(N, h, P*9) -> model input; flow-only keeps the target's flow column."""
    if inputs == "flow":
        col = target_index * N_FEATURES
        return seq[..., col:col + 1]
    return seq


def windows_to_array(windows: Iterable[FeatureMatrix]) -> np.ndarray:
    return np.stack([w.sequence() for w in windows])


def prepare_inputs(raw_seq: np.ndarray, scaler: FeatureScaler, inputs: str, target_index: int) -> np.ndarray:
    """Scale (N, h, P*9) raw windows feature-wise and pick the model inputs."""
    N, h, F = raw_seq.shape
    z, _ = scaler.transform(raw_seq.reshape(N, h, F // N_FEATURES, N_FEATURES))
    return _select_inputs(z.reshape(N, h, F), inputs, target_index)


def _mse_grad(pred: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    diff = pred - y
    with np.errstate(over="ignore", invalid="ignore"):  # divergence is reported by the caller
        return float(np.mean(diff * diff)), 2.0 * diff / diff.size


def _sgd_pass(net: Network, X: np.ndarray, Y: np.ndarray, order: np.ndarray, batch: int, lr: float) -> float:
    total = 0.0
    for s in range(0, len(order), batch):
        idx = order[s:s + batch]
        pred, caches = net.forward(X[idx])
        loss, dpred = _mse_grad(pred, Y[idx])
        if not math.isfinite(loss):
            raise TrainingError(f"loss became {loss}; lower learning_rate (currently {lr})")
        _, grads = net.backward(dpred, caches)
        for k, g in grads.items():
            net.params[k] -= lr * g
        total += loss * len(idx)
    return total / len(order)


def _dataset_arrays(dataset) -> tuple[np.ndarray, np.ndarray, tuple[str, ...], str]:
    items = list(dataset)
    if not items:
        raise ValueError("training dataset is empty")
    windows = [w for w, _ in items]
    members = windows[0].members
    if any(w.members != members or w.h != windows[0].h for w in windows):
        raise ValueError("all windows must share members and history length")
    Y = np.array([np.atleast_1d(np.asarray(t, dtype=np.float64)) for _, t in items])
    return windows_to_array(windows), Y, members, windows[0].target_probe


def train_arrays(
    cfg: NetConfig,
    raw_X: np.ndarray,
    Y: np.ndarray,
    target_index: int = 0,
    mode: Literal["offline", "online"] = "offline",
    init: NetParams | None = None,
) -> NetParams:
    """Train on raw (unscaled) windows ``raw_X`` (N, h, P*9) and flows ``Y`` (N, heads).

    Offline: fit scalers, initialise from ``cfg.seed``, run ``cfg.epochs``
    shuffled minibatch passes. Online: one chronological pass from ``init``.
    """
    raw_X = np.asarray(raw_X, dtype=np.float64)
    if len(raw_X) == 0:
        raise ValueError("training dataset is empty")
    Y = np.asarray(Y, dtype=np.float64).reshape(len(raw_X), -1)
    if not (np.isfinite(raw_X).all() and np.isfinite(Y).all()):
        raise ValueError("training data contains NaN or infinite values")
    if Y.shape[1] != len(cfg.lookaheads):
        raise ValueError(f"targets have {Y.shape[1]} columns, config has {len(cfg.lookaheads)} heads")
    if raw_X.shape[1] != cfg.history:
        raise ValueError(f"windows have {raw_X.shape[1]} steps, config history is {cfg.history}")

    if mode == "online":
        if init is None:
            raise ValueError("online training needs offline parameters to start from")
        params = init.copy()
        X = prepare_inputs(raw_X, params.x_scaler, cfg.inputs, params.target_index)
        z = (Y - params.y_lo) / (params.y_hi - params.y_lo if params.y_hi > params.y_lo else 1.0)
        net = params.network()
        loss = _sgd_pass(net, X, z, np.arange(len(X)), cfg.batch_size, cfg.learning_rate)
        params.loss_history.append(loss)
        return params
    if mode != "offline":
        raise ValueError(f"mode must be offline or online, got {mode!r}")

    N, h, F = raw_X.shape
    scaler = FeatureScaler.fit(raw_X.reshape(N * h * (F // N_FEATURES), N_FEATURES))
    X = prepare_inputs(raw_X, scaler, cfg.inputs, target_index)
    y_lo, y_hi = float(Y.min()), float(Y.max())
    z = (Y - y_lo) / (y_hi - y_lo if y_hi > y_lo else 1.0)
    rng = np.random.default_rng(cfg.seed)
    net = Network.create(build_layers(cfg, X.shape[-1], Y.shape[1]), rng, cfg.init_scale)
    history = []
    for _ in range(cfg.epochs):
        history.append(_sgd_pass(net, X, z, rng.permutation(N), cfg.batch_size, cfg.learning_rate))
    return NetParams(cfg, net.params, X.shape[-1], scaler, y_lo, y_hi, target_index, history)


def train(cfg: NetConfig, dataset, mode: Literal["offline", "online"] = "offline",
          init: NetParams | None = None) -> NetParams:
    """Train from ``(FeatureMatrix, target flow(s))`` pairs; see :func:`train_arrays`."""
    raw_X, Y, members, target = _dataset_arrays(dataset)
    ti = members.index(target) if target in members else 0
    return train_arrays(cfg, raw_X, Y, ti, mode, init)


def predict_raw(params: NetParams, raw_X: np.ndarray) -> np.ndarray:
    """Network outputs in normalised units, (N, heads)."""
    X = prepare_inputs(np.asarray(raw_X, dtype=np.float64), params.x_scaler, params.config.inputs,
                       params.target_index)
    out, _ = params.network().forward(X)
    return out


def denormalise(params: NetParams, z) -> np.ndarray:
    flows = params.y_lo + np.asarray(z, dtype=np.float64) * (params.y_hi - params.y_lo)
    return np.maximum(flows, 0.0)


def predict_batch(params: NetParams, raw_X: np.ndarray, k: int) -> np.ndarray:
    if k not in params.heads:
        raise ValueError(f"no head for look-ahead {k}; trained heads: {params.heads}")
    return denormalise(params, predict_raw(params, raw_X)[:, params.heads.index(k)])


def predict(params: NetParams, window: FeatureMatrix, k: int) -> float:
    """Flow (vehicles/hour) ``k`` steps ahead from the window, clamped at 0."""
    return float(predict_batch(params, window.sequence()[None], k)[0])


def tcn_forward(window, params: dict) -> np.ndarray:
    """Temporal convolution (kernel h/4, valid, ReLU) then the dimension-adjusting dense layer.

    ``window`` is a FeatureMatrix or an (h, channels) array; ``params`` holds
    ``conv_W`` (K, channels, filters), ``conv_b``, ``dense_W``, ``dense_b``.
    """
    x = window.sequence() if isinstance(window, FeatureMatrix) else np.asarray(window, dtype=np.float64)
    h, d = x.shape
    K = tcn_kernel(h)
    W = params["conv_W"]
    if W.shape[:2] != (K, d):
        raise ValueError(f"conv kernel shape {W.shape} does not match K={K}, channels={d}")
    conv = Conv1D(d, W.shape[2], K)
    y, _ = conv.forward(x[None], {"W": W, "b": params["conv_b"]})
    dense = Dense(y.shape[1] * y.shape[2], params["dense_W"].shape[1])
    out, _ = dense.forward(y.reshape(1, -1), {"W": params["dense_W"], "b": params["dense_b"]})
    return out[0]


def config_dict(cfg: NetConfig) -> dict:
    d = asdict(cfg)
    d["lookaheads"] = list(cfg.lookaheads)
    return d
