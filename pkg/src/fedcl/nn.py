"""Minimal differentiable network core: dense layers, batch normalization,
MSE loss, hand-derived reverse-mode gradients, SGD/Adam optimizers, and a
flat parameter-vector view used by the aggregation and regularization code.

The architecture is fixed: 29 -> 16 -> 16 -> 8 with a BatchNorm layer after
each hidden dense layer. Hidden activation is identity by default (a config
switch enables ReLU). All math is float64 so finite-difference checks and
bitwise reproducibility are meaningful.
"""

from __future__ import annotations

import numpy as np

IN_DIM = 29
HIDDEN_DIM = 16
OUT_DIM = 8

BN_EPSILON = 1e-5
BN_MOMENTUM = 0.1


class LinearLayer:
    """Dense layer y = x @ W.T + b with weight shape (out, in)."""

    def __init__(self, in_dim: int, out_dim: int):
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.weight = np.zeros((out_dim, in_dim), dtype=np.float64)
        self.bias = np.zeros(out_dim, dtype=np.float64)

    def init_uniform(self, rng: np.random.Generator) -> None:
        # uniform in +-1/sqrt(fan_in)
        bound = 1.0 / np.sqrt(self.in_dim)
        self.weight = rng.uniform(-bound, bound, size=(self.out_dim, self.in_dim))
        self.bias = rng.uniform(-bound, bound, size=self.out_dim)

    def forward(self, x: np.ndarray) -> np.ndarray:
        return x @ self.weight.T + self.bias


class BatchNormLayer:
    """1-d batch normalization over the batch axis.

    Train mode normalizes with batch statistics and updates the running
    statistics as running <- (1 - momentum) * running + momentum * batch.
    Eval mode uses the running statistics only.
    """

    def __init__(self, dim: int, momentum: float = BN_MOMENTUM, epsilon: float = BN_EPSILON):
        if not 0.0 < momentum < 1.0:
            raise ValueError(f"momentum must be in (0, 1), got {momentum}")
        if epsilon <= 0.0:
            raise ValueError(f"epsilon must be positive, got {epsilon}")
        self.dim = dim
        self.momentum = momentum
        self.epsilon = epsilon
        self.gamma = np.ones(dim, dtype=np.float64)
        self.beta = np.zeros(dim, dtype=np.float64)
        self.running_mean = np.zeros(dim, dtype=np.float64)
        self.running_var = np.ones(dim, dtype=np.float64)

    def forward(self, x: np.ndarray, train: bool, update_running: bool = True):
        """Returns (y, cache); cache records which normalization was used."""
        if train:
            if x.shape[0] < 2:
                raise ValueError("batch normalization in train mode needs a batch of at least 2")
            mean = x.mean(axis=0)
            var = x.var(axis=0)
            std = np.sqrt(var + self.epsilon)
            xhat = (x - mean) / std
            if update_running:
                self.running_mean = (1.0 - self.momentum) * self.running_mean + self.momentum * mean
                self.running_var = (1.0 - self.momentum) * self.running_var + self.momentum * var
            y = self.gamma * xhat + self.beta
            return y, ("train", xhat, std)
        std = np.sqrt(self.running_var + self.epsilon)
        xhat = (x - self.running_mean) / std
        return self.gamma * xhat + self.beta, ("eval", xhat, std)

    def backward(self, dy: np.ndarray, cache) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Returns (dx, dgamma, dbeta). In eval mode the running statistics
        are constants, so dx is a plain elementwise rescale."""
        kind, xhat, std = cache
        dgamma = (dy * xhat).sum(axis=0)
        dbeta = dy.sum(axis=0)
        dxhat = dy * self.gamma
        if kind == "eval":
            return dxhat / std, dgamma, dbeta
        dx = (dxhat - dxhat.mean(axis=0) - xhat * (dxhat * xhat).mean(axis=0)) / std
        return dx, dgamma, dbeta


class MlpModel:
    """Fixed-topology regressor: Linear(29,16) BN Linear(16,16) BN Linear(16,8)."""

    def __init__(self, hidden_activation: str = "identity"):
        if hidden_activation not in ("identity", "relu"):
            raise ValueError(f"unknown hidden activation {hidden_activation!r}")
        self.hidden_activation = hidden_activation
        self.lin1 = LinearLayer(IN_DIM, HIDDEN_DIM)
        self.bn1 = BatchNormLayer(HIDDEN_DIM)
        self.lin2 = LinearLayer(HIDDEN_DIM, HIDDEN_DIM)
        self.bn2 = BatchNormLayer(HIDDEN_DIM)
        self.out = LinearLayer(HIDDEN_DIM, OUT_DIM)

    def init_params(self, rng: np.random.Generator) -> None:
        self.lin1.init_uniform(rng)
        self.lin2.init_uniform(rng)
        self.out.init_uniform(rng)
        for bn in (self.bn1, self.bn2):
            bn.gamma = np.ones(bn.dim)
            bn.beta = np.zeros(bn.dim)
            bn.running_mean = np.zeros(bn.dim)
            bn.running_var = np.ones(bn.dim)

    def _activate(self, h: np.ndarray) -> np.ndarray:
        if self.hidden_activation == "relu":
            return np.maximum(h, 0.0)
        return h

    def forward(self, batch: np.ndarray, mode: str = "eval") -> np.ndarray:
        y, _ = self._forward_cached(batch, mode)
        return y

    def _forward_cached(self, batch: np.ndarray, mode: str):
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        batch = np.asarray(batch, dtype=np.float64)
        if batch.ndim != 2 or batch.shape[1] != IN_DIM:
            raise ValueError(f"expected batch of shape (B, {IN_DIM}), got {batch.shape}")
        if batch.shape[0] < 1:
            raise ValueError("empty batch")
        train = mode == "train"
        cache = {"x": batch}
        h1 = self.lin1.forward(batch)
        b1, cache["bn1"] = self.bn1.forward(h1, train)
        a1 = self._activate(b1)
        cache["b1"] = b1
        cache["a1"] = a1
        h2 = self.lin2.forward(a1)
        b2, cache["bn2"] = self.bn2.forward(h2, train)
        a2 = self._activate(b2)
        cache["b2"] = b2
        cache["a2"] = a2
        y = self.out.forward(a2)
        return y, cache

    def clone(self) -> "MlpModel":
        m = MlpModel(self.hidden_activation)
        inject_params(m, extract_params(self))
        return m


# ---------------------------------------------------------------------------
# Flat parameter layout
# ---------------------------------------------------------------------------

LAYOUT: list[tuple[str, tuple[int, ...]]] = [
    ("lin1.weight", (HIDDEN_DIM, IN_DIM)),
    ("lin1.bias", (HIDDEN_DIM,)),
    ("bn1.gamma", (HIDDEN_DIM,)),
    ("bn1.beta", (HIDDEN_DIM,)),
    ("bn1.running_mean", (HIDDEN_DIM,)),
    ("bn1.running_var", (HIDDEN_DIM,)),
    ("lin2.weight", (HIDDEN_DIM, HIDDEN_DIM)),
    ("lin2.bias", (HIDDEN_DIM,)),
    ("bn2.gamma", (HIDDEN_DIM,)),
    ("bn2.beta", (HIDDEN_DIM,)),
    ("bn2.running_mean", (HIDDEN_DIM,)),
    ("bn2.running_var", (HIDDEN_DIM,)),
    ("out.weight", (OUT_DIM, HIDDEN_DIM)),
    ("out.bias", (OUT_DIM,)),
]


def _build_offsets():
    offsets = {}
    pos = 0
    for name, shape in LAYOUT:
        size = int(np.prod(shape))
        offsets[name] = (pos, pos + size, shape)
        pos += size
    return offsets, pos


OFFSETS, PARAM_COUNT = _build_offsets()


def slot_slice(name: str) -> slice:
    start, stop, _ = OFFSETS[name]
    return slice(start, stop)


def bn_mask() -> np.ndarray:
    """Boolean vector marking every BatchNorm slot (gamma, beta, running stats)."""
    mask = np.zeros(PARAM_COUNT, dtype=bool)
    for name in OFFSETS:
        if name.startswith("bn"):
            mask[slot_slice(name)] = True
    return mask


def running_stat_mask() -> np.ndarray:
    """Boolean vector marking only the running mean/var slots (not optimized)."""
    mask = np.zeros(PARAM_COUNT, dtype=bool)
    for name in OFFSETS:
        if "running" in name:
            mask[slot_slice(name)] = True
    return mask


def _resolve(model: MlpModel, name: str):
    layer_name, attr = name.split(".")
    return getattr(model, layer_name), attr


def extract_params(model: MlpModel) -> np.ndarray:
    """Flatten all parameters (including BN running stats) into one vector."""
    vec = np.empty(PARAM_COUNT, dtype=np.float64)
    for name, (start, stop, _shape) in OFFSETS.items():
        layer, attr = _resolve(model, name)
        vec[start:stop] = getattr(layer, attr).ravel()
    return vec


def inject_params(model: MlpModel, vec: np.ndarray) -> None:
    """Write a flat parameter vector back into the model (copying)."""
    vec = np.asarray(vec, dtype=np.float64)
    if vec.shape != (PARAM_COUNT,):
        raise ValueError(f"expected parameter vector of length {PARAM_COUNT}, got shape {vec.shape}")
    for name, (start, stop, shape) in OFFSETS.items():
        layer, attr = _resolve(model, name)
        setattr(layer, attr, vec[start:stop].reshape(shape).copy())


# ---------------------------------------------------------------------------
# Loss and gradients
# ---------------------------------------------------------------------------

def mse_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error averaged over the batch then over the 8 actions.

    Returns (scalar, per_action) where per_action[a] is the batch-mean
    squared error for action a and scalar is the mean of per_action.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs target {target.shape}")
    per_action = ((pred - target) ** 2).mean(axis=0)
    return float(per_action.mean()), per_action


def backward(model: MlpModel, batch: np.ndarray, target: np.ndarray,
             extra_penalty_grad: np.ndarray | None = None,
             mode: str = "train") -> np.ndarray:
    """Exact reverse-mode gradient of mse_loss (plus an optional pre-computed
    penalty gradient in parameter space) w.r.t. every parameter slot.

    In train mode the forward updates BN running statistics, as a training
    step would; eval mode treats them as constants (used by importance-map
    computation). Running-statistic slots receive zero gradient either way.
    """
    target = np.asarray(target, dtype=np.float64)
    pred, cache = model._forward_cached(batch, mode)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs target {target.shape}")
    n, width = pred.shape
    dy = 2.0 * (pred - target) / (n * width)

    grads = {}
    # output linear
    grads["out.weight"] = dy.T @ cache["a2"]
    grads["out.bias"] = dy.sum(axis=0)
    da2 = dy @ model.out.weight
    # activation 2
    db2 = da2 * (cache["b2"] > 0.0) if model.hidden_activation == "relu" else da2
    # bn2
    dh2, grads["bn2.gamma"], grads["bn2.beta"] = model.bn2.backward(db2, cache["bn2"])
    # lin2
    grads["lin2.weight"] = dh2.T @ cache["a1"]
    grads["lin2.bias"] = dh2.sum(axis=0)
    da1 = dh2 @ model.lin2.weight
    # activation 1
    db1 = da1 * (cache["b1"] > 0.0) if model.hidden_activation == "relu" else da1
    # bn1
    dh1, grads["bn1.gamma"], grads["bn1.beta"] = model.bn1.backward(db1, cache["bn1"])
    # lin1
    grads["lin1.weight"] = dh1.T @ cache["x"]
    grads["lin1.bias"] = dh1.sum(axis=0)

    vec = np.zeros(PARAM_COUNT, dtype=np.float64)
    for name, g in grads.items():
        vec[slot_slice(name)] = g.ravel()
    if extra_penalty_grad is not None:
        extra_penalty_grad = np.asarray(extra_penalty_grad, dtype=np.float64)
        if extra_penalty_grad.shape != (PARAM_COUNT,):
            raise ValueError("penalty gradient has wrong length")
        vec = vec + extra_penalty_grad
    return vec


# ---------------------------------------------------------------------------
# Optimizers
# ---------------------------------------------------------------------------

class Optimizer:
    """SGD or Adam on flat parameter vectors. State lives in the instance."""

    def __init__(self, kind: str = "sgd", learning_rate: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, epsilon: float = 1e-8):
        if kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer kind {kind!r}")
        if learning_rate < 0.0:
            raise ValueError("learning rate must be nonnegative")
        self.kind = kind
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.step_count = 0
        self.m: np.ndarray | None = None
        self.v: np.ndarray | None = None

    def reset(self) -> None:
        self.step_count = 0
        self.m = None
        self.v = None

    def step(self, params: np.ndarray, grads: np.ndarray) -> np.ndarray:
        params = np.asarray(params, dtype=np.float64)
        grads = np.asarray(grads, dtype=np.float64)
        if params.shape != grads.shape:
            raise ValueError(f"shape mismatch: params {params.shape} vs grads {grads.shape}")
        if np.isnan(grads).any():
            raise ValueError("NaN in gradients")
        if self.kind == "sgd":
            self.step_count += 1
            return params - self.learning_rate * grads
        if self.m is None:
            self.m = np.zeros_like(params)
            self.v = np.zeros_like(params)
        self.step_count += 1
        t = self.step_count
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grads
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grads ** 2
        m_hat = self.m / (1.0 - self.beta1 ** t)
        v_hat = self.v / (1.0 - self.beta2 ** t)
        return params - self.learning_rate * m_hat / (np.sqrt(v_hat) + self.epsilon)
