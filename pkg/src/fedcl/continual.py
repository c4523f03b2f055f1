"""Client-local continual-learning mechanisms: EWC, EWC-Online, SI and MAS
importance maps with their quadratic penalties, plus the naive-rehearsal
replay buffer and mixed-batch sampler.

Importance maps share the flat parameter layout of nn.ParameterVector.
Penalties never touch BatchNorm running-statistic slots (they are not
optimized parameters); gamma and beta are included.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import data as dataio
from . import nn

CL_METHODS = ("none", "ewc", "ewc_online", "si", "mas", "nr")

DEFAULT_LAMBDAS = {"ewc": 100.0, "ewc_online": 100.0, "si": 1.0, "mas": 1.0}


@dataclass
class PenaltyConfig:
    lambda_: float | None = None   # None -> method default
    gamma_online: float = 1.0      # EWC-Online decay
    fisher_samples: int = 8        # minibatches sampled for the Fisher diagonal
    xi: float = 0.1                # SI damping
    buffer_capacity: int = 1000    # NR
    mix_ratio: float = 0.5         # NR buffer fraction per batch

    def __post_init__(self):
        if self.lambda_ is not None and self.lambda_ < 0.0:
            raise ValueError("lambda must be >= 0")
        if not 0.0 < self.gamma_online <= 1.0:
            raise ValueError("gamma_online must be in (0, 1]")
        if self.xi <= 0.0:
            raise ValueError("xi must be positive")
        if not 0.0 <= self.mix_ratio <= 1.0:
            raise ValueError("mix_ratio must be in [0, 1]")

    def effective_lambda(self, method: str) -> float:
        if self.lambda_ is not None:
            return self.lambda_
        return DEFAULT_LAMBDAS.get(method, 1.0)


@dataclass
class AnchorParams:
    theta_star: np.ndarray
    task_id: int


_PENALIZED_MASK = ~nn.running_stat_mask()


def compute_fisher(model: nn.MlpModel, shard: dataio.Dataset, fisher_samples: int,
                   seed: int, batch_size: int = 32) -> np.ndarray:
    """Empirical Fisher diagonal: mean over sampled minibatches of the
    elementwise-squared MSE gradient. Works on a copy so the model's BN
    running statistics are untouched."""
    if len(shard) == 0:
        raise ValueError("cannot compute Fisher on an empty shard")
    probe = model.clone()
    bs = min(batch_size, len(shard))
    rng = np.random.default_rng([seed, 7])
    total = np.zeros(nn.PARAM_COUNT)
    for _ in range(fisher_samples):
        idx = rng.choice(len(shard), size=bs, replace=False)
        # eval-mode gradients: BN running statistics are frozen constants,
        # so single-sample shards are well-defined
        g = nn.backward(probe, shard.features[idx], shard.labels[idx], mode="eval")
        total += g ** 2
    fisher = total / fisher_samples
    fisher[~_PENALIZED_MASK] = 0.0
    return fisher


def quadratic_penalty(theta: np.ndarray, anchors: list[AnchorParams],
                      importances: list[np.ndarray], lambda_: float) -> tuple[float, np.ndarray]:
    """Sum over (anchor, importance) pairs of (lambda/2) * sum_i I_i (theta_i - theta*_i)^2.

    Shared by EWC (one pair per task), EWC-Online (single running pair),
    SI and MAS (Omega in place of Fisher). Returns (value, gradient)."""
    if len(anchors) != len(importances):
        raise ValueError("need one importance map per anchor")
    value = 0.0
    grad = np.zeros_like(theta)
    for anchor, imp in zip(anchors, importances):
        if anchor.theta_star.shape != theta.shape or imp.shape != theta.shape:
            raise ValueError("parameter layout mismatch")
        diff = (theta - anchor.theta_star) * _PENALIZED_MASK
        value += 0.5 * lambda_ * float((imp * diff) @ diff)
        grad += lambda_ * imp * diff
    return value, grad


def ewc_online_update(running: np.ndarray | None, new_fisher: np.ndarray,
                      gamma_online: float) -> np.ndarray:
    """running <- gamma * running + new_fisher (running starts at zero)."""
    if running is None:
        return new_fisher.copy()
    if running.shape != new_fisher.shape:
        raise ValueError("importance layout mismatch")
    return gamma_online * running + new_fisher


# ---------------------------------------------------------------------------
# Synaptic Intelligence
# ---------------------------------------------------------------------------

@dataclass
class SiAccumulator:
    theta_at_task_start: np.ndarray
    omega_running: np.ndarray = field(default=None)  # type: ignore[assignment]
    xi: float = 0.1

    def __post_init__(self):
        if self.omega_running is None:
            self.omega_running = np.zeros_like(self.theta_at_task_start)


def si_accumulate(acc: SiAccumulator, grad_before_step: np.ndarray,
                  delta_theta: np.ndarray) -> None:
    """Per-step path-integral update w_i += (-g_i) * dtheta_i (in place)."""
    acc.omega_running = acc.omega_running + (-grad_before_step) * delta_theta


def si_consolidate(acc: SiAccumulator, theta_end: np.ndarray) -> np.ndarray:
    """Omega_i = max(0, w_i) / ((theta_end - theta_start)^2 + xi); resets the
    accumulator for the next task."""
    drift = theta_end - acc.theta_at_task_start
    omega = np.maximum(acc.omega_running, 0.0) / (drift ** 2 + acc.xi)
    omega[~_PENALIZED_MASK] = 0.0
    acc.omega_running = np.zeros_like(theta_end)
    acc.theta_at_task_start = theta_end.copy()
    return omega


# ---------------------------------------------------------------------------
# Memory Aware Synapses
# ---------------------------------------------------------------------------

def mas_importance(model: nn.MlpModel, features: np.ndarray, seed: int) -> np.ndarray:
    """Omega_i = mean over samples of |d ||f(x)||^2_2 / d theta_i|.

    Uses only features (unlabelled by construction). Gradients are taken
    per sample in eval mode; backward computes the gradient of the 8-way
    mean squared output, so scaling by 8 recovers the squared L2 norm."""
    features = np.asarray(features, dtype=np.float64)
    if features.shape[0] == 0:
        raise ValueError("cannot compute MAS importance on an empty shard")
    _ = seed  # deterministic: plain mean over all samples
    probe = model.clone()
    total = np.zeros(nn.PARAM_COUNT)
    zero = np.zeros((1, nn.OUT_DIM))
    for i in range(features.shape[0]):
        g = nn.backward(probe, features[i:i + 1], zero, mode="eval")
        total += np.abs(g * nn.OUT_DIM)
    omega = total / features.shape[0]
    omega[~_PENALIZED_MASK] = 0.0
    return omega


# ---------------------------------------------------------------------------
# Naive Rehearsal
# ---------------------------------------------------------------------------

class ReplayBuffer:
    """Reservoir-sampled store of previously seen (feature, label) pairs."""

    def __init__(self, capacity: int, seed: int = 0):
        if capacity <= 0:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.features: list[np.ndarray] = []
        self.labels: list[np.ndarray] = []
        self.n_seen = 0
        self._rng = np.random.default_rng([seed, 9])

    def __len__(self) -> int:
        return len(self.features)

    def add(self, feature: np.ndarray, label: np.ndarray) -> None:
        self.n_seen += 1
        if len(self.features) < self.capacity:
            self.features.append(feature.copy())
            self.labels.append(label.copy())
            return
        j = int(self._rng.integers(0, self.n_seen))
        if j < self.capacity:
            self.features[j] = feature.copy()
            self.labels[j] = label.copy()

    def add_dataset(self, ds: dataio.Dataset) -> None:
        for i in range(len(ds)):
            self.add(ds.features[i], ds.labels[i])

    def sample(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        idx = rng.integers(0, len(self.features), size=n)
        return (np.stack([self.features[i] for i in idx]),
                np.stack([self.labels[i] for i in idx]))


def nr_store(buffer: ReplayBuffer, task_samples: dataio.Dataset, seed: int = 0) -> ReplayBuffer:
    """Stream a task's samples through the reservoir. seed is accepted for
    interface symmetry; the buffer owns its RNG stream."""
    _ = seed
    buffer.add_dataset(task_samples)
    return buffer


def nr_mixed_batches(buffer: ReplayBuffer, new_shard: dataio.Dataset, batch_size: int,
                     mix_ratio: float, seed: int, epoch: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Batches mixing floor(mix_ratio * batch_size) buffer samples (uniform
    with replacement) with epoch-shuffled new-shard samples. Every new-shard
    sample appears exactly once per epoch. An empty buffer degrades to plain
    minibatches."""
    if batch_size < 2:
        raise ValueError(f"batch_size must be >= 2, got {batch_size}")
    n_buf = int(np.floor(mix_ratio * batch_size))
    if len(buffer) == 0 or n_buf == 0:
        return dataio.minibatches(new_shard, batch_size, seed, epoch)
    n_new = batch_size - n_buf
    if n_new < 1:
        n_new = 1  # mix_ratio 1.0 still advances through the new shard
    n = len(new_shard)
    rng = np.random.default_rng([seed, 10, epoch])
    perm = rng.permutation(n)
    batches = []
    for pos in range(0, n, n_new):
        idx = perm[pos:pos + n_new]
        bf, bl = buffer.sample(n_buf, rng)
        batches.append((np.concatenate([new_shard.features[idx], bf]),
                        np.concatenate([new_shard.labels[idx], bl])))
    return batches
