"""Training loop: init, Adam, StepLR, mini-batches, early stopping, sweeps."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, NamedTuple, Sequence

import numpy as np

from . import model
from .model import ModelConfig, ModelParams
from .textgraph import SentenceGraph

log = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

# sub-stream ids for np.random.default_rng([seed, stream])
_INIT, _SHUFFLE, _SUBSAMPLE = range(3)

BatchHook = Callable[[list[model.ForwardCache]], None]


class NonFiniteGradientError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.01
    step_size: int = 5
    gamma: float = 0.7
    batch_size: int = 32
    max_epochs: int = 25
    patience: int = 5
    init_std: float = 0.01
    seed: int = 0
    rl_reg: bool = False
    rl_sigma: float = 0.05
    rl_step: float = 0.01
    model: str = model.QUANTUM
    dim: int = 16
    dk: int = 4
    scale_dim: int | None = None
    layer_count: int = 1
    pqc_repeats: int = 1
    observable: str = "X"
    graph_mode: str = "complete"

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")
        if self.batch_size < 1 or self.step_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size, step_size and max_epochs must be >= 1")
        if not 1 <= self.patience <= self.max_epochs:
            raise ValueError("patience must lie in [1, max_epochs]")
        if self.rl_reg and not self.rl_sigma > 0:
            raise ValueError("rl_sigma must be positive when rl_reg is on")

    def model_config(self, classes: int, embed_dim: int = 50) -> ModelConfig:
        return ModelConfig(
            kind=self.model, embed_dim=embed_dim, dim=self.dim, classes=classes,
            layer_count=self.layer_count, scale_dim=self.scale_dim, dk=self.dk,
            pqc_repeats=self.pqc_repeats, observable=self.observable,
        )


@dataclass
class TrainState:
    params: ModelParams
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    rng: np.random.Generator
    config: TrainConfig
    epoch: int = 0  # completed epochs
    steps: int = 0
    best_val_loss: float = math.inf
    epochs_since_best: int = 0

    @property
    def lr_current(self) -> float:
        return lr_at(self.config, self.epoch)

    @classmethod
    def start(cls, config: TrainConfig, params: ModelParams) -> "TrainState":
        return cls(params, params.zeros_like(), params.zeros_like(),
                   np.random.default_rng([config.seed, _SHUFFLE]), config)


@dataclass(frozen=True)
class EpochMetrics:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float
    lr: float


def init_params(config: TrainConfig, class_count: int, embed_dim: int = 50) -> ModelParams:
    """Circuit angles ~ N(0, init_std^2); weights ~ U(+-1/sqrt(fan_in)); biases 0."""
    cfg = config.model_config(class_count, embed_dim)
    rng = np.random.default_rng([config.seed, _INIT])
    tensors = {}
    for name, shape in cfg.shapes().items():
        short = name.rsplit(".", 1)[-1]
        if short in ("theta", "phi"):
            tensors[name] = rng.normal(0.0, config.init_std, size=shape)
        elif len(shape) == 2:
            bound = 1.0 / math.sqrt(shape[1])
            tensors[name] = rng.uniform(-bound, bound, size=shape)
        else:
            tensors[name] = np.zeros(shape)
    return ModelParams(cfg, tensors)


def lr_at(config: TrainConfig, epoch: int) -> float:
    """StepLR: ``lr * gamma ** (epoch // step_size)`` for 0-based ``epoch``."""
    return config.lr * config.gamma ** (epoch // config.step_size)


def adam_step(state: TrainState, grads: dict[str, np.ndarray]) -> TrainState:
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(
                f"non-finite gradient for {name} at epoch {state.epoch + 1}, step {state.steps + 1}"
            )
    state.steps += 1
    t = state.steps
    lr = state.lr_current
    for name, g in grads.items():
        m = state.m[name] = ADAM_BETA1 * state.m[name] + (1 - ADAM_BETA1) * g
        v = state.v[name] = ADAM_BETA2 * state.v[name] + (1 - ADAM_BETA2) * g * g
        m_hat = m / (1 - ADAM_BETA1**t)
        v_hat = v / (1 - ADAM_BETA2**t)
        state.params.tensors[name] = state.params.tensors[name] - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
    return state


def batch_loss_and_grad(params: ModelParams, batch: Sequence[SentenceGraph], hook: BatchHook | None = None):
    """Mean loss, mean gradient and correct-prediction count over ``batch``.

    Per-sample gradients are accumulated in batch order so the sum is reproducible.
    """
    total = params.zeros_like()
    loss_sum = 0.0
    correct = 0
    caches = []
    for graph in batch:
        logits, cache = model.forward(params, graph)
        loss, grads = model.backward(params, cache, graph.label)
        loss_sum += loss
        correct += int(np.argmax(logits) == graph.label)
        for k, g in grads.items():
            total[k] += g
        caches.append(cache)
    if hook is not None:
        hook(caches)
    n = len(batch)
    return loss_sum / n, {k: g / n for k, g in total.items()}, correct


def train_epoch(state: TrainState, graphs: Sequence[SentenceGraph], hook: BatchHook | None = None):
    """One shuffled pass; returns ``(state, mean train loss, train accuracy)``."""
    if not graphs:
        raise ValueError("empty training split")
    order = state.rng.permutation(len(graphs))
    bs = state.config.batch_size
    loss_sum = 0.0
    correct = 0
    for start in range(0, len(graphs), bs):
        batch = [graphs[i] for i in order[start:start + bs]]
        loss, grads, ok = batch_loss_and_grad(state.params, batch, hook)
        adam_step(state, grads)
        loss_sum += loss * len(batch)
        correct += ok
    return state, loss_sum / len(graphs), correct / len(graphs)


def evaluate(params: ModelParams, graphs: Sequence[SentenceGraph]) -> tuple[float, float]:
    """Mean cross-entropy and accuracy (argmax ties go to the lower class)."""
    if not graphs:
        raise ValueError("empty evaluation split")
    losses = []
    correct = 0
    for g in graphs:
        logits, _ = model.forward(params, g, need_grad=False)
        losses.append(model.cross_entropy(logits, g.label))
        correct += int(np.argmax(logits) == g.label)
    return float(np.mean(losses)), correct / len(graphs)


def rl_regularize(
    state: TrainState, reward: float, batch: Sequence[SentenceGraph]
) -> TrainState:
    """Reward-driven random-search nudge of the circuit parameters.

    Draws ``eps ~ N(0, sigma^2)`` over every theta/phi tensor, scores the
    perturbed model on ``batch`` (reward = -mean loss) and moves the circuit
    parameters by ``step * (r_perturbed - reward) / sigma * eps``. ``reward``
    must be the unperturbed reward on the same batch.
    """
    cfg = state.config
    if not cfg.rl_reg or state.params.config.kind != model.QUANTUM or not batch:
        return state
    names = [k for k in state.params.tensors if k.endswith((".theta", ".phi"))]
    eps = {k: state.rng.normal(0.0, cfg.rl_sigma, size=state.params[k].shape) for k in names}
    perturbed = state.params.with_tensors({k: state.params[k] + eps[k] for k in names})
    r_pert = -evaluate(perturbed, batch)[0]
    coeff = cfg.rl_step * (r_pert - reward) / cfg.rl_sigma
    for k in names:
        state.params.tensors[k] = state.params[k] + coeff * eps[k]
    return state


@dataclass
class EarlyStopping:
    """Tracks the best validation loss and decides when to stop."""

    patience: int
    best_loss: float = math.inf
    best_epoch: int = 0
    best_params: ModelParams | None = None
    since_best: int = 0

    def update(self, epoch: int, val_loss: float, params: ModelParams) -> bool:
        """Record ``epoch`` (1-based); return True when training should stop."""
        if val_loss < self.best_loss:
            self.best_loss = val_loss
            self.best_epoch = epoch
            self.best_params = params.copy()
            self.since_best = 0
        else:
            self.since_best += 1
        return self.since_best >= self.patience


class FitResult(NamedTuple):
    params: ModelParams
    metrics: list[EpochMetrics]
    best_epoch: int


def fit(
    config: TrainConfig,
    train: Sequence[SentenceGraph],
    val: Sequence[SentenceGraph],
    *,
    class_count: int | None = None,
    hook: BatchHook | None = None,
    params: ModelParams | None = None,
) -> FitResult:
    """Train up to ``max_epochs``; return the parameters of the best-validation epoch."""
    if not train or not val:
        raise ValueError("fit needs non-empty train and validation splits")
    if params is None:
        classes = class_count or max(g.label for g in list(train) + list(val)) + 1
        params = init_params(config, classes, train[0].features.shape[1])
    state = TrainState.start(config, params.copy())
    stopper = EarlyStopping(config.patience)
    metrics: list[EpochMetrics] = []
    for _ in range(config.max_epochs):
        lr = state.lr_current
        state, train_loss, train_acc = train_epoch(state, train, hook)
        if config.rl_reg:
            idx = state.rng.choice(len(train), size=min(config.batch_size, len(train)), replace=False)
            batch = [train[i] for i in np.sort(idx)]
            rl_regularize(state, -evaluate(state.params, batch)[0], batch)
        state.epoch += 1
        val_loss, val_acc = evaluate(state.params, val)
        metrics.append(EpochMetrics(state.epoch, train_loss, train_acc, val_loss, val_acc, lr))
        log.info("epoch %d train_loss=%.4f train_acc=%.3f val_loss=%.4f val_acc=%.3f",
                 state.epoch, train_loss, train_acc, val_loss, val_acc)
        stop = stopper.update(state.epoch, val_loss, state.params)
        state.best_val_loss, state.epochs_since_best = stopper.best_loss, stopper.since_best
        if stop:
            break
    return FitResult(stopper.best_params, metrics, stopper.best_epoch)


# --------------------------------------------------------------------------
# Sample-efficiency sweep
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SweepRow:
    fraction: float
    n_train: int
    accuracies: dict[str, float] = field(default_factory=dict)


def subsample_indices(n: int, fraction: float, seed: int) -> np.ndarray:
    """Nested, seeded subsample of ``floor(fraction * n)`` indices, in original order."""
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction {fraction} outside (0, 1]")
    k = math.floor(fraction * n + 1e-9)
    if k < 1:
        raise ValueError(f"fraction {fraction} of {n} training samples is empty")
    perm = np.random.default_rng([seed, _SUBSAMPLE]).permutation(n)
    return np.sort(perm[:k])


def _sweep_point(args):
    config, train, val, test, fraction, kinds, class_count = args
    idx = subsample_indices(len(train), fraction, config.seed)
    sub = [train[i] for i in idx]
    accs = {}
    for kind in kinds:
        result = fit(replace(config, model=kind), sub, val, class_count=class_count)
        accs[kind] = evaluate(result.params, test)[1]
    return SweepRow(fraction, len(sub), accs)


def sample_efficiency_sweep(
    config: TrainConfig,
    train: Sequence[SentenceGraph],
    val: Sequence[SentenceGraph],
    test: Sequence[SentenceGraph],
    fractions: Sequence[float],
    kinds: Sequence[str] = (model.QUANTUM, model.CLASSICAL),
    workers: int = 1,
) -> list[SweepRow]:
    """Test accuracy per model kind for nested training-set fractions.

    Validation and test splits are the same objects for every fraction.
    """
    if not fractions:
        raise ValueError("no fractions given")
    for f in fractions:
        subsample_indices(len(train), f, config.seed)
    class_count = max(g.label for g in list(train) + list(val) + list(test)) + 1
    jobs = [(config, train, val, test, f, tuple(kinds), class_count) for f in fractions]
    if workers > 1 and len(jobs) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_sweep_point, jobs))
    return [_sweep_point(j) for j in jobs]
