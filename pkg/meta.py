"""
Meta-learned initialisation for OPF predictors and the baselines it is compared with.

Offline methods:
    meta_train      MAML over the offline topologies (first-order by default,
                    finite-difference second-order as a check mode)
    pretrain_joint  one model trained on the pooled offline samples
    pretrain_bank   one model per offline topology

Online methods:
    adapt             full-batch SGD from a given initialisation on a new topology
    select_closest    bank model with the lowest loss on the new topology
    scratch_baseline  adapt from a random initialisation
"""

import logging
import time
from dataclasses import dataclass, field
from typing import Any, Collection, Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from datagen import TaskDataset
from evaluate import Evaluator, LossOnlyEvaluator, MetricsReport
from neuralnet import (
    MlpArch,
    MlpParams,
    NonFiniteError,
    OptimState,
    adam,
    batch_loss,
    init_params,
    loss_and_grad,
    sgd,
    step,
)


logger = logging.getLogger(__name__)


class MetaTrainingError(RuntimeError):
    def __init__(self, message: str, epoch: int):
        self.epoch = epoch
        super().__init__(f"{message} at epoch {epoch}")


class BankIncompleteError(RuntimeError):
    def __init__(self, failed: Sequence[int]):
        self.failed = list(failed)
        super().__init__(f"bank training diverged on topologies {self.failed}")


class LeakageError(ValueError):
    """Raised when an offline topology is presented as a new task."""


@dataclass
class MetaConfig:
    alpha: float = 0.001
    beta: float = 0.1
    gamma: float = 0.1
    inner_steps: int = 1
    task_batch_size: int = 10
    meta_epochs: int = 1000
    inner_sample_count: int = 50
    order: str = "first_order"  # or "second_order_fd"
    outer_optimizer: str = "adam"
    weight_decay: float = 0.001
    fd_step: float = 1e-5

    def __post_init__(self):
        if self.alpha <= 0 or self.gamma <= 0 or self.beta < 0:
            raise ValueError("alpha and gamma must be positive and beta nonnegative")
        if self.inner_steps < 1:
            raise ValueError("inner_steps must be at least 1")
        if self.order not in ("first_order", "second_order_fd"):
            raise ValueError(f"unknown meta-gradient order {self.order!r}")

    def outer_state(self) -> OptimState:
        if self.outer_optimizer == "sgd":
            return sgd(self.alpha, self.weight_decay)
        return adam(self.alpha, self.weight_decay)


@dataclass
class OfflineConfig:
    learning_rate: float = 0.001
    epochs: int = 1000
    weight_decay: float = 0.001


@dataclass
class MetaModel:
    w_mtl: MlpParams
    arch: MlpArch
    manifest: Dict[str, Any] = field(default_factory=dict)


@dataclass
class PretrainBank:
    models: Dict[int, MlpParams] = field(default_factory=dict)
    joint_model: Optional[MlpParams] = None


@dataclass
class AdaptResult:
    params: MlpParams
    trace: List[MetricsReport]


def _batch_indices(n_tasks: int, batch: int, seed: int, epoch: int) -> List[int]:
    if batch >= n_tasks:
        return list(range(n_tasks))
    rng = np.random.default_rng([seed, 0x6D657461, epoch])
    return sorted(int(i) for i in rng.choice(n_tasks, size=batch, replace=False))


def _inner_arrays(task: TaskDataset, count: int, seed: int, epoch: int) -> Tuple[np.ndarray, np.ndarray]:
    train = list(task.train_indices)
    if count < len(train):
        rng = np.random.default_rng([seed, epoch, task.topology_id])
        train = sorted(int(i) for i in rng.choice(train, size=count, replace=False))
    return task.inputs(train), task.targets(train)


def _hvp(params: MlpParams, x: np.ndarray, y: np.ndarray, u: np.ndarray, fd_step: float) -> np.ndarray:
    """Hessian-vector product by central differences of the gradient."""
    norm = float(np.linalg.norm(u))
    if norm == 0.0:
        return np.zeros_like(u)
    r = fd_step * max(1.0, float(np.linalg.norm(params.values))) / norm
    _, g_plus = loss_and_grad(params.with_values(params.values + r * u), x, y)
    _, g_minus = loss_and_grad(params.with_values(params.values - r * u), x, y)
    return (g_plus - g_minus) / (2.0 * r)


def task_meta_gradient(
    params: MlpParams, x: np.ndarray, y: np.ndarray, config: MetaConfig
) -> Tuple[float, np.ndarray]:
    """Loss at the adapted weights and its gradient w.r.t. the initialisation."""
    iterates = [params]
    current = params
    for _ in range(config.inner_steps):
        _, g = loss_and_grad(current, x, y)
        current = current.with_values(current.values - config.beta * g)
        iterates.append(current)
    loss, u = loss_and_grad(current, x, y)
    if config.order == "second_order_fd":
        for w_k in reversed(iterates[:-1]):
            u = u - config.beta * _hvp(w_k, x, y, u, config.fd_step)
    return loss, u


def meta_train(
    tasks: Sequence[TaskDataset],
    arch: MlpArch,
    config: MetaConfig,
    seed: int = 0,
    init: Optional[MlpParams] = None,
    progress: bool = False,
) -> MetaModel:
    """Learn an initialisation that adapts well after ``inner_steps`` gradient steps."""
    if not tasks:
        raise ValueError("meta-training needs at least one offline task")
    params = init if init is not None else init_params(arch, seed)
    state = config.outer_state()
    history: List[float] = []
    started = time.perf_counter()

    for epoch in tqdm(range(config.meta_epochs), desc="meta", disable=not progress):
        batch = _batch_indices(len(tasks), config.task_batch_size, seed, epoch)
        meta_loss = 0.0
        outer_grad = np.zeros(arch.n_params)
        try:
            for i in batch:
                x, y = _inner_arrays(tasks[i], config.inner_sample_count, seed, epoch)
                loss, grad = task_meta_gradient(params, x, y, config)
                meta_loss += loss
                outer_grad += grad
            if not np.isfinite(meta_loss):
                raise NonFiniteError("meta-loss is not finite")
            params, state = step(state, params, outer_grad / len(batch))
        except NonFiniteError as e:
            raise MetaTrainingError(f"meta-training diverged: {e}", epoch) from e
        history.append(meta_loss)
        if epoch % 100 == 0:
            logger.debug(f"Meta epoch {epoch}: meta-loss {meta_loss:.6f} over {len(batch)} tasks")

    elapsed = time.perf_counter() - started
    logger.info(f"Meta-training finished: {config.meta_epochs} epochs in {elapsed:.1f}s")
    manifest = {
        "epochs_run": config.meta_epochs,
        "meta_loss": history,
        "order": config.order,
        "offline_topologies": [t.topology_id for t in tasks],
        "seed": seed,
    }
    return MetaModel(w_mtl=params, arch=arch, manifest=manifest)


def train_model(
    params: MlpParams, x: np.ndarray, y: np.ndarray, optim: OptimState, epochs: int
) -> Tuple[MlpParams, List[float]]:
    """Full-batch training; returns the final parameters and per-epoch losses."""
    losses = []
    for _ in range(epochs):
        loss, grad = loss_and_grad(params, x, y)
        losses.append(loss)
        params, optim = step(optim, params, grad)
    return params, losses


def _pooled(tasks: Sequence[TaskDataset]) -> Tuple[np.ndarray, np.ndarray]:
    xs, ys = zip(*(t.train_arrays() for t in tasks))
    return np.concatenate(xs), np.concatenate(ys)


def pretrain_joint(
    tasks: Sequence[TaskDataset],
    arch: MlpArch,
    config: OfflineConfig = OfflineConfig(),
    seed: int = 0,
    progress: bool = False,
) -> MlpParams:
    """Train one model on all offline samples pooled together."""
    if not tasks:
        raise ValueError("joint pretraining needs at least one offline task")
    x, y = _pooled(tasks)
    params = init_params(arch, seed)
    optim = adam(config.learning_rate, config.weight_decay)
    losses: List[float] = []
    try:
        for _ in tqdm(range(config.epochs), desc="pretrain1", disable=not progress):
            loss, grad = loss_and_grad(params, x, y)
            losses.append(loss)
            params, optim = step(optim, params, grad)
    except NonFiniteError as e:
        raise MetaTrainingError(f"joint pretraining diverged: {e}", len(losses)) from e
    if losses:
        logger.info(f"Joint pretraining on {len(x)} samples: loss {losses[0]:.5f} -> {losses[-1]:.5f}")
    return params


def pretrain_bank(
    tasks: Sequence[TaskDataset],
    arch: MlpArch,
    config: OfflineConfig = OfflineConfig(),
    seed: int = 0,
    progress: bool = False,
) -> PretrainBank:
    """Train one model per offline topology from a topology-seeded initialisation."""
    bank = PretrainBank()
    failed = []
    for task in tqdm(tasks, desc="pretrain2", disable=not progress):
        x, y = task.train_arrays()
        try:
            params, losses = train_model(
                init_params(arch, [seed, task.topology_id]),
                x,
                y,
                adam(config.learning_rate, config.weight_decay),
                config.epochs,
            )
        except NonFiniteError as e:
            logger.error(f"Bank model for topology {task.topology_id} diverged: {e}")
            failed.append(task.topology_id)
            continue
        bank.models[task.topology_id] = params
    if failed:
        raise BankIncompleteError(failed)
    logger.info(f"Trained bank of {len(bank.models)} models")
    return bank


def rank_bank(bank: PretrainBank, x: np.ndarray, y: np.ndarray) -> List[Tuple[float, int]]:
    """(loss, topology_id) for every bank model, best first, ties by topology id."""
    return sorted((batch_loss(params, x, y), tid) for tid, params in bank.models.items())


def select_closest(bank: PretrainBank, x: np.ndarray, y: np.ndarray) -> MlpParams:
    if not bank.models:
        raise ValueError("bank is empty")
    _, best = rank_bank(bank, x, y)[0]
    return bank.models[best]


def adapt(
    w_init: MlpParams,
    task: TaskDataset,
    gamma: float,
    epochs: int,
    n_train: Optional[int] = 50,
    weight_decay: float = 0.001,
    evaluator: Optional[Evaluator] = None,
    eval_epochs: Optional[Collection[int]] = None,
    offline_ids: Collection[int] = (),
    record_wall_clock: bool = False,
) -> AdaptResult:
    """Fine-tune on a new topology with full-batch SGD, scoring the held-out split as it goes.

    Metrics are recorded at epoch 0, at every epoch in ``eval_epochs`` (all
    epochs when None) and at the final epoch.
    """
    if task.topology_id in set(offline_ids):
        raise LeakageError(f"topology {task.topology_id} belongs to the offline pool")
    x, y = task.train_arrays(n_train)
    if len(x) == 0:
        raise ValueError(f"topology {task.topology_id} has no training samples")
    if evaluator is None:
        test = list(task.test_indices) or list(task.train_indices)
        evaluator = LossOnlyEvaluator(task.inputs(test), task.targets(test), task.topology_id)

    def record(params: MlpParams, epoch: int, elapsed_s: float) -> MetricsReport:
        report = evaluator(params, epoch)
        report.topology_id = task.topology_id
        report.epoch = epoch
        report.wall_clock_ms = round(elapsed_s * 1000.0, 3) if record_wall_clock else 0.0
        return report

    params = w_init
    optim = sgd(gamma, weight_decay)
    trace = [record(params, 0, 0.0)]
    wanted = None if eval_epochs is None else set(eval_epochs)
    train_time = 0.0
    for epoch in range(1, epochs + 1):
        started = time.perf_counter()
        _, grad = loss_and_grad(params, x, y)
        params, optim = step(optim, params, grad)
        train_time += time.perf_counter() - started
        if wanted is None or epoch in wanted or epoch == epochs:
            trace.append(record(params, epoch, train_time))
    return AdaptResult(params=params, trace=trace)


def scratch_baseline(
    arch: MlpArch,
    seed: int,
    task: TaskDataset,
    gamma: float,
    epochs: int,
    **kwargs,
) -> AdaptResult:
    """Adaptation from a random initialisation."""
    return adapt(init_params(arch, [seed, task.topology_id]), task, gamma, epochs, **kwargs)
