"""
Predictor quality metrics and trace files.

eta1 is the mean squared loss on scaled targets, eta2 the relative accuracy
of the predicted dispatch (P_G, V_G) in physical units, eta3 the relative
accuracy of the total generation cost after the full state is rebuilt by
power flow, and the feasibility rate the share of rebuilt states inside the
original operating limits.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from grid import (
    Network,
    PfState,
    PowerFlowError,
    build_ybus,
    check_operating_point,
    recover_full_state,
    total_cost,
)
from neuralnet import MlpParams, batch_loss, forward, unscale_outputs


logger = logging.getLogger(__name__)

ZERO_TRUTH_TOL = 1e-9
FEASIBILITY_TOL = 1e-6
TRACE_COLUMNS = ["method", "topology_id", "epoch", "eta1", "eta2", "eta3", "feasibility_rate", "wall_clock_ms"]


class ZeroTruthError(ValueError):
    def __init__(self, sample: int, dim: int):
        self.sample = sample
        self.dim = dim
        super().__init__(f"zero truth value at sample {sample}, dim {dim}")


class ReportError(ValueError):
    """Raised for malformed or empty trace files."""


@dataclass
class MetricsReport:
    eta1: float
    eta2: float
    eta3: float
    feasibility_rate: float
    n_samples: int
    topology_id: int = -1
    epoch: int = 0
    excluded_dims: int = 0
    wall_clock_ms: float = 0.0

    def trace_row(self, method: str) -> dict:
        return {
            "method": method,
            "topology_id": self.topology_id,
            "epoch": self.epoch,
            "eta1": self.eta1,
            "eta2": self.eta2,
            "eta3": self.eta3,
            "feasibility_rate": self.feasibility_rate,
            "wall_clock_ms": self.wall_clock_ms,
        }


def eta1(params: MlpParams, x: np.ndarray, y: np.ndarray) -> float:
    return batch_loss(params, x, y)


def count_zero_truths(truths: np.ndarray, zero_tol: float = ZERO_TRUTH_TOL) -> int:
    return int(np.sum(np.abs(np.asarray(truths)) <= zero_tol))


def eta2(
    predictions: np.ndarray,
    truths: np.ndarray,
    strict: bool = False,
    zero_tol: float = ZERO_TRUTH_TOL,
) -> float:
    """1 minus the mean relative error of the dispatch.

    With ``strict`` a zero truth raises ``ZeroTruthError``; otherwise such
    dims are left out of their sample's mean.
    """
    pred = np.atleast_2d(np.asarray(predictions, dtype=float))
    truth = np.atleast_2d(np.asarray(truths, dtype=float))
    if pred.shape != truth.shape:
        raise ValueError(f"prediction shape {pred.shape} != truth shape {truth.shape}")
    mask = np.abs(truth) > zero_tol
    if strict and not mask.all():
        sample, dim = (int(i) for i in np.argwhere(~mask)[0])
        raise ZeroTruthError(sample, dim)
    safe = np.where(mask, truth, 1.0)
    rel = np.where(mask, np.abs((pred - truth) / safe), 0.0)
    counts = mask.sum(axis=1)
    keep = counts > 0
    if not keep.any():
        return float("nan")
    per_sample = rel[keep].sum(axis=1) / counts[keep]
    return float(1.0 - per_sample.mean())


def eta3(predicted_costs: Sequence[float], true_costs: Sequence[float]) -> float:
    pred = np.asarray(predicted_costs, dtype=float)
    true = np.asarray(true_costs, dtype=float)
    if pred.shape != true.shape:
        raise ValueError(f"{pred.size} predicted costs for {true.size} true costs")
    if np.any(true <= 0):
        raise ValueError("true costs must be positive")
    if true.size == 0:
        return float("nan")
    return float(1.0 - np.mean(np.abs((pred - true) / true)))


def is_feasible(net: Network, state: Optional[PfState], tol: float = FEASIBILITY_TOL) -> bool:
    if state is None:
        return False
    return not check_operating_point(net, state.p_gen, state.q_gen, state.v_mag, margin=0.0, tol=tol)


def feasibility_rate(
    states: Sequence[Optional[PfState]], net: Network, tol: float = FEASIBILITY_TOL
) -> Tuple[float, List[bool]]:
    """Share of states inside the original limits; ``None`` marks a failed power flow."""
    flags = [is_feasible(net, s, tol) for s in states]
    if not flags:
        return float("nan"), flags
    return sum(flags) / len(flags), flags


def split_demand(net: Network, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Full per-bus demand from a load-bus input vector."""
    load_buses = net.load_buses
    n_load = len(load_buses)
    pd_full = np.zeros(net.n_bus)
    qd_full = np.zeros(net.n_bus)
    pd_full[load_buses] = x[:n_load]
    qd_full[load_buses] = x[n_load:]
    return pd_full, qd_full


class TaskEvaluator:
    """Scores a predictor on the held-out samples of one topology."""

    def __init__(self, net: Network, samples, topology_id: int = -1, enforce_q_limits: bool = True):
        if not samples:
            raise ValueError("evaluation needs at least one sample")
        self.net = net
        self.ybus = build_ybus(net)
        self.topology_id = topology_id
        self.enforce_q_limits = enforce_q_limits
        self.x = np.array([s.x for s in samples])
        self.y = np.array([s.y for s in samples])
        self.raw_y = np.array([s.raw_y for s in samples])
        self.objectives = np.array([s.objective for s in samples])
        self.demands = [split_demand(net, x) for x in self.x]

    def recover(self, p_gen: np.ndarray, v_gen: np.ndarray, index: int) -> Optional[PfState]:
        pd_full, qd_full = self.demands[index]
        try:
            return recover_full_state(
                self.net, p_gen, v_gen, pd_full, qd_full, ybus=self.ybus, enforce_q_limits=self.enforce_q_limits
            )
        except PowerFlowError as e:
            logger.debug(f"Topology {self.topology_id} sample {index}: recovery failed ({e})")
            return None

    def __call__(self, params: MlpParams, epoch: int = 0) -> MetricsReport:
        y_hat = forward(params, self.x)
        p_gen, v_gen = unscale_outputs(self.net, y_hat)
        predictions = np.concatenate([p_gen, v_gen], axis=1)

        states = [self.recover(p_gen[i], v_gen[i], i) for i in range(len(self.x))]
        converged = [i for i, s in enumerate(states) if s is not None]
        costs = [total_cost(self.net, states[i].p_gen) for i in converged]
        rate, _ = feasibility_rate(states, self.net)
        if len(converged) < len(states):
            logger.debug(f"Topology {self.topology_id} epoch {epoch}: {len(states) - len(converged)} recoveries failed")

        return MetricsReport(
            eta1=eta1(params, self.x, self.y),
            eta2=eta2(predictions, self.raw_y),
            eta3=eta3(costs, self.objectives[converged]) if converged else float("nan"),
            feasibility_rate=rate,
            n_samples=len(self.x),
            topology_id=self.topology_id,
            epoch=epoch,
            excluded_dims=count_zero_truths(self.raw_y),
        )


class LossOnlyEvaluator:
    """Reports eta1 only; used where no network is attached to the samples."""

    def __init__(self, x: np.ndarray, y: np.ndarray, topology_id: int = -1):
        self.x, self.y, self.topology_id = x, y, topology_id

    def __call__(self, params: MlpParams, epoch: int = 0) -> MetricsReport:
        nan = float("nan")
        return MetricsReport(eta1(params, self.x, self.y), nan, nan, nan, len(self.x), self.topology_id, epoch)


Evaluator = Callable[[MlpParams, int], MetricsReport]


def write_trace(path: Union[str, Path], method: str, reports: Sequence[MetricsReport], append: bool = False) -> Path:
    """Write (or append) trace rows in the shared CSV layout."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame([r.trace_row(method) for r in reports], columns=TRACE_COLUMNS)
    exists = append and path.exists()
    frame.to_csv(path, mode="a" if exists else "w", header=not exists, index=False)
    return path


def read_trace(path: Union[str, Path]) -> pd.DataFrame:
    path = Path(path)
    if not path.exists():
        raise ReportError(f"trace file not found: {path}")
    try:
        frame = pd.read_csv(path)
    except (pd.errors.EmptyDataError, pd.errors.ParserError) as e:
        raise ReportError(f"unreadable trace {path}: {e}") from e
    if frame.empty:
        raise ReportError(f"trace {path} has no rows")
    missing = [c for c in TRACE_COLUMNS if c not in frame.columns]
    if missing:
        raise ReportError(f"trace {path} lacks columns {missing}")
    numeric = TRACE_COLUMNS[1:]
    coerced = frame[numeric].apply(pd.to_numeric, errors="coerce")
    bad = coerced[["topology_id", "epoch"]].isna().any(axis=1)
    if bad.any():
        raise ReportError(f"trace {path} has malformed rows at {frame.index[bad].tolist()}")
    frame[numeric] = coerced
    return frame
