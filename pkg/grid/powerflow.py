"""
Polar Newton-Raphson AC power flow.

Besides the plain solver this module provides ``recover_full_state``, which
rebuilds the full operating point from a predicted generator dispatch
(non-slack active powers plus generator voltage magnitudes).
"""

import logging
import warnings
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg

from .case_ingest import AdmittanceMatrix, Network, build_ybus


logger = logging.getLogger(__name__)


class PowerFlowError(RuntimeError):
    """Raised when Newton-Raphson fails."""

    def __init__(self, kind: str, message: str, residual: float = float("nan"), iterations: int = 0):
        self.kind = kind  # "diverged" | "singular"
        self.residual = residual
        self.iterations = iterations
        super().__init__(f"power flow {kind}: {message}")


@dataclass(frozen=True)
class PvSetpoint:
    bus: int
    p_gen: float
    v_mag: float


@dataclass
class PfSpec:
    """Power flow problem.

    ``pv_setpoints`` must contain one entry per generator bus; the entry on
    the slack bus supplies the slack voltage magnitude and its ``p_gen`` is
    ignored. ``fixed_q_gen`` marks generator buses held at a reactive output
    (PV buses switched to PQ).
    """

    net: Network
    ybus: AdmittanceMatrix
    pv_setpoints: Tuple[PvSetpoint, ...]
    p_demand: np.ndarray
    q_demand: np.ndarray
    tol: float = 1e-8
    max_iter: int = 30
    warm_start: Optional["PfState"] = None
    fixed_q_gen: Dict[int, float] = field(default_factory=dict)


@dataclass
class PfState:
    v_mag: np.ndarray
    v_ang: np.ndarray
    p_inj: np.ndarray
    q_inj: np.ndarray
    branch_flows: np.ndarray  # complex, shape (n_branch, 2)
    slack_p: float
    slack_q: float
    iterations: int
    p_gen: np.ndarray  # per generator
    q_gen: np.ndarray

    @property
    def voltage(self) -> np.ndarray:
        return self.v_mag * np.exp(1j * self.v_ang)


def power_injection(y: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Complex bus injections S = V conj(Y V)."""
    return v * np.conj(y @ v)


def dsbus_dv(y: np.ndarray, v: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Partial derivatives of bus injections w.r.t. voltage angle and magnitude."""
    i_bus = y @ v
    diag_v = np.diag(v)
    diag_i = np.diag(i_bus)
    diag_vnorm = np.diag(v / np.abs(v))
    ds_dvm = diag_v @ np.conj(y @ diag_vnorm) + np.conj(diag_i) @ diag_vnorm
    ds_dva = 1j * diag_v @ np.conj(diag_i - y @ diag_v)
    return ds_dva, ds_dvm


def newton_jacobian(
    y: np.ndarray, v: np.ndarray, pvpq: Sequence[int], pq: Sequence[int]
) -> np.ndarray:
    ds_dva, ds_dvm = dsbus_dv(y, v)
    pvpq = np.asarray(pvpq, dtype=int)
    pq = np.asarray(pq, dtype=int)
    j11 = ds_dva[np.ix_(pvpq, pvpq)].real
    j12 = ds_dvm[np.ix_(pvpq, pq)].real
    j21 = ds_dva[np.ix_(pq, pvpq)].imag
    j22 = ds_dvm[np.ix_(pq, pq)].imag
    return np.block([[j11, j12], [j21, j22]])


def mismatch_vector(
    y: np.ndarray, v: np.ndarray, s_spec: np.ndarray, pvpq: Sequence[int], pq: Sequence[int]
) -> np.ndarray:
    mis = power_injection(y, v) - s_spec
    return np.concatenate([mis[np.asarray(pvpq, dtype=int)].real, mis[np.asarray(pq, dtype=int)].imag])


def _bus_partition(spec: PfSpec) -> Tuple[int, np.ndarray, np.ndarray]:
    slack = spec.net.slack_bus
    pv = sorted({sp.bus for sp in spec.pv_setpoints if sp.bus != slack and sp.bus not in spec.fixed_q_gen})
    pq = [i for i in range(spec.net.n_bus) if i != slack and i not in pv]
    return slack, np.array(pv, dtype=int), np.array(pq, dtype=int)


def solve_pf(spec: PfSpec) -> PfState:
    """Solve the AC power flow by Newton-Raphson in polar coordinates."""
    net = spec.net
    y = spec.ybus.y
    n = net.n_bus
    slack, pv, pq = _bus_partition(spec)
    pvpq = np.concatenate([pv, pq])

    setpoint_v = {}
    p_sched = np.zeros(n)
    for sp in spec.pv_setpoints:
        setpoint_v.setdefault(sp.bus, sp.v_mag)
        if sp.bus != slack:
            p_sched[sp.bus] += sp.p_gen
    q_sched = np.zeros(n)
    for bus, q in spec.fixed_q_gen.items():
        q_sched[bus] += q
    s_spec = (p_sched - spec.p_demand) + 1j * (q_sched - spec.q_demand)

    if spec.warm_start is not None:
        vm = spec.warm_start.v_mag.copy()
        va = spec.warm_start.v_ang.copy()
    else:
        vm = np.ones(n)
        va = np.zeros(n)
    va[slack] = 0.0
    for bus, v_set in setpoint_v.items():
        if bus == slack or bus in pv:
            vm[bus] = v_set
    v = vm * np.exp(1j * va)

    f = mismatch_vector(y, v, s_spec, pvpq, pq)
    residual = float(np.max(np.abs(f))) if f.size else 0.0
    iterations = 0
    while residual > spec.tol:
        if iterations >= spec.max_iter or not np.isfinite(residual):
            raise PowerFlowError("diverged", f"residual {residual:.3e} after {iterations} iterations", residual, iterations)
        jac = newton_jacobian(y, v, pvpq, pq)
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
                dx = -scipy.linalg.solve(jac, f)
        except (scipy.linalg.LinAlgError, ValueError) as e:
            raise PowerFlowError("singular", f"Jacobian not invertible: {e}", residual, iterations) from e
        va[pvpq] += dx[: len(pvpq)]
        vm[pq] += dx[len(pvpq) :]
        v = vm * np.exp(1j * va)
        iterations += 1
        f = mismatch_vector(y, v, s_spec, pvpq, pq)
        residual = float(np.max(np.abs(f)))
        logger.debug(f"NR iteration {iterations}: max mismatch {residual:.3e}")

    return _assemble_state(spec, v, iterations)


def _assemble_state(spec: PfSpec, v: np.ndarray, iterations: int) -> PfState:
    net = spec.net
    slack = net.slack_bus
    s = power_injection(spec.ybus.y, v)
    s_gen_bus = s + spec.p_demand + 1j * spec.q_demand

    p_gen = np.zeros(net.n_gen)
    q_gen = np.zeros(net.n_gen)
    scheduled = {}
    for sp in spec.pv_setpoints:
        scheduled.setdefault(sp.bus, []).append(sp.p_gen)
    gens_at: Dict[int, list] = {}
    for i, gen in enumerate(net.generators):
        gens_at.setdefault(gen.bus, []).append(i)
    for bus, idx in gens_at.items():
        if bus == slack:
            others = idx[1:]
            sched = scheduled.get(bus, [])[1:]
            for i, p in zip(others, sched):
                p_gen[i] = p
            p_gen[idx[0]] = s_gen_bus[bus].real - sum(p_gen[i] for i in others)
        else:
            sched = scheduled.get(bus, [0.0] * len(idx))
            for i, p in zip(idx, sched):
                p_gen[i] = p
        q_gen[idx] = s_gen_bus[bus].imag / len(idx)

    return PfState(
        v_mag=np.abs(v),
        v_ang=np.angle(v),
        p_inj=s.real,
        q_inj=s.imag,
        branch_flows=spec.ybus.branch_flows(net, v),
        slack_p=float(s_gen_bus[slack].real),
        slack_q=float(s_gen_bus[slack].imag),
        iterations=iterations,
        p_gen=p_gen,
        q_gen=q_gen,
    )


def recover_full_state(
    net: Network,
    p_gen_nonslack: np.ndarray,
    v_gen: np.ndarray,
    p_demand: np.ndarray,
    q_demand: np.ndarray,
    ybus: Optional[AdmittanceMatrix] = None,
    enforce_q_limits: bool = True,
    tol: float = 1e-8,
    max_iter: int = 30,
    q_tol: float = 1e-6,
) -> PfState:
    """Rebuild the full operating point from a generator dispatch.

    ``p_gen_nonslack`` follows ``net.non_slack_generators``; ``v_gen`` has
    one magnitude per generator. With ``enforce_q_limits`` PV buses whose
    reactive output leaves [q_min, q_max] are switched to PQ at the violated
    limit and the flow is re-solved until no non-slack generator violates.
    """
    if ybus is None:
        ybus = build_ybus(net)
    p_gen_nonslack = np.asarray(p_gen_nonslack, dtype=float)
    v_gen = np.asarray(v_gen, dtype=float)
    if p_gen_nonslack.shape != (net.n_gen - 1,) or v_gen.shape != (net.n_gen,):
        raise ValueError(
            f"dispatch shapes {p_gen_nonslack.shape}/{v_gen.shape} do not match {net.n_gen} generators"
        )

    p_full = np.zeros(net.n_gen)
    p_full[net.non_slack_generators] = p_gen_nonslack
    setpoints = tuple(
        PvSetpoint(bus=gen.bus, p_gen=float(p_full[i]), v_mag=float(v_gen[i]))
        for i, gen in enumerate(net.generators)
    )
    spec = PfSpec(
        net=net,
        ybus=ybus,
        pv_setpoints=setpoints,
        p_demand=np.asarray(p_demand, dtype=float),
        q_demand=np.asarray(q_demand, dtype=float),
        tol=tol,
        max_iter=max_iter,
    )
    state = solve_pf(spec)
    if not enforce_q_limits:
        return state

    slack = net.slack_bus
    for _ in range(net.n_gen):
        switched = {}
        for bus in {g.bus for g in net.generators}:
            if bus == slack or bus in spec.fixed_q_gen:
                continue
            idx = [i for i, g in enumerate(net.generators) if g.bus == bus]
            q_bus = float(np.sum(state.q_gen[idx]))
            q_max = sum(net.generators[i].q_max for i in idx)
            q_min = sum(net.generators[i].q_min for i in idx)
            if q_bus > q_max + q_tol:
                switched[bus] = q_max
            elif q_bus < q_min - q_tol:
                switched[bus] = q_min
        if not switched:
            break
        logger.warning(f"Switching PV buses {sorted(switched)} to PQ at reactive limits")
        spec.fixed_q_gen.update(switched)
        spec.warm_start = state
        state = solve_pf(spec)
    return state
