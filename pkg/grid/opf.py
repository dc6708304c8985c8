"""
AC optimal power flow by a primal-dual interior-point method.

Decision variables are bus voltage angles and magnitudes plus generator
active and reactive outputs. The slack angle is pinned at zero; voltage
bounds are shrunk inward by the calibration margin so that labels produced
here stay strictly inside the limits a predictor is later judged against.
"""

import json
import logging
import time
import warnings
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import scipy.linalg

from .case_ingest import AdmittanceMatrix, Network, build_ybus
from .powerflow import PfState, dsbus_dv, power_injection


logger = logging.getLogger(__name__)

COST_SCALE = 1e-4


@dataclass
class IpmOptions:
    feastol: float = 1e-8
    gradtol: float = 1e-6
    comptol: float = 1e-9
    costtol: float = 1e-9
    max_iter: int = 150
    xi: float = 0.99995
    sigma: float = 0.1
    z0: float = 1.0
    alpha_min: float = 1e-8


@dataclass
class OpfProblem:
    net: Network
    calibration_lambda: float = 0.005
    p_demand: Optional[np.ndarray] = None
    q_demand: Optional[np.ndarray] = None
    ybus: Optional[AdmittanceMatrix] = None
    options: IpmOptions = field(default_factory=IpmOptions)

    def __post_init__(self):
        pd, qd = self.net.demand()
        if self.p_demand is None:
            self.p_demand = pd
        if self.q_demand is None:
            self.q_demand = qd
        self.p_demand = np.asarray(self.p_demand, dtype=float)
        self.q_demand = np.asarray(self.q_demand, dtype=float)
        if self.ybus is None:
            self.ybus = build_ybus(self.net)
        if self.calibration_lambda < 0:
            raise ValueError(f"calibration margin must be nonnegative, got {self.calibration_lambda}")

    def voltage_bounds(self) -> Tuple[np.ndarray, np.ndarray]:
        """Calibrated voltage magnitude bounds."""
        lam = self.calibration_lambda
        lo = np.array([b.v_min for b in self.net.buses]) + lam
        hi = np.array([b.v_max for b in self.net.buses]) - lam
        bad = np.flatnonzero(lo > hi)
        if bad.size:
            raise ValueError(f"calibration margin {lam} empties the voltage band at buses {bad.tolist()}")
        return lo, hi


@dataclass
class OpfSolution:
    status: str  # "optimal" | "infeasible" | "max_iter"
    objective: float
    state: Optional[PfState]
    multipliers: Dict[str, np.ndarray]
    iterations: int
    constraint_residual: float
    stationarity: float
    solve_time_s: float = 0.0

    @property
    def ok(self) -> bool:
        return self.status == "optimal"


@dataclass
class Violation:
    constraint: str
    index: int
    value: float
    limit: float
    amount: float


@dataclass
class ConstraintSlack:
    """Signed distance to one side of a box limit; negative means violated."""

    constraint: str
    index: int
    value: float
    limit: float
    slack: float


@dataclass
class ViolationReport:
    violations: List[Violation]
    max_violation: float
    balance_residual: float
    stationarity: float
    tol: float
    slacks: List[ConstraintSlack] = field(default_factory=list)

    @property
    def feasible(self) -> bool:
        return self.max_violation <= self.tol and self.balance_residual <= self.tol

    def flagged(self, constraint: str) -> List[int]:
        return [v.index for v in self.violations if v.constraint == constraint]

    @property
    def min_slack(self) -> float:
        return min((s.slack for s in self.slacks), default=float("inf"))

    def to_json(self) -> str:
        doc = {
            "feasible": self.feasible,
            "tol": self.tol,
            "max_violation": self.max_violation,
            "balance_residual": self.balance_residual,
            "stationarity": self.stationarity,
            "violations": [asdict(v) for v in self.violations],
            "slacks": [asdict(s) for s in self.slacks],
        }
        return json.dumps(doc, indent=2)


def total_cost(net: Network, p_gen: np.ndarray) -> float:
    return float(sum(gen.cost(p) for gen, p in zip(net.generators, p_gen)))


def d2sbus_dv2(y: np.ndarray, v: np.ndarray, lam: np.ndarray) -> Tuple[np.ndarray, ...]:
    """Second derivatives of lam^T S(V) in polar coordinates (aa, av, va, vv blocks)."""
    i_bus = y @ v
    a = np.diag(lam * v)
    b = y @ np.diag(v)
    c = a @ np.conj(b)
    d = y.conj().T @ np.diag(v)
    e = np.diag(np.conj(v)) @ (d @ np.diag(lam) - np.diag(d @ lam))
    f = c - a @ np.diag(np.conj(i_bus))
    g = np.diag(1.0 / np.abs(v))
    gaa = e + f
    gva = 1j * g @ (e - f)
    gav = gva.T
    gvv = g @ (c + c.T) @ g
    return gaa, gav, gva, gvv


class _OpfModel:
    """Callbacks of the nonlinear program in the variable order [va, vm, pg, qg]."""

    def __init__(self, prob: OpfProblem):
        net = prob.net
        self.prob = prob
        self.y = prob.ybus.y
        self.n = net.n_bus
        self.ng = net.n_gen
        self.nx = 2 * self.n + 2 * self.ng
        self.cg = net.gen_bus_matrix()
        self.c2 = np.array([g.cost_c2 for g in net.generators])
        self.c1 = np.array([g.cost_c1 for g in net.generators])
        self.c0 = np.array([g.cost_c0 for g in net.generators])

        v_lo, v_hi = prob.voltage_bounds()
        lo = np.concatenate([
            np.full(self.n, -np.inf), v_lo,
            [g.p_min for g in net.generators], [g.q_min for g in net.generators],
        ])
        hi = np.concatenate([
            np.full(self.n, np.inf), v_hi,
            [g.p_max for g in net.generators], [g.q_max for g in net.generators],
        ])
        lo[net.slack_bus] = hi[net.slack_bus] = 0.0
        self.lo, self.hi = lo, hi

        fixed = np.flatnonzero(np.isfinite(lo) & (hi - lo <= 1e-10))
        self.a_eq = np.zeros((len(fixed), self.nx))
        self.a_eq[np.arange(len(fixed)), fixed] = 1.0
        self.b_eq = lo[fixed]

        free = np.setdiff1d(np.arange(self.nx), fixed)
        upper = free[np.isfinite(hi[free])]
        lower = free[np.isfinite(lo[free])]
        self.a_in = np.zeros((len(upper) + len(lower), self.nx))
        self.a_in[np.arange(len(upper)), upper] = 1.0
        self.a_in[len(upper) + np.arange(len(lower)), lower] = -1.0
        self.b_in = np.concatenate([hi[upper], -lo[lower]])
        self.ineq_labels = [("upper", int(i)) for i in upper] + [("lower", int(i)) for i in lower]

        self.va = slice(0, self.n)
        self.vm = slice(self.n, 2 * self.n)
        self.pg = slice(2 * self.n, 2 * self.n + self.ng)
        self.qg = slice(2 * self.n + self.ng, self.nx)

    def initial_point(self) -> np.ndarray:
        lo = np.where(np.isfinite(self.lo), self.lo, -1e10)
        hi = np.where(np.isfinite(self.hi), self.hi, 1e10)
        x0 = 0.5 * (lo + hi)
        x0[self.va] = 0.0
        return x0

    def voltage(self, x: np.ndarray) -> np.ndarray:
        return x[self.vm] * np.exp(1j * x[self.va])

    def cost(self, x: np.ndarray) -> Tuple[float, np.ndarray]:
        pg = x[self.pg]
        f = float(np.sum(self.c2 * pg * pg + self.c1 * pg + self.c0))
        df = np.zeros(self.nx)
        df[self.pg] = 2.0 * self.c2 * pg + self.c1
        return f * COST_SCALE, df * COST_SCALE

    def constraints(self, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Equalities g(x) = 0 and their transposed Jacobian (nx by neq)."""
        v = self.voltage(x)
        mis = power_injection(self.y, v) + self.prob.p_demand + 1j * self.prob.q_demand
        mis = mis - self.cg @ (x[self.pg] + 1j * x[self.qg])
        g = np.concatenate([mis.real, mis.imag, self.a_eq @ x - self.b_eq])

        ds_dva, ds_dvm = dsbus_dv(self.y, v)
        jac = np.zeros((2 * self.n, self.nx))
        jac[: self.n, self.va] = ds_dva.real
        jac[: self.n, self.vm] = ds_dvm.real
        jac[: self.n, self.pg] = -self.cg
        jac[self.n :, self.va] = ds_dva.imag
        jac[self.n :, self.vm] = ds_dvm.imag
        jac[self.n :, self.qg] = -self.cg
        return g, np.vstack([jac, self.a_eq]).T

    def hessian(self, x: np.ndarray, lam: np.ndarray) -> np.ndarray:
        v = self.voltage(x)
        lam_p, lam_q = lam[: self.n], lam[self.n : 2 * self.n]
        gp = d2sbus_dv2(self.y, v, lam_p.astype(complex))
        gq = d2sbus_dv2(self.y, v, lam_q.astype(complex))
        block = np.block([[gp[0], gp[1]], [gp[2], gp[3]]]).real + np.block([[gq[0], gq[1]], [gq[2], gq[3]]]).imag
        hess = np.zeros((self.nx, self.nx))
        hess[: 2 * self.n, : 2 * self.n] = 0.5 * (block + block.T)
        pg = np.arange(self.pg.start, self.pg.stop)
        hess[pg, pg] += 2.0 * self.c2 * COST_SCALE
        return hess

    def inequalities(self, x: np.ndarray) -> np.ndarray:
        return self.a_in @ x - self.b_in


def _solve_kkt(m: np.ndarray, dg: np.ndarray, n_rhs: np.ndarray, g: np.ndarray) -> np.ndarray:
    neq = dg.shape[1]
    kkt = np.block([[m, dg], [dg.T, np.zeros((neq, neq))]])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
        return scipy.linalg.solve(kkt, -np.concatenate([n_rhs, g]), check_finite=False)


def solve_opf(prob: OpfProblem) -> OpfSolution:
    """Minimise total generation cost subject to the AC network equations and limits.

    Never raises on non-convergence; the outcome is reported in ``status``.
    """
    started = time.perf_counter()
    net = prob.net
    model = _OpfModel(prob)
    opts = prob.options

    if float(np.sum(prob.p_demand)) > sum(g.p_max for g in net.generators):
        logger.debug("Demand exceeds total generation capacity")
        return _failed(prob, "infeasible", 0, started)

    x = model.initial_point()
    f, df = model.cost(x)
    g, dg = model.constraints(x)
    h = model.inequalities(x)
    dh = model.a_in.T
    neq, niq = g.size, h.size

    gamma = 1.0
    lam = np.zeros(neq)
    z = opts.z0 * np.ones(niq)
    z[h < -opts.z0] = -h[h < -opts.z0]
    mu = opts.z0 * np.ones(niq)
    lx = df + dg @ lam + dh @ mu
    f0 = f

    status = "max_iter"
    feascond = np.inf
    gradcond = np.inf
    iteration = 0
    for iteration in range(1, opts.max_iter + 1):
        lxx = model.hessian(x, lam)
        zinv = 1.0 / z
        dh_zinv = dh * zinv
        m = lxx + (dh_zinv * mu) @ dh.T
        n_rhs = lx + dh_zinv @ (mu * h + gamma)
        try:
            step = _solve_kkt(m, dg, n_rhs, g)
        except (scipy.linalg.LinAlgError, ValueError):
            status = "infeasible"
            break
        dx, dlam = step[: model.nx], step[model.nx :]
        dz = -h - z - dh.T @ dx
        dmu = -mu + zinv * (gamma - mu * dz)

        neg = dz < 0
        alphap = min(opts.xi * np.min(z[neg] / -dz[neg]), 1.0) if neg.any() else 1.0
        neg = dmu < 0
        alphad = min(opts.xi * np.min(mu[neg] / -dmu[neg]), 1.0) if neg.any() else 1.0

        x = x + alphap * dx
        z = z + alphap * dz
        lam = lam + alphad * dlam
        mu = mu + alphad * dmu
        if niq:
            gamma = opts.sigma * float(z @ mu) / niq

        f, df = model.cost(x)
        g, dg = model.constraints(x)
        h = model.inequalities(x)
        lx = df + dg @ lam + dh @ mu

        norm_x = float(np.max(np.abs(x)))
        maxh = max(0.0, float(np.max(h))) if niq else 0.0
        feascond = max(float(np.max(np.abs(g))), maxh) / (1.0 + max(norm_x, float(np.max(np.abs(z))) if niq else 0.0))
        gradcond = float(np.max(np.abs(lx))) / (1.0 + max(float(np.max(np.abs(lam))), float(np.max(np.abs(mu))) if niq else 0.0))
        compcond = float(z @ mu) / (1.0 + norm_x)
        costcond = abs(f - f0) / (1.0 + abs(f0))
        logger.debug(
            f"IPM it {iteration}: f={f / COST_SCALE:.6f} feas={feascond:.2e} grad={gradcond:.2e} "
            f"comp={compcond:.2e} step=({alphap:.2e}, {alphad:.2e})"
        )

        if feascond < opts.feastol and gradcond < opts.gradtol and compcond < opts.comptol and costcond < opts.costtol:
            status = "optimal"
            break
        if (
            not np.all(np.isfinite(x))
            or alphap < opts.alpha_min
            or alphad < opts.alpha_min
            or gamma < np.finfo(float).eps
            or gamma > 1.0 / np.finfo(float).eps
        ):
            status = "infeasible"
            break
        f0 = f

    if status == "max_iter" and feascond > 1e-3:
        status = "infeasible"
    if status != "optimal":
        logger.debug(f"OPF for {net.name} ended with status {status} after {iteration} iterations")
        return _failed(prob, status, iteration, started)

    state = _state_from_x(prob, model, x, iteration)
    return OpfSolution(
        status=status,
        objective=f / COST_SCALE,
        state=state,
        multipliers={"equality": lam, "inequality": mu},
        iterations=iteration,
        constraint_residual=float(np.max(np.abs(g))),
        stationarity=float(np.max(np.abs(lx))),
        solve_time_s=time.perf_counter() - started,
    )


def _failed(prob: OpfProblem, status: str, iterations: int, started: float) -> OpfSolution:
    return OpfSolution(
        status=status,
        objective=float("nan"),
        state=None,
        multipliers={},
        iterations=iterations,
        constraint_residual=float("nan"),
        stationarity=float("nan"),
        solve_time_s=time.perf_counter() - started,
    )


def _state_from_x(prob: OpfProblem, model: _OpfModel, x: np.ndarray, iterations: int) -> PfState:
    net = prob.net
    v = model.voltage(x)
    s = power_injection(model.y, v)
    pg, qg = x[model.pg].copy(), x[model.qg].copy()
    slack_gen = net.slack_generator
    return PfState(
        v_mag=x[model.vm].copy(),
        v_ang=x[model.va].copy(),
        p_inj=s.real,
        q_inj=s.imag,
        branch_flows=prob.ybus.branch_flows(net, v),
        slack_p=float(pg[slack_gen]),
        slack_q=float(qg[slack_gen]),
        iterations=iterations,
        p_gen=pg,
        q_gen=qg,
    )


def check_operating_point(
    net: Network,
    p_gen: np.ndarray,
    q_gen: np.ndarray,
    v_mag: np.ndarray,
    margin: float = 0.0,
    tol: float = 1e-6,
) -> List[Violation]:
    """Box-limit violations beyond ``tol`` (voltage band shrunk by ``margin``)."""
    found: List[Violation] = []

    def scan(name: str, values: np.ndarray, lows: np.ndarray, highs: np.ndarray) -> None:
        for i, (val, lo, hi) in enumerate(zip(values, lows, highs)):
            if val < lo - tol:
                found.append(Violation(f"{name}_min", i, float(val), float(lo), float(lo - val)))
            elif val > hi + tol:
                found.append(Violation(f"{name}_max", i, float(val), float(hi), float(val - hi)))

    gens = net.generators
    scan("p_gen", p_gen, np.array([g.p_min for g in gens]), np.array([g.p_max for g in gens]))
    scan("q_gen", q_gen, np.array([g.q_min for g in gens]), np.array([g.q_max for g in gens]))
    scan(
        "v_mag",
        v_mag,
        np.array([b.v_min for b in net.buses]) + margin,
        np.array([b.v_max for b in net.buses]) - margin,
    )
    return found


def constraint_slacks(
    net: Network,
    p_gen: np.ndarray,
    q_gen: np.ndarray,
    v_mag: np.ndarray,
    margin: float = 0.0,
) -> List[ConstraintSlack]:
    """One signed slack per side of every generator and voltage box limit."""
    out: List[ConstraintSlack] = []

    def sides(name: str, values: np.ndarray, lows: np.ndarray, highs: np.ndarray) -> None:
        for i, (val, lo, hi) in enumerate(zip(values, lows, highs)):
            out.append(ConstraintSlack(f"{name}_min", i, float(val), float(lo), float(val - lo)))
            out.append(ConstraintSlack(f"{name}_max", i, float(val), float(hi), float(hi - val)))

    gens = net.generators
    sides("p_gen", p_gen, np.array([g.p_min for g in gens]), np.array([g.p_max for g in gens]))
    sides("q_gen", q_gen, np.array([g.q_min for g in gens]), np.array([g.q_max for g in gens]))
    sides(
        "v_mag",
        v_mag,
        np.array([b.v_min for b in net.buses]) + margin,
        np.array([b.v_max for b in net.buses]) - margin,
    )
    return out


def balance_residual(
    net: Network, ybus: AdmittanceMatrix, state: PfState, p_demand: np.ndarray, q_demand: np.ndarray
) -> float:
    """Largest nodal power mismatch of an operating point."""
    s = power_injection(ybus.y, state.voltage)
    cg = net.gen_bus_matrix()
    mis = s + p_demand + 1j * q_demand - cg @ (state.p_gen + 1j * state.q_gen)
    return float(np.max(np.abs(np.concatenate([mis.real, mis.imag]))))


def audit_solution(prob: OpfProblem, sol: OpfSolution, tol: float = 1e-6) -> ViolationReport:
    """Per-constraint audit of a solution against the calibrated problem."""
    if sol.state is None:
        raise ValueError(f"cannot audit a solution with status {sol.status!r}")
    state = sol.state
    violations = check_operating_point(
        prob.net, state.p_gen, state.q_gen, state.v_mag, margin=prob.calibration_lambda, tol=tol
    )
    residual = balance_residual(prob.net, prob.ybus, state, prob.p_demand, prob.q_demand)
    if abs(state.v_ang[prob.net.slack_bus]) > tol:
        violations.append(Violation("slack_angle", prob.net.slack_bus, float(state.v_ang[prob.net.slack_bus]), 0.0,
                                    abs(float(state.v_ang[prob.net.slack_bus]))))
    return ViolationReport(
        violations=violations,
        max_violation=max((v.amount for v in violations), default=0.0),
        balance_residual=residual,
        stationarity=sol.stationarity,
        tol=tol,
        slacks=constraint_slacks(prob.net, state.p_gen, state.q_gen, state.v_mag, margin=prob.calibration_lambda),
    )
