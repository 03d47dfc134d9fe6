"""Closed-loop simulation: the coupled MPC scheme and the two baselines."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .. import _kernel, net_graph
from ..aux_control import delta_matrix
from ..mpc import (DecisionVars, InfeasibleError, ProblemParams, auxiliary_decision,
                   constraint_violations, max_violation, predict, shift_warm_start, solve)
from ..vehicle import Pose, integrate, output_y
from .scenario import Scenario

log = logging.getLogger(__name__)


class SimulationAborted(RuntimeError):
    """Raised when an agent's optimization fails; carries the partial trace."""

    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = trace


class SnapshotBus:
    """Once-per-sample exchange of coordination values.

    Agents publish their value for sample ``k`` and read their neighbors'
    values for the same sample. Every read is logged so tests can audit
    exactly which data each solve consumed.
    """

    def __init__(self, graph: net_graph.CommGraph):
        self.graph = graph
        self._values: dict[int, dict[int, float]] = {}
        self.reads: list[tuple[int, int, tuple[int, ...]]] = []

    def publish(self, k: int, agent: int, gamma: float) -> None:
        self._values.setdefault(k, {})[agent] = float(gamma)

    def read(self, k: int, agent: int) -> dict[int, float]:
        snap = self._values.get(k, {})
        nbrs = self.graph.neighbors(agent)
        missing = [j for j in nbrs if j not in snap]
        if missing:
            raise KeyError(f"sample {k}: agent {agent} has no value from {missing}")
        self.reads.append((k, agent, tuple(nbrs)))
        return {j: snap[j] for j in nbrs}

    def drop_before(self, k: int) -> None:
        for old in [s for s in self._values if s < k]:
            del self._values[old]


@dataclass
class Trace:
    """Recorded trajectories. Per-record arrays are indexed ``[record, agent, ...]``,
    per-sample arrays ``[sample, agent]``."""

    mode: str
    n_agents: int
    t: np.ndarray
    p: np.ndarray
    R: np.ndarray
    gamma: np.ndarray
    eta: np.ndarray
    y: np.ndarray
    u: np.ndarray
    v_gamma: np.ndarray
    u_gamma_aux: np.ndarray
    phi: np.ndarray
    J_star: np.ndarray
    samples: dict = field(default_factory=dict)
    completed: bool = True
    error: Optional[str] = None

    @property
    def y_norm(self) -> np.ndarray:
        return np.linalg.norm(self.y, axis=-1)

    def tracking_cost(self) -> float:
        """Sum over agents of the time integral of ``|y|^2`` (trapezoid on the records)."""
        return float(np.trapezoid(np.sum(self.y ** 2, axis=(1, 2)), self.t))


class _Recorder:
    def __init__(self, n_agents, mode):
        self.n = n_agents
        self.mode = mode
        self.rows = {k: [] for k in ("t", "p", "R", "gamma", "eta", "y", "u", "v_gamma",
                                     "u_gamma_aux", "phi", "J_star")}
        self.samples = {}

    def add(self, **kw):
        for k, v in kw.items():
            self.rows[k].append(np.array(v, dtype=float, copy=True))

    def sample(self, **kw):
        for k, v in kw.items():
            self.samples.setdefault(k, []).append(np.array(v, copy=True))

    def build(self, completed=True, error=None) -> Trace:
        arrays = {k: np.stack(v) if v else np.zeros((0,)) for k, v in self.rows.items()}
        samples = {k: np.stack(v) for k, v in self.samples.items()}
        return Trace(mode=self.mode, n_agents=self.n, samples=samples, completed=completed,
                     error=error, **arrays)


def _outputs(sc: Scenario, p, R, gamma):
    return np.stack([output_y(Pose(p[i], R[i]), sc.agents[i].offset, sc.agents[i].path, gamma[i])
                     for i in range(sc.n_agents)])


def _phi(sc: Scenario, gamma) -> float:
    return net_graph.disagreement_fn(gamma, sc.graph).phi


def _initial_state(sc: Scenario):
    p = np.stack([a.pose.p for a in sc.agents])
    R = np.stack([a.pose.R for a in sc.agents])
    gamma = np.array([a.gamma0 for a in sc.agents], dtype=float)
    eta = np.array([a.eta0 for a in sc.agents], dtype=float)
    return p, R, gamma, eta


class _HeldSegments:
    """Per-agent piecewise-constant inputs over one sample interval."""

    held = True

    def __init__(self, t_k, seg_len, u, v, aux):
        self.t_k = t_k
        self.seg_len = np.asarray(seg_len, dtype=float)
        self.u = u          # (A, nseg, 3)
        self.v = v          # (A, nseg)
        self.aux = aux      # (A,)
        self.rows = np.arange(len(aux))

    def __call__(self, t, *_):
        nseg = self.v.shape[1]
        idx = np.floor((t - self.t_k) / self.seg_len + 1e-9).astype(int)
        idx = np.clip(idx, 0, nseg - 1)
        return self.u[self.rows, idx], self.v[self.rows, idx], self.aux


def _solve_agent(sc: Scenario, i: int, params: ProblemParams, prev: Optional[DecisionVars],
                 delta_prev: Optional[float]):
    a = sc.agents[i]
    model = sc.model(i)
    if prev is None:
        warm = auxiliary_decision(params, a.weights, model)
    else:
        warm = shift_warm_start(prev, None, delta_prev, params, a.weights, model)
    warm_pred = predict(params, warm, model, a.weights)
    warm_viol = max_violation(constraint_violations(params, warm_pred, warm, a.weights, model))
    res = solve(params, a.weights, model, warm=warm, config=sc.solver)
    return warm, warm_viol, res


def run_cpf(sc: Scenario, workers: int = 1, bus: Optional[SnapshotBus] = None) -> Trace:
    """Sampled-data distributed MPC closed loop.

    At every sample each agent reads its neighbors' coordination values
    through the snapshot bus, warm-starts from its shifted previous solution,
    solves, and applies the optimal inputs open loop until the next sample.
    """
    A = sc.n_agents
    tm = sc.timing
    p, R, gamma, eta = _initial_state(sc)
    bus = bus or SnapshotBus(sc.graph)
    rec = _Recorder(A, "cpf")
    prev: list[Optional[DecisionVars]] = [None] * A
    delta_prev = None
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    J_now = np.zeros(A)
    seg_len = np.array([a.weights.seg_len for a in sc.agents])
    global_step = 0
    try:
        for k in range(len(tm.samples) - 1):
            t_k = float(tm.samples[k])
            delta_k = float(tm.samples[k + 1] - t_k)
            for i in range(A):
                bus.publish(k, i, gamma[i])
            params = [ProblemParams(t=t_k, pose=Pose(p[i].copy(), R[i].copy()), gamma=float(gamma[i]),
                                    gamma_neighbors=bus.read(k, i), eta=float(eta[i]), t0=tm.t0,
                                    delta_k=delta_k) for i in range(A)]
            bus.drop_before(k)
            jobs = [(sc, i, params[i], prev[i], delta_prev) for i in range(A)]
            try:
                if pool is None:
                    results = [_solve_agent(*j) for j in jobs]
                else:
                    results = list(pool.map(lambda j: _solve_agent(*j), jobs))
            except InfeasibleError as exc:
                rec.add(t=t_k, p=p, R=R, gamma=gamma, eta=eta, y=_outputs(sc, p, R, gamma),
                        u=np.full((A, 3), np.nan), v_gamma=np.full(A, np.nan),
                        u_gamma_aux=np.full(A, np.nan), phi=_phi(sc, gamma),
                        J_star=np.full(A, np.nan))
                trace = rec.build(completed=False, error=f"t={t_k:g}: {exc}")
                raise SimulationAborted(trace.error, trace) from exc
            k_con = np.array([net_graph.consensus_law(i, gamma[i], params[i].gamma_neighbors,
                                                      sc.graph, sc.gain) for i in range(A)])
            aux = k_con / delta_k
            U = np.stack([r.dec.u for _, _, r in results])
            V = np.stack([r.dec.v for _, _, r in results])
            J_now = np.array([r.cost for _, _, r in results])
            rec.sample(t=t_k, gamma=gamma, eta=eta, k_con=k_con, J_star=J_now,
                       stage_integral=[r.prediction.first_interval_stage for _, _, r in results],
                       iterations=[r.iterations for _, _, r in results],
                       evaluations=[r.evaluations for _, _, r in results],
                       max_violation=[r.max_violation for _, _, r in results],
                       warm_violation=[wv for _, wv, _ in results],
                       used_warm=[r.used_warm for _, _, r in results],
                       y_norm=np.linalg.norm(_outputs(sc, p, R, gamma), axis=1))
            inputs = _HeldSegments(t_k, seg_len, U, V, aux)
            n_steps = int(round(delta_k / tm.dt))

            def record(t, p_, R_, g_, e_):
                u, v, ua = inputs(t)
                rec.add(t=t, p=p_, R=R_, gamma=g_, eta=e_, y=_outputs(sc, p_, R_, g_), u=u,
                        v_gamma=v, u_gamma_aux=ua, phi=_phi(sc, g_), J_star=J_now)

            record(t_k, p, R, gamma, eta)
            base = global_step

            def cb(step, t, p_, R_, g_, e_):
                if (base + step + 1) % tm.record_stride == 0 and step + 1 < n_steps:
                    record(t, p_, R_, g_, e_)

            pose, gamma, eta = integrate(Pose(p, R), gamma, eta, inputs, tm.dt, n_steps, t0=t_k,
                                         g=sc.speed, callback=cb)
            p, R = pose.p, pose.R
            global_step += n_steps
            prev = [r.dec for _, _, r in results]
            delta_prev = delta_k
        t_end = float(tm.samples[-1])
        rec.add(t=t_end, p=p, R=R, gamma=gamma, eta=eta, y=_outputs(sc, p, R, gamma),
                u=inputs(t_end - 1e-12)[0], v_gamma=inputs(t_end - 1e-12)[1],
                u_gamma_aux=inputs(t_end - 1e-12)[2], phi=_phi(sc, gamma), J_star=J_now)
    finally:
        if pool is not None:
            pool.shutdown()
    return rec.build()


def run_decoupled(sc: Scenario) -> Trace:
    """Baseline: auxiliary path-following law plus the sampled consensus signal.

    No optimization and no ``eta`` shaping; the consensus signal never sees
    the tracking error, so the coordination values do not depend on ``Q``.
    """
    A = sc.n_agents
    tm = sc.timing
    p, R, gamma, eta = _initial_state(sc)
    eta = np.zeros(A)
    rec = _Recorder(A, "decoupled")
    law_args = (*_kernel.stacked_path_params([a.path for a in sc.agents]),
                np.stack([a.gains.K for a in sc.agents]),
                np.stack([delta_matrix(a.offset)[1] for a in sc.agents]),
                np.array([a.gains.y_switch for a in sc.agents]),
                np.stack([a.offset for a in sc.agents]))
    global_step = 0
    J_nan = np.full(A, np.nan)
    for k in range(len(tm.samples) - 1):
        t_k = float(tm.samples[k])
        delta_k = float(tm.samples[k + 1] - t_k)
        k_con = net_graph.consensus_step(gamma, sc.graph, sc.gain)
        aux = k_con / delta_k
        rec.sample(t=t_k, gamma=gamma, k_con=k_con,
                   y_norm=np.linalg.norm(_outputs(sc, p, R, gamma), axis=1))

        def feedback(t, p_, R_, g_, e_, aux=aux):
            speed = sc.speed_at(t) + aux
            u = _kernel.aux_law_batch(np.ascontiguousarray(p_), np.ascontiguousarray(R_),
                                      np.ascontiguousarray(g_, dtype=float), speed, *law_args)
            return u, np.zeros(A), aux

        def record(t, p_, R_, g_, e_):
            u, v, ua = feedback(t, p_, R_, g_, e_)
            rec.add(t=t, p=p_, R=R_, gamma=g_, eta=e_, y=_outputs(sc, p_, R_, g_), u=u,
                    v_gamma=v, u_gamma_aux=ua, phi=_phi(sc, g_), J_star=J_nan)

        n_steps = int(round(delta_k / tm.dt))
        record(t_k, p, R, gamma, eta)
        base = global_step

        def cb(step, t, p_, R_, g_, e_):
            if (base + step + 1) % tm.record_stride == 0 and step + 1 < n_steps:
                record(t, p_, R_, g_, e_)

        pose, gamma, eta = integrate(Pose(p, R), gamma, eta, feedback, tm.dt, n_steps, t0=t_k,
                                     g=sc.speed, callback=cb)
        p, R = pose.p, pose.R
        global_step += n_steps
    record(float(tm.samples[-1]), p, R, gamma, eta)
    return rec.build()


def run_consensus_only(sc: Scenario, eta_fn: Optional[Callable[[float], np.ndarray]] = None,
                       record_substeps: bool = False) -> Trace:
    """Coordination values alone under the sampled consensus signal.

    Integrates ``gamma' = g(t) + u_aux(t) + eta(t)`` with RK4,
    ``consensus_substeps`` steps per sample interval. The common speed ``g``
    is carried as a separate scalar offset: it is identical for every agent,
    so keeping it out of the per-agent state means it cannot leak rounding
    into the disagreement. ``eta_fn`` optionally injects an external signal;
    its integral over each interval is stored as ``samples['eta_int']``.
    """
    A = sc.n_agents
    tm = sc.timing
    zeta = np.array([a.gamma0 for a in sc.agents], dtype=float)
    common = 0.0
    rec = _Recorder(A, "consensus")
    nan3 = np.full((A, 3), np.nan)
    nanR = np.full((A, 3, 3), np.nan)
    nanA = np.full(A, np.nan)
    zeros = np.zeros(A)

    def eta_at(t):
        return zeros if eta_fn is None else np.asarray(eta_fn(t), dtype=float)

    def record(t, aux):
        rec.add(t=t, p=nan3, R=nanR, gamma=zeta + common, eta=eta_at(t), y=nan3, u=nan3,
                v_gamma=zeros, u_gamma_aux=aux, phi=_phi(sc, zeta), J_star=nanA)

    m = sc.consensus_substeps
    n_samples = len(tm.samples)
    for k in range(n_samples):
        t_k = float(tm.samples[k])
        k_con = net_graph.consensus_step(zeta, sc.graph, sc.gain)
        if k == n_samples - 1:
            rec.sample(t=t_k, gamma=zeta + common, zeta=zeta, k_con=k_con, eta_int=zeros)
            record(t_k, zeros)
            break
        delta_k = float(tm.samples[k + 1] - t_k)
        aux = k_con / delta_k
        record(t_k, aux)
        start = (zeta.copy(), zeta + common)
        h = delta_k / m
        eta_int = np.zeros(A)
        for s in range(m):
            t = t_k + s * h
            # RK4 on a right-hand side that depends on time only; the held
            # aux term is integrated in closed form to avoid summing rounding
            eta_int += h / 6.0 * (eta_at(t) + 4.0 * eta_at(t + 0.5 * h) + eta_at(t + h))
            elapsed = delta_k if s + 1 == m else (s + 1) * h
            zeta = start[0] + aux * elapsed + eta_int
            common += h / 6.0 * (sc.speed_at(t) + 4.0 * sc.speed_at(t + 0.5 * h)
                                 + sc.speed_at(t + h))
            if record_substeps and s + 1 < m:
                record(t + h, aux)
        rec.sample(t=t_k, gamma=start[1], zeta=start[0], k_con=k_con, eta_int=eta_int)
    return rec.build()
