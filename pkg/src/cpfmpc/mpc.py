"""Sampled-data MPC for one agent: prediction, cost, constraints and solver.

Transcription is direct single shooting. Decision signals are piecewise
constant on ``n_segments`` equal segments of the horizon. Each segment is
split into ``substeps`` RK4 steps (even, so that composite Simpson applies
per segment). The coordination value and ``eta`` are integrated in closed
form: both are driven by known signals and do not depend on the vehicle
state.

Box constraints on the inputs are handled by the bounded quasi-Newton
method (L-BFGS-B). The remaining constraints (terminal ball on ``eta``,
exponential envelope on ``eta``, optional output box) enter through an
exterior quadratic penalty whose weight grows until they hold. Gradients
are central finite differences, evaluated as one batched rollout.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Optional, Union

import numpy as np
from scipy.optimize import minimize

from . import _kernel, net_graph
from .aux_control import (AuxConsensusSignal, AuxGains, aux_consensus_signal, aux_input_bounds,
                          delta_matrix, k_aux_raw)
from .paths import PathSpec, eval_path, eval_path_derivative
from .vehicle import Pose, reorthonormalize, skew

log = logging.getLogger(__name__)

SpeedFn = Union[float, Callable[[float], float]]


class InfeasibleError(RuntimeError):
    """Solver could not reach a feasible point within its budget."""

    def __init__(self, message, best=None, violations=None):
        super().__init__(message)
        self.best = best
        self.violations = violations


def _psd(M, name):
    M = np.asarray(M, dtype=float)
    if M.shape != (3, 3) or not np.allclose(M, M.T, atol=1e-12):
        raise ValueError(f"{name} must be a symmetric 3x3 matrix")
    if np.linalg.eigvalsh(M)[0] < -1e-12:
        raise ValueError(f"{name} must be positive semidefinite")
    return M


@dataclass(frozen=True)
class MpcWeights:
    Q: np.ndarray = field(default_factory=lambda: 100.0 * np.eye(3))
    U: np.ndarray = field(default_factory=lambda: np.eye(3))
    Qc: float = 1.0
    Uc: float = 1.0
    m_eta: float = 2.0
    lambda_eta: float = 1.0
    a_eta: float = 1e3
    envelope_rate: float = 1e-3
    r_eta: float = 1.0
    T: float = 0.4
    n_segments: int = 8
    substeps: int = 2
    v_gamma_max: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "Q", _psd(self.Q, "Q"))
        object.__setattr__(self, "U", _psd(self.U, "U"))
        if not (self.Qc > 0 and self.Uc > 0):
            raise ValueError("Qc and Uc must be positive")
        if self.m_eta < 0 or self.a_eta < 0 or self.r_eta < 0:
            raise ValueError("m_eta, a_eta and r_eta must be non-negative")
        if not self.lambda_eta > 0:
            raise ValueError("lambda_eta must be positive")
        if not self.T > 0:
            raise ValueError("horizon T must be positive")
        if self.n_segments < 1:
            raise ValueError("n_segments must be >= 1")
        if self.substeps < 2 or self.substeps % 2:
            raise ValueError("substeps must be a positive even integer")
        # terminal decrease of the eta cost along v = -lambda_eta * eta
        if self.Qc + self.lambda_eta ** 2 * self.Uc > self.m_eta * self.lambda_eta * (1 + 1e-12):
            raise ValueError(
                "need Qc + lambda_eta^2 Uc <= m_eta lambda_eta "
                "(terminal eta cost must dominate the consensus stage cost)")
        if self.v_gamma_max is None:
            object.__setattr__(self, "v_gamma_max", self.r_eta * self.lambda_eta)
        if self.v_gamma_max < self.r_eta * self.lambda_eta * (1 - 1e-12):
            raise ValueError("v_gamma box must contain the ball of radius r_eta * lambda_eta")

    @property
    def seg_len(self) -> float:
        return self.T / self.n_segments

    @property
    def q_max(self) -> float:
        return float(np.linalg.eigvalsh(self.Q)[-1])


@dataclass(frozen=True)
class SolverConfig:
    max_iter: int = 30
    fd_step: float = 1e-6
    penalty0: float = 1e3
    penalty_growth: float = 10.0
    penalty_rounds: int = 4
    feas_tol: float = 1e-6
    gtol: float = 1e-7
    ftol: float = 1e-10


@dataclass
class AgentModel:
    """Everything about one agent that the optimizer needs besides the sample data."""

    index: int
    path: PathSpec
    offset: np.ndarray
    gains: AuxGains
    graph: Optional[net_graph.CommGraph] = None
    gain: Optional[net_graph.ConsensusGain] = None
    u_max: Optional[np.ndarray] = None
    y_box: Optional[np.ndarray] = None
    speed: SpeedFn = None

    def __post_init__(self):
        self.offset = np.asarray(self.offset, dtype=float)
        _, self.Dinv = delta_matrix(self.offset)
        if self.speed is None:
            self.speed = self.gains.v_d
        if self.u_max is not None:
            self.u_max = np.asarray(self.u_max, dtype=float)
        if self.y_box is not None:
            self.y_box = np.asarray(self.y_box, dtype=float)

    def default_u_max(self, r_eta: float) -> np.ndarray:
        return np.array(aux_input_bounds(self.path, self.offset, self.gains, r_eta))

    @property
    def isolated(self) -> bool:
        if self.graph is None:
            return True
        i = self.index
        return not any(i in e for e in self.graph.edges)

    def speed_at(self, t):
        return self.speed(t) if callable(self.speed) else self.speed


@dataclass
class ProblemParams:
    t: float
    pose: Pose
    gamma: float
    gamma_neighbors: Mapping[int, float]
    eta: float
    t0: float = 0.0
    delta_k: float = 0.1


@dataclass
class DecisionVars:
    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=float).reshape(-1, 3)
        self.v = np.asarray(self.v, dtype=float).reshape(-1)
        if len(self.u) != len(self.v):
            raise ValueError("u and v must have the same number of segments")

    @property
    def n_segments(self) -> int:
        return len(self.v)

    def flat(self) -> np.ndarray:
        return np.concatenate([self.u.ravel(), self.v])

    @classmethod
    def from_flat(cls, x, n_segments):
        x = np.asarray(x, dtype=float)
        return cls(x[: 3 * n_segments].reshape(n_segments, 3), x[3 * n_segments:])

    @classmethod
    def zeros(cls, n_segments):
        return cls(np.zeros((n_segments, 3)), np.zeros(n_segments))


@dataclass
class Prediction:
    times: np.ndarray
    p: np.ndarray
    R: np.ndarray
    gamma: np.ndarray
    eta: np.ndarray
    y: np.ndarray
    u_gamma: np.ndarray
    stage: float
    terminal: float
    consensus_stage: float
    consensus_terminal: float
    first_interval_stage: float

    @property
    def cost(self) -> float:
        return self.stage + self.terminal + self.consensus_stage + self.consensus_terminal


@dataclass
class SolveResult:
    dec: DecisionVars
    cost: float
    prediction: Prediction
    max_violation: float
    iterations: int
    evaluations: int
    used_warm: bool
    penalty: float


# ---------------------------------------------------------------------------
# prediction


def aux_signal_for(params: ProblemParams, model: AgentModel) -> Optional[AuxConsensusSignal]:
    """Consensus signal frozen at the data of this sample (``None`` if isolated)."""
    if model.graph is None or not model.graph.neighbors(model.index):
        return None
    return aux_consensus_signal(params.t, params.delta_k, model.index, params.gamma,
                                params.gamma_neighbors, model.graph, model.gain)


def _speed_integral(model, a, b):
    if not callable(model.speed):
        return model.speed * (b - a)
    m = 0.5 * (a + b)
    return (b - a) / 6.0 * (model.speed(a) + 4.0 * model.speed(m) + model.speed(b))


def _simpson_weights(ns, h):
    w = np.ones(ns + 1)
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    return w * h / 3.0


class _Rollout:
    """Batched forward simulation over the horizon for a fixed sample."""

    def __init__(self, params: ProblemParams, model: AgentModel, weights: MpcWeights):
        self.params = params
        self.model = model
        self.w = weights
        self.aux = aux_signal_for(params, model)
        nseg, ns = weights.n_segments, weights.substeps
        self.h = weights.seg_len / ns
        self.times = params.t + self.h * np.arange(nseg * ns + 1)
        self.simpson = _simpson_weights(ns, self.h)
        # aux value and speed seen from inside each segment at its nodes
        tiny = 1e-9 * self.h
        aux_nodes = np.zeros((nseg, ns + 1))
        speed_nodes = np.zeros((nseg, ns + 1))
        for s in range(nseg):
            for j in range(ns + 1):
                tau = self.times[s * ns + j]
                inside = tau + tiny if j == 0 else (tau - tiny if j == ns else tau)
                aux_nodes[s, j] = self.aux(inside) if self.aux is not None else 0.0
                speed_nodes[s, j] = model.speed_at(tau)
        self.aux_nodes = aux_nodes
        self.speed_nodes = speed_nodes
        # drift of gamma that does not depend on the decision variables
        drift = np.zeros(nseg * ns + 1)
        for n in range(nseg * ns):
            a, b = self.times[n], self.times[n + 1]
            inc = _speed_integral(model, a, b)
            if self.aux is not None:
                inc += self.aux.integral(a, b)
            drift[n + 1] = drift[n] + inc
        self.gamma_drift = drift
        self.terminal_coef = weights.q_max / (3.0 * model.gains.k_min)
        self.envelope = weights.a_eta * math.exp(-weights.envelope_rate * (params.t - params.t0))

    def run(self, U, V, full=False):
        """Simulate ``B`` decision vectors. ``U`` is ``(B, nseg, 3)``, ``V`` is ``(B, nseg)``."""
        w, model, prm = self.w, self.model, self.params
        nseg, ns, h = w.n_segments, w.substeps, self.h
        B = U.shape[0]
        N = nseg * ns
        p = np.broadcast_to(prm.pose.p, (B, 3)).copy()
        R = np.broadcast_to(prm.pose.R, (B, 3, 3)).copy()
        P_all = np.empty((B, N + 1, 3))
        R_all = np.empty((B, N + 1, 3, 3))
        P_all[:, 0], R_all[:, 0] = p, R
        # eta is linear within a segment
        seg_idx = np.repeat(np.arange(nseg), ns)
        eta = np.empty((B, N + 1))
        eta[:, 0] = prm.eta
        eta[:, 1:] = prm.eta + np.cumsum(V[:, seg_idx] * h, axis=1)
        eta_int = np.zeros((B, N + 1))
        eta_int[:, 1:] = np.cumsum(0.5 * h * (eta[:, :-1] + eta[:, 1:]), axis=1)
        gamma = prm.gamma + self.gamma_drift[None, :] + eta_int
        # For a constant input the RK4 step of the linear flow R' = R W is the
        # quartic Taylor polynomial of exp(hW), and the position increment
        # is h v1 R (I + hW/2 + (hW)^2/6 + (hW)^3/24) e1. Precomputing both
        # per segment gives the same step as stage-by-stage RK4.
        omega = np.zeros((B, nseg, 3))
        omega[..., 1:] = U[..., 1:]
        hW = h * skew(omega)
        hW2 = hW @ hW
        hW3 = hW2 @ hW
        eye = np.eye(3)
        M = eye + hW + hW2 / 2.0 + hW3 / 6.0 + (hW3 @ hW) / 24.0
        c = (eye + hW / 2.0 + hW2 / 6.0 + hW3 / 24.0)[..., 0] * (h * U[..., 0:1])
        n = 0
        for s in range(nseg):
            Ms, cs = M[:, s], c[:, s]
            for _ in range(ns):
                p = p + np.einsum("bij,bj->bi", R, cs)
                R = reorthonormalize(R @ Ms)
                n += 1
                P_all[:, n], R_all[:, n] = p, R
        # outputs at every node
        cd = eval_path(model.path, gamma)
        y = np.einsum("bnji,bnj->bni", R_all, P_all - cd) + model.offset
        # stage cost, evaluated per segment with that segment's input
        idx = (np.arange(nseg)[:, None] * ns + np.arange(ns + 1)[None, :])  # (nseg, ns+1)
        y_s = y[:, idx]
        R_s = R_all[:, idx]
        g_s = gamma[:, idx]
        eta_s = eta[:, idx]
        u_gamma = self.aux_nodes[None] + eta_s
        tangent = eval_path_derivative(model.path, g_s)
        ka = k_aux_raw(R_s, y_s, tangent, self.speed_nodes[None] + u_gamma,
                       model.gains.K, model.Dinv, model.gains.y_switch)
        du = U[:, :, None, :] - ka
        l = (np.einsum("...i,ij,...j->...", y_s, w.Q, y_s)
             + np.einsum("...i,ij,...j->...", du, w.U, du))
        seg_stage = l @ self.simpson  # (B, nseg)
        stage = seg_stage.sum(axis=1)
        lc = w.Qc * eta_s ** 2 + w.Uc * V[:, :, None] ** 2
        seg_cons = lc @ self.simpson
        cons = seg_cons.sum(axis=1)
        yT = np.sqrt(np.sum(y[:, -1] ** 2, axis=1))
        terminal = self.terminal_coef * yT ** 3
        cons_term = 0.5 * w.m_eta * eta[:, -1] ** 2
        # penalised constraints (boxes on u, v are handled by the optimizer bounds)
        viol = [np.abs(eta[:, -1]) - w.r_eta]
        if not model.isolated:
            viol.append(np.max(np.abs(eta), axis=1) - self.envelope)
        if model.y_box is not None:
            viol.append(np.max(np.abs(y) - model.y_box, axis=(1, 2)))
        viol = np.stack(viol, axis=1)
        out = dict(stage=stage, terminal=terminal, cons=cons, cons_term=cons_term, viol=viol)
        if full:
            # integral of l + l_c over the first sample interval
            n_first = int(round(prm.delta_k / w.seg_len))
            n_first = min(max(n_first, 0), nseg)
            out.update(P=P_all, R=R_all, gamma=gamma, eta=eta, y=y,
                       u_gamma=self._node_u_gamma(eta),
                       first=(seg_stage[:, :n_first] + seg_cons[:, :n_first]).sum(axis=1))
        return out

    def batch(self, U, V, rho):
        """Penalized cost, raw cost and worst violation per row (compiled path)."""
        w, model = self.w, self.model
        code, origin, direction, poff, normal, sc = _kernel.path_params(model.path)
        y_box = model.y_box if model.y_box is not None else np.zeros(3)
        return _kernel.batch_cost(
            U, V, np.ascontiguousarray(self.params.pose.p, dtype=float),
            np.ascontiguousarray(self.params.pose.R, dtype=float), self.gamma_drift,
            float(self.params.gamma), float(self.params.eta), self.h, w.substeps,
            self.aux_nodes, self.speed_nodes, self.simpson, w.Q, w.U, float(w.Qc), float(w.Uc),
            float(w.m_eta), self.terminal_coef, model.gains.K, model.Dinv,
            float(model.gains.y_switch), model.offset, code, origin, direction, poff, normal, sc,
            float(w.r_eta), self.envelope, not model.isolated, y_box, model.y_box is not None,
            float(rho))

    def _node_u_gamma(self, eta):
        aux = np.array([self.aux(t) if self.aux is not None else 0.0 for t in self.times])
        return aux[None] + eta


def _prediction_from(roll: _Rollout, out, b=0) -> Prediction:
    return Prediction(
        times=roll.times, p=out["P"][b], R=out["R"][b], gamma=out["gamma"][b], eta=out["eta"][b],
        y=out["y"][b], u_gamma=out["u_gamma"][b], stage=float(out["stage"][b]),
        terminal=float(out["terminal"][b]), consensus_stage=float(out["cons"][b]),
        consensus_terminal=float(out["cons_term"][b]), first_interval_stage=float(out["first"][b]))


def predict(params: ProblemParams, dec: DecisionVars, model: AgentModel,
            weights: MpcWeights) -> Prediction:
    if dec.n_segments != weights.n_segments:
        raise ValueError("decision variables do not match n_segments")
    roll = _Rollout(params, model, weights)
    out = roll.run(dec.u[None], dec.v[None], full=True)
    return _prediction_from(roll, out)


# ---------------------------------------------------------------------------
# cost pieces (scalar conveniences; the rollout uses vectorized equivalents)


def stage_cost(t, pose: Pose, u, gamma, u_gamma, weights: MpcWeights, model: AgentModel) -> float:
    R = pose.R
    y = R.T @ (pose.p - eval_path(model.path, gamma)) + model.offset
    tangent = eval_path_derivative(model.path, gamma)
    k = k_aux_raw(R, y, tangent, model.speed_at(t) + u_gamma, model.gains.K, model.Dinv,
                  model.gains.y_switch)
    du = np.asarray(u, dtype=float) - k
    return float(y @ weights.Q @ y + du @ weights.U @ du)


def consensus_stage_cost(eta, v_gamma, weights: MpcWeights) -> float:
    return float(weights.Qc * eta ** 2 + weights.Uc * v_gamma ** 2)


def terminal_cost(y_terminal, weights: MpcWeights, K) -> float:
    K = np.asarray(K, dtype=float)
    k_min = float(np.linalg.eigvalsh(K)[0])
    if k_min <= 0:
        raise ValueError("K must be positive definite")
    ny = float(np.linalg.norm(y_terminal))
    return weights.q_max / (3.0 * k_min) * ny ** 3


def total_cost(params: ProblemParams, dec: DecisionVars, weights: MpcWeights,
               model: AgentModel) -> float:
    return predict(params, dec, model, weights).cost


def input_bounds(model: AgentModel, weights: MpcWeights):
    u_max = model.u_max if model.u_max is not None else model.default_u_max(weights.r_eta)
    return u_max, weights.v_gamma_max


def constraint_violations(params: ProblemParams, pred: Prediction, dec: DecisionVars,
                          weights: MpcWeights, model: AgentModel) -> dict:
    """Signed violations (positive = violated, ``<= 0`` = satisfied with slack).

    The terminal output set is all of R^3, so it never appears here.
    """
    u_max, v_max = input_bounds(model, weights)
    out = {
        "u_box": float(np.max(np.abs(dec.u) - u_max)),
        "v_box": float(np.max(np.abs(dec.v)) - v_max),
        "eta_terminal": float(abs(pred.eta[-1]) - weights.r_eta),
    }
    if not model.isolated:
        env = weights.a_eta * math.exp(-weights.envelope_rate * (params.t - params.t0))
        out["eta_envelope"] = float(np.max(np.abs(pred.eta)) - env)
    if model.y_box is not None:
        out["y_box"] = float(np.max(np.abs(pred.y) - model.y_box))
    return out


def max_violation(viol: dict) -> float:
    return max(0.0, max(viol.values()))


# ---------------------------------------------------------------------------
# warm starts


def _segment_end(roll_params, model, weights, state, u, v):
    """Advance one segment for a single trajectory; returns the new state."""
    t, pose, gamma, eta = state
    sub = ProblemParams(t=t, pose=pose, gamma=gamma, gamma_neighbors={}, eta=eta,
                        t0=roll_params.t0, delta_k=roll_params.delta_k)
    one = replace(weights, n_segments=1, T=weights.seg_len, v_gamma_max=None)
    # the consensus signal is frozen at the original sample, so rebuild the
    # drift by hand instead of recomputing it from (empty) neighbor data
    roll = _Rollout(sub, replace(model, graph=None), one)
    aux = aux_signal_for(roll_params, model)
    if aux is not None:
        drift = np.zeros_like(roll.gamma_drift)
        for n in range(len(roll.times) - 1):
            a, b = roll.times[n], roll.times[n + 1]
            drift[n + 1] = drift[n] + _speed_integral(model, a, b) + aux.integral(a, b)
        roll.gamma_drift = drift
    out = roll.run(np.asarray(u, dtype=float)[None, None], np.array([[v]]), full=True)
    return (t + weights.seg_len, Pose(out["P"][0, -1], out["R"][0, -1]),
            float(out["gamma"][0, -1]), float(out["eta"][0, -1]))


def _aux_input(model, weights, state, u_gamma_aux):
    t, pose, gamma, eta = state
    y = pose.R.T @ (pose.p - eval_path(model.path, gamma)) + model.offset
    tangent = eval_path_derivative(model.path, gamma)
    u = k_aux_raw(pose.R, y, tangent, model.speed_at(t) + u_gamma_aux + eta, model.gains.K,
                  model.Dinv, model.gains.y_switch)
    u_max, _ = input_bounds(model, weights)
    return np.clip(u, -u_max, u_max)


def shift_warm_start(prev_dec: Optional[DecisionVars], prev_pred: Optional[Prediction],
                     delta: float, params: ProblemParams, weights: MpcWeights,
                     model: AgentModel) -> DecisionVars:
    """Drop the elapsed part of the previous solution and append auxiliary inputs.

    The tail uses the auxiliary law sampled at each segment start and
    ``v = -lambda_eta * eta``. With ``prev_dec=None`` (or ``delta >= T``) the
    whole horizon is auxiliary. The tail is rolled out from the measured state
    in ``params``; ``prev_pred`` is accepted for symmetry but not needed since
    the kept prefix is re-simulated from that state anyway.
    """
    del prev_pred
    nseg, h = weights.n_segments, weights.seg_len
    U = np.zeros((nseg, 3))
    V = np.zeros(nseg)
    from_prev = np.zeros(nseg, dtype=bool)
    if prev_dec is not None and delta < weights.T:
        if delta <= 0:
            raise ValueError("delta must be positive")
        for s in range(nseg):
            # previous segment active at the start of new segment s
            src = int(math.floor((delta + s * h) / h + 1e-9))
            if src < nseg:
                U[s], V[s], from_prev[s] = prev_dec.u[src], prev_dec.v[src], True
    keep = int(from_prev.sum())
    aux = aux_signal_for(params, model)
    state = (params.t, params.pose, params.gamma, params.eta)
    for s in range(nseg):
        if s >= keep:
            ua = aux(state[0] + 1e-9 * h) if aux is not None else 0.0
            U[s] = _aux_input(model, weights, state, ua)
            V[s] = -weights.lambda_eta * state[3]
        if s < nseg - 1:
            state = _segment_end(params, model, weights, state, U[s], V[s])
    return DecisionVars(U, V)


def auxiliary_decision(params: ProblemParams, weights: MpcWeights, model: AgentModel) -> DecisionVars:
    return shift_warm_start(None, None, weights.T, params, weights, model)


# ---------------------------------------------------------------------------
# solver


def solve(params: ProblemParams, weights: MpcWeights, model: AgentModel,
          warm: Optional[DecisionVars] = None, config: SolverConfig = SolverConfig()
          ) -> SolveResult:
    """Minimize the horizon cost; never returns something worse than a feasible ``warm``."""
    nseg = weights.n_segments
    nx = 4 * nseg
    if warm is None:
        warm = auxiliary_decision(params, weights, model)
    u_max, v_max = input_bounds(model, weights)
    lo = np.concatenate([np.tile(-u_max, nseg), np.full(nseg, -v_max)])
    hi = -lo
    roll = _Rollout(params, model, weights)
    x_warm = np.clip(warm.flat(), lo, hi)
    step = config.fd_step
    # forward and backward perturbations stacked after the base point
    pert = np.concatenate([np.zeros((1, nx)), step * np.eye(nx), -step * np.eye(nx)])
    n_eval = 0
    rho = config.penalty0

    def unpack(X):
        return X[:, : 3 * nseg].reshape(-1, nseg, 3), X[:, 3 * nseg:]

    def objective(X, rho):
        U, V = unpack(X)
        return roll.batch(np.ascontiguousarray(U), np.ascontiguousarray(V), rho)

    def fun_grad(x):
        nonlocal n_eval
        f, _, _ = objective(x[None] + pert, rho)
        n_eval += len(pert)
        return float(f[0]), (f[1:nx + 1] - f[nx + 1:]) / (2.0 * step)

    def score(x):
        _, J, v = objective(x[None], rho)
        return float(J[0]), float(max(0.0, v[0]))

    J_warm_raw, viol_warm = score(x_warm)
    # exact warm-start violation includes the boxes, which clipping enforced
    warm_feasible = viol_warm <= config.feas_tol and np.allclose(x_warm, warm.flat(), atol=1e-12)
    x = x_warm.copy()
    iters = 0
    best = None
    for _ in range(config.penalty_rounds):
        res = minimize(fun_grad, x, jac=True, method="L-BFGS-B", bounds=list(zip(lo, hi)),
                       options=dict(maxiter=config.max_iter, gtol=config.gtol, ftol=config.ftol,
                                    maxls=20))
        iters += int(res.nit)
        x = np.clip(res.x, lo, hi)
        J, viol = score(x)
        best = (x, J, viol)
        if viol <= config.feas_tol:
            break
        rho *= config.penalty_growth
    x, J, viol = best
    used_warm = False
    if warm_feasible and (viol > config.feas_tol or J > J_warm_raw):
        x, J, viol, used_warm = x_warm, J_warm_raw, viol_warm, True
    if viol > config.feas_tol:
        raise InfeasibleError(f"no feasible point after {iters} iterations (violation {viol:.3g})",
                              best=DecisionVars.from_flat(x, nseg), violations=viol)
    dec = DecisionVars.from_flat(x, nseg)
    pred = _prediction_from(roll, roll.run(dec.u[None], dec.v[None], full=True))
    return SolveResult(dec=dec, cost=pred.cost, prediction=pred, max_violation=viol,
                       iterations=iters, evaluations=n_eval, used_warm=used_warm, penalty=rho)


# ---------------------------------------------------------------------------
# diagnostics


@dataclass
class ValueDecreaseReport:
    increments: np.ndarray
    allowance: np.ndarray
    flagged: np.ndarray

    @property
    def n_flagged(self) -> int:
        return int(self.flagged.sum())

    @property
    def fraction_flagged(self) -> float:
        return float(self.flagged.mean()) if self.flagged.size else 0.0


def value_decrease_check(J_star, stage_integrals, k_con, delta_lb: float,
                         solver_tol: float = 1e-3, beta_gain: float = 1.0) -> ValueDecreaseReport:
    """Check ``V(k+1) - V(k) + int(l + l_c) <= beta_k + solver_tol`` per sample.

    Arrays are indexed ``[sample, agent]``; ``stage_integrals[k]`` is the
    running cost over the interval that starts at sample ``k``. The allowance
    ``beta_k`` is ``beta_gain * max(|k_con(k)|, |k_con(k+1)|) / delta_lb``: the
    change in neighbor information between two samples, scaled by a
    calibrated constant standing in for the unknown Lipschitz constants.
    """
    J = np.asarray(J_star, dtype=float)
    if J.ndim == 1:
        J = J[:, None]
    I = np.asarray(stage_integrals, dtype=float).reshape(J.shape)
    kc = np.abs(np.asarray(k_con, dtype=float)).reshape(J.shape)
    inc = J[1:] - J[:-1] + I[:-1]
    allowance = beta_gain * np.maximum(kc[:-1], kc[1:]) / delta_lb
    return ValueDecreaseReport(increments=inc, allowance=allowance,
                               flagged=inc > allowance + solver_tol)
