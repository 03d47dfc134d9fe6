"""Communication topology, the consensus law and its spectral diagnostics.

Agents are indexed from 0. An edge ``(i, j)`` with weight ``a_ij`` means
agent ``i`` reads the coordination value of agent ``j``.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

CONSENSUS_TOL = 1e-9


class GraphError(ValueError):
    """Invalid graph, gain, or graph/gain combination."""


@dataclass(frozen=True)
class CommGraph:
    n_agents: int
    edges: Mapping[tuple[int, int], float] = field(default_factory=dict)

    def __post_init__(self):
        if self.n_agents < 1:
            raise GraphError("n_agents must be a positive integer")
        clean = {}
        for (i, j), w in dict(self.edges).items():
            i, j = int(i), int(j)
            if i == j:
                raise GraphError(f"self-edge ({i}, {i}) is not allowed")
            if not (0 <= i < self.n_agents and 0 <= j < self.n_agents):
                raise GraphError(f"edge ({i}, {j}) references an unknown agent")
            if not w > 0:
                raise GraphError(f"edge ({i}, {j}) has non-positive weight {w}")
            clean[(i, j)] = float(w)
        object.__setattr__(self, "edges", clean)

    @classmethod
    def from_edge_list(cls, n_agents, edge_list, weight=1.0):
        return cls(n_agents, {(i, j): weight for i, j in edge_list})

    def neighbors(self, i: int) -> list[int]:
        """Agents whose value agent ``i`` can read, in ascending order."""
        return sorted(j for (a, j) in self.edges if a == i)

    def adjacency(self) -> np.ndarray:
        A = np.zeros((self.n_agents, self.n_agents))
        for (i, j), w in self.edges.items():
            A[i, j] = w
        return A

    def is_balanced(self, tol: float = 1e-12) -> bool:
        A = self.adjacency()
        return bool(np.all(np.abs(A.sum(axis=1) - A.sum(axis=0)) <= tol))

    def is_strongly_connected(self) -> bool:
        if self.n_agents == 1:
            return True
        fwd = {i: [] for i in range(self.n_agents)}
        bwd = {i: [] for i in range(self.n_agents)}
        for i, j in self.edges:
            fwd[i].append(j)
            bwd[j].append(i)
        return _reaches_all(fwd, self.n_agents) and _reaches_all(bwd, self.n_agents)


def _reaches_all(adj, n):
    seen = {0}
    queue = deque([0])
    while queue:
        node = queue.popleft()
        for nxt in adj[node]:
            if nxt not in seen:
                seen.add(nxt)
                queue.append(nxt)
    return len(seen) == n


def path_graph(n: int = 3) -> CommGraph:
    """Agents on a line with two-way links between consecutive agents.

    The default is three agents where the middle one talks to both ends.
    """
    if n < 1:
        raise GraphError("need at least one agent")
    edges = [e for i in range(n - 1) for e in ((i, i + 1), (i + 1, i))]
    return CommGraph.from_edge_list(n, edges)


@dataclass(frozen=True)
class ConsensusGain:
    eps_bar: float

    def validate_for(self, g: CommGraph) -> None:
        delta = max_degree(g)
        upper = math.inf if delta == 0 else 1.0 / delta
        if not (0.0 < self.eps_bar < upper):
            raise GraphError(
                f"eps_bar={self.eps_bar} must lie in (0, 1/max_degree) = (0, {upper:g}); "
                "required for the consensus law to converge on balanced strongly connected graphs"
            )


@dataclass(frozen=True)
class DisagreementSnapshot:
    delta: np.ndarray
    alpha: float
    phi: float


@dataclass(frozen=True)
class PerronReport:
    nonnegative: bool
    row_stochastic: bool
    doubly_stochastic: bool
    eigen_moduli_le_one: bool
    unit_eigenvalue: bool
    primitive: bool
    eigenvalues: np.ndarray

    @property
    def ok(self) -> bool:
        return all((self.nonnegative, self.row_stochastic, self.eigen_moduli_le_one,
                    self.unit_eigenvalue, self.primitive))


@dataclass(frozen=True)
class IssConstants:
    lambda2: float
    mu2: float
    lambda_phi: float
    a: float
    b: float
    c: float


@dataclass(frozen=True)
class IssStepResult:
    passed: bool
    phi_k: float
    phi_k1: float
    bound: float
    margin: float


def max_degree(g: CommGraph) -> float:
    if not g.edges:
        return 0.0
    return float(g.adjacency().sum(axis=1).max())


def laplacian(g: CommGraph) -> np.ndarray:
    A = g.adjacency()
    return np.diag(A.sum(axis=1)) - A


def _eps(gain) -> float:
    return float(gain.eps_bar if isinstance(gain, ConsensusGain) else gain)


def perron(g: CommGraph, gain: ConsensusGain) -> np.ndarray:
    gain.validate_for(g)
    return np.eye(g.n_agents) - gain.eps_bar * laplacian(g)


def algebraic_connectivity(g: CommGraph) -> float:
    """Second smallest eigenvalue of the symmetric part of the Laplacian."""
    if g.n_agents < 2:
        return 0.0
    L = laplacian(g)
    return float(np.linalg.eigvalsh(0.5 * (L + L.T))[1])


def verify_perron(g: CommGraph, gain, tol: float = 1e-12, gap: float = 1e-9) -> PerronReport:
    """Numeric check of the Perron matrix properties for an arbitrary gain.

    Unlike :func:`perron` this never raises; an out-of-range gain simply
    shows up as failing flags. Primitivity is checked numerically as a
    unique eigenvalue of maximum modulus (relative gap ``gap``).
    """
    P = np.eye(g.n_agents) - _eps(gain) * laplacian(g)
    eig = np.linalg.eigvals(P)
    mod = np.abs(eig)
    top = mod.max()
    row = bool(np.all(np.abs(P.sum(axis=1) - 1.0) <= tol))
    col = bool(np.all(np.abs(P.sum(axis=0) - 1.0) <= tol))
    return PerronReport(
        nonnegative=bool(np.all(P >= -tol)),
        row_stochastic=row,
        doubly_stochastic=row and col,
        eigen_moduli_le_one=bool(np.all(mod <= 1.0 + 1e-12)),
        unit_eigenvalue=bool(np.any(np.abs(eig - 1.0) <= 1e-9)),
        primitive=int(np.sum(mod >= top * (1.0 - gap))) == 1,
        eigenvalues=eig,
    )


def consensus_law(i: int, gamma_i: float, gamma_neighbors: Mapping[int, float],
                  g: CommGraph, gain: ConsensusGain) -> float:
    """Discrete consensus action ``-eps * sum_j a_ij (gamma_i - gamma_j)``."""
    nbrs = g.neighbors(i)
    missing = [j for j in nbrs if j not in gamma_neighbors]
    if missing:
        raise KeyError(f"agent {i}: missing neighbor values for {missing}")
    acc = 0.0
    for j in nbrs:
        acc += g.edges[(i, j)] * (gamma_i - gamma_neighbors[j])
    return -_eps(gain) * acc


def consensus_step(xi: np.ndarray, g: CommGraph, gain) -> np.ndarray:
    """Consensus actions of all agents at once (``-eps * L xi``)."""
    return -_eps(gain) * (laplacian(g) @ np.asarray(xi, dtype=float))


def disagreement(values) -> DisagreementSnapshot:
    """Disagreement vector and mean; ``phi`` is left at ``delta'delta``."""
    v = np.asarray(values, dtype=float)
    alpha = float(v.mean())
    delta = v - alpha
    return DisagreementSnapshot(delta=delta, alpha=alpha, phi=float(delta @ delta))


def disagreement_fn(values, g: CommGraph) -> DisagreementSnapshot:
    v = np.asarray(values, dtype=float)
    if v.shape != (g.n_agents,):
        raise ValueError(f"expected {g.n_agents} values, got shape {v.shape}")
    snap = disagreement(v)
    phi = 0.0
    for i, j in g.edges:
        phi += (v[i] - v[j]) ** 2
    return DisagreementSnapshot(delta=snap.delta, alpha=snap.alpha, phi=float(phi))


def at_consensus(values, tol: float = CONSENSUS_TOL) -> bool:
    v = np.asarray(values, dtype=float)
    return bool(v.max() - v.min() < tol)


def _require_iss_graph(g: CommGraph, gain) -> None:
    if not g.is_balanced():
        raise GraphError("graph must be balanced")
    if not g.is_strongly_connected():
        raise GraphError("graph must be strongly connected")
    ConsensusGain(_eps(gain)).validate_for(g)


def iss_constants(g: CommGraph, gain) -> IssConstants:
    _require_iss_graph(g, gain)
    lam2 = algebraic_connectivity(g)
    mu2 = 1.0 - _eps(gain) * lam2
    one_minus = 1.0 - mu2 * mu2
    a = math.sqrt(one_minus / 2.0)
    b = -mu2 / a
    return IssConstants(lambda2=lam2, mu2=mu2, lambda_phi=0.5 * one_minus, a=a, b=b, c=b * b + 1.0)


def iss_step_check(g: CommGraph, gain, xi_k, eta_k, xi_k1, tol: float = 1e-9) -> IssStepResult:
    """Check ``Phi(k+1) <= (1 - lambda_phi) Phi(k) + c |delta_eta|^2`` for one step."""
    const = iss_constants(g, gain)
    phi_k = disagreement(xi_k).phi
    phi_k1 = disagreement(xi_k1).phi
    d_eta = disagreement(eta_k).delta
    bound = (1.0 - const.lambda_phi) * phi_k + const.c * float(d_eta @ d_eta)
    margin = bound - phi_k1
    return IssStepResult(passed=margin >= -tol, phi_k=phi_k, phi_k1=phi_k1, bound=bound, margin=margin)


def beta_envelope(r: float, s: float, g: CommGraph, gain, lambda_eta_min: float,
                  k0: int = 0, a_eta_max: float = 0.0) -> float:
    """Class-KL bound on the consensus action after ``s`` steps.

    ``r`` is the sum of initial magnitudes, ``a_eta_max``/``lambda_eta_min``
    describe the exponential bound on the external input. With
    ``a_eta_max = 0`` the input-driven term vanishes.
    """
    if r < 0 or s < 0:
        raise ValueError("r and s must be non-negative")
    const = iss_constants(g, gain)
    n = g.n_agents
    rho = 1.0 - const.lambda_phi
    growth = math.exp(2.0 * lambda_eta_min)
    if a_eta_max == 0.0:
        d = 0.0
    else:
        denom = 1.0 - rho * growth
        if denom == 0.0:
            raise ValueError("input decay rate coincides with the consensus rate; bound undefined")
        # for fast inputs (denom < 0) both factors of d (e^{-2 lam n} - rho^n) flip
        # sign, so |d| keeps the bound valid
        d = abs(const.c * n * a_eta_max ** 2 * growth / denom)
    norm_L = float(np.linalg.norm(laplacian(g), 2))
    m = math.floor(s) + k0
    decay = rho ** (m / 2.0)
    return norm_L * decay * r + norm_L * math.sqrt(d) * (math.exp(-lambda_eta_min * m) + decay)
