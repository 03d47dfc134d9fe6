"""Auxiliary path-following law, its input bounds, and the sampled consensus signal."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import net_graph
from .paths import PathSpec, eval_path_derivative, path_derivative_bound
from .vehicle import Pose, output_y


class SingularOffsetError(ValueError):
    """Body offset with zero first component; the input matrix is singular."""


@dataclass(frozen=True)
class AuxGains:
    K: np.ndarray = field(default_factory=lambda: 0.2 * np.eye(3))
    v_d: float = 2.0
    lambda_eta: float = 1.0
    # Below this output norm the unit-vector feedback is replaced by the
    # linear ramp K y / y_switch, so the law stays continuous.
    y_switch: float = 1e-9

    def __post_init__(self):
        K = np.asarray(self.K, dtype=float)
        if K.shape != (3, 3) or not np.allclose(K, K.T, atol=1e-12):
            raise ValueError("K must be a symmetric 3x3 matrix")
        try:
            np.linalg.cholesky(K)
        except np.linalg.LinAlgError:
            raise ValueError("K must be positive definite") from None
        if not self.lambda_eta > 0:
            raise ValueError("lambda_eta must be positive")
        if not self.y_switch > 0:
            raise ValueError("y_switch must be positive")
        object.__setattr__(self, "K", K)

    @property
    def k_min(self) -> float:
        return float(np.linalg.eigvalsh(self.K)[0])

    @property
    def k_max(self) -> float:
        return float(np.linalg.eigvalsh(self.K)[-1])


@dataclass(frozen=True)
class AuxConsensusSignal:
    value: float
    start: float
    active_until: float
    k_con: float

    def __call__(self, tau):
        tau = np.asarray(tau, dtype=float)
        on = (tau >= self.start) & (tau <= self.active_until)
        out = np.where(on, self.value, 0.0)
        return float(out) if out.ndim == 0 else out

    def integral(self, a: float, b: float) -> float:
        """Exact integral of the signal over ``[a, b]``."""
        lo, hi = max(a, self.start), min(b, self.active_until)
        return self.value * max(hi - lo, 0.0)


def delta_matrix(offset):
    """Input matrix of the output dynamics and its inverse."""
    e1, e2, e3 = np.asarray(offset, dtype=float)
    if e1 == 0.0:
        raise SingularOffsetError("first component of the body offset must be non-zero")
    D = np.array([[1.0, e3, -e2], [0.0, 0.0, e1], [0.0, -e1, 0.0]])
    Dinv = np.array([[1.0, e2 / e1, e3 / e1], [0.0, 0.0, -1.0 / e1], [0.0, 1.0 / e1, 0.0]])
    return D, Dinv


def k_aux_raw(R, y, tangent, speed, K, Dinv, y_switch):
    """Vectorized core of the auxiliary law.

    ``speed`` is the path-parameter rate ``v_d + u_gamma``; shapes follow
    :mod:`cpfmpc.vehicle` batching conventions.
    """
    ff = np.einsum("...ji,...j->...i", R, tangent) * np.asarray(speed)[..., None]
    ny = np.sqrt(np.sum(y * y, axis=-1))
    unit = y / np.maximum(ny, y_switch)[..., None]
    return (ff - unit @ K.T) @ Dinv.T


def k_aux(t, pose: Pose, gamma, u_gamma, spec: PathSpec, gains: AuxGains, offset, speed=None):
    """Saturated auxiliary law returning ``(v1, w2, w3)``.

    ``speed`` overrides the nominal path rate ``gains.v_d`` (e.g. a
    time-varying common speed).
    """
    _, Dinv = delta_matrix(offset)
    y = output_y(pose, offset, spec, gamma)
    tangent = eval_path_derivative(spec, gamma)
    nominal = gains.v_d if speed is None else speed
    return k_aux_raw(pose.R, y, tangent, nominal + np.asarray(u_gamma, dtype=float),
                     gains.K, Dinv, gains.y_switch)


def aux_input_bounds(spec: PathSpec, offset, gains: AuxGains, r_eta: float):
    """Componentwise bounds ``(v_max, w2_max, w3_max)`` on the auxiliary law
    for any ``|u_gamma| <= r_eta``."""
    _, Dinv = delta_matrix(offset)
    n_bar = (abs(gains.v_d) + r_eta) * path_derivative_bound(spec)
    rows = np.linalg.norm(Dinv, axis=1) * n_bar + np.linalg.norm(Dinv @ gains.K, axis=1)
    return tuple(float(x) for x in rows)


def finite_time_envelope(y0_norm: float, gains: AuxGains, tau_minus_t: float) -> float:
    if y0_norm < 0 or tau_minus_t < 0:
        raise ValueError("arguments must be non-negative")
    return max(y0_norm - gains.k_min * tau_minus_t, 0.0)


def aux_consensus_signal(t_k: float, delta_k: float, i: int, gamma_i: float,
                         gamma_neighbors: Mapping[int, float], g: net_graph.CommGraph,
                         gain: net_graph.ConsensusGain, delta_lb: float | None = None
                         ) -> AuxConsensusSignal:
    """Spread the discrete consensus action of agent ``i`` over one sample interval."""
    if not delta_k > 0:
        raise ValueError("delta_k must be positive")
    if delta_lb is not None and delta_k < delta_lb:
        raise ValueError(f"delta_k={delta_k} below the lower bound {delta_lb}")
    kc = net_graph.consensus_law(i, gamma_i, gamma_neighbors, g, gain)
    return AuxConsensusSignal(value=kc / delta_k, start=t_k, active_until=t_k + delta_k, k_con=kc)
