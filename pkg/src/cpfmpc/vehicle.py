"""Nonholonomic rigid-body kinematics on SE(3) and the body-frame output.

The input is ``u = (v1, w2, w3)``: forward speed plus pitch and yaw rates.
Roll rate and lateral/vertical speeds are identically zero.

Arrays may carry leading batch dimensions: positions ``(..., 3)``, rotations
``(..., 3, 3)``, scalars ``(...)``. The closed loop integrates all agents in
one call this way.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Union

import numpy as np


@dataclass
class Pose:
    p: np.ndarray
    R: np.ndarray

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=float)
        self.R = np.asarray(self.R, dtype=float)

    def so3_error(self) -> float:
        return so3_error(self.R)


def skew(omega) -> np.ndarray:
    w = np.asarray(omega, dtype=float)
    out = np.zeros(w.shape[:-1] + (3, 3))
    out[..., 0, 1] = -w[..., 2]
    out[..., 0, 2] = w[..., 1]
    out[..., 1, 0] = w[..., 2]
    out[..., 1, 2] = -w[..., 0]
    out[..., 2, 0] = -w[..., 1]
    out[..., 2, 1] = w[..., 0]
    return out


def rot_x(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def from_ypr(yaw: float, pitch: float, roll: float) -> np.ndarray:
    """Body-to-inertial rotation ``Rz(yaw) @ Ry(pitch) @ Rx(roll)``."""
    return rot_z(yaw) @ rot_y(pitch) @ rot_x(roll)


def so3_error(R) -> float:
    """Max over the batch of ``|R'R - I|_F``; ``inf`` if any det is non-positive."""
    R = np.asarray(R, dtype=float)
    gram = np.swapaxes(R, -1, -2) @ R - np.eye(3)
    if np.any(np.linalg.det(R) <= 0):
        return float("inf")
    return float(np.max(np.sqrt(np.sum(gram ** 2, axis=(-2, -1)))))


def reorthonormalize(R):
    """One Newton step of ``R (R'R)^(-1/2)``, i.e. ``R (3I - R'R) / 2``."""
    gram = np.swapaxes(R, -1, -2) @ R
    return 0.5 * R @ (3.0 * np.eye(3) - gram)


def dynamics(pose_or_p, R_or_u, u=None):
    """Return ``(p_dot, R_dot)``.

    Call as ``dynamics(pose, u)`` or ``dynamics(p, R, u)``.
    """
    if u is None:
        p, R, u = pose_or_p.p, pose_or_p.R, R_or_u
    else:
        p, R = pose_or_p, R_or_u
    u = np.asarray(u, dtype=float)
    p_dot = R[..., :, 0] * u[..., 0:1]
    omega = np.zeros(u.shape)
    omega[..., 1] = u[..., 1]
    omega[..., 2] = u[..., 2]
    R_dot = R @ skew(omega)
    return p_dot, R_dot


# An input source returns (u, v_gamma, u_gamma_aux). Plain callables are
# evaluated at every RK4 stage with the stage state (state feedback). Objects
# with ``held = True`` are evaluated once per step at the step midpoint and held,
# which is exact for piecewise-constant signals whose switches fall on step
# boundaries.
InputSource = Callable[..., tuple]
SpeedFn = Union[float, Callable[[float], float]]


@dataclass
class PiecewiseInput:
    """Piecewise-constant signal; segment ``k`` holds on ``[times[k], times[k+1])``."""

    times: np.ndarray
    u: np.ndarray
    v_gamma: np.ndarray
    u_gamma_aux: np.ndarray
    held: bool = True

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.u = np.asarray(self.u, dtype=float)
        self.v_gamma = np.asarray(self.v_gamma, dtype=float)
        self.u_gamma_aux = np.asarray(self.u_gamma_aux, dtype=float)

    def __call__(self, t, p=None, R=None, gamma=None, eta=None):
        k = int(np.searchsorted(self.times, t, side="right")) - 1
        k = min(max(k, 0), len(self.times) - 1)
        return self.u[k], self.v_gamma[k], self.u_gamma_aux[k]


def constant_input(u, v_gamma=0.0, u_gamma_aux=0.0) -> PiecewiseInput:
    return PiecewiseInput([0.0], [u], [v_gamma], [u_gamma_aux])


def _speed(g: SpeedFn, t: float) -> float:
    return g(t) if callable(g) else g


def _rhs(t, p, R, gamma, eta, inputs, g, held):
    u, v_gamma, u_aux = held if held is not None else inputs(t, p, R, gamma, eta)
    p_dot, R_dot = dynamics(p, R, u)
    gamma_dot = _speed(g, t) + u_aux + eta
    eta_dot = np.broadcast_to(np.asarray(v_gamma, dtype=float), np.shape(eta))
    return p_dot, R_dot, gamma_dot, eta_dot


def integrate(pose: Pose, gamma, eta, inputs: InputSource, dt: float, n_steps: int,
              t0: float = 0.0, g: SpeedFn = 0.0, callback=None):
    """Fixed-step RK4 on the stacked state ``(p, R, gamma, eta)``.

    ``gamma`` follows ``g(t) + u_gamma_aux + eta`` and ``eta`` follows
    ``v_gamma``. ``R`` is re-orthonormalized after every step. ``callback``
    (if given) is called as ``callback(step, t, p, R, gamma, eta)`` after each
    step. Returns ``(Pose, gamma, eta)``.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    p = np.array(pose.p, dtype=float)
    R = np.array(pose.R, dtype=float)
    gamma = np.array(gamma, dtype=float)
    eta = np.array(eta, dtype=float)
    held_mode = getattr(inputs, "held", False)
    t = t0
    for step in range(n_steps):
        held = inputs(t + 0.5 * dt) if held_mode else None
        k1 = _rhs(t, p, R, gamma, eta, inputs, g, held)
        k2 = _rhs(t + 0.5 * dt, p + 0.5 * dt * k1[0], R + 0.5 * dt * k1[1],
                  gamma + 0.5 * dt * k1[2], eta + 0.5 * dt * k1[3], inputs, g, held)
        k3 = _rhs(t + 0.5 * dt, p + 0.5 * dt * k2[0], R + 0.5 * dt * k2[1],
                  gamma + 0.5 * dt * k2[2], eta + 0.5 * dt * k2[3], inputs, g, held)
        k4 = _rhs(t + dt, p + dt * k3[0], R + dt * k3[1],
                  gamma + dt * k3[2], eta + dt * k3[3], inputs, g, held)
        w = dt / 6.0
        p = p + w * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
        R = reorthonormalize(R + w * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1]))
        gamma = gamma + w * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2])
        eta = eta + w * (k1[3] + 2 * k2[3] + 2 * k3[3] + k4[3])
        t = t0 + (step + 1) * dt
        if callback is not None:
            callback(step, t, p, R, gamma, eta)
    return Pose(p, R), gamma, eta


def output_y(pose: Pose, offset, spec, gamma):
    """Body-frame tracking error ``R'(p + R eps - c_d(gamma))``."""
    from .paths import eval_path

    R = pose.R
    diff = pose.p - eval_path(spec, gamma)
    return np.einsum("...ji,...j->...i", R, diff) + np.asarray(offset, dtype=float)


def output_rate(pose: Pose, u, gamma, gamma_dot, offset, spec):
    """Time derivative of :func:`output_y` along the kinematics.

    Uses ``y_dot = -W(w)(y - eps) + v - R' c_d'(gamma) gamma_dot`` with
    ``v = (v1, 0, 0)``, which is algebraically the same as the form with the
    input matrix of :mod:`cpfmpc.aux_control`.
    """
    from .paths import eval_path_derivative

    u = np.asarray(u, dtype=float)
    eps = np.asarray(offset, dtype=float)
    y = output_y(pose, eps, spec, gamma)
    omega = np.zeros(u.shape)
    omega[..., 1:] = u[..., 1:]
    v = np.zeros(u.shape)
    v[..., 0] = u[..., 0]
    tangent = eval_path_derivative(spec, gamma)
    rot_tangent = np.einsum("...ji,...j->...i", pose.R, tangent)
    spin = np.einsum("...ij,...j->...i", skew(omega), y - eps)
    return -spin + v - rot_tangent * np.asarray(gamma_dot, dtype=float)[..., None]
