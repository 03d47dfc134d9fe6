"""Desired geometric paths parametrized by a scalar coordination value.

Closed forms (``g`` is the path parameter, all vectors in R^3):

line
    ``c(g) = origin + g * direction``
circular-helix
    ``c(g) = origin + radius * (cos(w g), sin(w g), 0) + (0, 0, pitch * w g)``
sinusoid-offset-line
    ``c(g) = origin + offset + g * direction + amplitude * sin(f g) * normal``

``w`` is ``angular_rate`` and ``f`` is ``frequency``. Every function accepts a
scalar or an array of parameter values; array input yields an ``(..., 3)``
result.

Only the circle (helix with zero pitch) is bounded. The other kinds must be
created with ``allow_unbounded=True``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

KINDS = ("line", "circular-helix", "sinusoid-offset-line")


class PathError(ValueError):
    pass


def _vec(x, name):
    v = np.asarray(x, dtype=float).reshape(-1)
    if v.shape != (3,):
        raise PathError(f"{name} must have 3 components")
    return v


@dataclass(frozen=True)
class PathSpec:
    kind: str
    origin: np.ndarray = field(default_factory=lambda: np.zeros(3))
    direction: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0]))
    radius: float = 1.0
    pitch: float = 0.0
    angular_rate: float = 1.0
    amplitude: float = 0.0
    frequency: float = 1.0
    offset: np.ndarray = field(default_factory=lambda: np.zeros(3))
    normal: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))
    allow_unbounded: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise PathError(f"unknown path kind {self.kind!r}; expected one of {KINDS}")
        for name in ("origin", "direction", "offset", "normal"):
            object.__setattr__(self, name, _vec(getattr(self, name), name))
        if self.kind in ("line", "sinusoid-offset-line"):
            norm = np.linalg.norm(self.direction)
            if norm == 0:
                raise PathError("direction must be non-zero")
            object.__setattr__(self, "direction", self.direction / norm)
        if self.kind == "circular-helix" and self.radius < 0:
            raise PathError("radius must be non-negative")
        if not self.bounded and not self.allow_unbounded:
            raise PathError(
                f"{self.kind} path is unbounded; pass allow_unbounded=True to accept it "
                "(bounded references are what guarantee bounded vehicle states)"
            )

    @property
    def bounded(self) -> bool:
        return self.kind == "circular-helix" and self.pitch == 0.0


def eval_path(spec: PathSpec, gamma):
    g = np.asarray(gamma, dtype=float)[..., None]
    if spec.kind == "line":
        out = spec.origin + g * spec.direction
    elif spec.kind == "circular-helix":
        th = spec.angular_rate * g
        out = spec.origin + np.concatenate(
            [spec.radius * np.cos(th), spec.radius * np.sin(th), spec.pitch * th], axis=-1)
    else:
        out = (spec.origin + spec.offset + g * spec.direction
               + spec.amplitude * np.sin(spec.frequency * g) * spec.normal)
    return out


def eval_path_derivative(spec: PathSpec, gamma):
    g = np.asarray(gamma, dtype=float)[..., None]
    if spec.kind == "line":
        out = np.broadcast_to(spec.direction, g.shape[:-1] + (3,)).copy()
    elif spec.kind == "circular-helix":
        w = spec.angular_rate
        th = w * g
        out = np.concatenate(
            [-spec.radius * w * np.sin(th), spec.radius * w * np.cos(th),
             np.full_like(th, spec.pitch * w)], axis=-1)
    else:
        f = spec.frequency
        out = spec.direction + spec.amplitude * f * np.cos(f * g) * spec.normal
    return out


def path_derivative_bound(spec: PathSpec) -> float:
    """Exact ``sup_g |dc/dg|``."""
    if spec.kind == "line":
        return 1.0
    if spec.kind == "circular-helix":
        return abs(spec.angular_rate) * math.hypot(spec.radius, spec.pitch)
    # |d + s n| for s in [-Af, Af] is convex in s, so the sup sits at an end
    s = abs(spec.amplitude * spec.frequency)
    return float(max(np.linalg.norm(spec.direction + s * spec.normal),
                     np.linalg.norm(spec.direction - s * spec.normal)))


def path_norm_bound(spec: PathSpec) -> float:
    """``sup_g |c(g)|``; infinite for the unbounded kinds."""
    if not spec.bounded:
        return math.inf
    return float(np.linalg.norm(spec.origin) + spec.radius)
