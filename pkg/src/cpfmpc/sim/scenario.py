"""Scenario documents: JSON in, validated :class:`Scenario` out.

Every check collects into one error list so a broken file reports all of its
problems at once. Field paths in messages use dotted/indexed notation, for
example ``agents[1].path.kind``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from importlib import resources
from typing import Any, Optional

import numpy as np

from .. import net_graph
from ..aux_control import AuxGains, SingularOffsetError, delta_matrix
from ..mpc import AgentModel, MpcWeights, SolverConfig
from ..paths import PathError, PathSpec
from ..vehicle import Pose, from_ypr, so3_error

MODES = ("cpf", "decoupled", "consensus")


class ScenarioError(ValueError):
    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("invalid scenario:\n  " + "\n  ".join(self.errors))


@dataclass
class AgentSpec:
    pose: Pose
    offset: np.ndarray
    path: PathSpec
    weights: MpcWeights
    gains: AuxGains
    gamma0: float
    eta0: float
    u_max: Optional[np.ndarray] = None
    y_box: Optional[np.ndarray] = None


@dataclass
class Timing:
    t0: float
    samples: np.ndarray
    delta_lb: float
    duration: float
    dt: float
    record_stride: int


@dataclass
class Diagnostics:
    beta_gain: float = 1.0
    solver_tol: float = 1e-3


@dataclass
class Scenario:
    name: str
    agents: list
    graph: net_graph.CommGraph
    gain: net_graph.ConsensusGain
    timing: Timing
    speed: Any
    mode: str = "cpf"
    solver: SolverConfig = field(default_factory=SolverConfig)
    diagnostics: Diagnostics = field(default_factory=Diagnostics)
    consensus_substeps: int = 100
    raw: dict = field(default_factory=dict)

    @property
    def n_agents(self) -> int:
        return len(self.agents)

    def speed_at(self, t):
        return self.speed(t) if callable(self.speed) else self.speed

    def model(self, i: int) -> AgentModel:
        a = self.agents[i]
        return AgentModel(index=i, path=a.path, offset=a.offset, gains=a.gains, graph=self.graph,
                          gain=self.gain, u_max=a.u_max, y_box=a.y_box, speed=self.speed)

    def with_overrides(self, duration: Optional[float] = None, mode: Optional[str] = None,
                       **changes) -> "Scenario":
        """Re-parse the source document with top-level changes applied."""
        doc = json.loads(json.dumps(self.raw))
        if duration is not None:
            doc.setdefault("timing", {})["duration"] = duration
            doc["timing"].pop("samples", None)
        if mode is not None:
            doc["mode"] = mode
        for key, value in changes.items():
            doc[key] = value
        return parse_scenario(json.dumps(doc))


class _Collector:
    def __init__(self):
        self.errors = []

    def add(self, where, msg):
        self.errors.append(f"{where}: {msg}")

    def number(self, obj, key, where, default=None, positive=False, nonneg=False, required=False):
        if key not in obj:
            if required:
                self.add(f"{where}.{key}", "required field is missing")
            return default
        v = obj[key]
        if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
            self.add(f"{where}.{key}", f"expected a finite number, got {v!r}")
            return default
        if positive and not v > 0:
            self.add(f"{where}.{key}", f"must be positive, got {v}")
        if nonneg and v < 0:
            self.add(f"{where}.{key}", f"must be non-negative, got {v}")
        return float(v)

    def vector(self, obj, key, where, default=None, required=False):
        if key not in obj:
            if required:
                self.add(f"{where}.{key}", "required field is missing")
            return default
        try:
            arr = np.asarray(obj[key], dtype=float)
        except (TypeError, ValueError):
            self.add(f"{where}.{key}", "expected a list of 3 numbers")
            return default
        if arr.shape != (3,) or not np.all(np.isfinite(arr)):
            self.add(f"{where}.{key}", "expected a list of 3 finite numbers")
            return default
        return arr

    def matrix(self, obj, key, where, default):
        """3x3 matrix given as a scalar (times identity), a diagonal, or rows."""
        if key not in obj:
            return default
        try:
            arr = np.asarray(obj[key], dtype=float)
        except (TypeError, ValueError):
            self.add(f"{where}.{key}", "expected a number, a 3-vector diagonal or a 3x3 matrix")
            return default
        if arr.ndim == 0:
            return float(arr) * np.eye(3)
        if arr.shape == (3,):
            return np.diag(arr)
        if arr.shape == (3, 3):
            return arr
        self.add(f"{where}.{key}", "expected a number, a 3-vector diagonal or a 3x3 matrix")
        return default


_WEIGHT_KEYS = ("Q", "U", "Qc", "Uc", "m_eta", "lambda_eta", "a_eta", "envelope_rate", "r_eta",
                "T", "n_segments", "substeps", "v_gamma_max")
_GAIN_KEYS = ("K", "v_d", "y_switch")


def _weights(c: _Collector, obj: dict, where: str, lambda_eta: float) -> Optional[MpcWeights]:
    unknown = set(obj) - set(_WEIGHT_KEYS)
    for k in sorted(unknown):
        c.add(f"{where}.{k}", "unknown field")
    base = MpcWeights()
    kw = dict(
        Q=c.matrix(obj, "Q", where, base.Q), U=c.matrix(obj, "U", where, base.U),
        Qc=c.number(obj, "Qc", where, base.Qc), Uc=c.number(obj, "Uc", where, base.Uc),
        m_eta=c.number(obj, "m_eta", where, base.m_eta),
        lambda_eta=lambda_eta,
        a_eta=c.number(obj, "a_eta", where, base.a_eta),
        envelope_rate=c.number(obj, "envelope_rate", where, base.envelope_rate, nonneg=True),
        r_eta=c.number(obj, "r_eta", where, base.r_eta),
        T=c.number(obj, "T", where, base.T),
        n_segments=int(c.number(obj, "n_segments", where, base.n_segments)),
        substeps=int(c.number(obj, "substeps", where, base.substeps)),
        v_gamma_max=c.number(obj, "v_gamma_max", where, None),
    )
    try:
        return MpcWeights(**kw)
    except ValueError as exc:
        c.add(where, f"{exc} (needed for recursive feasibility and the value-function decrease)")
        return None


def _gains(c: _Collector, obj: dict, where: str, lambda_eta: float) -> Optional[AuxGains]:
    for k in sorted(set(obj) - set(_GAIN_KEYS)):
        c.add(f"{where}.{k}", "unknown field")
    base = AuxGains()
    try:
        return AuxGains(K=c.matrix(obj, "K", where, base.K), v_d=c.number(obj, "v_d", where, base.v_d),
                        lambda_eta=lambda_eta,
                        y_switch=c.number(obj, "y_switch", where, base.y_switch))
    except ValueError as exc:
        c.add(where, f"{exc} (the auxiliary law needs a positive definite K)")
        return None


def _path(c: _Collector, obj, where) -> Optional[PathSpec]:
    if not isinstance(obj, dict):
        c.add(where, "expected an object")
        return None
    if "kind" not in obj:
        c.add(f"{where}.kind", "required field is missing")
        return None
    kw = {"kind": obj["kind"], "allow_unbounded": bool(obj.get("allow_unbounded", False))}
    for key in ("origin", "direction", "offset", "normal"):
        v = c.vector(obj, key, where)
        if v is not None:
            kw[key] = v
    for key in ("radius", "pitch", "angular_rate", "amplitude", "frequency"):
        v = c.number(obj, key, where)
        if v is not None:
            kw[key] = v
    known = {"kind", "allow_unbounded", "origin", "direction", "offset", "normal", "radius",
             "pitch", "angular_rate", "amplitude", "frequency"}
    for k in sorted(set(obj) - known):
        c.add(f"{where}.{k}", "unknown field")
    try:
        return PathSpec(**kw)
    except PathError as exc:
        c.add(where, str(exc))
        return None


def _pose(c: _Collector, obj, where) -> Optional[Pose]:
    if not isinstance(obj, dict):
        c.add(where, "expected an object with p and either ypr or R")
        return None
    p = c.vector(obj, "p", where, required=True)
    if "R" in obj:
        R = np.asarray(obj["R"], dtype=float)
        if R.shape != (3, 3) or so3_error(R) > 1e-9:
            c.add(f"{where}.R", "must be a 3x3 rotation matrix (orthonormal, det +1)")
            return None
    else:
        ypr = c.vector(obj, "ypr", where, default=np.zeros(3))
        R = from_ypr(*ypr) if ypr is not None else None
    if p is None or R is None:
        return None
    return Pose(p, R)


def _speed(c: _Collector, obj, v_d):
    if obj is None:
        return v_d
    kind = obj.get("kind", "constant")
    if kind == "constant":
        return c.number(obj, "v_d", "speed", v_d)
    if kind == "table":
        try:
            tt = np.asarray(obj["t"], dtype=float)
            vv = np.asarray(obj["v"], dtype=float)
        except (KeyError, TypeError, ValueError):
            c.add("speed", "table speed needs numeric lists t and v")
            return v_d
        if tt.ndim != 1 or tt.shape != vv.shape or len(tt) < 2 or np.any(np.diff(tt) <= 0):
            c.add("speed", "t and v must be equal-length lists with strictly increasing t")
            return v_d
        return _TableSpeed(tt, vv)
    c.add("speed.kind", f"expected 'constant' or 'table', got {kind!r}")
    return v_d


@dataclass(frozen=True, eq=False)
class _TableSpeed:
    t: np.ndarray
    v: np.ndarray

    def __call__(self, tau):
        return float(np.interp(tau, self.t, self.v))


def _samples(c: _Collector, timing: dict, T_max: float):
    t0 = c.number(timing, "t0", "timing", 0.0)
    delta_lb = c.number(timing, "delta_lb", "timing", None, positive=True, required=True)
    dt = c.number(timing, "dt", "timing", 1e-3, positive=True)
    stride = int(c.number(timing, "record_stride", "timing", 10, positive=True))
    if "samples" in timing:
        try:
            samples = np.asarray(timing["samples"], dtype=float)
        except (TypeError, ValueError):
            c.add("timing.samples", "expected a list of numbers")
            return None
        if samples.ndim != 1 or len(samples) < 2:
            c.add("timing.samples", "need at least two sample instants")
            return None
        duration = float(samples[-1] - samples[0])
    else:
        delta = c.number(timing, "delta", "timing", 0.1, positive=True)
        duration = c.number(timing, "duration", "timing", 40.0, positive=True)
        if delta is None or duration is None:
            return None
        K = int(round(duration / delta))
        if not math.isclose(K * delta, duration, rel_tol=0, abs_tol=1e-9):
            c.add("timing.duration", "must be a whole number of sampling periods")
            return None
        samples = t0 + delta * np.arange(K + 1)
    if delta_lb is None or t0 is None:
        return None
    steps = np.diff(samples)
    if np.any(steps < delta_lb - 1e-12):
        c.add("timing", f"sampling interval {steps.min():g} below delta_lb={delta_lb:g} "
                        "(intervals must be bounded away from zero)")
    if np.any(steps > T_max + 1e-12):
        c.add("timing", f"sampling interval {steps.max():g} exceeds the horizon T={T_max:g} "
                        "(each interval must fit inside the prediction horizon)")
    if dt is not None:
        ratio = steps / dt
        if np.any(np.abs(ratio - np.round(ratio)) > 1e-6):
            c.add("timing.dt", "every sampling interval must be a whole number of steps")
    return Timing(t0=float(samples[0]), samples=samples, delta_lb=delta_lb, duration=duration,
                  dt=dt, record_stride=stride)


def parse_scenario(text: str) -> Scenario:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError([f"document: malformed JSON ({exc})"]) from None
    if not isinstance(doc, dict):
        raise ScenarioError(["document: expected a JSON object"])
    c = _Collector()
    known = {"name", "agents", "weights", "gains", "graph", "timing", "speed", "mode", "solver",
             "diagnostics", "consensus", "lambda_eta", "description"}
    for k in sorted(set(doc) - known):
        c.add(k, "unknown field")
    mode = doc.get("mode", "cpf")
    if mode not in MODES:
        c.add("mode", f"expected one of {MODES}, got {mode!r}")
    lambda_eta = c.number(doc, "lambda_eta", "document", 1.0, positive=True) or 1.0
    g_weights = doc.get("weights", {})
    g_gains = doc.get("gains", {})
    agents_doc = doc.get("agents")
    agents = []
    if not isinstance(agents_doc, list) or not agents_doc:
        c.add("agents", "expected a non-empty list")
        agents_doc = []
    for i, a in enumerate(agents_doc):
        where = f"agents[{i}]"
        if not isinstance(a, dict):
            c.add(where, "expected an object")
            continue
        for k in sorted(set(a) - {"pose", "offset", "path", "weights", "gains", "gamma0", "eta0",
                                  "u_max", "y_box"}):
            c.add(f"{where}.{k}", "unknown field")
        pose = _pose(c, a.get("pose"), f"{where}.pose")
        offset = c.vector(a, "offset", where, default=np.array([-0.5, 0.0, 0.0]))
        if offset is not None:
            try:
                delta_matrix(offset)
            except SingularOffsetError as exc:
                c.add(f"{where}.offset", f"{exc} (output dynamics must be invertible)")
        path = _path(c, a.get("path"), f"{where}.path")
        w = _weights(c, {**g_weights, **a.get("weights", {})}, f"{where}.weights", lambda_eta)
        gn = _gains(c, {**g_gains, **a.get("gains", {})}, f"{where}.gains", lambda_eta)
        gamma0 = c.number(a, "gamma0", where, 0.0)
        eta0 = c.number(a, "eta0", where, 0.0)
        u_max = c.vector(a, "u_max", where)
        y_box = c.vector(a, "y_box", where)
        if w is not None and eta0 is not None and abs(eta0) > w.a_eta:
            c.add(f"{where}.eta0", "initial eta must satisfy the exponential envelope at t0")
        agents.append(AgentSpec(pose=pose, offset=offset, path=path, weights=w, gains=gn,
                                gamma0=gamma0, eta0=eta0, u_max=u_max, y_box=y_box))
    n = len(agents_doc)

    graph = gain = None
    gdoc = doc.get("graph")
    if not isinstance(gdoc, dict):
        c.add("graph", "required object with edges and eps_bar")
    else:
        eps = c.number(gdoc, "eps_bar", "graph", None, required=True)
        edges = gdoc.get("edges", [])
        ew = gdoc.get("weights")
        try:
            if ew is not None and len(ew) != len(edges):
                raise net_graph.GraphError("weights must match edges one-to-one")
            emap = {}
            for k, e in enumerate(edges):
                if isinstance(e, dict):
                    emap[(int(e["from"]), int(e["to"]))] = float(e.get("weight", 1.0))
                else:
                    emap[tuple(int(x) for x in e)] = 1.0 if ew is None else float(ew[k])
            graph = net_graph.CommGraph(max(n, 1), emap)
        except KeyError:
            c.add("graph.edges", "edge objects need 'from' and 'to'")
        except (net_graph.GraphError, TypeError, ValueError) as exc:
            c.add("graph.edges", str(exc))
        if graph is not None and eps is not None:
            gain = net_graph.ConsensusGain(eps)
            try:
                gain.validate_for(graph)
            except net_graph.GraphError as exc:
                c.add("graph.eps_bar", str(exc))
            if mode in ("cpf", "decoupled", "consensus") and n > 1:
                if not graph.is_balanced():
                    c.add("graph", "graph must be balanced (in-weight equals out-weight at every "
                                   "agent) for the consensus convergence guarantee")
                if not graph.is_strongly_connected():
                    c.add("graph", "graph must be strongly connected for the consensus "
                                   "convergence guarantee")

    T_max = min((a.weights.T for a in agents if a.weights is not None), default=math.inf)
    timing_doc = doc.get("timing")
    timing = None
    if not isinstance(timing_doc, dict):
        c.add("timing", "required object (delta_lb plus delta/duration or samples)")
    else:
        timing = _samples(c, timing_doc, T_max)
    if timing is not None:
        for i, a in enumerate(agents):
            if a.weights is not None:
                h = a.weights.seg_len
                if abs(h / timing.dt - round(h / timing.dt)) > 1e-6:
                    c.add(f"agents[{i}].weights", "segment length T/n_segments must be a whole "
                                                  "number of integration steps")

    v_d = agents[0].gains.v_d if agents and agents[0].gains is not None else 2.0
    speed = _speed(c, doc.get("speed"), v_d)

    sdoc = doc.get("solver", {})
    solver = SolverConfig()
    try:
        solver = SolverConfig(**sdoc)
    except TypeError as exc:
        c.add("solver", str(exc))
    ddoc = doc.get("diagnostics", {})
    diag = Diagnostics(beta_gain=c.number(ddoc, "beta_gain", "diagnostics", 1.0, nonneg=True),
                       solver_tol=c.number(ddoc, "solver_tol", "diagnostics", 1e-3, nonneg=True))
    substeps = int(c.number(doc.get("consensus", {}), "substeps", "consensus", 100, positive=True))

    if c.errors:
        raise ScenarioError(c.errors)
    return Scenario(name=str(doc.get("name", "scenario")), agents=agents, graph=graph, gain=gain,
                    timing=timing, speed=speed, mode=mode, solver=solver, diagnostics=diag,
                    consensus_substeps=substeps, raw=doc)


def load_scenario(path) -> Scenario:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_scenario(fh.read())


def bundled_names() -> list[str]:
    root = resources.files("cpfmpc") / "data"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def bundled(name: str) -> Scenario:
    """Load one of the scenarios shipped with the package (``paper_q100`` etc.)."""
    fname = name if name.endswith(".json") else name + ".json"
    text = (resources.files("cpfmpc") / "data" / fname).read_text(encoding="utf-8")
    return parse_scenario(text)
