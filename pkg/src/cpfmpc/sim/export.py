"""Trace serialization: CSV traces, plot-ready column files and JSON summaries."""

from __future__ import annotations

import csv
import json
import os
from pathlib import Path

import numpy as np

from ..paths import eval_path
from .runner import Trace

TRACE_COLUMNS = (["t", "agent", "px", "py", "pz"]
                 + [f"r{i}{j}" for i in range(1, 4) for j in range(1, 4)]
                 + ["gamma", "eta", "y1", "y2", "y3", "v1", "w2", "w3", "v_gamma", "phi", "J_star"])
SAMPLE_COLUMNS = ["t", "agent", "gamma", "k_con", "J_star", "stage_integral", "iterations",
                  "evaluations", "max_violation", "warm_violation", "used_warm", "y_norm"]


def _fmt(x) -> str:
    # repr gives the shortest string that parses back to the same double
    return repr(float(x))


def _ensure_dir(out) -> Path:
    out = Path(out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    if not os.access(out, os.W_OK):
        raise OSError(f"output directory {out} is not writable")
    return out


def export_trace(trace: Trace, out, fmt: str = "csv") -> list[Path]:
    """Write ``trace.csv`` (and ``samples.csv`` when per-sample data exist)."""
    if fmt != "csv":
        raise ValueError(f"unsupported trace format {fmt!r}")
    if len(trace.t) == 0:
        raise ValueError("trace is empty")
    out = _ensure_dir(out)
    written = [out / "trace.csv"]
    with open(written[0], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_COLUMNS)
        for r in range(len(trace.t)):
            for a in range(trace.n_agents):
                row = [_fmt(trace.t[r]), str(a)]
                row += [_fmt(v) for v in trace.p[r, a]]
                row += [_fmt(v) for v in trace.R[r, a].ravel()]
                row += [_fmt(trace.gamma[r, a]), _fmt(trace.eta[r, a])]
                row += [_fmt(v) for v in trace.y[r, a]]
                row += [_fmt(v) for v in trace.u[r, a]]
                row += [_fmt(trace.v_gamma[r, a]), _fmt(trace.phi[r]), _fmt(trace.J_star[r, a])]
                w.writerow(row)
    s = trace.samples
    if s and "t" in s:
        path = out / "samples.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(SAMPLE_COLUMNS)
            for k in range(len(s["t"])):
                for a in range(trace.n_agents):
                    row = [_fmt(s["t"][k]), str(a)]
                    for col in SAMPLE_COLUMNS[2:]:
                        row.append(_fmt(s[col][k, a]) if col in s else "nan")
                    w.writerow(row)
        written.append(path)
    return written


def read_trace(directory, mode: str = "unknown") -> Trace:
    """Inverse of :func:`export_trace`."""
    directory = Path(directory)
    data = np.genfromtxt(directory / "trace.csv", delimiter=",", names=True, dtype=float)
    data = np.atleast_1d(data)
    agents = data["agent"].astype(int)
    A = int(agents.max()) + 1
    n = len(data) // A

    def col(name):
        return data[name].reshape(n, A)

    def stack(names):
        return np.stack([col(c) for c in names], axis=-1)

    R = stack([f"r{i}{j}" for i in range(1, 4) for j in range(1, 4)]).reshape(n, A, 3, 3)
    samples = {}
    sp = directory / "samples.csv"
    if sp.exists():
        sd = np.atleast_1d(np.genfromtxt(sp, delimiter=",", names=True, dtype=float))
        K = len(sd) // A
        for c in SAMPLE_COLUMNS[2:]:
            samples[c] = sd[c].reshape(K, A)
        samples["t"] = sd["t"].reshape(K, A)[:, 0]
    return Trace(mode=mode, n_agents=A, t=col("t")[:, 0], p=stack(["px", "py", "pz"]), R=R,
                 gamma=col("gamma"), eta=col("eta"), y=stack(["y1", "y2", "y3"]),
                 u=stack(["v1", "w2", "w3"]), v_gamma=col("v_gamma"),
                 u_gamma_aux=np.full((n, A), np.nan), phi=col("phi")[:, 0], J_star=col("J_star"),
                 samples=samples)


def emit_plot_data(trace: Trace, out, scenario=None, path_points: int = 400) -> list[Path]:
    """Whitespace-separated columns for external plotting.

    ``positions.dat``: ``t agent px py pz``. ``paths.dat`` (needs the
    scenario): ``agent gamma cx cy cz`` over the visited parameter range.
    ``series.dat``: ``t gamma_0.. phi ynorm_0..``.
    """
    if len(trace.t) == 0:
        raise ValueError("trace is empty")
    out = _ensure_dir(out)
    A = trace.n_agents
    written = []
    pos = out / "positions.dat"
    with open(pos, "w") as fh:
        fh.write("# t agent px py pz\n")
        for r in range(len(trace.t)):
            for a in range(A):
                px, py, pz = trace.p[r, a]
                fh.write(f"{_fmt(trace.t[r])} {a} {_fmt(px)} {_fmt(py)} {_fmt(pz)}\n")
    written.append(pos)
    if scenario is not None:
        pp = out / "paths.dat"
        with open(pp, "w") as fh:
            fh.write("# agent gamma cx cy cz\n")
            for a in range(A):
                g = trace.gamma[:, a]
                grid = np.linspace(np.nanmin(g), np.nanmax(g), path_points)
                pts = eval_path(scenario.agents[a].path, grid)
                for gv, (cx, cy, cz) in zip(grid, pts):
                    fh.write(f"{a} {_fmt(gv)} {_fmt(cx)} {_fmt(cy)} {_fmt(cz)}\n")
                fh.write("\n")
        written.append(pp)
    ser = out / "series.dat"
    yn = trace.y_norm
    with open(ser, "w") as fh:
        head = (["t"] + [f"gamma_{a}" for a in range(A)] + ["phi"]
                + [f"ynorm_{a}" for a in range(A)])
        fh.write("# " + " ".join(head) + "\n")
        for r in range(len(trace.t)):
            vals = [trace.t[r], *trace.gamma[r], trace.phi[r], *yn[r]]
            fh.write(" ".join(_fmt(v) for v in vals) + "\n")
    written.append(ser)
    return written


def summary(trace: Trace) -> dict:
    yn = trace.y_norm[-1]
    out = {
        "mode": trace.mode,
        "completed": trace.completed,
        "error": trace.error,
        "t_final": float(trace.t[-1]),
        "phi_final": float(trace.phi[-1]),
        "max_phi": float(np.max(trace.phi)),
        "y_final_norms": [float(v) for v in yn],
        "tracking_cost": trace.tracking_cost() if np.all(np.isfinite(trace.y)) else None,
    }
    s = trace.samples
    for key in ("max_violation", "warm_violation"):
        if key in s:
            out[f"{key}_max"] = float(np.max(s[key]))
    if "iterations" in s:
        out["mean_iterations"] = float(np.mean(s["iterations"]))
    return out


def write_summary(trace: Trace, out) -> Path:
    out = _ensure_dir(out)
    path = out / "summary.json"
    with open(path, "w") as fh:
        json.dump(summary(trace), fh, indent=2)
        fh.write("\n")
    return path
