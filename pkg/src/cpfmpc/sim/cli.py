"""Command-line entry point: ``cpfmpc {run,check,diag,compare}``.

Exit codes: 0 success, 2 scenario validation failure, 3 solver infeasibility.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .. import net_graph
from ..mpc import value_decrease_check
from .export import emit_plot_data, export_trace, read_trace, summary, write_summary
from .runner import SimulationAborted, run_consensus_only, run_cpf, run_decoupled
from .scenario import MODES, ScenarioError, bundled, bundled_names, load_scenario

EXIT_OK, EXIT_INVALID, EXIT_INFEASIBLE = 0, 2, 3
RUNNERS = {"cpf": run_cpf, "decoupled": run_decoupled, "consensus": run_consensus_only}


def resolve_scenario(ref: str):
    """A file path, or the name of a bundled scenario."""
    if Path(ref).exists():
        return load_scenario(ref)
    if ref.removesuffix(".json") in bundled_names():
        return bundled(ref)
    raise ScenarioError([f"scenario: no file or bundled scenario named {ref!r} "
                         f"(bundled: {', '.join(bundled_names())})"])


def _write_outputs(trace, sc, out):
    export_trace(trace, out)
    emit_plot_data(trace, out, scenario=sc if trace.mode != "consensus" else None)
    write_summary(trace, out)


def cmd_run(args) -> int:
    sc = resolve_scenario(args.scenario)
    mode = args.mode or sc.mode
    if args.duration is not None or mode != sc.mode:
        sc = sc.with_overrides(duration=args.duration, mode=mode)
    out = Path(args.out or f"out/{sc.name}_{mode}")
    try:
        trace = RUNNERS[mode](sc)
    except SimulationAborted as exc:
        _write_outputs(exc.trace, sc, out)
        print(f"solver infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    _write_outputs(trace, sc, out)
    print(json.dumps(summary(trace), indent=2))
    return EXIT_OK


def cmd_check(args) -> int:
    sc = resolve_scenario(args.scenario)
    print(f"{sc.name}: ok ({sc.n_agents} agents, mode {sc.mode}, "
          f"{len(sc.timing.samples) - 1} samples)")
    return EXIT_OK


def diag_report(trace, sc) -> dict:
    """Value-decrease flags and per-step ISS checks from a stored trace."""
    s = trace.samples
    report = {}
    if "J_star" in s and np.all(np.isfinite(s["J_star"])):
        vd = value_decrease_check(s["J_star"], s["stage_integral"], s["k_con"],
                                  sc.timing.delta_lb, solver_tol=sc.diagnostics.solver_tol,
                                  beta_gain=sc.diagnostics.beta_gain)
        report["value_decrease"] = {"samples": int(vd.flagged.size), "flagged": vd.n_flagged,
                                    "fraction": vd.fraction_flagged}
    if "gamma" in s and "k_con" in s and len(s["gamma"]) > 1:
        xi = s["gamma"]
        # everything that moved gamma besides the consensus action
        eta_k = xi[1:] - xi[:-1] - s["k_con"][:-1]
        worst = np.inf
        for k in range(len(xi) - 1):
            res = net_graph.iss_step_check(sc.graph, sc.gain, xi[k], eta_k[k], xi[k + 1])
            worst = min(worst, res.margin)
        report["iss"] = {"steps": len(xi) - 1, "min_margin": float(worst),
                         "passed": bool(worst >= -1e-9)}
    return report


def cmd_diag(args) -> int:
    sc = resolve_scenario(args.scenario)
    trace = read_trace(args.trace)
    print(json.dumps(diag_report(trace, sc), indent=2))
    return EXIT_OK


def cmd_compare(args) -> int:
    a = json.loads((Path(args.first) / "summary.json").read_text())
    b = json.loads((Path(args.second) / "summary.json").read_text())
    rows = {}
    for key in ("phi_final", "max_phi", "tracking_cost"):
        va, vb = a.get(key), b.get(key)
        ratio = (vb / va) if (va not in (None, 0) and vb is not None) else None
        rows[key] = {"first": va, "second": vb, "second_over_first": ratio}
    rows["y_final_norms"] = {"first": a.get("y_final_norms"), "second": b.get("y_final_norms")}
    print(json.dumps(rows, indent=2))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cpfmpc",
                                 description="Cooperative path-following simulator")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="simulate a scenario and write trace, plot data, summary")
    r.add_argument("--scenario", required=True, help="JSON file or bundled scenario name")
    r.add_argument("--out", help="output directory (default out/<name>_<mode>)")
    r.add_argument("--mode", choices=MODES, help="override the scenario mode")
    r.add_argument("--duration", type=float, help="override the duration in seconds")
    r.add_argument("--seed", type=int, default=0, help="reserved; the simulator is deterministic")
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("check", help="validate a scenario file")
    c.add_argument("--scenario", required=True)
    c.set_defaults(func=cmd_check)

    d = sub.add_parser("diag", help="value-decrease and ISS reports for a stored trace")
    d.add_argument("--scenario", required=True)
    d.add_argument("--trace", required=True, help="directory written by 'run'")
    d.set_defaults(func=cmd_diag)

    m = sub.add_parser("compare", help="side-by-side metrics of two run directories")
    m.add_argument("first")
    m.add_argument("second")
    m.set_defaults(func=cmd_compare)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    try:
        return args.func(args)
    except ScenarioError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
