"""End-to-end acceptance checks, one test per criterion.

Run ``pytest tests/test_acceptance.py -v``; a PASS/FAIL line per criterion is
printed in the terminal summary. The long closed-loop runs come from the
session fixtures in ``conftest.py``.
"""

import math
import time

import numpy as np
from scipy.spatial.transform import Rotation

from cpfmpc import net_graph as ng
from cpfmpc.aux_control import (AuxGains, aux_input_bounds, delta_matrix, finite_time_envelope,
                                k_aux, k_aux_raw)
from cpfmpc.mpc import value_decrease_check
from cpfmpc.paths import PathSpec, eval_path, eval_path_derivative
from cpfmpc.sim.runner import run_consensus_only, run_decoupled
from cpfmpc.sim.scenario import bundled
from cpfmpc.vehicle import Pose, constant_input, integrate, output_y, rot_z, so3_error

GRAPH = ng.path_graph()
GAIN = ng.ConsensusGain(0.0125)
EPS = np.array([-0.5, 0.0, 0.0])


def consensus_scenario(gamma0, duration=40.0, speed=2.0):
    sc = bundled("consensus_demo")
    agents = [dict(a, gamma0=g) for a, g in zip(sc.raw["agents"], gamma0)]
    return sc.with_overrides(duration=duration, agents=agents,
                             speed={"kind": "constant", "v_d": speed})


def test_criterion_01_consensus_spectrum(detail):
    start = time.perf_counter()
    P = ng.perron(GRAPH, GAIN)
    rep = ng.verify_perron(GRAPH, GAIN)
    const = ng.iss_constants(GRAPH, GAIN)
    elapsed = time.perf_counter() - start
    row_err = np.max(np.abs(P.sum(axis=1) - 1))
    col_err = np.max(np.abs(P.sum(axis=0) - 1))
    detail += [f"row/col err {max(row_err, col_err):.1e}", f"lambda2 {const.lambda2:.12f}",
               f"mu2 {const.mu2:.12f}", f"{elapsed * 1e3:.1f} ms"]
    assert row_err <= 1e-12 and col_err <= 1e-12
    assert np.all(np.abs(rep.eigenvalues) <= 1 + 1e-12)
    assert rep.primitive and rep.doubly_stochastic
    assert abs(const.lambda2 - 1.0) <= 1e-9
    assert abs(const.mu2 - 0.9875) <= 1e-9
    assert elapsed < 1.0


def test_criterion_02_iss_decrease(detail):
    worst = math.inf
    rng = np.random.default_rng(0)
    for a_eta, lam in ((1.0, 1.0), (5.0, 0.2), (0.5, 0.05)):
        freq = rng.uniform(0.5, 3.0, 3)
        phase = rng.uniform(0, 2 * np.pi, 3)

        def eta_fn(t, a_eta=a_eta, lam=lam, freq=freq, phase=phase):
            # |eta_i(t)| <= a_eta e^{-lam t}
            return a_eta * math.exp(-lam * t) * np.sin(freq * t + phase)

        sc = consensus_scenario((15.0, 10.0, 5.0), duration=10.0)
        tr = run_consensus_only(sc, eta_fn=eta_fn)
        xi, eta_k = tr.samples["gamma"], tr.samples["eta_int"]
        decay = np.exp(-lam * sc.timing.samples[:-1])[:, None]
        assert np.all(np.abs(eta_k[:-1]) <= 0.1 * a_eta * decay + 1e-15)
        for k in range(100):
            res = ng.iss_step_check(GRAPH, GAIN, xi[k], eta_k[k], xi[k + 1], tol=1e-9)
            worst = min(worst, res.margin)
            assert res.passed, (a_eta, lam, k, res)
    tr = run_consensus_only(consensus_scenario((15.0, 10.0, 5.0), duration=10.0))
    mu2 = ng.iss_constants(GRAPH, GAIN).mu2
    # Phi is shift invariant; zeta is gamma without the common drift, which
    # would otherwise cost ~1e-12 of cancellation in the mean removal
    Phi = np.array([ng.disagreement(x).phi for x in tr.samples["zeta"]])
    slack = Phi - mu2 ** (2 * np.arange(len(Phi))) * Phi[0]
    detail += [f"min ISS margin {worst:.3e}", f"max geometric excess {slack.max():.3e}"]
    assert np.all(slack <= 1e-12)


def test_criterion_03_sampled_signal_equivalence(detail):
    sc = consensus_scenario((15.0, 10.0, 5.0))
    tr = run_consensus_only(sc)
    assert len(sc.timing.samples) - 1 == 400
    xi = np.array([15.0, 10.0, 5.0])
    worst = 0.0
    for z in tr.samples["zeta"]:
        worst = max(worst, float(np.max(np.abs(z - xi))))
        xi = xi + ng.consensus_step(xi, GRAPH, GAIN)
    phi = np.array([ng.disagreement_fn(z, GRAPH).phi for z in tr.samples["gamma"]])
    still = run_consensus_only(consensus_scenario((15.0, 10.0, 5.0), speed=0.0))
    speed_effect = float(np.max(np.abs(tr.phi - still.phi)))
    detail += [f"max |continuous - discrete| {worst:.2e}", f"phi change from g {speed_effect:.1e}"]
    assert worst <= 1e-9
    assert np.all(np.diff(phi) <= 1e-12)
    assert speed_effect <= 1e-12


def test_criterion_04_finite_time_envelope(detail):
    gains = AuxGains(K=0.2 * np.eye(3), v_d=2.0)
    path = PathSpec("sinusoid-offset-line", amplitude=1.0, frequency=0.2, allow_unbounded=True)
    R0 = Rotation.from_euler("ZYX", [0.3, 0.1, -0.2]).as_matrix()
    y_dir = np.array([2.0, -1.0, 2.0]) / 3.0
    # place the vehicle so that y(0) = y_dir exactly
    p0 = eval_path(path, 15.0) - R0 @ EPS + R0 @ y_dir
    pose0 = Pose(p0, R0)
    y0 = np.linalg.norm(output_y(pose0, EPS, path, 15.0))

    def u_gamma(t):
        return math.cos(0.7 * t)  # |u_gamma| <= r_eta = 1

    def inputs(t, p, R, gamma, eta):
        return k_aux(t, Pose(p, R), gamma, u_gamma(t), path, gains, EPS), 0.0, u_gamma(t)

    norms, times = [], []

    def cb(step, t, p, R, gamma, eta):
        times.append(t)
        norms.append(np.linalg.norm(output_y(Pose(p, R), EPS, path, gamma)))

    integrate(pose0, 15.0, 0.0, inputs, 1e-3, 8000, g=gains.v_d, callback=cb)
    times, norms = np.array(times), np.array(norms)
    env = np.array([finite_time_envelope(y0, gains, t) for t in times])
    excess = float(np.max(norms - env))
    t_hit = float(times[np.argmax(norms <= 1e-3)])
    detail += [f"|y0| {y0:.6f}", f"|y| <= 1e-3 at t={t_hit:.3f}", f"max excess {excess:.2e}"]
    assert abs(y0 - 1.0) < 1e-12
    assert np.all(norms[times >= 5.1] <= 1e-3)
    assert excess <= 1e-3


def test_criterion_05_feasibility_bounds(detail):
    gains = AuxGains(K=0.2 * np.eye(3), v_d=2.0)
    path = PathSpec("sinusoid-offset-line", amplitude=1.0, frequency=0.2, allow_unbounded=True)
    bound = np.array(aux_input_bounds(path, EPS, gains, r_eta=1.0))
    _, Dinv = delta_matrix(EPS)
    rng = np.random.default_rng(5)
    n = 10_000
    R = Rotation.random(n, random_state=6).as_matrix()
    y = rng.normal(size=(n, 3)) * rng.choice([1e-6, 1e-2, 1.0, 1e3], size=(n, 1))
    gamma = rng.uniform(-200, 200, n)
    ug = rng.uniform(-1, 1, n)
    u = k_aux_raw(R, y, eval_path_derivative(path, gamma), gains.v_d + ug, gains.K, Dinv,
                  gains.y_switch)
    violations = int(np.sum(np.any(np.abs(u) > bound, axis=1)))
    detail += [f"box {np.round(bound, 4).tolist()}",
               f"max |u|/bound {np.max(np.abs(u) / bound):.4f}", f"violations {violations}"]
    assert violations == 0


def test_criterion_06_mpc_fixed_point(fixed_point_run, detail):
    tr = fixed_point_run
    J = tr.samples["J_star"]
    detail += [f"max J* {np.max(J):.2e}", f"max |y| {np.max(tr.y_norm):.2e}",
               f"max phi {np.max(tr.phi):.1e}", f"t_end {tr.t[-1]:g}"]
    assert tr.completed and tr.t[-1] == 10.0
    assert np.all(J <= 1e-6)
    assert np.all(tr.y_norm < 1e-3)
    assert np.all(tr.phi < 1e-9)


def test_criterion_07_recursive_feasibility(q100_run, detail):
    wv = q100_run.samples["warm_violation"]
    detail += [f"samples {wv.shape[0]}", f"max warm-start violation {np.max(wv):.2e}"]
    assert wv.shape[0] == 400
    assert np.all(wv <= 1e-6)


def test_criterion_08_transient_tradeoff(q100_run, q01_run, detail):
    phi_end = float(q100_run.phi[-1])
    max_phi = float(np.max(q100_run.phi))
    y_end = q100_run.y_norm[-1]
    max_phi_low = float(np.max(q01_run.phi))
    detail += [f"Q=100: phi(40) {phi_end:.3e}, max phi {max_phi:.4f}, "
               f"|y(40)| max {np.max(y_end):.2e}",
               f"Q=0.1: max phi {max_phi_low:.2e} ({max_phi_low / max_phi:.2%} of Q=100)"]
    assert q100_run.t[-1] == 40.0 and q01_run.t[-1] == 40.0
    assert np.all(y_end < 0.05)
    assert phi_end < 1e-2
    assert max_phi > 10 * phi_end
    assert max_phi_low < 0.05 * max_phi


def test_criterion_09_decoupled_baseline(decoupled_q100_run, decoupled_q01_run, q100_run, detail):
    same = (np.array_equal(decoupled_q100_run.gamma, decoupled_q01_run.gamma)
            and np.array_equal(decoupled_q100_run.samples["gamma"],
                               decoupled_q01_run.samples["gamma"]))
    mu2 = ng.iss_constants(GRAPH, GAIN).mu2

    def geometric_excess(tr):
        Phi = np.array([ng.disagreement(x).phi for x in tr.samples["gamma"]])
        return float(np.max(Phi - mu2 ** (2 * np.arange(len(Phi))) * Phi[0]))

    # the bundled scenario starts at consensus, so also decay from a spread start
    raw = bundled("paper_q100").raw
    agents = [dict(a, gamma0=g) for a, g in zip(raw["agents"], (15.0, 10.0, 5.0))]
    spread = run_decoupled(bundled("paper_q100").with_overrides(duration=10.0, agents=agents))
    excess = max(geometric_excess(decoupled_q100_run), geometric_excess(spread))
    cost_dec = decoupled_q100_run.tracking_cost()
    cost_cpf = q100_run.tracking_cost()
    detail += [f"gamma bitwise equal across Q: {same}", f"geometric excess {excess:.1e}",
               f"tracking cost decoupled {cost_dec:.3f} vs coupled {cost_cpf:.3f}"]
    assert same
    assert excess <= 1e-9
    assert cost_dec > cost_cpf


def test_criterion_10_value_decrease(q100_run, q100_scenario, fixed_point_run,
                                     fixed_point_scenario, detail):
    def flags(tr, sc):
        s = tr.samples
        return value_decrease_check(s["J_star"], s["stage_integral"], s["k_con"],
                                    sc.timing.delta_lb, solver_tol=1e-3,
                                    beta_gain=sc.diagnostics.beta_gain)

    main = flags(q100_run, q100_scenario)
    fixed = flags(fixed_point_run, fixed_point_scenario)
    detail += [f"Q=100 flagged {main.n_flagged}/{main.flagged.size} "
               f"({main.fraction_flagged:.2%})", f"fixed point flagged {fixed.n_flagged}"]
    assert main.fraction_flagged <= 0.05
    assert fixed.n_flagged == 0


def test_criterion_11_numerics_hygiene(q100_run, q01_run, fixed_point_run, decoupled_q100_run,
                                       detail):
    drift = max(so3_error(tr.R) for tr in (q100_run, q01_run, fixed_point_run, decoupled_q100_run))
    paths = [PathSpec("line", direction=[1, 2, -1], allow_unbounded=True),
             PathSpec("circular-helix", radius=3.0, pitch=0.7, angular_rate=0.4,
                      allow_unbounded=True),
             PathSpec("circular-helix", radius=2.0, angular_rate=-1.3),
             PathSpec("sinusoid-offset-line", amplitude=1.0, frequency=0.2, allow_unbounded=True)]
    g = np.linspace(-20, 20, 401)
    h = 1e-5
    fd_err = max(float(np.max(np.abs((eval_path(s, g + h) - eval_path(s, g - h)) / (2 * h)
                                     - eval_path_derivative(s, g)))) for s in paths)
    T = 1.5
    exact_R = rot_z(math.pi * T)
    exact_p = np.array([math.sin(math.pi * T), 1 - math.cos(math.pi * T), 0.0]) / math.pi
    errs = []
    for dt in (0.1, 0.05, 0.025):
        pose, _, _ = integrate(Pose(np.zeros(3), np.eye(3)), 0.0, 0.0,
                               constant_input([1.0, 0.0, math.pi]), dt, int(round(T / dt)))
        errs.append(max(np.abs(pose.R - exact_R).max(), np.abs(pose.p - exact_p).max()))
    orders = [math.log2(errs[i] / errs[i + 1]) for i in range(2)]
    detail += [f"SO(3) drift {drift:.1e}", f"path FD err {fd_err:.1e}",
               f"RK4 observed order {orders[0]:.2f}, {orders[1]:.2f}"]
    assert drift < 1e-9
    assert fd_err < 1e-6
    assert all(3.6 < o < 4.4 for o in orders)
