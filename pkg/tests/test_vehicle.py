import math

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from cpfmpc.paths import PathSpec, eval_path, eval_path_derivative
from cpfmpc.vehicle import (PiecewiseInput, Pose, constant_input, dynamics, from_ypr, integrate,
                            output_rate, output_y, reorthonormalize, rot_z, skew, so3_error)

EPS = np.array([-0.5, 0.0, 0.0])


def random_rotations(n, seed=0):
    return Rotation.random(n, random_state=seed).as_matrix()


def test_skew_examples():
    np.testing.assert_array_equal(skew([0, 2, 3]), [[0, -3, 2], [3, 0, 0], [-2, 0, 0]])
    np.testing.assert_array_equal(skew([0, 0, 0]), np.zeros((3, 3)))
    rng = np.random.default_rng(0)
    for w in rng.normal(size=(100, 3)):
        np.testing.assert_allclose(skew(w) @ w, 0, atol=1e-12)
        x = rng.normal(size=3)
        np.testing.assert_allclose(skew(w) @ x, np.cross(w, x), atol=1e-12)


def test_dynamics_examples():
    pd, Rd = dynamics(Pose(np.zeros(3), np.eye(3)), [1, 0, 0])
    np.testing.assert_array_equal(pd, [1, 0, 0])
    np.testing.assert_array_equal(Rd, np.zeros((3, 3)))
    pd, Rd = dynamics(np.ones(3), from_ypr(0.3, 0.2, 0.1), np.zeros(3))
    assert not pd.any() and not Rd.any()
    pd, _ = dynamics(Pose(np.zeros(3), rot_z(math.pi / 2)), [2, 0, 0])
    np.testing.assert_allclose(pd, [0, 2, 0], atol=1e-15)


def test_ypr_matches_scipy():
    R = from_ypr(0.3, -0.2, 0.1)
    ref = Rotation.from_euler("ZYX", [0.3, -0.2, 0.1]).as_matrix()
    np.testing.assert_allclose(R, ref, atol=1e-14)


def test_integrate_linear_gamma_flow():
    pose, gamma, eta = integrate(Pose(np.array([1.0, 2, 3]), np.eye(3)), 5.0, 0.0,
                                 constant_input(np.zeros(3)), 1e-3, 1000, g=2.0)
    assert gamma == pytest.approx(7.0, abs=1e-12)
    np.testing.assert_array_equal(pose.p, [1, 2, 3])


def test_integrate_eta_exponential_feedback():
    def inputs(t, p, R, gamma, eta):
        return np.zeros(3), -1.0 * eta, 0.0

    _, _, eta = integrate(Pose(np.zeros(3), np.eye(3)), 0.0, 1.0, inputs, 1e-3, 1000)
    assert eta == pytest.approx(math.exp(-1.0), abs=1e-9)


def _spin_error(dt):
    steps = int(round(2.0 / dt))
    pose, _, _ = integrate(Pose(np.zeros(3), np.eye(3)), 0.0, 0.0,
                           constant_input([1.0, 0.0, math.pi]), dt, steps)
    return pose


def test_rotation_flow_closed_form():
    pose = _spin_error(1e-3)
    # rotation by 2 pi about body z returns to identity; position traces a full circle
    np.testing.assert_allclose(pose.R, np.eye(3), atol=1e-7)
    np.testing.assert_allclose(pose.p, [0, 0, 0], atol=1e-7)
    assert so3_error(pose.R) < 1e-9


def test_rk4_fourth_order_on_rotation_flow():
    # closed form at t = 1.5 s: R = Rz(pi t), p = (sin(pi t), 1 - cos(pi t), 0) / pi
    T = 1.5
    exact_R = rot_z(math.pi * T)
    exact_p = np.array([math.sin(math.pi * T), 1 - math.cos(math.pi * T), 0.0]) / math.pi
    errs = []
    for dt in (0.1, 0.05, 0.025):
        pose, _, _ = integrate(Pose(np.zeros(3), np.eye(3)), 0.0, 0.0,
                               constant_input([1.0, 0.0, math.pi]), dt, int(round(T / dt)))
        errs.append(max(np.abs(pose.R - exact_R).max(), np.abs(pose.p - exact_p).max()))
    ratios = [errs[i] / errs[i + 1] for i in range(2)]
    for r in ratios:
        assert 12 < r < 20, ratios


def test_so3_preserved_on_random_inputs():
    rng = np.random.default_rng(3)
    times = np.arange(0, 5, 0.05)
    u = np.column_stack([rng.uniform(0, 3, len(times)), rng.uniform(-2, 2, (len(times), 2))])
    inp = PiecewiseInput(times, u, np.zeros(len(times)), np.zeros(len(times)))
    R0 = random_rotations(1, seed=4)[0]
    errs = []
    integrate(Pose(np.zeros(3), R0), 0.0, 0.0, inp, 1e-3, 5000,
              callback=lambda k, t, p, R, g, e: errs.append(so3_error(R)))
    assert max(errs) < 1e-9


def test_batched_agents_match_single():
    R0 = random_rotations(3, seed=1)
    p0 = np.arange(9.0).reshape(3, 3)
    u = np.array([[1.0, 0.2, -0.3], [2.0, -0.5, 0.1], [0.5, 0.0, 0.7]])
    inp = PiecewiseInput([0.0], u[None], np.zeros((1, 3)), np.zeros((1, 3)))
    pose, _, _ = integrate(Pose(p0, R0), np.zeros(3), np.zeros(3), inp, 1e-2, 50)
    for i in range(3):
        single, _, _ = integrate(Pose(p0[i], R0[i]), 0.0, 0.0, constant_input(u[i]), 1e-2, 50)
        np.testing.assert_allclose(pose.p[i], single.p, atol=1e-13)
        np.testing.assert_allclose(pose.R[i], single.R, atol=1e-13)


def test_reorthonormalize_contracts_error():
    R = random_rotations(1, seed=2)[0] + 1e-4 * np.random.default_rng(0).normal(size=(3, 3))
    assert so3_error(reorthonormalize(R)) < so3_error(R) ** 2 * 10
    assert so3_error(-np.eye(3)) == math.inf


def test_output_examples():
    origin = PathSpec("line", origin=[0, 0, 0], allow_unbounded=True)
    y = output_y(Pose(np.array([1.0, 0, 0]), np.eye(3)), EPS, origin, 0.0)
    np.testing.assert_allclose(y, [0.5, 0, 0])
    path = PathSpec("circular-helix", radius=3.0, angular_rate=0.5)
    for R in random_rotations(20, seed=5):
        g = 1.3
        # place the offset point exactly on the path
        p = eval_path(path, g) - R @ EPS
        np.testing.assert_allclose(output_y(Pose(p, R), EPS, path, g), 0, atol=1e-12)
        p2 = p + np.array([0.3, -1.0, 2.0])
        assert np.linalg.norm(output_y(Pose(p2, R), EPS, path, g)) == pytest.approx(
            np.linalg.norm([0.3, -1.0, 2.0]), abs=1e-12)


def test_output_rate_examples():
    path = PathSpec("circular-helix", radius=2.0, angular_rate=0.3)
    pose = Pose(np.array([1.0, 2.0, 0.5]), from_ypr(0.4, 0.1, -0.2))
    np.testing.assert_allclose(output_rate(pose, np.zeros(3), 0.7, 0.0, EPS, path), 0, atol=1e-15)


def test_output_rate_matches_finite_differences():
    rng = np.random.default_rng(7)
    path = PathSpec("sinusoid-offset-line", amplitude=1.0, frequency=0.4, allow_unbounded=True)
    h = 1e-5
    worst = 0.0
    for R0 in random_rotations(10, seed=8):
        u = np.array([rng.uniform(0.5, 2), *rng.uniform(-1, 1, 2)])
        gdot = rng.uniform(-1, 3)
        p0 = rng.normal(size=3)
        g0 = rng.uniform(-3, 3)
        fwd, _, _ = integrate(Pose(p0, R0), g0, 0.0, constant_input(u), h, 1, g=gdot)
        # backward step = forward step of the reversed flow
        back, _, _ = integrate(Pose(p0, R0), g0, 0.0, constant_input(-u), h, 1, g=-gdot)
        y_f = output_y(fwd, EPS, path, g0 + gdot * h)
        y_b = output_y(back, EPS, path, g0 - gdot * h)
        fd = (y_f - y_b) / (2 * h)
        exact = output_rate(Pose(p0, R0), u, g0, gdot, EPS, path)
        worst = max(worst, np.abs(fd - exact).max())
    assert worst < 1e-6
