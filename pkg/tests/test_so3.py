"""Rotation algebra: exp/log maps, tangent map, composition."""

import numpy as np
import pytest

from mixedbeam.so3 import (
    EPS_PSI,
    Rotation,
    compose,
    exp_rotvec,
    log_rotation,
    quat_exp,
    quat_to_matrix,
    relative_rotvec,
    rotate,
    skew,
    tangent_map,
    unskew,
)

E1, E2, E3 = np.eye(3)


def random_rotvecs(n, max_angle=3.0, seed=0):
    rng = np.random.default_rng(seed)
    axis = rng.standard_normal((n, 3))
    axis /= np.linalg.norm(axis, axis=1, keepdims=True)
    return axis * rng.uniform(0.0, max_angle, n)[:, None]


def random_rotation(rng):
    return exp_rotvec(rng.standard_normal(3))


def series_exp(psi, terms=30):
    A = skew(psi)
    out, term = np.eye(3), np.eye(3)
    for k in range(1, terms + 1):
        term = term @ A / k
        out = out + term
    return out


class TestSkew:
    def test_zero(self):
        assert np.array_equal(skew(np.zeros(3)), np.zeros((3, 3)))

    def test_cross_product(self):
        assert np.allclose(skew(E1) @ E2, E3)
        rng = np.random.default_rng(1)
        v, b = rng.standard_normal((2, 3))
        assert np.allclose(skew(v) @ b, np.cross(v, b))

    def test_antisymmetric(self):
        v = np.random.default_rng(2).standard_normal(3)
        assert np.array_equal(skew(v) + skew(v).T, np.zeros((3, 3)))
        assert np.allclose(unskew(skew(v)), v)


class TestExp:
    def test_identity(self):
        assert np.allclose(exp_rotvec(np.zeros(3)).matrix, np.eye(3))

    def test_quarter_turn(self):
        R = exp_rotvec(0.5 * np.pi * E3).matrix
        assert np.allclose(R @ E1, E2, atol=1e-15)
        assert np.allclose(R @ E2, -E1, atol=1e-15)

    @pytest.mark.parametrize("seed", range(3))
    def test_series_oracle(self, seed):
        for psi in random_rotvecs(50, 3.0, seed):
            assert np.abs(exp_rotvec(psi).matrix - series_exp(psi)).max() <= 1e-12

    def test_orthogonal(self):
        for psi in random_rotvecs(200, 10.0):
            R = exp_rotvec(psi).matrix
            assert np.abs(R.T @ R - np.eye(3)).max() <= 1e-12
            assert abs(np.linalg.det(R) - 1.0) <= 1e-12

    def test_continuity_at_switch(self):
        axis = np.array([1.0, -2.0, 0.5]) / np.linalg.norm([1.0, -2.0, 0.5])
        below = quat_to_matrix(quat_exp(axis * EPS_PSI * (1 - 1e-12)))
        above = quat_to_matrix(quat_exp(axis * EPS_PSI * (1 + 1e-12)))
        assert np.abs(below - above).max() <= 1e-12
        # both branches against Rodrigues' formula at the switch
        psi = axis * EPS_PSI
        t = EPS_PSI
        rod = np.eye(3) + np.sin(t) / t * skew(psi) + (1 - np.cos(t)) / t**2 * skew(psi) @ skew(psi)
        assert np.abs(below - rod).max() <= 1e-12

    def test_small_angle_matches_second_order_series(self):
        psi = np.array([3e-5, -1e-5, 2e-5])
        A = skew(psi)
        assert np.abs(exp_rotvec(psi).matrix - (np.eye(3) + A + 0.5 * A @ A)).max() <= 1e-14

    @pytest.mark.parametrize("bad", [[np.nan, 0, 0], [np.inf, 0, 0], [1.0, 2.0]])
    def test_rejects_invalid(self, bad):
        with pytest.raises(ValueError):
            exp_rotvec(bad)


class TestLog:
    def test_identity(self):
        assert np.allclose(log_rotation(Rotation.identity()), 0.0)

    def test_half_turn(self):
        psi = log_rotation(Rotation.from_matrix(np.diag([1.0, -1.0, -1.0])))
        assert np.allclose(psi, np.pi * E1)

    def test_half_turn_tie_break_is_deterministic(self):
        # both signs of the axis give the same rotation; the first nonzero component comes out positive
        for axis in (E2, -E2, np.array([0.0, -1.0, 1.0]) / np.sqrt(2), np.array([-2.0, 1.0, 2.0]) / 3):
            half_turn = 2.0 * np.outer(axis, axis) - np.eye(3)
            psi = log_rotation(Rotation.from_matrix(half_turn))
            assert np.abs(exp_rotvec(psi).matrix - half_turn).max() <= 1e-12
            assert np.isclose(np.linalg.norm(psi), np.pi)
            assert psi[np.flatnonzero(np.abs(psi) > 1e-12)[0]] > 0

    def test_roundtrip(self):
        for psi in random_rotvecs(1000, np.pi - 1e-3, seed=3):
            assert np.linalg.norm(log_rotation(exp_rotvec(psi)) - psi) <= 1e-10

    def test_norm_bounded(self):
        for psi in random_rotvecs(200, 20.0, seed=4):
            out = log_rotation(exp_rotvec(psi))
            assert np.linalg.norm(out) <= np.pi + 1e-12
            assert np.abs(exp_rotvec(out).matrix - exp_rotvec(psi).matrix).max() <= 1e-12


class TestTangentMap:
    def test_zero(self):
        assert np.allclose(tangent_map(np.zeros(3)), np.eye(3))

    def test_finite_difference(self):
        rng = np.random.default_rng(5)
        h = 1e-6
        worst = 0.0
        for psi in random_rotvecs(1000, 3.0, seed=5):
            d = rng.standard_normal(3)
            R = exp_rotvec(psi).matrix
            spin = unskew((exp_rotvec(psi + h * d).matrix @ R.T - np.eye(3)) / h)
            ref = tangent_map(psi) @ d
            worst = max(worst, np.linalg.norm(spin - ref) / np.linalg.norm(ref))
        assert worst <= 1e-5

    def test_parallel_increment(self):
        psi = np.array([0.3, -1.2, 0.8])
        assert np.allclose(tangent_map(psi) @ (2.5 * psi), 2.5 * psi, atol=1e-12)

    def test_small_angle_series(self):
        psi = np.array([2e-5, 1e-5, -3e-5])
        A = skew(psi)
        assert np.abs(tangent_map(psi) - (np.eye(3) + 0.5 * A + A @ A / 6)).max() <= 1e-14


class TestCompose:
    def test_identity(self):
        b = exp_rotvec([0.3, 0.2, -1.0])
        assert np.allclose(compose(Rotation.identity(), b).quat, b.quat)

    def test_inverse(self):
        a = exp_rotvec([1.0, -0.5, 2.0])
        assert np.abs(compose(a, a.inverse()).matrix - np.eye(3)).max() <= 1e-12

    def test_matrix_oracle(self):
        rng = np.random.default_rng(6)
        for _ in range(200):
            a, b = random_rotation(rng), random_rotation(rng)
            assert np.abs((a @ b).matrix - a.matrix @ b.matrix).max() <= 1e-12
            assert abs(np.linalg.norm((a @ b).quat) - 1.0) <= 1e-12

    def test_from_matrix_roundtrip(self):
        rng = np.random.default_rng(7)
        for _ in range(200):
            a = random_rotation(rng)
            assert np.abs(Rotation.from_matrix(a.matrix).matrix - a.matrix).max() <= 1e-12


class TestRotate:
    def test_identity(self):
        v = np.array([1.0, 2.0, 3.0])
        assert np.allclose(rotate(Rotation.identity(), v), v)

    def test_quarter_turn(self):
        assert np.allclose(rotate(exp_rotvec(0.5 * np.pi * E3), E1), E2)

    def test_isometry(self):
        rng = np.random.default_rng(8)
        for _ in range(100):
            v = rng.standard_normal(3)
            assert abs(np.linalg.norm(rotate(random_rotation(rng), v)) - np.linalg.norm(v)) <= 1e-12


class TestRelativeRotvec:
    def test_same(self):
        a = exp_rotvec([0.1, 0.2, 0.3])
        assert np.allclose(relative_rotvec(a, a), 0.0)

    def test_from_identity(self):
        psi = np.array([0.4, -1.0, 2.0])
        assert np.allclose(relative_rotvec(Rotation.identity(), exp_rotvec(psi)), psi)

    def test_left_invariance(self):
        rng = np.random.default_rng(9)
        worst = 0.0
        for _ in range(1000):
            a, b, R = (random_rotation(rng) for _ in range(3))
            worst = max(worst, np.abs(relative_rotvec(R @ a, R @ b) - relative_rotvec(a, b)).max())
        assert worst <= 1e-12
