"""Mixed element: bases, quadrature, energy, residual, tangent and condensation."""

import numpy as np
import pytest

from mixedbeam.constitutive import CrossSection, curvature_local
from mixedbeam.element import (
    ElementDef,
    ElementDofs,
    ElementLoads,
    RelativeRotationTooLarge,
    SingularCondensationBlock,
    condensable_indices,
    condense,
    element_energy,
    element_residual,
    element_tangent,
    gauss_rule,
    ho_field,
    interface_jump,
    legendre_basis,
    local_rotation,
    local_slices,
    n_local,
    quadrature_rules,
)
from mixedbeam.so3 import Rotation, exp_rotvec, log_rotation

E1, E2, E3 = np.eye(3)
CS = CrossSection(EA=100.0, GA2=50.0, GA3=50.0, GIt=3.0, EI2=4.0, EI3=5.0)
MODES = ["full", "reduced_gamma"]


def make_def(k, rng=None, L=2.0, q0=(0.1, 0.2, 0.3)):
    r0 = np.zeros((k + 1, 3))
    r0[1] = [L, 0.0, 0.0]
    ho = np.zeros((k - 1, 3)) if rng is None else 0.1 * rng.standard_normal((k - 1, 3))
    return ElementDef(k, (0, 1), (0.0, L), r0, exp_rotvec(q0).quat, ho, CS)


def random_dofs(defn, rng):
    d = ElementDofs.reference(defn)
    d.r = d.r + 0.1 * rng.standard_normal(d.r.shape)
    d.M = rng.standard_normal(d.M.shape)
    d.psi_lo = d.psi_lo + 0.1 * rng.standard_normal(3)
    d.psi_ho = d.psi_ho + 0.1 * rng.standard_normal(d.psi_ho.shape)
    d.psiV_left = 0.2 * rng.standard_normal(3)
    d.psiV_right = 0.2 * rng.standard_normal(3)
    return d


def to_vector(defn, dofs):
    sl = local_slices(defn.k)
    x = np.zeros(n_local(defn.k))
    u = dofs.r - defn.r0
    x[sl["r_left"]], x[sl["r_right"]], x[sl["r_bubble"]] = u[0], u[1], u[2:].ravel()
    x[sl["psiV_left"]], x[sl["psiV_right"]] = dofs.psiV_left, dofs.psiV_right
    x[sl["M"]] = dofs.M.ravel()
    x[sl["psi_lo"]] = dofs.psi_lo
    x[sl["psi_ho"]] = dofs.psi_ho.ravel()
    return x


def from_vector(defn, x):
    sl = local_slices(defn.k)
    u = np.vstack([x[sl["r_left"]], x[sl["r_right"]], x[sl["r_bubble"]].reshape(-1, 3)])
    return ElementDofs(
        r=defn.r0 + u,
        M=x[sl["M"]].reshape(-1, 3),
        psi_lo=x[sl["psi_lo"]].copy(),
        psi_ho=x[sl["psi_ho"]].reshape(-1, 3),
        psiV_left=x[sl["psiV_left"]].copy(),
        psiV_right=x[sl["psiV_right"]].copy(),
    )


class TestBases:
    def test_p0(self):
        P, dP = legendre_basis(4, np.linspace(-1, 1, 7))
        assert np.all(P[:, 0] == 1.0) and np.all(dP[:, 0] == 0.0)

    def test_p2_at_zero(self):
        assert legendre_basis(2, 0.0)[0][2] == -0.5

    @pytest.mark.parametrize("j", [1, 2, 3, 4])
    def test_zero_mean(self, j):
        rule = gauss_rule(j + 1)
        assert abs(rule.integrate(lambda x: legendre_basis(j, x)[0][..., j])) <= 1e-15

    def test_derivative(self):
        xi, h = np.linspace(-0.9, 0.9, 5), 1e-6
        _, dP = legendre_basis(5, xi)
        fd = (legendre_basis(5, xi + h)[0] - legendre_basis(5, xi - h)[0]) / (2 * h)
        assert np.abs(fd - dP).max() <= 1e-8


class TestQuadrature:
    def test_k1_midpoint(self):
        _, red = quadrature_rules(1)
        assert np.array_equal(red.points, [0.0]) and np.array_equal(red.weights, [2.0])

    @pytest.mark.parametrize("k", [1, 2, 3, 4])
    def test_full_exactness(self, k):
        full, _ = quadrature_rules(k)
        assert abs(full.integrate(lambda x: x ** (2 * k)) - 2.0 / (2 * k + 1)) <= 1e-14

    @pytest.mark.parametrize("k", [1, 2, 3, 4])
    def test_reduced_equals_projection(self, k):
        # k-point Gauss on a degree-k strain equals the exact energy of its projection onto P^{k-1}
        rng = np.random.default_rng(k)
        C = np.array([3.0, 1.0, 2.0])
        _, red = quadrature_rules(k)
        for _ in range(20):
            a = rng.standard_normal((k + 1, 3))
            P, _ = legendre_basis(k, red.points)
            g = P @ a
            quad = np.sum(red.weights * 0.5 * np.einsum("gi,i,gi->g", g, C, g))
            exact = sum(0.5 * a[j] @ (C * a[j]) * 2.0 / (2 * j + 1) for j in range(k))
            assert abs(quad - exact) <= 1e-13 * max(1.0, abs(exact))

    def test_rejects_order_zero(self):
        with pytest.raises(ValueError):
            quadrature_rules(0)


class TestLocalRotation:
    def test_zero_ho(self):
        lo = np.array([0.3, -0.2, 0.9])
        assert np.allclose(local_rotation(lo, np.zeros((2, 3)), 0.4).quat, exp_rotvec(lo).quat)

    def test_k1(self):
        lo = np.array([0.3, -0.2, 0.9])
        for xi in (-1.0, 0.0, 0.7):
            assert np.allclose(local_rotation(lo, np.zeros((0, 3)), xi).matrix, exp_rotvec(lo).matrix)

    def test_objectivity(self):
        rng = np.random.default_rng(0)
        ho = 0.3 * rng.standard_normal((2, 3))
        lo, R = exp_rotvec(rng.standard_normal(3)), exp_rotvec(rng.standard_normal(3))
        for xi in (-1.0, 0.2, 1.0):
            assert np.abs(local_rotation(R @ lo, ho, xi).matrix - R.matrix @ local_rotation(lo, ho, xi).matrix).max() <= 1e-12

    def test_too_large(self):
        with pytest.raises(RelativeRotationTooLarge):
            local_rotation(np.zeros(3), np.array([[4.0, 0.0, 0.0]]), 1.0)


class TestInterfaceJump:
    def test_undeformed_kink(self):
        rot0 = exp_rotvec([0.0, 0.0, 0.5 * np.pi])
        for sign in (-1, 1):
            assert interface_jump(rot0, np.zeros(3), rot0, [1.0, 2.0, 3.0], sign) == 0.0

    def test_continuity(self):
        psiV, rot0 = np.array([0.2, -0.1, 0.4]), exp_rotvec([0.5, 0.5, 0.0])
        assert abs(interface_jump(exp_rotvec(psiV) @ rot0, psiV, rot0, [3.0, -1.0, 2.0], 1)) <= 1e-15

    def test_two_element_work(self):
        theta, M = 0.3, 2.0
        ident = Rotation.identity()
        right_of_first = interface_jump(ident, 0.5 * theta * E3, ident, M * E3, +1)
        left_of_second = interface_jump(exp_rotvec(theta * E3), 0.5 * theta * E3, ident, M * E3, -1)
        assert np.isclose(right_of_first, 0.5 * M * theta, rtol=1e-14)
        assert np.isclose(right_of_first + left_of_second, M * theta, rtol=1e-14)

    def test_half_turn_rejected(self):
        with pytest.raises(RelativeRotationTooLarge):
            interface_jump(Rotation.identity(), np.pi * E1, Rotation.identity(), E1, 1)


class TestElementEnergy:
    @pytest.mark.parametrize("k", [1, 2, 3])
    @pytest.mark.parametrize("integration", MODES)
    def test_undeformed_zero(self, k, integration):
        defn = make_def(k, np.random.default_rng(k))
        assert abs(element_energy(defn, ElementDofs.reference(defn), None, 0.0, integration)) <= 1e-14

    @pytest.mark.parametrize("integration", MODES)
    def test_axial_stretch(self, integration):
        L, alpha = 2.0, 1.1
        defn = make_def(1, L=L, q0=(0.0, 0.0, 0.0))
        dofs = ElementDofs.reference(defn)
        dofs.r = np.array([[0.0, 0.0, 0.0], [alpha * L, 0.0, 0.0]])
        assert np.isclose(element_energy(defn, dofs, None, 1.0, integration), 0.5 * CS.EA * (alpha - 1) ** 2 * L, rtol=1e-13)

    def test_pure_moment_k1(self):
        L, M, a, b = 2.0, 0.7, 0.1, 0.25
        defn = make_def(1, L=L, q0=(0.0, 0.0, 0.0))
        dofs = ElementDofs.reference(defn)
        dofs.M = np.array([M * E3, np.zeros(3)])
        dofs.psiV_left, dofs.psiV_right = -a * E3, b * E3
        expected = -0.5 * M**2 * L / CS.EI3 + M * (a + b)
        assert np.isclose(element_energy(defn, dofs, None, 1.0, "full"), expected, rtol=1e-13)

    def test_distributed_load_potential(self):
        defn = make_def(1, L=2.0, q0=(0.0, 0.0, 0.0))
        dofs = ElementDofs.reference(defn)
        q = np.array([0.0, 3.0, 0.0])
        # rigid translation by d: strain energy stays zero, potential is -lam q.d L
        d = np.array([0.1, 0.2, -0.3])
        dofs.r = dofs.r + d
        assert np.isclose(element_energy(defn, dofs, ElementLoads(q=q), 0.5, "full"), -0.5 * q @ d * 2.0, rtol=1e-13)

    @pytest.mark.parametrize("k", [1, 2, 3])
    def test_discrete_objectivity(self, k):
        rng = np.random.default_rng(10 + k)
        defn = make_def(k, rng)
        for _ in range(5):
            dofs = random_dofs(defn, rng)
            R = exp_rotvec(rng.standard_normal(3))
            moved = dofs.copy()
            moved.r = dofs.r @ R.matrix.T
            moved.psi_lo = log_rotation(R @ exp_rotvec(dofs.psi_lo))
            moved.psiV_left = log_rotation(R @ exp_rotvec(dofs.psiV_left))
            moved.psiV_right = log_rotation(R @ exp_rotvec(dofs.psiV_right))
            for integration in MODES:
                e0 = element_energy(defn, dofs, None, 0.0, integration)
                e1 = element_energy(defn, moved, None, 0.0, integration)
                assert abs(e1 - e0) <= 1e-12 * max(1.0, abs(e0))


@pytest.mark.parametrize("k", [1, 2, 3, 4])
@pytest.mark.parametrize("integration", MODES)
class TestFiniteDifference:
    def setup_state(self, k):
        rng = np.random.default_rng(100 + k)
        defn = make_def(k, rng)
        return defn, random_dofs(defn, rng)

    def test_residual_is_gradient(self, k, integration):
        defn, dofs = self.setup_state(k)
        loads = ElementLoads(q=[1.0, 2.0, 3.0])
        x, h = to_vector(defn, dofs), 1e-7
        R = element_residual(defn, dofs, loads, 0.7, integration)
        fd = np.empty_like(x)
        for i in range(len(x)):
            e = np.zeros_like(x)
            e[i] = h
            ep = element_energy(defn, from_vector(defn, x + e), loads, 0.7, integration)
            em = element_energy(defn, from_vector(defn, x - e), loads, 0.7, integration)
            fd[i] = (ep - em) / (2 * h)
        assert np.abs(fd - R).max() <= 1e-6 * max(1.0, np.abs(R).max())

    @pytest.mark.parametrize("frame", ["spatial", "material"])
    def test_tangent_is_jacobian(self, k, integration, frame):
        defn, dofs = self.setup_state(k)
        loads = ElementLoads(q=[1.0, 2.0, 3.0], moment_left=[0.5, 0.0, -1.0], moment_right=[1.0, -1.0, 2.0], frame=frame)
        x, h = to_vector(defn, dofs), 1e-6
        K = element_tangent(defn, dofs, loads, 0.7, integration)
        fd = np.empty_like(K)
        for i in range(len(x)):
            e = np.zeros_like(x)
            e[i] = h
            rp = element_residual(defn, from_vector(defn, x + e), loads, 0.7, integration)
            rm = element_residual(defn, from_vector(defn, x - e), loads, 0.7, integration)
            fd[:, i] = (rp - rm) / (2 * h)
        assert np.abs(fd - K).max() <= 1e-5 * max(1.0, np.abs(K).max())


class TestTangentStructure:
    @pytest.mark.parametrize("k", [1, 2, 3])
    def test_symmetric_at_reference(self, k):
        defn = make_def(k, np.random.default_rng(k))
        K = element_tangent(defn, ElementDofs.reference(defn), None, 0.0)
        assert np.abs(K - K.T).max() <= 1e-10 * np.abs(K).max()

    @pytest.mark.parametrize("k", [1, 2, 3, 4])
    def test_moment_block(self, k):
        rng = np.random.default_rng(20 + k)
        defn = make_def(k, rng)
        K = element_tangent(defn, random_dofs(defn, rng), None, 1.0, "full")
        sl = local_slices(k)["M"]
        block = K[sl, sl]
        expected = np.zeros_like(block)
        for i in range(k + 1):
            for c in range(3):
                expected[3 * i + c, 3 * i + c] = -defn.jacobian * 2.0 / (2 * i + 1) / CS.c_kappa[c]
        assert np.abs(block - expected).max() <= 1e-12 * np.abs(expected).max()

    @pytest.mark.parametrize("k", [2, 3])
    def test_moment_rows_vanish_at_projected_moment(self, k):
        # jump-free ends and M equal to the projection of C_kappa kappa: the M rows are zero
        rng = np.random.default_rng(30 + k)
        defn = make_def(k, rng)
        dofs = random_dofs(defn, rng)
        rot_l = local_rotation(dofs.psi_lo, dofs.psi_ho, -1.0)
        rot_r = local_rotation(dofs.psi_lo, dofs.psi_ho, 1.0)
        rot0_l, rot0_r = defn.end_rotations()
        dofs.psiV_left = log_rotation(rot_l @ rot0_l.inverse())
        dofs.psiV_right = log_rotation(rot_r @ rot0_r.inverse())
        full, _ = quadrature_rules(k)
        P, dP = legendre_basis(k, full.points)
        J = defn.jacobian
        kap = np.array([
            curvature_local(ho_field(dofs.psi_ho, xi), dP[g, 1:k] @ dofs.psi_ho / J,
                            ho_field(defn.psi0_ho, xi), dP[g, 1:k] @ defn.psi0_ho / J)
            for g, xi in enumerate(full.points)
        ])
        dofs.M = np.array([(2 * i + 1) / 2 * np.einsum("g,g,gc->c", full.weights, P[:, i], CS.c_kappa * kap) for i in range(k + 1)])
        R = element_residual(defn, dofs, None, 1.0, "full")
        assert np.abs(R[local_slices(k)["M"]]).max() <= 1e-12 * max(1.0, np.abs(dofs.M).max())


class TestCondense:
    def test_schur_complement(self):
        rng = np.random.default_rng(0)
        A = rng.standard_normal((10, 10))
        K = A @ A.T + 10 * np.eye(10)
        R = rng.standard_normal(10)
        drop = np.array([2, 5, 7, 8])
        keep = np.setdiff1d(np.arange(10), drop)
        c = condense(K, R, drop)
        Kdd_inv = np.linalg.inv(K[np.ix_(drop, drop)])
        assert np.allclose(c.K, K[np.ix_(keep, keep)] - K[np.ix_(keep, drop)] @ Kdd_inv @ K[np.ix_(drop, keep)], atol=1e-12)
        assert np.allclose(c.R, R[keep] - K[np.ix_(keep, drop)] @ Kdd_inv @ R[drop], atol=1e-12)
        dx = c.recover(np.linalg.solve(c.K, -c.R))
        assert np.allclose(dx, np.linalg.solve(K, -R), atol=1e-12)

    def test_empty_drop(self):
        rng = np.random.default_rng(1)
        K, R = rng.standard_normal((4, 4)), rng.standard_normal(4)
        c = condense(K, R, [])
        assert np.array_equal(c.K, K) and np.array_equal(c.R, R)
        assert np.array_equal(c.recover(np.arange(4.0)), np.arange(4.0))

    def test_singular(self):
        K = np.eye(4)
        K[3, 3] = 0.0
        with pytest.raises(SingularCondensationBlock):
            condense(K, np.ones(4), [3])

    @pytest.mark.parametrize("k", [1, 3])
    def test_clamped_element_newton_step(self, k):
        # left end clamped; the full and condensed Newton steps coincide
        rng = np.random.default_rng(40 + k)
        defn = make_def(k, rng)
        dofs = random_dofs(defn, rng)
        dofs.r[0], dofs.psiV_left = defn.r0[0], np.zeros(3)
        loads = ElementLoads(q=[0.0, 1.0, 0.0], moment_right=[0.0, 0.0, 1.0])
        K = element_tangent(defn, dofs, loads, 1.0)
        R = element_residual(defn, dofs, loads, 1.0)
        free = np.arange(6, n_local(k))
        dx_full = np.linalg.solve(K[np.ix_(free, free)], -R[free])
        drop = condensable_indices(k) - 6
        c = condense(K[np.ix_(free, free)], R[free], drop)
        dx_cond = c.recover(np.linalg.solve(c.K, -c.R))
        assert np.abs(dx_cond - dx_full).max() <= 1e-10 * max(1.0, np.abs(dx_full).max())
