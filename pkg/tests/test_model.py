"""Geometry builders, boundary conditions, load schedules and DOF layout."""

import math

import numpy as np
import pytest

from mixedbeam.constitutive import CrossSection
from mixedbeam.element import ElementDef
from mixedbeam.model import (
    ClampPosition,
    ClampRotation,
    DanglingNode,
    InvalidMesh,
    LoadCase,
    LoadPhase,
    Mesh,
    Node,
    PointForce,
    PointMoment,
    PrescribeRotation,
    build_arc,
    build_fork,
    build_helix,
    build_polyline,
    build_straight,
    dof_layout,
    helix_position,
    validate_bcs,
)
from mixedbeam.so3 import Rotation, exp_rotvec, relative_rotvec
from mixedbeam.solver import State, System

E1, E2, E3 = np.eye(3)
CS = CrossSection(EA=1e4, GA2=5e3, GA3=5e3, GIt=1e2, EI2=1e2, EI3=1e2)
STIFFNESS_SCALE = 1e4

SLOPE_POINTS = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [1.0, 1.0, 0.0], [1.0, 1.0, 1.0]]

BUILDERS = {
    "straight": lambda k: build_straight(2.0, 3, k, CS),
    "arc": lambda k: build_arc(1.5, np.pi / 3, 4, k, CS),
    "arc_x2x3": lambda k: build_arc(1.0, 1.0, 3, k, CS, plane="x2x3"),
    "helix": lambda k: build_helix(1.0, 0.5, 1.5, 6, k, CS)[0],
    "polyline": lambda k: build_polyline(SLOPE_POINTS, 2, k, CS),
    "fork": lambda k: build_fork(1.0, 1.0, 2, 3, k, CS),
}


class TestStraight:
    def test_single_element(self):
        mesh = build_straight(2.5, 1, 1, CS)
        assert mesh.n_nodes == 2
        assert np.array_equal(mesh.nodes[0].r0, [0.0, 0.0, 0.0])
        assert np.allclose(mesh.nodes[1].r0, [2.5, 0.0, 0.0])

    @pytest.mark.parametrize("n", [1, 3, 7])
    def test_total_length(self, n):
        assert math.isclose(build_straight(1.7, n, 2, CS).total_length, 1.7, rel_tol=1e-14)

    def test_markers(self):
        mesh = build_straight(1.0, 4, 1, CS)
        assert mesh.node("root") == 0 and mesh.node("tip") == 4


class TestArc:
    def test_length(self):
        assert math.isclose(build_arc(2.0, 0.7, 5, 3, CS).total_length, 1.4, rel_tol=1e-14)

    def test_nodes_on_circle(self):
        R = 1.5
        mesh = build_arc(R, np.pi / 3, 4, 2, CS)
        for node in mesh.nodes:
            assert math.isclose(np.linalg.norm(node.r0 - [0.0, R, 0.0]), R, rel_tol=1e-13)
            assert node.r0[2] == 0.0

    def test_flat_limit(self):
        R = 1e12
        arc = build_arc(R, 1.0 / R, 4, 2, CS)
        line = build_straight(1.0, 4, 2, CS)
        for a, b in zip(arc.nodes, line.nodes):
            assert np.abs(a.r0 - b.r0).max() <= 1e-10

    @pytest.mark.parametrize("k", [1, 3])
    def test_frame_consistency(self, k):
        angle, n = np.pi / 3, 6
        mesh = build_arc(1.0, angle, n, k, CS)
        for a, b in zip(mesh.elements[:-1], mesh.elements[1:]):
            rel = relative_rotvec(a.initial_rotation(0.0), b.initial_rotation(0.0))
            assert np.abs(rel - angle / n * E3).max() <= 1e-12
        if k == 1:
            return
        # higher orders: both elements at an interior node agree on its frame
        for i in range(n - 1):
            right = mesh.elements[i].end_rotations()[1]
            left = mesh.elements[i + 1].end_rotations()[0]
            assert np.abs(right.matrix - left.matrix).max() <= 1e-12

    def test_bad_plane(self):
        with pytest.raises(InvalidMesh):
            build_arc(1.0, 1.0, 2, 1, CS, plane="x1x1")


class TestHelix:
    R0, h0, coils = 1.0, 0.5, 1.5

    def test_length(self):
        mesh, curve = build_helix(self.R0, self.h0, self.coils, 6, 2, CS)
        c = self.h0 / (2 * np.pi * self.coils * self.R0)
        expected = math.sqrt(1 + c * c) * 2 * np.pi * self.coils * self.R0
        assert math.isclose(mesh.total_length, expected, rel_tol=1e-14)
        assert math.isclose(curve.length, expected, rel_tol=1e-14)

    def test_start_and_pitch(self):
        mesh, _ = build_helix(self.R0, self.h0, self.coils, 6, 2, CS)
        assert np.allclose(mesh.nodes[0].r0, -self.R0 * E2, atol=1e-15)
        assert math.isclose(mesh.nodes[-1].r0[2], self.h0, rel_tol=1e-12)

    def test_nodes_match_closed_form(self):
        mesh, curve = build_helix(self.R0, self.h0, self.coils, 9, 1, CS)
        s = np.linspace(0.0, curve.length, 10)
        ref = helix_position(self.R0, self.h0, self.coils, s)
        assert np.abs(np.array([n.r0 for n in mesh.nodes]) - ref).max() <= 1e-12

    def test_frame_tangent(self):
        _, curve = build_helix(self.R0, self.h0, self.coils, 6, 1, CS)
        h = 1e-6
        for s in (0.0, 1.3, curve.length):
            tangent = (helix_position(self.R0, self.h0, self.coils, s + h) - helix_position(self.R0, self.h0, self.coils, s - h)) / (2 * h)
            assert np.abs(curve.frame(s).apply(E1) - tangent).max() <= 1e-8


class TestPolyline:
    def test_right_angle_kink(self):
        mesh = build_polyline([[0, 0, 0], [1, 0, 0], [1, 1, 0]], 1, 2, CS)
        before = mesh.elements[0].end_rotations()[1]
        after = mesh.elements[1].end_rotations()[0]
        assert math.isclose(np.linalg.norm(relative_rotvec(before, after)), np.pi / 2, rel_tol=1e-14)
        assert mesh.node("kink1") == 1

    def test_single_segment_is_straight(self):
        poly = build_polyline([[0, 0, 0], [2, 0, 0]], 3, 2, CS)
        line = build_straight(2.0, 3, 2, CS)
        for a, b in zip(poly.elements, line.elements):
            assert np.allclose(a.r0, b.r0, atol=1e-15)
            assert np.allclose(a.q0_lo, b.q0_lo)

    def test_markers(self):
        mesh = build_polyline(SLOPE_POINTS, 2, 1, CS)
        assert mesh.node("root") == 0 and mesh.node("tip") == 6
        assert mesh.node("kink1") == 2 and mesh.node("kink2") == 4
        assert math.isclose(mesh.total_length, 3.0, rel_tol=1e-14)

    def test_zero_segment(self):
        with pytest.raises(InvalidMesh):
            build_polyline([[0, 0, 0], [1, 0, 0], [1, 0, 0]], 1, 1, CS)


class TestFork:
    def test_branch_point(self):
        mesh = build_fork(1.0, 1.0, 2, 3, 2, CS)
        pb = mesh.node("PB")
        assert np.allclose(mesh.nodes[pb].r0, [1.0, 0.0, 0.0])
        assert len(mesh.nodes[pb].elements) == 3

    def test_tine_tips(self):
        L = 1.0
        mesh = build_fork(L, L, 2, 3, 2, CS)
        assert np.allclose(mesh.nodes[mesh.node("P1")].r0, [2 * L, L, 0.0], atol=1e-14)
        assert np.allclose(mesh.nodes[mesh.node("P2")].r0, [2 * L, -L, 0.0], atol=1e-14)

    def test_single_rotation_block_at_branch(self):
        mesh = build_fork(1.0, 1.0, 2, 3, 1, CS)
        layout = dof_layout(mesh)
        pb = mesh.node("PB")
        blocks = {tuple(m[3:6]) for e, m in enumerate(layout.element_map) if mesh.elements[e].nodes[0] == pb}
        blocks |= {tuple(m[9:12]) for e, m in enumerate(layout.element_map) if mesh.elements[e].nodes[1] == pb}
        assert blocks == {tuple(layout.node_dofs[pb, 3:6])}


class TestUndeformedEquilibrium:
    @pytest.mark.parametrize("name", sorted(BUILDERS))
    @pytest.mark.parametrize("k", [1, 2, 4])
    @pytest.mark.parametrize("integration", ["full", "reduced_gamma"])
    def test_zero_residual(self, name, k, integration):
        mesh = BUILDERS[name](k)
        system = System(mesh, [ClampPosition("root"), ClampRotation("root")], integration)
        asm = system.assemble(State.reference(mesh), {}, order=1)
        assert np.abs(asm.R).max() <= 1e-12 * STIFFNESS_SCALE


class TestDofLayout:
    def test_two_element_count(self):
        layout = dof_layout(build_straight(1.0, 2, 1, CS))
        # shared: 3 nodes x (r + psiV); local: 2 M coefficients + psi_lo per element
        assert layout.n_global == 3 * 3 + 3 * 3 + 2 * (3 * 2 + 3)

    @pytest.mark.parametrize("k", [1, 2, 3])
    def test_general_count(self, k):
        n = 4
        layout = dof_layout(build_straight(1.0, n, k, CS))
        local = 3 * (k - 1) + 3 * (k + 1) + 3 + 3 * (k - 1)
        assert layout.n_global == 6 * (n + 1) + n * local

    def test_condensed_keeps_nodal_only(self):
        mesh = build_straight(1.0, 4, 3, CS)
        layout = dof_layout(mesh, condense=True)
        assert layout.n_global == 6 * 5
        assert all(np.all(m[12:] == -1) for m in layout.element_map)

    def test_deterministic(self):
        a = dof_layout(build_fork(1.0, 1.0, 2, 3, 2, CS))
        b = dof_layout(build_fork(1.0, 1.0, 2, 3, 2, CS))
        assert a.n_global == b.n_global
        assert all(np.array_equal(x, y) for x, y in zip(a.element_map, b.element_map))


class TestMeshValidation:
    def make_element(self, a=0, b=1, L=1.0):
        return ElementDef(1, (a, b), (0.0, L), [[0, 0, 0], [L, 0, 0]], Rotation.identity().quat, np.zeros((0, 3)), CS)

    def test_dangling_node(self):
        nodes = (Node(0, np.zeros(3), (0,)), Node(1, E1, (0,)), Node(2, 2 * E1, ()))
        with pytest.raises(DanglingNode):
            Mesh(nodes, (self.make_element(),))

    def test_missing_node(self):
        nodes = (Node(0, np.zeros(3), (0,)),)
        with pytest.raises(InvalidMesh):
            Mesh(nodes, (self.make_element(),))

    def test_zero_length_element(self):
        with pytest.raises(ValueError):
            self.make_element(L=0.0)


class TestBoundaryConditions:
    mesh = build_straight(1.0, 2, 1, CS)

    def test_duplicate_kinematic(self):
        with pytest.raises(InvalidMesh):
            validate_bcs(self.mesh, [ClampRotation("root"), PrescribeRotation("root", [0, 0, 1])])

    def test_unknown_marker(self):
        with pytest.raises(InvalidMesh):
            validate_bcs(self.mesh, [ClampPosition("nowhere")])

    def test_moment_frame(self):
        with pytest.raises(ValueError):
            PointMoment("tip", [0, 0, 1], frame="body")

    def test_prescribed_rotation_ramp(self):
        bc = PrescribeRotation(0, [0.0, 0.0, 2.0])
        assert np.allclose(bc.value(0.25), [0.0, 0.0, 0.5])


class TestLoadCase:
    def test_single(self):
        lc = LoadCase.single([PointForce("tip", [0, 1, 0])], 4)
        assert [f["load"] for f in lc.schedule()] == [0.25, 0.5, 0.75, 1.0]

    def test_sequential_phases(self):
        bcs = [PointForce("P1", [0, 0, 1], "a"), PointForce("P2", [0, 0, 1], "b")]
        lc = LoadCase(tuple(bcs), (LoadPhase(2, ("a",)), LoadPhase(2, ("b",))))
        assert lc.schedule() == [
            {"a": 0.5, "b": 0.0},
            {"a": 1.0, "b": 0.0},
            {"a": 1.0, "b": 0.5},
            {"a": 1.0, "b": 1.0},
        ]

    def test_empty_phase(self):
        with pytest.raises(ValueError):
            LoadPhase(0)

    def test_prescribed_rotation_rotates_frame(self):
        mesh = build_straight(1.0, 2, 1, CS)
        system = System(mesh, [ClampPosition("root"), PrescribeRotation("root", [0.0, 0.0, 1.0])])
        state = State.reference(mesh)
        system.apply_kinematics(state, {"load": 0.5})
        assert np.allclose(system.node_rotation(state, 0).matrix, exp_rotvec(0.5 * E3).matrix)
