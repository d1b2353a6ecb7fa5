"""Meshes, geometry builders, boundary conditions, load cases and DOF layout."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .constitutive import CrossSection
from .element import ElementDef, gauss_rule, legendre_basis, n_local, position_basis
from .so3 import Rotation, exp_rotvec, relative_rotvec, tangent_map

E1 = np.array([1.0, 0.0, 0.0])
E2 = np.array([0.0, 1.0, 0.0])
E3 = np.array([0.0, 0.0, 1.0])


class InvalidMesh(ValueError):
    pass


class DanglingNode(InvalidMesh):
    """A node is not attached to any element."""


# ---------------------------------------------------------------------------
# reference curves
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ConstantCurvatureCurve:
    """Centerline with constant material curvature ``kappa`` and unit stretch.

    ``frame(s) = frame0 @ exp(s kappa)`` and ``r(s) = origin + frame0 @ int_0^s exp(t kappa) e1 dt``.
    Straight lines, circular arcs and helices are special cases.
    """

    origin: np.ndarray
    frame0: Rotation
    kappa: np.ndarray
    length: float

    def __post_init__(self):
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=float).reshape(3))
        object.__setattr__(self, "kappa", np.asarray(self.kappa, dtype=float).reshape(3))
        if not self.length > 0.0:
            raise InvalidMesh(f"curve length must be positive, got {self.length}")

    def frame(self, s: float) -> Rotation:
        return self.frame0 @ exp_rotvec(s * self.kappa)

    def position(self, s: float) -> np.ndarray:
        # int_0^1 exp(u psi^) du = T(psi) with psi = s kappa
        return self.origin + s * self.frame0.apply(tangent_map(s * self.kappa) @ E1)

    def positions(self, s) -> np.ndarray:
        return np.array([self.position(float(x)) for x in np.atleast_1d(s)])


def helix_curve(R0: float, h0: float, n_coils: float) -> ConstantCurvatureCurve:
    """Helix ``r = R0 sin(a) e1 - R0 cos(a) e2 + c R0 a e3`` parameterized by arclength."""
    c = h0 / (2.0 * math.pi * n_coils * R0)
    L = math.sqrt(1.0 + c * c) * 2.0 * math.pi * n_coils * R0
    beta = math.atan(c)
    # g1 = exp(a e3) exp(-beta e2) e1 is parallel to (cos a, sin a, c)
    return ConstantCurvatureCurve(
        origin=-R0 * E2,
        frame0=exp_rotvec(-beta * E2),
        kappa=np.array([c, 0.0, 1.0]) / (R0 * (1.0 + c * c)),
        length=L,
    )


def helix_position(R0: float, h0: float, n_coils: float, s) -> np.ndarray:
    """Closed-form helix centerline at arclength ``s``."""
    c = h0 / (2.0 * math.pi * n_coils * R0)
    L = math.sqrt(1.0 + c * c) * 2.0 * math.pi * n_coils * R0
    a = 2.0 * math.pi * n_coils * np.asarray(s, dtype=float) / L
    return np.stack([R0 * np.sin(a), -R0 * np.cos(a), c * R0 * a], axis=-1)


# ---------------------------------------------------------------------------
# mesh
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Node:
    id: int
    r0: np.ndarray
    elements: tuple[int, ...]


@dataclass(frozen=True, eq=False)
class Mesh:
    """Nodes plus element definitions. ``markers`` names nodes of interest."""

    nodes: tuple[Node, ...]
    elements: tuple[ElementDef, ...]
    markers: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.nodes)
        for i, node in enumerate(self.nodes):
            if node.id != i:
                raise InvalidMesh(f"node ids must be 0..{n - 1} in order, got {node.id} at position {i}")
        for e, el in enumerate(self.elements):
            for a in el.nodes:
                if not 0 <= a < n:
                    raise InvalidMesh(f"element {e} references missing node {a}")
            if el.nodes[0] == el.nodes[1]:
                raise InvalidMesh(f"element {e} connects node {el.nodes[0]} to itself")
            if not el.length > 0.0:
                raise InvalidMesh(f"element {e} has zero length")
            for a, r in zip(el.nodes, el.r0[:2]):
                if not np.allclose(self.nodes[a].r0, r, rtol=0.0, atol=1e-9 * max(1.0, el.length)):
                    raise InvalidMesh(f"element {e} endpoint does not match node {a}")
        for node in self.nodes:
            if not node.elements:
                raise DanglingNode(f"node {node.id} has no incident element")
        if n and not self._connected():
            raise InvalidMesh("mesh is not connected")
        for name, a in self.markers.items():
            if not 0 <= a < n:
                raise InvalidMesh(f"marker {name!r} references missing node {a}")

    def _connected(self) -> bool:
        seen = {0}
        todo = deque([0])
        while todo:
            a = todo.popleft()
            for e in self.nodes[a].elements:
                for b in self.elements[e].nodes:
                    if b not in seen:
                        seen.add(b)
                        todo.append(b)
        return len(seen) == len(self.nodes)

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_elements(self) -> int:
        return len(self.elements)

    @property
    def total_length(self) -> float:
        return float(sum(el.length for el in self.elements))

    def node(self, key: int | str) -> int:
        return self.markers[key] if isinstance(key, str) else int(key)

    def node_frame(self, node: int) -> Rotation:
        """Initial rotation at a node, taken from its first incident element."""
        e = self.nodes[node].elements[0]
        el = self.elements[e]
        left, right = el.end_rotations()
        return left if el.nodes[0] == node else right


def _make_mesh(positions: list[np.ndarray], elements: list[ElementDef], markers: dict[str, int]) -> Mesh:
    incident: list[list[int]] = [[] for _ in positions]
    for e, el in enumerate(elements):
        for a in el.nodes:
            incident[a].append(e)
    nodes = tuple(Node(i, np.asarray(p, dtype=float), tuple(inc)) for i, (p, inc) in enumerate(zip(positions, incident)))
    return Mesh(nodes, tuple(elements), dict(markers))


# ---------------------------------------------------------------------------
# element construction from a reference curve
# ---------------------------------------------------------------------------


def _interpolation_points(k: int) -> np.ndarray:
    # Chebyshev-Lobatto points include both ends
    return -np.cos(np.pi * np.arange(k + 1) / k)


def element_from_curve(
    position: Callable[[float], np.ndarray],
    frame: Callable[[float], Rotation],
    span: tuple[float, float],
    nodes: tuple[int, int],
    k: int,
    cs: CrossSection,
    s_offset: float = 0.0,
) -> ElementDef:
    """Element on ``span`` of a curve; curve functions are called with ``s - s_offset``.

    ``r0`` interpolates the curve; ``psi0_ho`` is the L2 projection of the frame
    relative to the midpoint frame onto the zero-mean Legendre modes.
    """
    s0, s1 = span
    J = 0.5 * (s1 - s0)

    def s_at(xi):
        return s0 + (xi + 1.0) * J - s_offset

    xi_i = _interpolation_points(k)
    N, _ = position_basis(k, xi_i)
    r_pts = np.array([position(s_at(x)) for x in xi_i])
    r0 = np.linalg.solve(N, r_pts)
    mid = frame(s_at(0.0))
    psi0_ho = np.zeros((k - 1, 3))
    if k > 1:
        rule = gauss_rule(2 * k + 2)
        f = np.array([relative_rotvec(mid, frame(s_at(x))) for x in rule.points])
        P, _ = legendre_basis(k, rule.points)
        for j in range(1, k):
            psi0_ho[j - 1] = 0.5 * (2 * j + 1) * np.sum((rule.weights * P[:, j])[:, None] * f, axis=0)
    return ElementDef(k, nodes, (float(s0), float(s1)), r0, mid.quat, psi0_ho, cs)


def _curve_elements(curve, n_elem, k, cs, first_node, s_start, last_node=None):
    """Elements along ``curve`` with consecutive node ids starting at ``first_node``."""
    if n_elem < 1:
        raise InvalidMesh("need at least one element")
    bounds = np.linspace(0.0, curve.length, n_elem + 1)
    elements = []
    ids = [first_node + i for i in range(n_elem + 1)]
    if last_node is not None:
        ids[-1] = last_node
    for i in range(n_elem):
        elements.append(
            element_from_curve(
                curve.position,
                curve.frame,
                (s_start + bounds[i], s_start + bounds[i + 1]),
                (ids[i], ids[i + 1]),
                k,
                cs,
                s_offset=s_start,
            )
        )
    return elements, ids, [curve.position(b) for b in bounds]


def build_curve(
    curve: ConstantCurvatureCurve, n_elem: int, k: int, cs: CrossSection, markers: dict | None = None
) -> Mesh:
    elements, ids, pts = _curve_elements(curve, n_elem, k, cs, 0, 0.0)
    m = {"root": 0, "tip": n_elem}
    m.update(markers or {})
    return _make_mesh(pts, elements, m)


_PLANES = {
    "x1x2": Rotation.identity(),
    "x2x3": Rotation.from_matrix(np.array([[0.0, 0.0, 1.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])),
    "x3x1": Rotation.from_matrix(np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 0.0, 0.0]])),
}


def build_straight(
    L: float,
    n_elem: int,
    k: int,
    cs: CrossSection,
    origin=(0.0, 0.0, 0.0),
    frame: Rotation | None = None,
) -> Mesh:
    """Straight beam of length ``L`` along ``frame @ e1`` (default: the e1 axis)."""
    curve = ConstantCurvatureCurve(origin, frame or Rotation.identity(), np.zeros(3), L)
    return build_curve(curve, n_elem, k, cs)


def build_arc(R: float, angle: float, n_elem: int, k: int, cs: CrossSection, plane: str = "x1x2") -> Mesh:
    """Circular arc ``r = R (sin phi, 1 - cos phi, 0)``, ``phi in [0, angle]``, in ``plane``."""
    if not R > 0.0:
        raise InvalidMesh("arc radius must be positive")
    if plane not in _PLANES:
        raise InvalidMesh(f"unknown plane {plane!r}; expected one of {sorted(_PLANES)}")
    rot = _PLANES[plane]
    curve = ConstantCurvatureCurve(np.zeros(3), rot, np.array([0.0, 0.0, 1.0 / R]), R * angle)
    return build_curve(curve, n_elem, k, cs)


def build_helix(
    R0: float, h0: float, n_coils: float, n_elem: int, k: int, cs: CrossSection
) -> tuple[Mesh, ConstantCurvatureCurve]:
    """Mesh along the helix and the helix itself (centerline and frames)."""
    curve = helix_curve(R0, h0, n_coils)
    return build_curve(curve, n_elem, k, cs), curve


def _minimal_rotation(a: np.ndarray, b: np.ndarray) -> Rotation:
    """Smallest rotation taking unit vector ``a`` to unit vector ``b``."""
    axis = np.cross(a, b)
    s = np.linalg.norm(axis)
    c = float(np.dot(a, b))
    if s < 1e-14:
        if c > 0.0:
            return Rotation.identity()
        perp = np.cross(a, E1 if abs(a[0]) < 0.9 else E2)
        return exp_rotvec(np.pi * perp / np.linalg.norm(perp))
    return exp_rotvec(axis / s * math.atan2(s, c))


def build_polyline(points, n_elem_per_segment: int, k: int, cs: CrossSection) -> Mesh:
    """Straight segments through ``points``; frames are carried across kinks by minimal rotations."""
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) < 2:
        raise InvalidMesh("polyline needs at least two 3D points")
    frame = Rotation.identity()
    tangent = E1
    positions: list[np.ndarray] = [pts[0]]
    elements: list[ElementDef] = []
    s = 0.0
    kinks = {}
    for i in range(len(pts) - 1):
        d = pts[i + 1] - pts[i]
        length = float(np.linalg.norm(d))
        if length == 0.0:
            raise InvalidMesh(f"polyline segment {i} has zero length")
        d = d / length
        frame = _minimal_rotation(tangent, d) @ frame
        tangent = d
        curve = ConstantCurvatureCurve(pts[i], frame, np.zeros(3), length)
        first = len(positions) - 1
        els, ids, seg_pts = _curve_elements(curve, n_elem_per_segment, k, cs, first, s)
        elements.extend(els)
        positions.extend(seg_pts[1:])
        s += length
        if i > 0:
            kinks[f"kink{i}"] = first
    markers = {"root": 0, "tip": len(positions) - 1, **kinks}
    return _make_mesh(positions, elements, markers)


def build_fork(L: float, R: float, n_elem_shaft: int, n_elem_tine: int, k: int, cs: CrossSection) -> Mesh:
    """Shaft from the origin to ``P_B = (L, 0, 0)`` branching into two quarter arcs of radius ``R``.

    The arcs lie on the circle centered at ``(L + R, 0, 0)`` and end at
    ``P1 = (L + R, R, 0)`` and ``P2 = (L + R, -R, 0)``.
    """
    shaft = ConstantCurvatureCurve(np.zeros(3), Rotation.identity(), np.zeros(3), L)
    elements, ids, pts = _curve_elements(shaft, n_elem_shaft, k, cs, 0, 0.0)
    positions = list(pts)
    pb = ids[-1]
    markers = {"root": 0, "PB": pb}
    s = L
    for name, sign in (("P1", 1.0), ("P2", -1.0)):
        tine = ConstantCurvatureCurve(
            positions[pb], exp_rotvec(sign * 0.5 * np.pi * E3), np.array([0.0, 0.0, -sign / R]), 0.5 * np.pi * R
        )
        first = len(positions)
        els, tids, tpts = _curve_elements(tine, n_elem_tine, k, cs, first - 1, s)
        # the first tine node is the branch point
        tids[0] = pb
        els = [
            ElementDef(el.k, (pb, el.nodes[1]) if j == 0 else el.nodes, el.span, el.r0, el.q0_lo, el.psi0_ho, cs)
            for j, el in enumerate(els)
        ]
        elements.extend(els)
        positions.extend(tpts[1:])
        markers[name] = tids[-1]
        s += tine.length
    return _make_mesh(positions, elements, markers)


# ---------------------------------------------------------------------------
# boundary conditions and loads
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ClampPosition:
    """``r = r_bar`` at a node; ``r_bar`` defaults to the reference position."""

    node: int | str
    value: Sequence[float] | None = None


@dataclass(frozen=True)
class ClampRotation:
    """``psi_V = 0`` at a node."""

    node: int | str


@dataclass(frozen=True)
class PrescribeRotation:
    """Nodal incremental rotation ``exp(lam * psi)``, or ``exp(psi(lam))`` for a callable."""

    node: int | str
    psi: Sequence[float] | Callable[[float], np.ndarray]
    label: str = "load"

    def value(self, lam: float) -> np.ndarray:
        if callable(self.psi):
            return np.asarray(self.psi(lam), dtype=float)
        return lam * np.asarray(self.psi, dtype=float)


@dataclass(frozen=True)
class PointForce:
    """Dead spatial force at a node."""

    node: int | str
    F: Sequence[float]
    label: str = "load"


@dataclass(frozen=True)
class PointMoment:
    """Nodal moment, fixed in space (``spatial``) or following the nodal rotation (``material``)."""

    node: int | str
    m: Sequence[float]
    frame: str = "spatial"
    label: str = "load"

    def __post_init__(self):
        if self.frame not in ("spatial", "material"):
            raise ValueError(f"moment frame must be 'spatial' or 'material', got {self.frame!r}")


@dataclass(frozen=True)
class DistributedForce:
    """Dead force per unit length on one element; constant vector or callable of arclength."""

    element: int
    q: Sequence[float] | Callable[[float], np.ndarray]
    label: str = "load"


KINEMATIC = (ClampPosition, ClampRotation, PrescribeRotation)
LOADS = (PointForce, PointMoment, DistributedForce)


def validate_bcs(mesh: Mesh, bcs) -> None:
    """At most one kinematic condition per node and DOF block; referenced entities exist."""
    seen = set()
    for bc in bcs:
        if isinstance(bc, DistributedForce):
            if not 0 <= bc.element < mesh.n_elements:
                raise InvalidMesh(f"distributed force on missing element {bc.element}")
            continue
        try:
            node = mesh.node(bc.node)
        except KeyError as exc:
            raise InvalidMesh(f"unknown node marker {bc.node!r}") from exc
        if not 0 <= node < mesh.n_nodes:
            raise InvalidMesh(f"boundary condition on missing node {node}")
        if isinstance(bc, KINEMATIC):
            block = "r" if isinstance(bc, ClampPosition) else "psi"
            if (node, block) in seen:
                raise InvalidMesh(f"node {node} has more than one kinematic condition on {block}")
            seen.add((node, block))


@dataclass(frozen=True)
class LoadPhase:
    """``n_steps`` equal increments ramping the loads whose label is in ``labels`` (``None``: all)."""

    n_steps: int
    labels: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.n_steps < 1:
            raise ValueError("a load phase needs at least one step")


@dataclass(frozen=True)
class LoadCase:
    """Boundary conditions plus a sequence of load phases.

    A labelled load is zero before its phase, ramps linearly during it and
    stays at full value afterwards.
    """

    bcs: tuple
    phases: tuple[LoadPhase, ...] = (LoadPhase(1),)

    @classmethod
    def single(cls, bcs, n_steps: int = 1) -> LoadCase:
        return cls(tuple(bcs), (LoadPhase(n_steps),))

    def labels(self) -> list[str]:
        out = []
        for bc in self.bcs:
            label = getattr(bc, "label", None)
            if label is not None and label not in out:
                out.append(label)
        return out

    def schedule(self) -> list[dict[str, float]]:
        """Load factor of every label at the end of each step."""
        labels = self.labels()
        factors = {lab: 0.0 for lab in labels}
        steps = []
        for phase in self.phases:
            active = labels if phase.labels is None else list(phase.labels)
            start = {lab: factors[lab] for lab in active}
            for i in range(1, phase.n_steps + 1):
                for lab in active:
                    factors[lab] = start[lab] + (1.0 - start[lab]) * i / phase.n_steps
                steps.append(dict(factors))
        return steps


# ---------------------------------------------------------------------------
# global DOF layout
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class DofLayout:
    """Global numbering: per node ``[r(3), psiV(3)]``, then element-local blocks.

    ``element_map[e][i]`` is the global index of local DOF ``i`` of element
    ``e``, or ``-1`` for element-local DOFs that are statically condensed.
    """

    n_global: int
    node_dofs: np.ndarray
    element_map: tuple[np.ndarray, ...]
    condense: bool

    @property
    def n_nodal(self) -> int:
        return self.node_dofs.size


def dof_layout(mesh: Mesh, condense: bool = False) -> DofLayout:
    for node in mesh.nodes:
        if not node.elements:
            raise DanglingNode(f"node {node.id} has no incident element")
    node_dofs = np.arange(6 * mesh.n_nodes).reshape(mesh.n_nodes, 6)
    nxt = node_dofs.size
    maps = []
    for el in mesh.elements:
        m = np.full(n_local(el.k), -1, dtype=np.int64)
        a, b = el.nodes
        m[0:6] = node_dofs[a]
        m[6:12] = node_dofs[b]
        if not condense:
            n_own = n_local(el.k) - 12
            m[12:] = np.arange(nxt, nxt + n_own)
            nxt += n_own
        m.setflags(write=False)
        maps.append(m)
    node_dofs.setflags(write=False)
    return DofLayout(nxt, node_dofs, tuple(maps), condense)
