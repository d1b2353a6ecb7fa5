"""Global assembly, Newton load stepping with optional static condensation, error metrics.

Rotational unknowns are stored as quaternions and updated multiplicatively,
``q <- exp(d) q``. Each Newton iteration linearizes the element energy in the
chart ``d = 0`` around the current iterate, so the tangent map never has to be
inverted near its singularity at ``|psi| = 2 pi``.
"""

from __future__ import annotations

import hashlib
import math
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .element import (
    RelativeRotationTooLarge,
    condense,
    distributed_load_values,
    evaluate_batch,
    gauss_rule,
    legendre_basis,
    local_slices,
    n_local,
    position_basis,
    reference_strains,
    rotation_diagnostics,
)
from .model import (
    ClampPosition,
    ClampRotation,
    DistributedForce,
    DofLayout,
    LoadCase,
    Mesh,
    PointForce,
    PointMoment,
    PrescribeRotation,
    dof_layout,
    validate_bcs,
)
from .so3 import Rotation, hat, quat_exp, quat_mul

EPS = np.finfo(float).eps


class NonConvergence(RuntimeError):
    """Newton iteration failed; ``report`` holds the steps completed so far."""

    def __init__(self, message: str, step: int = -1, residual_norms=(), report: SolveReport | None = None):
        super().__init__(message)
        self.step = step
        self.residual_norms = list(residual_norms)
        self.report = report


class SingularTangent(RuntimeError):
    pass


@dataclass(frozen=True)
class SolverConfig:
    """Newton settings.

    Convergence needs ``|R| <= tol_res * max(1, load scale, |R_0|)`` and
    ``|dx| <= tol_inc * max(1, |x|)``, where ``R_0`` is the residual at the
    start of the load step. A step also counts as converged when the increment
    test holds and the residual has stopped decreasing, which happens at the
    round-off floor of very stiff systems.

    With ``position_correction`` every Newton update is followed by one linear
    solve that re-equilibrates the centerline at frozen rotations and moments.
    The energy is quadratic in the centerline coefficients, so this solve is
    exact; it removes the spurious stretching of the linearized update that
    otherwise shrinks the convergence radius like ``1/slenderness``.
    """

    tol_res: float = 1e-10
    tol_inc: float = 1e-10
    max_iter: int = 50
    condense: bool = False
    integration: str = "reduced_gamma"
    linear_solver: str = "splu"
    max_cuts: int = 6
    position_correction: bool = True

    def __post_init__(self):
        if not (self.tol_res > 0.0 and self.tol_inc > 0.0):
            raise ValueError("tolerances must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.integration not in ("full", "reduced_gamma", "reduced"):
            raise ValueError(f"unknown integration mode {self.integration!r}")
        if self.max_cuts < 0:
            raise ValueError("max_cuts must be >= 0")
        if self.linear_solver != "splu":
            raise ValueError("only the direct sparse solver 'splu' is available")


# ---------------------------------------------------------------------------
# state
# ---------------------------------------------------------------------------


@dataclass
class State:
    """Current unknowns.

    ``u`` nodal displacements, ``Q`` nodal incremental rotations (quaternions,
    identity in the reference), ``q_lo`` element-constant rotations and
    ``own`` the remaining element-local coefficients in local layout order
    (``r_bubble``, ``M``, ``psi_lo`` slot, ``psi_ho``), the ``psi_lo`` slot
    always being zero.
    """

    u: np.ndarray
    Q: np.ndarray
    q_lo: np.ndarray
    own: list[np.ndarray]

    @classmethod
    def reference(cls, mesh: Mesh) -> State:
        n = mesh.n_nodes
        Q = np.zeros((n, 4))
        Q[:, 0] = 1.0
        return cls(
            u=np.zeros((n, 3)),
            Q=Q,
            q_lo=np.array([el.q0_lo for el in mesh.elements]),
            own=[_own_reference(el) for el in mesh.elements],
        )

    def copy(self) -> State:
        return State(self.u.copy(), self.Q.copy(), self.q_lo.copy(), [o.copy() for o in self.own])


def _own_reference(el) -> np.ndarray:
    sl = local_slices(el.k)
    own = np.zeros(n_local(el.k) - 12)
    own[sl["psi_ho"].start - 12 : sl["psi_ho"].stop - 12] = el.psi0_ho.ravel()
    return own


# ---------------------------------------------------------------------------
# system: mesh + boundary conditions + static element data
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class _Group:
    k: int
    elements: np.ndarray
    static: dict
    qdist: dict  # label -> (E, nf, 3)
    gmap: np.ndarray  # (E, n_local), -1 where condensed


@dataclass
class Assembly:
    """Assembled residual and tangent on all global DOFs (before eliminating BCs)."""

    R: np.ndarray
    K: sp.csc_matrix | None
    energy: float
    condensed: list | None = None


class System:
    """A mesh with its boundary conditions, ready for assembly."""

    def __init__(self, mesh: Mesh, bcs, integration: str = "reduced_gamma", condense: bool = False):
        validate_bcs(mesh, bcs)
        self.mesh = mesh
        self.bcs = tuple(bcs)
        self.integration = integration
        self.reduced = integration != "full"
        self.layout: DofLayout = dof_layout(mesh, condense=condense)
        self.condense = condense
        self.groups: list[_Group] = []
        by_k: dict[int, list[int]] = {}
        for e, el in enumerate(mesh.elements):
            by_k.setdefault(el.k, []).append(e)
        labels_q = {}
        for bc in self.bcs:
            if isinstance(bc, DistributedForce):
                labels_q.setdefault(bc.label, []).append(bc)
        for k in sorted(by_k):
            idx = np.array(by_k[k])
            els = [mesh.elements[e] for e in idx]
            g0, k0 = zip(*(reference_strains(el, self.reduced) for el in els))
            q0 = np.array([[r.quat for r in el.end_rotations()] for el in els])
            static = dict(
                J=np.array([el.jacobian for el in els]),
                r0=np.array([el.r0 for el in els]),
                g0=np.array(g0),
                k0=np.array(k0),
                cg=np.array([el.cross_section.c_gamma for el in els]),
                ck=np.array([el.cross_section.c_kappa for el in els]),
                q0_end=q0,
            )
            qdist = {}
            pos = {e: i for i, e in enumerate(idx)}
            for label, items in labels_q.items():
                arr = np.zeros((len(idx), k + 1, 3))
                for bc in items:
                    if bc.element in pos:
                        arr[pos[bc.element]] += distributed_load_values(mesh.elements[bc.element], bc.q)
                qdist[label] = arr
            gmap = np.array([self.layout.element_map[e] for e in idx])
            self.groups.append(_Group(k, idx, static, qdist, gmap))
        # kinematic constraints
        fixed = []
        self.prescribed_rot: list[tuple[int, PrescribeRotation]] = []
        self.prescribed_pos: list[tuple[int, np.ndarray]] = []
        for bc in self.bcs:
            if isinstance(bc, ClampPosition):
                a = mesh.node(bc.node)
                fixed.extend(self.layout.node_dofs[a, 0:3])
                val = mesh.nodes[a].r0 if bc.value is None else np.asarray(bc.value, dtype=float)
                self.prescribed_pos.append((a, val - mesh.nodes[a].r0))
            elif isinstance(bc, (ClampRotation, PrescribeRotation)):
                a = mesh.node(bc.node)
                fixed.extend(self.layout.node_dofs[a, 3:6])
                if isinstance(bc, PrescribeRotation):
                    self.prescribed_rot.append((a, bc))
        self.fixed = np.array(sorted(fixed), dtype=np.int64)
        self.free = np.setdiff1d(np.arange(self.layout.n_global), self.fixed)
        self._init_position_map(fixed)

    def _init_position_map(self, fixed) -> None:
        # numbering of the centerline unknowns alone: nodal positions, then bubbles
        nd = self.layout.node_dofs
        self.pos_node = np.arange(3 * self.mesh.n_nodes).reshape(-1, 3)
        nxt = self.pos_node.size
        self.pos_maps = []
        for g in self.groups:
            sl = local_slices(g.k)
            nb = sl["r_bubble"].stop - sl["r_bubble"].start
            a = np.array([self.mesh.elements[e].nodes[0] for e in g.elements])
            b = np.array([self.mesh.elements[e].nodes[1] for e in g.elements])
            bub = nxt + np.arange(len(g.elements) * nb).reshape(len(g.elements), nb)
            nxt += bub.size
            local = np.r_[0:3, 6:9, sl["r_bubble"].start : sl["r_bubble"].stop]
            self.pos_maps.append((local, np.hstack([self.pos_node[a], self.pos_node[b], bub])))
        self.n_pos = nxt
        fixed_pos = [self.pos_node[a] for a in range(self.mesh.n_nodes) if nd[a, 0] in set(fixed)]
        fixed_pos = np.concatenate(fixed_pos) if fixed_pos else np.zeros(0, dtype=np.int64)
        self.pos_free = np.setdiff1d(np.arange(nxt), fixed_pos)

    # -- loads ------------------------------------------------------------

    def load_scale(self, factors: dict[str, float]) -> float:
        s = 0.0
        for bc in self.bcs:
            f = factors.get(getattr(bc, "label", ""), 0.0)
            if isinstance(bc, PointForce):
                s += f * float(np.linalg.norm(bc.F))
            elif isinstance(bc, PointMoment):
                s += f * float(np.linalg.norm(bc.m))
        for g in self.groups:
            for label, arr in g.qdist.items():
                w = gauss_rule(g.k + 1).weights
                s += factors.get(label, 0.0) * float(
                    np.sum(g.static["J"][:, None] * w[None] * np.linalg.norm(arr, axis=-1))
                )
        return s

    def apply_kinematics(self, state: State, factors: dict[str, float]) -> None:
        """Set prescribed nodal positions and rotations in ``state``."""
        for a, du in self.prescribed_pos:
            state.u[a] = du
        for a, bc in self.prescribed_rot:
            state.Q[a] = np.asarray(quat_exp(bc.value(factors.get(bc.label, 0.0))))

    def node_rotation(self, state: State, node: int) -> Rotation:
        """Current nodal rotation ``exp(psi_V) @ Lambda0`` seen from the node's first element."""
        return Rotation(state.Q[node]) @ self.mesh.node_frame(node)

    # -- assembly ---------------------------------------------------------

    def _group_inputs(self, g: _Group, state: State, factors):
        k = g.k
        els = [self.mesh.elements[e] for e in g.elements]
        a = np.array([el.nodes[0] for el in els])
        b = np.array([el.nodes[1] for el in els])
        X = np.zeros((len(els), n_local(k)))
        X[:, 0:3] = state.u[a]
        X[:, 6:9] = state.u[b]
        X[:, 12:] = np.array([state.own[e] for e in g.elements])
        q = np.zeros((len(els), k + 1, 3))
        for label, arr in g.qdist.items():
            q += factors.get(label, 0.0) * arr
        P = dict(g.static)
        P.pop("q0_end")
        P["q_lo"] = state.q_lo[g.elements]
        P["qVL"] = np.asarray(quat_mul(state.Q[a], g.static["q0_end"][:, 0]))
        P["qVR"] = np.asarray(quat_mul(state.Q[b], g.static["q0_end"][:, 1]))
        P["q"] = q
        return X, P

    def check_rotations(self, state: State) -> None:
        for g in self.groups:
            X, P = self._group_inputs(g, state, {})
            ho_max, ang = rotation_diagnostics(g.k, X, P)
            if np.any(ho_max >= np.pi):
                e = int(g.elements[np.argmax(ho_max)])
                raise RelativeRotationTooLarge(
                    f"higher-order rotation {ho_max.max():.4g} >= pi in element {e}; refine the mesh"
                )
            if np.any(ang >= np.pi * (1.0 - 1e-12)):
                e = int(g.elements[np.argmax(ang)])
                raise RelativeRotationTooLarge(f"interface rotation reached pi at element {e}; refine the mesh")

    def assemble(self, state: State, factors: dict[str, float], order: int = 2) -> Assembly:
        """Residual (gradient of the energy plus nodal load terms) and tangent in the current chart."""
        n = self.layout.n_global
        R = np.zeros(n)
        rows, cols, vals = [], [], []
        energy = 0.0
        condensed = [] if self.condense else None
        for g in self.groups:
            X, P = self._group_inputs(g, state, factors)
            e, grad, H = evaluate_batch(g.k, self.reduced, X, P, order=max(order, 1))
            energy += float(np.sum(e))
            if self.condense and order >= 2:
                c = condense(H, grad, np.arange(12, n_local(g.k)))
                condensed.append(c)
                grad_g, H_g, gm = c.R, c.K, g.gmap[:, :12]
            else:
                grad_g, H_g, gm = grad, H, g.gmap
                if self.condense:
                    grad_g, gm = grad[:, :12], g.gmap[:, :12]
            np.add.at(R, gm.ravel(), grad_g.ravel())
            if order >= 2:
                nl = gm.shape[1]
                rows.append(np.repeat(gm, nl, axis=1).ravel())
                cols.append(np.tile(gm, (1, nl)).ravel())
                vals.append(H_g.ravel())
        # nodal loads
        nd = self.layout.node_dofs
        for bc in self.bcs:
            f = factors.get(getattr(bc, "label", ""), 0.0)
            if f == 0.0:
                continue
            if isinstance(bc, PointForce):
                a = self.mesh.node(bc.node)
                R[nd[a, 0:3]] -= f * np.asarray(bc.F, dtype=float)
                energy -= f * float(np.dot(bc.F, state.u[a]))
            elif isinstance(bc, PointMoment):
                a = self.mesh.node(bc.node)
                idx = nd[a, 3:6]
                if bc.frame == "spatial":
                    m = f * np.asarray(bc.m, dtype=float)
                    Km = -0.5 * np.asarray(hat(m))
                else:
                    m = f * self.node_rotation(state, a).apply(bc.m)
                    Km = 0.5 * np.asarray(hat(m))
                R[idx] -= m
                if order >= 2:
                    rows.append(np.repeat(idx, 3))
                    cols.append(np.tile(idx, 3))
                    vals.append(Km.ravel())
        K = None
        if order >= 2:
            K = sp.coo_matrix(
                (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
            ).tocsc()
            K.sum_duplicates()
        return Assembly(R, K, energy, condensed)

    # -- updates ----------------------------------------------------------

    def update(self, state: State, dx: np.ndarray, assembly: Assembly) -> None:
        """Apply a global increment; rotations multiplicatively, the rest additively."""
        nd = self.layout.node_dofs
        state.u += dx[nd[:, 0:3]]
        state.Q[:] = np.asarray(quat_mul(quat_exp(dx[nd[:, 3:6]]), state.Q))
        state.Q /= np.linalg.norm(state.Q, axis=1, keepdims=True)
        for gi, g in enumerate(self.groups):
            sl = local_slices(g.k)
            lo = slice(sl["psi_lo"].start - 12, sl["psi_lo"].stop - 12)
            if self.condense:
                dloc = assembly.condensed[gi].recover(dx[g.gmap[:, :12]])
                down = dloc[:, 12:]
            else:
                down = dx[g.gmap[:, 12:]]
            dlo = down[:, lo].copy()
            down[:, lo] = 0.0
            state.q_lo[g.elements] = np.asarray(quat_mul(quat_exp(dlo), state.q_lo[g.elements]))
            state.q_lo[g.elements] /= np.linalg.norm(state.q_lo[g.elements], axis=1, keepdims=True)
            for i, e in enumerate(g.elements):
                state.own[e] = state.own[e] + down[i]

    def correct_positions(self, state: State, factors: dict[str, float]) -> float:
        """Minimize the energy over the centerline at frozen rotations and moments.

        Returns the norm of the position correction.
        """
        R = np.zeros(self.n_pos)
        rows, cols, vals = [], [], []
        for g, (local, pm) in zip(self.groups, self.pos_maps):
            X, P = self._group_inputs(g, state, factors)
            _, grad, H = evaluate_batch(g.k, self.reduced, X, P, order=2)
            np.add.at(R, pm.ravel(), grad[:, local].ravel())
            nl = len(local)
            rows.append(np.repeat(pm, nl, axis=1).ravel())
            cols.append(np.tile(pm, (1, nl)).ravel())
            vals.append(H[:, local][:, :, local].ravel())
        for bc in self.bcs:
            f = factors.get(getattr(bc, "label", ""), 0.0)
            if f != 0.0 and isinstance(bc, PointForce):
                R[self.pos_node[self.mesh.node(bc.node)]] -= f * np.asarray(bc.F, dtype=float)
        n = self.n_pos
        K = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)).tocsc()
        free = self.pos_free
        dr = np.zeros(n)
        dr[free] = _solve_linear(K[free][:, free].tocsc(), -R[free])
        state.u += dr[self.pos_node]
        for g, (local, pm) in zip(self.groups, self.pos_maps):
            sl = local_slices(g.k)
            bub = slice(sl["r_bubble"].start - 12, sl["r_bubble"].stop - 12)
            d = dr[pm[:, 6:]]
            for i, e in enumerate(g.elements):
                state.own[e][bub] += d[i]
        return float(np.linalg.norm(dr))

    def unknown_norm(self, state: State) -> float:
        return float(np.sqrt(np.sum(state.u**2) + sum(float(np.sum(o**2)) for o in state.own)))


# ---------------------------------------------------------------------------
# Newton driver
# ---------------------------------------------------------------------------


@dataclass
class StepRecord:
    step: int
    factors: dict[str, float]
    iterations: int
    residual_norms: list[float]
    increment_norms: list[float]
    converged: bool
    substeps: int = 1


@dataclass
class SolveReport:
    steps: list[StepRecord] = field(default_factory=list)
    node_positions: list[np.ndarray] = field(default_factory=list)
    state: State | None = None
    wall_time: float = 0.0
    converged: bool = False

    @property
    def total_iterations(self) -> int:
        return sum(s.iterations for s in self.steps)

    @property
    def final_residual(self) -> float:
        return self.steps[-1].residual_norms[-1] if self.steps else 0.0


def _solve_linear(K: sp.csc_matrix, rhs: np.ndarray) -> np.ndarray:
    try:
        lu = spla.splu(K)
    except RuntimeError as exc:
        raise SingularTangent(f"tangent factorization failed: {exc}") from exc
    x = lu.solve(rhs)
    if not np.all(np.isfinite(x)):
        raise SingularTangent("tangent solve produced non-finite values")
    return x


def newton_update(
    system: System, state: State, factors: dict[str, float], asm: Assembly, position_correction: bool = True
) -> float:
    """One Newton iteration from the assembly ``asm`` of ``state``; returns the increment norm."""
    free = system.free
    dx = np.zeros(system.layout.n_global)
    dx[free] = _solve_linear(asm.K[free][:, free].tocsc(), -asm.R[free])
    system.update(state, dx, asm)
    system.check_rotations(state)
    inc = float(np.linalg.norm(dx))
    if position_correction:
        inc = math.hypot(inc, system.correct_positions(state, factors))
    return inc


def solve_step(system: System, state: State, factors: dict[str, float], config: SolverConfig, step: int = 0):
    """Newton iteration at fixed load factors; ``state`` is updated in place.

    Returns the :class:`StepRecord`. Raises :class:`NonConvergence` or
    :class:`SingularTangent`.
    """
    system.apply_kinematics(state, factors)
    free = system.free
    scale = max(1.0, system.load_scale(factors))
    res_norms: list[float] = []
    inc_norms: list[float] = []
    tol = None
    for it in range(config.max_iter + 1):
        asm = system.assemble(state, factors, order=2)
        r = float(np.linalg.norm(asm.R[free]))
        res_norms.append(r)
        if not math.isfinite(r):
            raise NonConvergence(f"non-finite residual in step {step}", step, res_norms)
        if tol is None:
            tol = config.tol_res * max(scale, r)
        x_scale = max(1.0, system.unknown_norm(state))
        inc_ok = not inc_norms or inc_norms[-1] <= config.tol_inc * x_scale
        if r <= tol and inc_ok:
            return StepRecord(step, dict(factors), it, res_norms, inc_norms, True)
        # residual stuck at the round-off floor of a stiff system
        if inc_norms and inc_ok and r > 0.1 * res_norms[-2] and r <= 1e4 * math.sqrt(config.tol_res) * max(scale, res_norms[0]):
            return StepRecord(step, dict(factors), it, res_norms, inc_norms, True)
        if it == config.max_iter:
            break
        inc = newton_update(system, state, factors, asm, config.position_correction)
        inc_norms.append(inc)
    raise NonConvergence(
        f"Newton did not converge in step {step} after {config.max_iter} iterations "
        f"(last residual {res_norms[-1]:.3e}); use smaller load increments",
        step,
        res_norms,
    )


def _interpolate(f0: dict, f1: dict, t: float) -> dict:
    return {k: f0.get(k, 0.0) + t * (f1.get(k, 0.0) - f0.get(k, 0.0)) for k in set(f0) | set(f1)}


def _solve_with_cuts(system, state, f_prev, f_next, config, step, cuts_left):
    """Solve at ``f_next``; on failure restart from ``state`` and bisect the increment."""
    trial = state.copy()
    try:
        rec = solve_step(system, trial, f_next, config, step=step)
        return trial, [rec]
    except (NonConvergence, RelativeRotationTooLarge, SingularTangent):
        if cuts_left == 0:
            raise
    f_mid = _interpolate(f_prev, f_next, 0.5)
    mid, recs1 = _solve_with_cuts(system, state, f_prev, f_mid, config, step, cuts_left - 1)
    end, recs2 = _solve_with_cuts(system, mid, f_mid, f_next, config, step, cuts_left - 1)
    return end, recs1 + recs2


def continuation(
    mesh: Mesh,
    load_case: LoadCase,
    config: SolverConfig | None = None,
    state: State | None = None,
    callback=None,
) -> SolveReport:
    """Step through the load schedule, warm-starting each step from the previous one.

    A step that fails is retried from the last converged state in two halves,
    recursively up to ``config.max_cuts`` times. ``callback(step, state)`` is
    called after every converged step.
    """
    config = config or SolverConfig()
    system = System(mesh, load_case.bcs, config.integration, config.condense)
    state = State.reference(mesh) if state is None else state.copy()
    report = SolveReport(state=state)
    t0 = time.perf_counter()
    f_prev: dict[str, float] = {}
    for i, factors in enumerate(load_case.schedule()):
        try:
            state, recs = _solve_with_cuts(system, state, f_prev, factors, config, i, config.max_cuts)
        except (NonConvergence, RelativeRotationTooLarge, SingularTangent) as exc:
            report.wall_time = time.perf_counter() - t0
            report.state = state
            if isinstance(exc, NonConvergence):
                exc.report = report
                raise
            raise NonConvergence(f"step {i} failed: {exc}", i, report=report) from exc
        last = recs[-1]
        rec = StepRecord(
            i,
            dict(factors),
            sum(r.iterations for r in recs),
            last.residual_norms,
            last.increment_norms,
            True,
            substeps=len(recs),
        )
        report.steps.append(rec)
        report.node_positions.append(node_positions(mesh, state))
        if callback is not None:
            callback(i, state)
        f_prev = dict(factors)
    report.state = state
    report.wall_time = time.perf_counter() - t0
    report.converged = True
    return report


# ---------------------------------------------------------------------------
# post-processing
# ---------------------------------------------------------------------------


def node_positions(mesh: Mesh, state: State) -> np.ndarray:
    return np.array([n.r0 for n in mesh.nodes]) + state.u


def element_positions(mesh: Mesh, state: State, e: int, xi) -> np.ndarray:
    """Deformed centerline of element ``e`` at reference coordinates ``xi``."""
    el = mesh.elements[e]
    k = el.k
    a, b = el.nodes
    sl = local_slices(k)
    bub = state.own[e][sl["r_bubble"].start - 12 : sl["r_bubble"].stop - 12].reshape(k - 1, 3)
    coeffs = el.r0 + np.vstack([state.u[a], state.u[b], bub])
    N, _ = position_basis(k, xi)
    return N @ coeffs


def element_moments(mesh: Mesh, state: State, e: int, xi) -> np.ndarray:
    """Material moment of element ``e`` at ``xi``."""
    el = mesh.elements[e]
    sl = local_slices(el.k)
    M = state.own[e][sl["M"].start - 12 : sl["M"].stop - 12].reshape(el.k + 1, 3)
    P, _ = legendre_basis(el.k, xi)
    return P @ M


def element_rotations(mesh: Mesh, state: State, e: int, xi) -> np.ndarray:
    """Quaternions of the element rotation field at ``xi``."""
    el = mesh.elements[e]
    sl = local_slices(el.k)
    ho = state.own[e][sl["psi_ho"].start - 12 : sl["psi_ho"].stop - 12].reshape(el.k - 1, 3)
    P, _ = legendre_basis(el.k, np.atleast_1d(xi))
    return np.asarray(quat_mul(state.q_lo[e][None], quat_exp(P[:, 1 : el.k] @ ho)))


def centerline_samples(mesh: Mesh, state: State, per_element: int = 20) -> np.ndarray:
    """Rows ``(element, s, x, y, z)`` at ``per_element`` equispaced points per element."""
    xi = np.linspace(-1.0, 1.0, per_element)
    out = []
    for e, el in enumerate(mesh.elements):
        r = element_positions(mesh, state, e, xi)
        s = el.s_of(xi)
        out.append(np.column_stack([np.full(per_element, e), s, r]))
    return np.vstack(out)


def moment_energy(mesh: Mesh, state: State) -> float:
    """``int M . C_kappa^-1 . M ds`` over the mesh, by the full Gauss rule."""
    total = 0.0
    for e, el in enumerate(mesh.elements):
        rule = gauss_rule(el.k + 1)
        M = element_moments(mesh, state, e, rule.points)
        total += el.jacobian * float(np.sum(rule.weights * np.sum(M * M / el.cross_section.c_kappa, axis=1)))
    return total


def error_l2_position(mesh: Mesh, state: State, reference, normalization: float) -> float:
    """``(1/normalization) sqrt((1/L) int |r - r_ref|^2 ds)`` with ``(2k+2)``-point Gauss per element.

    ``reference`` maps arclength to the reference position.
    """
    total = 0.0
    for e, el in enumerate(mesh.elements):
        rule = gauss_rule(2 * el.k + 2)
        r = element_positions(mesh, state, e, rule.points)
        ref = np.array([np.asarray(reference(s), dtype=float) for s in el.s_of(rule.points)])
        total += el.jacobian * float(np.sum(rule.weights * np.sum((r - ref) ** 2, axis=1)))
    return math.sqrt(total / mesh.total_length) / normalization


def convergence_rate(h, e, floor: float = 1e2 * EPS) -> float:
    """Least-squares slope of ``log e`` against ``log h``, ignoring errors at or below ``floor``."""
    h = np.asarray(h, dtype=float)
    e = np.asarray(e, dtype=float)
    keep = e > floor
    if keep.sum() < 2:
        return float("nan")
    slope, _ = np.polyfit(np.log(h[keep]), np.log(e[keep]), 1)
    return float(slope)


def state_digest(state: State) -> str:
    """SHA-256 over the raw state arrays (for determinism checks)."""
    h = hashlib.sha256()
    for arr in (state.u, state.Q, state.q_lo, *state.own):
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()
