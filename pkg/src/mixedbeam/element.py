"""Mixed beam element with discontinuous element-local rotations.

Per element the unknowns are

* centerline displacements in an endpoint-interpolatory + bubble basis of
  order ``k`` (endpoint values shared with neighbours),
* material moments ``M`` as Legendre coefficients of order ``k`` (local),
* an element-constant rotation ``Lambda_lo`` and a zero-mean higher-order
  relative rotation vector ``psi_ho`` of order ``k - 1`` (local),
* nodal incremental rotations ``psi_V`` at both ends (shared).

The element energy is

    int phi_gamma ds + int (-M.Ck^-1.M/2 + kappa.M) ds
    + [ log(Lambda_E^T Lambda_V) . M ]_left^right - loads

and the residual/tangent are its first and second derivatives, obtained by
automatic differentiation of three pointwise densities (see
:func:`evaluate_batch`).

Local vector layout (length ``12 + 9k``)::

    [r_left(3), psiV_left(3), r_right(3), psiV_right(3),
     r_bubble(3(k-1)), M(3(k+1)), psi_lo(3), psi_ho(3(k-1))]
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field
from typing import Callable

import jax
import jax.numpy as jnp
import numpy as np
from numpy.polynomial.legendre import leggauss

from .constitutive import CrossSection
from .so3 import (
    Rotation,
    exp_rotvec,
    quat_angle,
    quat_conj,
    quat_exp,
    quat_log,
    quat_mul,
    quat_rotate,
    quat_to_matrix,
    tangent_matrix,
)


class RelativeRotationTooLarge(RuntimeError):
    """A relative rotation inside an element or across an interface reached pi."""


class SingularCondensationBlock(np.linalg.LinAlgError):
    pass


# ---------------------------------------------------------------------------
# bases and quadrature
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class QuadratureRule:
    points: np.ndarray
    weights: np.ndarray

    def __len__(self) -> int:
        return len(self.points)

    def integrate(self, f: Callable[[np.ndarray], np.ndarray]) -> float:
        return float(np.sum(self.weights * f(self.points)))


@functools.lru_cache(maxsize=None)
def gauss_rule(n: int) -> QuadratureRule:
    x, w = leggauss(n)
    return QuadratureRule(x, w)


def quadrature_rules(k: int) -> tuple[QuadratureRule, QuadratureRule]:
    """Full ``(k+1)``-point and reduced ``k``-point Gauss rules."""
    if k < 1:
        raise ValueError("element order must be >= 1")
    return gauss_rule(k + 1), gauss_rule(k)


def legendre_basis(k: int, xi) -> tuple[np.ndarray, np.ndarray]:
    """Values and derivatives of ``P_0 .. P_k`` at ``xi``; shape ``(..., k+1)``."""
    xi = np.asarray(xi, dtype=float)
    P = np.zeros(xi.shape + (k + 1,))
    dP = np.zeros_like(P)
    P[..., 0] = 1.0
    if k >= 1:
        P[..., 1] = xi
        dP[..., 1] = 1.0
    for n in range(1, k):
        P[..., n + 1] = ((2 * n + 1) * xi * P[..., n] - n * P[..., n - 1]) / (n + 1)
        # P'_{n+1} = P'_{n-1} + (2n+1) P_n
        dP[..., n + 1] = dP[..., n - 1] + (2 * n + 1) * P[..., n]
    return P, dP


def position_basis(k: int, xi) -> tuple[np.ndarray, np.ndarray]:
    """Endpoint-interpolatory basis ``[(1-xi)/2, (1+xi)/2, P_j - P_{j-2} (j=2..k)]``."""
    xi = np.asarray(xi, dtype=float)
    P, dP = legendre_basis(k, xi)
    N = np.zeros(xi.shape + (k + 1,))
    dN = np.zeros_like(N)
    N[..., 0] = 0.5 * (1.0 - xi)
    N[..., 1] = 0.5 * (1.0 + xi)
    dN[..., 0] = -0.5
    dN[..., 1] = 0.5
    for j in range(2, k + 1):
        N[..., j] = P[..., j] - P[..., j - 2]
        dN[..., j] = dP[..., j] - dP[..., j - 2]
    return N, dN


# ---------------------------------------------------------------------------
# element data
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ElementDef:
    """Geometry and material of one element.

    ``r0`` holds the initial centerline in the position basis (rows: left
    node, right node, bubbles). The initial rotation is
    ``exp(psi0_lo) @ exp(psi0_ho(xi))``; ``q0_lo`` stores ``exp(psi0_lo)``
    as a quaternion.
    """

    k: int
    nodes: tuple[int, int]
    span: tuple[float, float]
    r0: np.ndarray
    q0_lo: np.ndarray
    psi0_ho: np.ndarray
    cross_section: CrossSection

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("element order must be >= 1")
        if not self.span[1] - self.span[0] > 0.0:
            raise ValueError(f"element span must have positive length, got {self.span}")
        object.__setattr__(self, "r0", np.asarray(self.r0, dtype=float).reshape(self.k + 1, 3))
        object.__setattr__(self, "q0_lo", Rotation(self.q0_lo).quat)
        object.__setattr__(self, "psi0_ho", np.asarray(self.psi0_ho, dtype=float).reshape(self.k - 1, 3))

    @property
    def length(self) -> float:
        return self.span[1] - self.span[0]

    @property
    def jacobian(self) -> float:
        return 0.5 * self.length

    @property
    def psi0_lo(self) -> np.ndarray:
        return np.asarray(quat_log(self.q0_lo))

    def s_of(self, xi) -> np.ndarray:
        return self.span[0] + (np.asarray(xi) + 1.0) * self.jacobian

    def initial_rotation(self, xi: float) -> Rotation:
        return local_rotation(Rotation(self.q0_lo), self.psi0_ho, xi)

    def end_rotations(self) -> tuple[Rotation, Rotation]:
        """Initial rotations of the discrete field at both element ends."""
        return self.initial_rotation(-1.0), self.initial_rotation(1.0)

    def initial_position(self, xi) -> np.ndarray:
        N, _ = position_basis(self.k, xi)
        return N @ self.r0


@dataclass
class ElementDofs:
    """Unknowns of one element in value form (total rotation vectors)."""

    r: np.ndarray
    M: np.ndarray
    psi_lo: np.ndarray
    psi_ho: np.ndarray
    psiV_left: np.ndarray = field(default_factory=lambda: np.zeros(3))
    psiV_right: np.ndarray = field(default_factory=lambda: np.zeros(3))

    @classmethod
    def reference(cls, defn: ElementDef) -> ElementDofs:
        return cls(
            r=defn.r0.copy(),
            M=np.zeros((defn.k + 1, 3)),
            psi_lo=defn.psi0_lo.copy(),
            psi_ho=defn.psi0_ho.copy(),
        )

    def copy(self) -> ElementDofs:
        return ElementDofs(*(np.array(getattr(self, f)) for f in ("r", "M", "psi_lo", "psi_ho", "psiV_left", "psiV_right")))


@dataclass(frozen=True)
class ElementLoads:
    """Dead distributed force ``q`` and optional end moments on one element.

    ``q`` is a constant 3-vector or a callable of the arclength. End moments are
    spatial vectors (``frame="spatial"``) or material components rotated by
    the nodal rotation (``frame="material"``).
    """

    q: np.ndarray | Callable | None = None
    moment_left: np.ndarray | None = None
    moment_right: np.ndarray | None = None
    frame: str = "spatial"


def n_local(k: int) -> int:
    return 12 + 9 * k


def local_slices(k: int) -> dict[str, slice]:
    sizes = [
        ("r_left", 3),
        ("psiV_left", 3),
        ("r_right", 3),
        ("psiV_right", 3),
        ("r_bubble", 3 * (k - 1)),
        ("M", 3 * (k + 1)),
        ("psi_lo", 3),
        ("psi_ho", 3 * (k - 1)),
    ]
    out, o = {}, 0
    for name, n in sizes:
        out[name] = slice(o, o + n)
        o += n
    return out


def condensable_indices(k: int) -> np.ndarray:
    """Element-local DOFs eliminated by static condensation."""
    return np.arange(12, n_local(k))


# ---------------------------------------------------------------------------
# rotation helpers
# ---------------------------------------------------------------------------


def ho_field(psi_ho, xi) -> np.ndarray:
    """``sum_j c_j P_j(xi)`` for the zero-mean higher-order rotation vector."""
    psi_ho = np.asarray(psi_ho, dtype=float).reshape(-1, 3)
    k = psi_ho.shape[0] + 1
    P, _ = legendre_basis(k, xi)
    return P[..., 1:k] @ psi_ho


def local_rotation(lo: Rotation | np.ndarray, psi_ho, xi: float) -> Rotation:
    """Element rotation ``exp(psi_lo) @ exp(psi_ho(xi))``.

    ``lo`` is either the lowest-order rotation itself or its rotation vector.
    """
    if not isinstance(lo, Rotation):
        lo = exp_rotvec(lo)
    psi = ho_field(psi_ho, xi)
    if np.linalg.norm(psi) >= np.pi:
        raise RelativeRotationTooLarge(
            f"higher-order rotation of norm {np.linalg.norm(psi):.6g} at xi={xi}; refine the mesh"
        )
    if psi.size == 0 or not np.any(psi):
        return lo
    return lo @ exp_rotvec(psi)


def interface_jump(rot_end: Rotation, psiV, rot0_end: Rotation, M_end, sign: int) -> float:
    """Discrete-curvature work ``sign * log(Lambda_E^T Lambda_V) . M`` at one element end.

    ``sign`` is +1 at the right end and -1 at the left end.
    """
    rot_v = exp_rotvec(psiV) @ rot0_end
    q = np.asarray(quat_mul(quat_conj(rot_end.quat), rot_v.quat))
    if float(quat_angle(q)) >= np.pi * (1.0 - 1e-12):
        raise RelativeRotationTooLarge("relative rotation across an element interface reached pi")
    return float(sign * np.asarray(quat_log(q)) @ np.asarray(M_end, dtype=float))


# ---------------------------------------------------------------------------
# point kernels (traced and differentiated by jax)
# ---------------------------------------------------------------------------

# Rotations enter multiplicatively around base values,
# Lambda_lo = exp(d_lo) @ base_lo and Lambda_V = exp(d_V) @ base_V, so the
# same kernels serve the value-level API (base_lo = I) and the Newton solver
# (bases = current iterate, d = 0).


def _gamma_point(z, q_lo, g0, cg):
    """Force-strain energy density; ``z = [d_lo, psi_ho(xi), r'(xi)]``."""
    q = quat_mul(quat_mul(quat_exp(z[0:3]), q_lo), quat_exp(z[3:6]))
    gam = quat_to_matrix(q).T @ z[6:9] - g0
    return 0.5 * jnp.sum(cg * gam * gam)


def _kappa_point(z, k0, ck):
    """Dual bending energy density; ``z = [psi_ho(xi), psi_ho'(xi), M(xi)]``."""
    kap = tangent_matrix(z[0:3]).T @ z[3:6] - k0
    M = z[6:9]
    return -0.5 * jnp.sum(M * M / ck) + kap @ M


def _jump_point(z, q_lo, q_v):
    """``log(Lambda_E^T Lambda_V) . M``; ``z = [d_lo, psi_ho(end), d_V, M(end)]``."""
    q_e = quat_mul(quat_mul(quat_exp(z[0:3]), q_lo), quat_exp(z[3:6]))
    qv = quat_mul(quat_exp(z[6:9]), q_v)
    return quat_log(quat_mul(quat_conj(q_e), qv), tie_break=False) @ z[9:12]


def _vgh(f):
    def run(z, *args):
        v, g = jax.value_and_grad(f)(z, *args)
        return v, g, jax.hessian(f)(z, *args)

    return jax.jit(jax.vmap(run))


CHUNK = 256


@functools.lru_cache(maxsize=None)
def _point_kernels():
    return dict(gamma=_vgh(_gamma_point), kappa=_vgh(_kappa_point), jump=_vgh(_jump_point))


def _run_chunked(fn, *args):
    """Evaluate a vmapped kernel over rows in fixed-size chunks (one compilation)."""
    n = args[0].shape[0]
    outs = []
    for s in range(0, n, CHUNK):
        part = [np.asarray(a[s : s + CHUNK]) for a in args]
        m = part[0].shape[0]
        if m < CHUNK:
            part = [np.concatenate([a, np.repeat(a[-1:], CHUNK - m, axis=0)]) for a in part]
        res = fn(*part)
        outs.append([np.asarray(r)[:m] for r in res])
    return [np.concatenate(o) for o in zip(*outs)]


# ---------------------------------------------------------------------------
# order-dependent linear maps (numpy)
# ---------------------------------------------------------------------------


@functools.lru_cache(maxsize=None)
def _tables(k: int, reduced: bool) -> dict[str, np.ndarray]:
    full = gauss_rule(k + 1)
    gam = gauss_rule(k) if reduced else full
    N_f, dN_f = position_basis(k, full.points)
    _, dN_g = position_basis(k, gam.points)
    P_f, dP_f = legendre_basis(k, full.points)
    P_g, _ = legendre_basis(k, gam.points)
    P_e, _ = legendre_basis(k, np.array([-1.0, 1.0]))
    return dict(
        w_f=full.weights, w_g=gam.weights, N_f=N_f, dN_f=dN_f, dN_g=dN_g,
        P_f=P_f, dP_f=dP_f, P_g=P_g, P_e=P_e,
    )


@functools.lru_cache(maxsize=None)
def _maps(k: int, reduced: bool) -> dict[str, np.ndarray]:
    """Linear maps from the local vector to point arguments, for unit Jacobian."""
    t = _tables(k, reduced)
    sl = local_slices(k)
    n = n_local(k)
    u_idx = [sl["r_left"].start, sl["r_right"].start] + [sl["r_bubble"].start + 3 * j for j in range(k - 1)]

    def rows(coeffs, starts):
        B = np.zeros((3, n))
        for c, i0 in zip(coeffs, starts):
            B[:, i0 : i0 + 3] += c * np.eye(3)
        return B

    ho_starts = [sl["psi_ho"].start + 3 * (j - 1) for j in range(1, k)]
    m_starts = [sl["M"].start + 3 * j for j in range(k + 1)]
    lo = rows([1.0], [sl["psi_lo"].start])
    B_g = np.stack([np.vstack([lo, rows(P[1:k], ho_starts), rows(dN, u_idx)]) for P, dN in zip(t["P_g"], t["dN_g"])])
    B_k = np.stack(
        [np.vstack([rows(P[1:k], ho_starts), rows(dP[1:k], ho_starts), rows(P, m_starts)]) for P, dP in zip(t["P_f"], t["dP_f"])]
    )
    B_j = np.stack(
        [
            np.vstack([lo, rows(t["P_e"][e, 1:k], ho_starts), rows([1.0], [sl[key].start]), rows(t["P_e"][e], m_starts)])
            for e, key in enumerate(("psiV_left", "psiV_right"))
        ]
    )
    B_u = np.stack([rows(N, u_idx) for N in t["N_f"]])
    return dict(B_g=B_g, B_k=B_k, B_j=B_j, B_u=B_u)


def evaluate_batch(k: int, reduced: bool, X: np.ndarray, P: dict, order: int = 2):
    """Energy, gradient and Hessian for a stack of elements of order ``k``.

    ``X`` has shape (E, n_local); entries of ``P`` carry a leading element axis
    (see :func:`element_params`). Returns ``(energy, grad, hess)``.
    """
    t = _tables(k, reduced)
    m = _maps(k, reduced)
    kern = _point_kernels()
    X = np.asarray(X, dtype=float)
    E = X.shape[0]
    J = np.asarray(P["J"], dtype=float)
    ng, nf = len(t["w_g"]), len(t["w_f"])

    # derivative rows of the point arguments carry 1/J; apply it pointwise
    s_g = np.ones((E, 9))
    s_g[:, 6:9] = 1.0 / J[:, None]
    s_k = np.ones((E, 9))
    s_k[:, 3:6] = 1.0 / J[:, None]
    z_g = np.einsum("gdi,ei->egd", m["B_g"], X) * s_g[:, None]
    z_g[:, :, 6:9] += np.einsum("gb,ebi->egi", t["dN_g"], P["r0"]) / J[:, None, None]
    z_k = np.einsum("gdi,ei->egd", m["B_k"], X) * s_k[:, None]
    z_j = np.einsum("gdi,ei->egd", m["B_j"], X)

    vg, gg, hg = _run_chunked(
        kern["gamma"],
        z_g.reshape(E * ng, 9),
        np.repeat(P["q_lo"], ng, axis=0),
        P["g0"].reshape(E * ng, 3),
        np.repeat(P["cg"], ng, axis=0),
    )
    vk, gk, hk = _run_chunked(
        kern["kappa"], z_k.reshape(E * nf, 9), P["k0"].reshape(E * nf, 3), np.repeat(P["ck"], nf, axis=0)
    )
    vj, gj, hj = _run_chunked(
        kern["jump"],
        z_j.reshape(E * 2, 12),
        np.repeat(P["q_lo"], 2, axis=0),
        np.stack([P["qVL"], P["qVR"]], axis=1).reshape(E * 2, 4),
    )
    wg = J[:, None] * t["w_g"][None]
    wk = J[:, None] * t["w_f"][None]
    sj = np.array([-1.0, 1.0])
    f_ext = J[:, None] * np.einsum("n,eni,nij->ej", t["w_f"], P["q"], m["B_u"])

    energy = (
        np.sum(wg * vg.reshape(E, ng), axis=1)
        + np.sum(wk * vk.reshape(E, nf), axis=1)
        + vj.reshape(E, 2) @ sj
        - np.sum(f_ext * X, axis=1)
    )
    if order == 0:
        return energy, None, None
    # weighted and scaled point gradients, flattened over (point, component)
    cg = (wg[:, :, None] * gg.reshape(E, ng, 9) * s_g[:, None]).reshape(E, -1)
    ck = (wk[:, :, None] * gk.reshape(E, nf, 9) * s_k[:, None]).reshape(E, -1)
    cj = (sj[None, :, None] * gj.reshape(E, 2, 12)).reshape(E, -1)
    Bg = m["B_g"].reshape(ng * 9, -1)
    Bk = m["B_k"].reshape(nf * 9, -1)
    Bj = m["B_j"].reshape(2 * 12, -1)
    grad = cg @ Bg + ck @ Bk + cj @ Bj - f_ext
    if order == 1:
        return energy, grad, None
    Hg = wg[:, :, None, None] * hg.reshape(E, ng, 9, 9) * s_g[:, None, :, None] * s_g[:, None, None, :]
    Hk = wk[:, :, None, None] * hk.reshape(E, nf, 9, 9) * s_k[:, None, :, None] * s_k[:, None, None, :]
    Hj = sj[None, :, None, None] * hj.reshape(E, 2, 12, 12)
    hess = (
        _block_congruence(Hg, m["B_g"]) + _block_congruence(Hk, m["B_k"]) + _block_congruence(Hj, m["B_j"])
    )
    return energy, grad, hess


def _block_congruence(H, B):
    """``sum_p B_p^T H[:, p] B_p`` for point blocks ``H`` (E, p, d, d) and ``B`` (p, d, n)."""
    E, npt, d, _ = H.shape
    n = B.shape[-1]
    # block-diagonal over points -> one dense (p*d, p*d) matrix per element
    full = np.zeros((E, npt * d, npt * d))
    for p in range(npt):
        full[:, p * d : (p + 1) * d, p * d : (p + 1) * d] = H[:, p]
    Bf = B.reshape(npt * d, n)
    return Bf.T @ full @ Bf


def rotation_diagnostics(k: int, X: np.ndarray, P: dict) -> tuple[np.ndarray, np.ndarray]:
    """Per element: largest ``|psi_ho(xi)|`` and largest interface relative angle."""
    t = _tables(k, False)
    sl = local_slices(k)
    X = np.asarray(X, dtype=float)
    E = X.shape[0]
    ho = X[:, sl["psi_ho"]].reshape(E, k - 1, 3)
    pts = np.concatenate([t["P_f"], t["P_e"]], axis=0)[:, 1:k]
    ho_max = np.max(np.linalg.norm(np.einsum("pj,ejd->epd", pts, ho), axis=-1), axis=1) if k > 1 else np.zeros(E)
    q_lo = np.asarray(quat_mul(quat_exp(X[:, sl["psi_lo"]]), P["q_lo"]))
    q_e = np.asarray(quat_mul(q_lo[:, None], quat_exp(np.einsum("pj,ejd->epd", t["P_e"][:, 1:k], ho))))
    q_v = np.stack(
        [
            np.asarray(quat_mul(quat_exp(X[:, sl["psiV_left"]]), P["qVL"])),
            np.asarray(quat_mul(quat_exp(X[:, sl["psiV_right"]]), P["qVR"])),
        ],
        axis=1,
    )
    ang = np.asarray(quat_angle(quat_mul(quat_conj(q_e), q_v)))
    return ho_max, ang.max(axis=1)


# ---------------------------------------------------------------------------
# reference strains of the discrete initial geometry
# ---------------------------------------------------------------------------


def reference_strains(defn: ElementDef, reduced: bool) -> tuple[np.ndarray, np.ndarray]:
    """``Lambda0^T r0'`` at the force-strain points and ``kappa0`` at the full points."""
    k = defn.k
    t = _tables(k, reduced)
    J = defn.jacobian
    psi_g = t["P_g"][:, 1:k] @ defn.psi0_ho
    q0_g = np.asarray(quat_mul(defn.q0_lo[None], quat_exp(psi_g)))
    g0 = np.einsum("nji,nj->ni", np.asarray(quat_to_matrix(q0_g)), (t["dN_g"] @ defn.r0) / J)
    psi_f = t["P_f"][:, 1:k] @ defn.psi0_ho
    dpsi_f = (t["dP_f"][:, 1:k] @ defn.psi0_ho) / J
    k0 = np.einsum("nji,nj->ni", np.asarray(tangent_matrix(psi_f)), dpsi_f)
    return g0, k0


def element_params(
    defn: ElementDef,
    q_lo_base: np.ndarray,
    qV_left: np.ndarray,
    qV_right: np.ndarray,
    q_values: np.ndarray | None,
    reduced: bool,
) -> dict[str, np.ndarray]:
    """Per-element parameters consumed by :func:`evaluate_batch` (no element axis)."""
    g0, k0 = reference_strains(defn, reduced)
    nf = defn.k + 1
    q = np.zeros((nf, 3)) if q_values is None else np.broadcast_to(np.asarray(q_values, dtype=float), (nf, 3))
    return dict(
        J=np.float64(defn.jacobian),
        r0=defn.r0,
        q_lo=np.asarray(q_lo_base, dtype=float),
        qVL=np.asarray(qV_left, dtype=float),
        qVR=np.asarray(qV_right, dtype=float),
        g0=g0,
        k0=k0,
        cg=defn.cross_section.c_gamma,
        ck=defn.cross_section.c_kappa,
        q=np.array(q),
    )


def stack_params(params: list[dict]) -> dict[str, np.ndarray]:
    return {key: np.stack([np.asarray(p[key]) for p in params]) for key in params[0]}


def distributed_load_values(defn: ElementDef, q) -> np.ndarray | None:
    """Load vector at the full quadrature points of ``defn``."""
    if q is None:
        return None
    pts = gauss_rule(defn.k + 1).points
    if callable(q):
        return np.array([np.asarray(q(s), dtype=float) for s in defn.s_of(pts)])
    return np.broadcast_to(np.asarray(q, dtype=float), (len(pts), 3)).copy()


# ---------------------------------------------------------------------------
# value-level element API
# ---------------------------------------------------------------------------


def _integration_flag(integration: str) -> bool:
    if integration not in ("full", "reduced_gamma", "reduced"):
        raise ValueError(f"unknown integration mode {integration!r}")
    return integration != "full"


def _api_inputs(defn: ElementDef, dofs: ElementDofs, loads: ElementLoads | None, lam: float, reduced: bool):
    k = defn.k
    rot_l, rot_r = defn.end_rotations()
    qv = None if loads is None else distributed_load_values(defn, loads.q)
    p = element_params(
        defn, Rotation.identity().quat, rot_l.quat, rot_r.quat, None if qv is None else lam * qv, reduced
    )
    sl = local_slices(k)
    x = np.zeros(n_local(k))
    u = np.asarray(dofs.r, dtype=float).reshape(k + 1, 3) - defn.r0
    x[sl["r_left"]] = u[0]
    x[sl["r_right"]] = u[1]
    x[sl["r_bubble"]] = u[2:].ravel()
    x[sl["psiV_left"]] = dofs.psiV_left
    x[sl["psiV_right"]] = dofs.psiV_right
    x[sl["M"]] = np.asarray(dofs.M, dtype=float).ravel()
    x[sl["psi_lo"]] = dofs.psi_lo
    x[sl["psi_ho"]] = np.asarray(dofs.psi_ho, dtype=float).ravel()
    return x[None], stack_params([p])


def _check_rotations(k, X, P):
    ho_max, ang = rotation_diagnostics(k, X, P)
    if np.any(ho_max >= np.pi):
        raise RelativeRotationTooLarge(f"higher-order rotation of norm {ho_max.max():.6g} >= pi; refine the mesh")
    if np.any(ang >= np.pi * (1.0 - 1e-12)):
        raise RelativeRotationTooLarge("relative rotation across an element interface reached pi")


def _end_moment_vector(x, k, loads: ElementLoads, lam, q0_ends):
    """``-lam T(psiV)^T m`` on the loaded ends, zero elsewhere."""
    sl = local_slices(k)
    out = jnp.zeros_like(x)
    for key, m, q0 in (("psiV_left", loads.moment_left, q0_ends[0]), ("psiV_right", loads.moment_right, q0_ends[1])):
        if m is None:
            continue
        psi = x[sl[key]]
        m = jnp.asarray(m, dtype=float)
        if loads.frame == "material":
            m = quat_rotate(quat_mul(quat_exp(psi), q0), m)
        elif loads.frame != "spatial":
            raise ValueError(f"unknown moment frame {loads.frame!r}")
        out = out.at[sl[key]].set(-lam * tangent_matrix(psi).T @ m)
    return out


def _end_moments(defn: ElementDef, x: np.ndarray, loads: ElementLoads | None, lam: float, order: int):
    if loads is None or (loads.moment_left is None and loads.moment_right is None):
        return None
    q0 = tuple(r.quat for r in defn.end_rotations())
    f = functools.partial(_end_moment_vector, k=defn.k, loads=loads, lam=lam, q0_ends=q0)
    if order == 1:
        return np.asarray(f(jnp.asarray(x)))
    return np.asarray(jax.jacfwd(f)(jnp.asarray(x)))


def element_energy(
    defn: ElementDef,
    dofs: ElementDofs,
    loads: ElementLoads | None = None,
    lam: float = 1.0,
    integration: str = "reduced_gamma",
) -> float:
    """Mixed energy of one element (end moments excluded, they have no potential)."""
    reduced = _integration_flag(integration)
    X, P = _api_inputs(defn, dofs, loads, lam, reduced)
    _check_rotations(defn.k, X, P)
    e, _, _ = evaluate_batch(defn.k, reduced, X, P, order=0)
    return float(e[0])


def element_residual(
    defn: ElementDef,
    dofs: ElementDofs,
    loads: ElementLoads | None = None,
    lam: float = 1.0,
    integration: str = "reduced_gamma",
) -> np.ndarray:
    """Gradient of :func:`element_energy` plus end-moment virtual work, in the local layout."""
    reduced = _integration_flag(integration)
    X, P = _api_inputs(defn, dofs, loads, lam, reduced)
    _check_rotations(defn.k, X, P)
    _, g, _ = evaluate_batch(defn.k, reduced, X, P, order=1)
    extra = _end_moments(defn, X[0], loads, lam, 1)
    return g[0] if extra is None else g[0] + extra


def element_tangent(
    defn: ElementDef,
    dofs: ElementDofs,
    loads: ElementLoads | None = None,
    lam: float = 1.0,
    integration: str = "reduced_gamma",
) -> np.ndarray:
    """Jacobian of :func:`element_residual` with respect to the local vector."""
    reduced = _integration_flag(integration)
    X, P = _api_inputs(defn, dofs, loads, lam, reduced)
    _check_rotations(defn.k, X, P)
    _, _, H = evaluate_batch(defn.k, reduced, X, P, order=2)
    extra = _end_moments(defn, X[0], loads, lam, 2)
    return H[0] if extra is None else H[0] + extra


# ---------------------------------------------------------------------------
# static condensation
# ---------------------------------------------------------------------------


@dataclass
class Condensed:
    """Schur complement on the retained DOFs plus what back-substitution needs."""

    K: np.ndarray
    R: np.ndarray
    keep: np.ndarray
    drop: np.ndarray
    _Kdd_inv_Kdk: np.ndarray
    _Kdd_inv_Rd: np.ndarray

    def recover(self, dx_keep: np.ndarray) -> np.ndarray:
        """Full increment from the retained part, solving ``K dx = -R``."""
        n = len(self.keep) + len(self.drop)
        dx = np.zeros(dx_keep.shape[:-1] + (n,))
        dx[..., self.keep] = dx_keep
        dx[..., self.drop] = -self._Kdd_inv_Rd - np.einsum("...ij,...j->...i", self._Kdd_inv_Kdk, dx_keep)
        return dx


def condense(K: np.ndarray, R: np.ndarray, drop) -> Condensed:
    """Eliminate the ``drop`` DOFs from ``K dx = -R``; works on stacks of matrices."""
    K = np.asarray(K, dtype=float)
    R = np.asarray(R, dtype=float)
    n = K.shape[-1]
    drop = np.asarray(drop, dtype=int)
    keep = np.setdiff1d(np.arange(n), drop)
    if drop.size == 0:
        z = np.zeros(K.shape[:-2] + (0, len(keep)))
        return Condensed(K.copy(), R.copy(), keep, drop, z, np.zeros(K.shape[:-2] + (0,)))
    Kdd = K[..., drop[:, None], drop]
    Kdk = K[..., drop[:, None], keep]
    Kkd = K[..., keep[:, None], drop]
    Kkk = K[..., keep[:, None], keep]
    rhs = np.concatenate([Kdk, R[..., drop, None]], axis=-1)
    try:
        sol = np.linalg.solve(Kdd, rhs)
    except np.linalg.LinAlgError as exc:
        raise SingularCondensationBlock("element-local block is singular") from exc
    if not np.all(np.isfinite(sol)):
        raise SingularCondensationBlock("element-local block is singular")
    A, b = sol[..., :-1], sol[..., -1]
    return Condensed(
        K=Kkk - Kkd @ A,
        R=R[..., keep] - np.einsum("...ij,...j->...i", Kkd, b),
        keep=keep,
        drop=drop,
        _Kdd_inv_Kdk=A,
        _Kdd_inv_Rd=b,
    )
