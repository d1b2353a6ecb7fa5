"""Reissner strain measures and the linear elastic cross-section law."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .so3 import Rotation, tangent_map

E1 = np.array([1.0, 0.0, 0.0])


@dataclass(frozen=True)
class CrossSection:
    """Diagonal stiffnesses in the material frame.

    ``C_gamma = diag(EA, GA2, GA3)`` and ``C_kappa = diag(GIt, EI2, EI3)``.
    """

    EA: float
    GA2: float
    GA3: float
    GIt: float
    EI2: float
    EI3: float

    def __post_init__(self):
        for name in ("EA", "GA2", "GA3", "GIt", "EI2", "EI3"):
            val = getattr(self, name)
            if not (np.isfinite(val) and val > 0.0):
                raise ValueError(f"cross-section stiffness {name} must be positive, got {val}")

    @property
    def c_gamma(self) -> np.ndarray:
        return np.array([self.EA, self.GA2, self.GA3], dtype=float)

    @property
    def c_kappa(self) -> np.ndarray:
        return np.array([self.GIt, self.EI2, self.EI3], dtype=float)

    @classmethod
    def square(cls, E: float, side: float, shear_ratio: float = 0.5) -> CrossSection:
        """Square section of side ``side``; ``GA = shear_ratio * EA``, ``GIt = EI``."""
        EA = E * side**2
        EI = E * side**4 / 12.0
        return cls(EA, shear_ratio * EA, shear_ratio * EA, EI, EI, EI)

    @classmethod
    def circular(cls, E: float, G: float, radius: float) -> CrossSection:
        A = np.pi * radius**2
        I = np.pi * radius**4 / 4.0
        return cls(E * A, G * A, G * A, G * 2.0 * I, E * I, E * I)

    def to_dict(self) -> dict:
        return {k: float(getattr(self, k)) for k in ("EA", "GA2", "GA3", "GIt", "EI2", "EI3")}


@dataclass(frozen=True)
class StrainState:
    gamma: np.ndarray
    kappa: np.ndarray


@dataclass(frozen=True)
class StressResultants:
    N_material: np.ndarray
    M_material: np.ndarray


def force_strain(rot: Rotation, r_prime) -> np.ndarray:
    """Material force strain ``Lambda^T r' - e1``."""
    return rot.matrix.T @ np.asarray(r_prime, dtype=float) - E1


def curvature_local(psi, psi_prime, psi0, psi0_prime) -> np.ndarray:
    """Material moment strain from rotation-vector fields and their arclength derivatives."""
    return tangent_map(psi).T @ np.asarray(psi_prime, dtype=float) - tangent_map(psi0).T @ np.asarray(
        psi0_prime, dtype=float
    )


def energy_gamma(gamma, cs: CrossSection) -> float:
    g = np.asarray(gamma, dtype=float)
    return 0.5 * float(g @ (cs.c_gamma * g))


def stress_n(gamma, cs: CrossSection) -> np.ndarray:
    return cs.c_gamma * np.asarray(gamma, dtype=float)


def energy_kappa(kappa, cs: CrossSection) -> float:
    k = np.asarray(kappa, dtype=float)
    return 0.5 * float(k @ (cs.c_kappa * k))


def dual_energy_kappa(M, kappa, cs: CrossSection) -> float:
    """Legendre transform of the bending energy density, ``-M.Ck^-1.M/2 + kappa.M``."""
    M = np.asarray(M, dtype=float)
    return float(-0.5 * M @ (M / cs.c_kappa) + np.asarray(kappa, dtype=float) @ M)


def spatial_resultants(rot: Rotation, N, M) -> tuple[np.ndarray, np.ndarray]:
    R = rot.matrix
    return R @ np.asarray(N, dtype=float), R @ np.asarray(M, dtype=float)
