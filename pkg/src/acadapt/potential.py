"""EAM site potential and Cauchy-Born strain energy density.

The site energy of a stencil of bond vectors {g_r} is

    V(g) = sum_r phi(|g_r|) + F(sum_r psi(|g_r|)),

with pair potential phi(r) = exp(-2a(r-1)) - 2 exp(-a(r-1)), electron
density psi(r) = exp(-b r), and embedding function
F(t) = C [(t - t0)^2 + (t - t0)^4].

Every site energy is normalized so that the undeformed stencil of unit
bonds has energy zero; the offset depends only on the number of active
directions, so it is cached for the seven possible stencil sizes.

All derivatives are analytic; finite differences appear only in tests.
Evaluators are vectorized over leading axes so whole mask-groups of
sites can be processed at once.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize_scalar

from .lattice import DET_A, DIRECTIONS


@dataclass(frozen=True)
class EamParameters:
    """Model constants. rho0 defaults to 6 exp(-0.9 b), the stencil
    density of six unit-direction bonds contracted to length 0.9."""

    a: float = 4.0
    b: float = 3.0
    C: float = 10.0
    rho0: float | None = None

    def __post_init__(self):
        if self.rho0 is None:
            object.__setattr__(self, "rho0", 6.0 * math.exp(-0.9 * self.b))


class EamPotential:
    """Scalar building blocks and stencil-level derivatives."""

    def __init__(self, params: EamParameters | None = None):
        self.params = params or EamParameters()
        # normalization offsets, one per possible stencil size
        self._offset = np.array(
            [
                n * self._phi(1.0) + self._embed(n * self._psi(1.0))
                for n in range(7)
            ]
        )

    # -- scalar pieces ---------------------------------------------------------

    def _phi(self, r):
        a = self.params.a
        return np.exp(-2 * a * (r - 1)) - 2 * np.exp(-a * (r - 1))

    def _phi_d(self, r):
        a = self.params.a
        return -2 * a * np.exp(-2 * a * (r - 1)) + 2 * a * np.exp(-a * (r - 1))

    def _phi_dd(self, r):
        a = self.params.a
        return 4 * a * a * np.exp(-2 * a * (r - 1)) - 2 * a * a * np.exp(
            -a * (r - 1)
        )

    def _psi(self, r):
        return np.exp(-self.params.b * r)

    def _psi_d(self, r):
        return -self.params.b * np.exp(-self.params.b * r)

    def _psi_dd(self, r):
        return self.params.b ** 2 * np.exp(-self.params.b * r)

    def _embed(self, t):
        d = t - self.params.rho0
        return self.params.C * (d ** 2 + d ** 4)

    def _embed_d(self, t):
        d = t - self.params.rho0
        return self.params.C * (2 * d + 4 * d ** 3)

    def _embed_dd(self, t):
        d = t - self.params.rho0
        return self.params.C * (2 + 12 * d ** 2)

    def pair_phi(self, r):
        """Pair term with first and second derivatives."""
        return self._phi(r), self._phi_d(r), self._phi_dd(r)

    # -- stencil evaluation ------------------------------------------------------

    @staticmethod
    def _radii(g):
        r = np.sqrt(np.sum(g * g, axis=-1))
        if np.any(r <= 0.0) or not np.all(np.isfinite(r)):
            raise ValueError("degenerate stencil: zero or non-finite bond length")
        return r

    def value(self, g: np.ndarray) -> np.ndarray:
        """Normalized site energy. g has shape (..., nd, 2)."""
        r = self._radii(np.asarray(g, dtype=float))
        nd = r.shape[-1]
        return (
            np.sum(self._phi(r), axis=-1)
            + self._embed(np.sum(self._psi(r), axis=-1))
            - self._offset[nd]
        )

    def scalar_derivs(self, r: np.ndarray):
        """dV/dr_rho and d2V/dr_rho dr_sigma from radii (..., nd).

        Returns (first, second) of shapes (..., nd) and (..., nd, nd).
        """
        rho_bar = np.sum(self._psi(r), axis=-1)
        Fd = self._embed_d(rho_bar)
        Fdd = self._embed_dd(rho_bar)
        psid = self._psi_d(r)
        first = self._phi_d(r) + Fd[..., None] * psid
        second = Fdd[..., None, None] * psid[..., :, None] * psid[..., None, :]
        diag = self._phi_dd(r) + Fd[..., None] * self._psi_dd(r)
        idx = np.arange(r.shape[-1])
        second[..., idx, idx] += diag
        return first, second

    def gradient(self, g: np.ndarray) -> np.ndarray:
        """dV/dg_rho, shape (..., nd, 2)."""
        g = np.asarray(g, dtype=float)
        r = self._radii(g)
        first, _ = self.scalar_derivs(r)
        return (first / r)[..., None] * g

    def value_and_gradient(self, g: np.ndarray):
        g = np.asarray(g, dtype=float)
        r = self._radii(g)
        nd = r.shape[-1]
        rho_bar = np.sum(self._psi(r), axis=-1)
        val = (
            np.sum(self._phi(r), axis=-1)
            + self._embed(rho_bar)
            - self._offset[nd]
        )
        first = self._phi_d(r) + self._embed_d(rho_bar)[..., None] * self._psi_d(r)
        return val, (first / r)[..., None] * g

    def hessian(self, g: np.ndarray) -> np.ndarray:
        """d2V/dg_rho dg_sigma, shape (..., nd, nd, 2, 2)."""
        g = np.asarray(g, dtype=float)
        r = self._radii(g)
        u = g / r[..., None]
        first, second = self.scalar_derivs(r)
        H = second[..., :, :, None, None] * (
            u[..., :, None, :, None] * u[..., None, :, None, :]
        )
        # transverse part of the diagonal blocks
        coef = first / r
        nd = r.shape[-1]
        eye = np.eye(2)
        idx = np.arange(nd)
        proj = eye - u[..., :, None] * u[..., None, :]
        H[..., idx, idx, :, :] += coef[..., None, None] * proj
        return H

    # -- Cauchy-Born -----------------------------------------------------------

    def cb_energy(self, F: np.ndarray) -> float:
        """Strain energy density W(F) per unit (undeformed) area."""
        F = np.asarray(F, dtype=float)
        if np.linalg.det(F) <= 0:
            raise ValueError("deformation gradient must have positive determinant")
        g = DIRECTIONS @ F.T
        return float(self.value(g)) / DET_A

    def cb_stress(self, F: np.ndarray) -> np.ndarray:
        """First Piola stress dW/dF, a 2x2 matrix."""
        F = np.asarray(F, dtype=float)
        g = DIRECTIONS @ F.T
        dv = self.gradient(g)
        return (dv.T @ DIRECTIONS) / DET_A

    def cb_moduli(self, F: np.ndarray) -> np.ndarray:
        """d2W/dF2 as a (2, 2, 2, 2) tensor, indices (i, j, k, l) for
        dW/dF_ij dF_kl."""
        F = np.asarray(F, dtype=float)
        g = DIRECTIONS @ F.T
        H = self.hessian(g)  # (6, 6, 2, 2)
        return (
            np.einsum("rsik,rj,sl->ijkl", H, DIRECTIONS, DIRECTIONS) / DET_A
        )

    def cb_stress_batch(self, F: np.ndarray) -> np.ndarray:
        """dW/dF for a batch of gradients, shape (..., 2, 2)."""
        F = np.asarray(F, dtype=float)
        g = np.einsum("...ij,rj->...ri", F, DIRECTIONS)
        dv = self.gradient(g)
        return np.einsum("...ri,rj->...ij", dv, DIRECTIONS) / DET_A

    def cb_energy_batch(self, F: np.ndarray) -> np.ndarray:
        F = np.asarray(F, dtype=float)
        g = np.einsum("...ij,rj->...ri", F, DIRECTIONS)
        return self.value(g) / DET_A

    def ground_stretch(self) -> float:
        """Scalar t* minimizing W(t I) over [0.5, 1.5]."""
        res = minimize_scalar(
            lambda t: self.cb_energy(t * np.eye(2)),
            bounds=(0.5, 1.5),
            method="bounded",
            options={"xatol": 1e-13},
        )
        t = float(res.x)
        if not (0.5 + 1e-6 < t < 1.5 - 1e-6):
            raise RuntimeError(
                f"no interior Cauchy-Born minimizer in [0.5, 1.5]; got t={t}"
            )
        return t
