"""A posteriori error control for the coupled solver.

Every estimator compares per-element stress tensors.  The coupled
solution is first transferred to a reference lattice filling the whole
computational domain (P1 interpolation at the lattice sites), where its
exact bond stress ``sigma_a`` is assembled; the coupled model supplies
its own hybrid stress ``sigma_h``.  Four quantities are derived:

* a far-field truncation part: the L2 distance between ``sigma_a`` and
  the homogeneous stress of the applied strain over an outer annulus
  (elements with truncated stencils excluded, so the value is exactly
  zero at the pure affine state),
* a modeling part: the L2 mismatch between ``sigma_a`` and the overlap
  average of ``sigma_h``, summed over full-lattice triangles.  At a
  piecewise affine state with full stencils the mismatch vanishes on
  every triangle whose bond stencil stays inside one mesh element, so
  only interface-band triangles and triangles straddling coarse mesh
  edges are assembled; the others contribute exactly zero and are
  skipped,
* a coarsening part: interior-edge jumps of the hybrid traction,
  weighted by edge length,
* an energy mismatch: the exact difference between the reference
  atomistic energy of the transferred state and the coupled energy,
  with its interface-reconstruction share reported separately.

Each part keeps its per-element (or per-edge) squared pieces, and the
localization distributes them so that the element indicators sum to
the global values without any roundoff slack beyond summation order.
All constants are empirical knobs that scale parts uniformly; marking
decisions downstream depend only on relative sizes.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, replace

import numpy as np

from . import atomistic
from .coupling import CoupledEnergyModel
from .lattice import TriangularLattice, hexnorm
from .mesh import CoupledMesh
from .potential import EamPotential
from .stress import (StressField, atomistic_stress, correction_elements,
                     coupling_stress, overlap_average)

__all__ = [
    "EstimatorConstants",
    "EstimatorReport",
    "ReferenceState",
    "PieceSet",
    "EnergyPieces",
    "lipschitz_estimate",
    "reference_state",
    "truncation_estimator",
    "modeling_estimator",
    "coarsening_estimator",
    "energy_estimator",
    "localize",
    "estimate",
    "residual_ratios",
]


class EstimatorError(RuntimeError):
    """Raised when an estimator's geometric preconditions fail."""


# ---------------------------------------------------------------------------
# constants


@dataclass(frozen=True)
class EstimatorConstants:
    """Empirical weights of the estimator parts.

    c_tr multiplies every stress-residual part, c_prime additionally
    multiplies the edge-jump part, and the energy weight turns the
    squared residual into an energy-error bound.  When a stability
    constant gamma is known the energy weight is derived as
    ``4 * lipschitz / gamma**2``; otherwise the stored ``c_e`` is used
    as is.
    """

    c_tr: float = 1.0
    c_prime: float = 1.0
    c_e: float = 1.0
    lipschitz: float = 1.0

    def __post_init__(self):
        if min(self.c_tr, self.c_prime, self.c_e, self.lipschitz) <= 0:
            raise ValueError("estimator constants must be positive")

    def energy_weight(self, gamma: float | None = None) -> float | None:
        """Energy-bound prefactor; None when stability failed."""
        if gamma is None:
            return self.c_e
        if gamma <= 0:
            return None
        return 4.0 * self.lipschitz / gamma ** 2

    def recalibrated(self, ratio: float, slack: float = 1.05
                     ) -> "EstimatorConstants":
        """Scale c_tr so a measured residual ratio drops below one.

        ratio is max |<dE, v>| / (eta * |grad v|) over test functions;
        values above one mean the current c_tr underestimates and the
        bound is restored by scaling it up (with a little slack).
        """
        if ratio <= 1.0:
            return self
        return replace(self, c_tr=self.c_tr * ratio * slack)


def lipschitz_estimate(pot: EamPotential, k: int = 0, radius: int = 6,
                       pairs: int = 100, spread: float = 0.05,
                       seed: int = 20260818, iters: int = 8) -> float:
    """Empirical Lipschitz bound of the energy's second derivative.

    Samples random pairs of states near the stretched ground state of a
    small lattice and estimates ||H(y1) - H(y2)||_2 / ||y1 - y2||_2 by
    power iteration on the (symmetric) Hessian difference; returns the
    maximum over all pairs.  Deterministic for a fixed seed.
    """
    lat = TriangularLattice(k, radius)
    rng = np.random.default_rng(seed)
    y0 = lat.xy * pot.ground_stretch()
    worst = 0.0
    for _ in range(pairs):
        y1 = y0 + spread * rng.standard_normal(y0.shape)
        y2 = y0 + spread * rng.standard_normal(y0.shape)
        D = (atomistic.hessian(lat, pot, y1)
             - atomistic.hessian(lat, pot, y2))
        v = rng.standard_normal(D.shape[0])
        v /= np.linalg.norm(v)
        est = 0.0
        for _ in range(iters):
            w = D @ v
            est = float(np.linalg.norm(w))
            if est == 0.0:
                break
            v = w / est
        worst = max(worst, est / float(np.linalg.norm(y1 - y2)))
    return worst


# ---------------------------------------------------------------------------
# reference transfer


@dataclass
class ReferenceState:
    """Coupled state transferred to the full reference lattice."""

    lattice: TriangularLattice
    y: np.ndarray             # (S, 2) interpolated positions at the sites
    sigma: StressField        # bond stress of y on lattice.tri
    strain: np.ndarray        # (2, 2) applied far-field strain
    site_element: np.ndarray  # (S,) mesh element containing each site
    rings: np.ndarray         # (S,) hexagonal norm of each site


_LATTICE_CACHE: dict = {}


def _reference_lattice(k: int, radius: int) -> TriangularLattice:
    key = (int(k), int(radius))
    if key not in _LATTICE_CACHE:
        while len(_LATTICE_CACHE) >= 2:          # keep the two newest
            _LATTICE_CACHE.pop(next(iter(_LATTICE_CACHE)))
        _LATTICE_CACHE[key] = TriangularLattice(*key)
    return _LATTICE_CACHE[key]


def reference_state(model: CoupledEnergyModel, y: np.ndarray
                    ) -> ReferenceState:
    """Interpolate a coupled state onto the full lattice of the domain."""
    mesh = model.mesh
    radius = int(round(mesh.R))
    if abs(radius - mesh.R) > 1e-9:
        radius = int(np.floor(mesh.R + 1e-9))
    lat = _reference_lattice(mesh.k, radius)
    yhat = mesh.interpolate(np.asarray(y, dtype=float), lat.xy)
    sigma = atomistic_stress(lat, model.potential, yhat)
    site_el, _ = mesh.locate(lat.xy)
    rings = hexnorm(lat.mn).astype(float)
    return ReferenceState(lat, yhat, sigma, model.B.copy(), site_el, rings)


# ---------------------------------------------------------------------------
# the three residual parts


@dataclass
class PieceSet:
    """One estimator part with its localization data.

    value is the weighted global part; pieces are the raw squared
    contributions (value == weight * sqrt(sum(pieces))) and elements
    maps each piece to a mesh element.
    """

    value: float
    elements: np.ndarray
    pieces: np.ndarray

    @staticmethod
    def empty() -> "PieceSet":
        return PieceSet(0.0, np.zeros(0, dtype=np.int64), np.zeros(0))


def _map_to_elements(mesh: CoupledMesh, ref: ReferenceState,
                     tri_ids: np.ndarray) -> np.ndarray:
    """Mesh element holding each reference triangle's centroid."""
    if len(tri_ids) == 0:
        return np.zeros(0, dtype=np.int64)
    cent = ref.lattice.xy[ref.lattice.tri[tri_ids]].mean(axis=1)
    el, _ = mesh.locate(cent)
    return el


def truncation_estimator(ref: ReferenceState, pot: EamPotential,
                         mesh: CoupledMesh,
                         constants: EstimatorConstants,
                         inner: float | None = None) -> PieceSet:
    """Far-field distance to the homogeneous stress, over an annulus.

    The annulus runs from ``inner`` (default: half the domain radius)
    to the last ring whose triangles carry only full bond stencils;
    that exclusion makes the value exactly zero at the affine state.
    """
    lat = ref.lattice
    n = lat.radius
    if inner is None:
        inner = 0.5 * n
    vr = ref.rings[lat.tri]
    full = (lat.n_neighbors == 6)[lat.tri].all(axis=1)
    sel = np.where((vr.min(axis=1) >= inner - 1e-9)
                   & (vr.max(axis=1) <= n - 1 + 1e-9) & full)[0]
    if len(sel) == 0:
        return PieceSet.empty()
    sigma0 = pot.cb_stress(ref.strain)
    diff = ref.sigma.per_element[sel] - sigma0
    pieces = ref.sigma.areas[sel] * np.sum(diff ** 2, axis=(1, 2))
    value = constants.c_tr * float(np.sqrt(pieces.sum()))
    return PieceSet(value, _map_to_elements(mesh, ref, sel), pieces)


def _straddling_triangles(ref: ReferenceState) -> np.ndarray:
    """Reference triangles whose bond stencils cross mesh elements.

    A triangle's stress depends on the state at its vertices and their
    lattice neighbors; if all those sites sit in a single mesh element
    the transferred state is affine on the stencil and the mismatch
    against the element's stress is exactly zero.  Returns the boolean
    complement of that interior case.
    """
    lat = ref.lattice
    tri = lat.tri
    own = ref.site_element
    lo = own[tri].min(axis=1)
    hi = own[tri].max(axis=1)
    for p in range(3):
        verts = tri[:, p]
        for d in range(6):
            nb = lat.nbr[verts, d]
            el = np.where(nb >= 0, own[np.maximum(nb, 0)], own[verts])
            lo = np.minimum(lo, el)
            hi = np.maximum(hi, el)
    return hi > lo


def modeling_estimator(ref: ReferenceState, mesh: CoupledMesh,
                       sigma_h: StressField,
                       constants: EstimatorConstants) -> PieceSet:
    """Mismatch between the bond stress and the averaged hybrid stress.

    Sums ``|T| * |sigma_a(T) - mean(sigma_h over T)|^2`` over the
    reference triangles where the mismatch can be nonzero: those whose
    centroid element belongs to the interface correction set, and those
    whose bond stencil spans several mesh elements.  Two classes are
    provably zero and skipped: triangles with every vertex strictly
    inside the atomistic core (both fields assemble identical bond
    m-values there, vacancies included) and triangles whose stencil
    sites share one mesh element (the transferred state is affine on
    the stencil, so the bond stress equals that element's Cauchy-Born
    stress exactly).  Triangles with truncated stencils on the outer
    ring are left to the truncation part.
    """
    lat = ref.lattice
    tri = lat.tri
    sel_el = correction_elements(mesh)
    cent_el = np.full(len(tri), -1, dtype=np.int64)

    # candidate band around the interface: centroid inside a selection
    # element (cheap radial prefilter keeps the locate call small)
    cent = lat.xy[tri].mean(axis=1)
    from .mesh import cartesian_hexnorm
    crad = cartesian_hexnorm(cent)
    band_cand = np.where(crad <= mesh.Ra + mesh.W + 2.0)[0]
    if len(band_cand):
        el, _ = mesh.locate(cent[band_cand])
        cent_el[band_cand] = el
    in_band = np.zeros(len(tri), dtype=bool)
    in_band[band_cand] = sel_el[cent_el[band_cand]]

    full = (lat.n_neighbors == 6)[tri].all(axis=1)
    ring_max = ref.rings[tri].max(axis=1)
    rim_ok = ring_max <= lat.radius - 1 + 1e-9
    deep_atom = ring_max <= mesh.Ra - 1 + 1e-9

    straddle = (_straddling_triangles(ref) & ~in_band & ~deep_atom
                & full & rim_ok)
    sel = np.where(in_band | straddle)[0]
    if len(sel) == 0:
        return PieceSet.empty()

    sbar = overlap_average(mesh.xy, mesh.tri, sigma_h.per_element,
                           lat.xy, tri, sel,
                           dst_areas=ref.sigma.areas[sel])
    diff = ref.sigma.per_element[sel] - sbar
    pieces = ref.sigma.areas[sel] * np.sum(diff ** 2, axis=(1, 2))
    value = constants.c_tr * float(np.sqrt(pieces.sum()))

    elements = np.full(len(sel), -1, dtype=np.int64)
    known = cent_el[sel] >= 0
    elements[known] = cent_el[sel][known]
    if np.any(~known):
        elements[~known] = _map_to_elements(mesh, ref, sel[~known])
    return PieceSet(value, elements, pieces)


@dataclass
class EdgePieces:
    """Edge-jump part with both per-edge and per-element localizations."""

    value: float
    edge_jump: np.ndarray     # (E,) traction-jump magnitude, 0 on boundary
    edge_sq: np.ndarray       # (E,) squared length-weighted jumps
    elements: np.ndarray      # (2*Ei,) adjacent elements, halves
    pieces: np.ndarray        # (2*Ei,) half of edge_sq each


def coarsening_estimator(mesh: CoupledMesh, sigma_h: StressField,
                         constants: EstimatorConstants) -> EdgePieces:
    """Length-weighted traction jumps over interior edges."""
    ed = mesh.edges()
    e = len(ed.edges)
    jump = np.zeros(e)
    edge_sq = np.zeros(e)
    idx = np.where(ed.interior)[0]
    if len(idx):
        s0 = sigma_h.per_element[ed.edge_el[idx, 0]]
        s1 = sigma_h.per_element[ed.edge_el[idx, 1]]
        jv = np.einsum("eij,ej->ei", s0 - s1, ed.nu[idx])
        jump[idx] = np.linalg.norm(jv, axis=1)
        edge_sq[idx] = (ed.length[idx] * jump[idx]) ** 2
    value = (np.sqrt(3.0) * constants.c_tr * constants.c_prime
             * float(np.sqrt(edge_sq.sum())))
    elements = ed.edge_el[idx].reshape(-1)
    pieces = np.repeat(0.5 * edge_sq[idx], 2)
    return EdgePieces(value, jump, edge_sq, elements, pieces)


# ---------------------------------------------------------------------------
# energy mismatch


@dataclass
class EnergyPieces:
    """Exact atomistic/coupled energy mismatch and the derived bound."""

    mu_e: float
    eta_e: float | None       # None when stability failed (gamma <= 0)
    interface_term: float     # share from reconstructed interface stencils
    remainder: float          # continuum + quadrature share
    e_atom: float             # reference atomistic energy of the state
    e_hybrid: float           # coupled energy of the state


def energy_estimator(model: CoupledEnergyModel, y: np.ndarray,
                     ref: ReferenceState, eta: float,
                     constants: EstimatorConstants,
                     gamma: float | None = None) -> EnergyPieces:
    """Exact energy mismatch plus the quadratic residual bound.

    mu_e is the difference between the reference-lattice energy of the
    transferred state and the coupled energy (both relative to the
    affine far-field state), computed directly so the defining identity
    holds to roundoff.  The share caused by the interface
    reconstruction (true stencils vs reconstructed ones) is reported
    separately; the remainder covers the Cauchy-Born quadrature of the
    continuum region.
    """
    pot = model.potential
    lat = ref.lattice
    y = np.asarray(y, dtype=float)
    yb = lat.xy @ ref.strain.T
    e_atom = (atomistic.energy(lat, pot, ref.y)
              - atomistic.energy(lat, pot, yb))
    e_hybrid = float(model.energy(y))
    mu_e = e_atom - e_hybrid

    interface = 0.0
    if len(model.ifc_nodes):
        d6 = y[model.ifc_nbr] - y[model.ifc_nodes][:, None, :]
        ghat = model._interface_stencils(y)
        interface = float(np.sum(pot.value(d6)) - np.sum(pot.value(ghat)))

    weight = constants.energy_weight(gamma)
    eta_e = None if weight is None else weight * eta ** 2 + abs(mu_e)
    return EnergyPieces(mu_e, eta_e, interface, mu_e - interface,
                        e_atom, e_hybrid)


# ---------------------------------------------------------------------------
# localization


@dataclass
class Localized:
    """Per-element indicators plus the raw squared piece maps."""

    rho: np.ndarray           # residual indicator, sums to eta
    rho_e: np.ndarray | None  # energy indicator, sums to the eta_e parts
    m_trunc: np.ndarray
    m_model: np.ndarray
    m_coarse: np.ndarray


def localize(mesh: CoupledMesh, trunc: PieceSet, modeling: PieceSet,
             coarsening: EdgePieces, constants: EstimatorConstants,
             mu_e: float = 0.0,
             energy_weight: float | None = None) -> Localized:
    """Distribute the global parts over mesh elements.

    The residual indicator of an element T is

        c_tr^2 * mM(T) / eta_M + c_tr^2 * mT(T) / eta_T
        + 3 (c_tr c')^2 * mC(T) / eta_C

    with mX the raw squared pieces mapped into T (edge pieces split
    half-half between the two adjacent elements), so the indicators sum
    exactly to eta_T + eta_M + eta_C; parts whose global value is zero
    contribute zero.  The energy indicator uses the squared form
    ``w c_tr^4 (mM + mT) + 9 w (c_tr c')^4 mC`` plus an area-weighted
    share of |mu_e|, summing to w c_tr^2 (eta_M^2 + eta_T^2)
    + 3 w (c_tr c')^2 eta_C^2 + |mu_e|.
    """
    m = mesh.n_elements
    m_trunc = np.zeros(m)
    m_model = np.zeros(m)
    m_coarse = np.zeros(m)
    np.add.at(m_trunc, trunc.elements, trunc.pieces)
    np.add.at(m_model, modeling.elements, modeling.pieces)
    np.add.at(m_coarse, coarsening.elements, coarsening.pieces)

    ct2 = constants.c_tr ** 2
    cc2 = (constants.c_tr * constants.c_prime) ** 2
    rho = np.zeros(m)
    if trunc.value > 0:
        rho += ct2 * m_trunc / trunc.value
    if modeling.value > 0:
        rho += ct2 * m_model / modeling.value
    if coarsening.value > 0:
        rho += 3.0 * cc2 * m_coarse / coarsening.value

    rho_e = None
    if energy_weight is not None:
        rho_e = energy_weight * (ct2 ** 2 * (m_model + m_trunc)
                                 + 9.0 * cc2 ** 2 * m_coarse)
        total_area = float(mesh.area.sum())
        rho_e = rho_e + abs(mu_e) * mesh.area / total_area
    return Localized(rho, rho_e, m_trunc, m_model, m_coarse)


# ---------------------------------------------------------------------------
# report and orchestration


@dataclass
class EstimatorReport:
    """All estimator output for one coupled state."""

    eta_t: float
    eta_m: float
    eta_c: float
    eta: float
    mu_e: float
    eta_e: float | None
    energy: EnergyPieces | None
    constants: EstimatorConstants
    rho: np.ndarray
    rho_e: np.ndarray | None
    m_trunc: np.ndarray
    m_model: np.ndarray
    m_coarse: np.ndarray
    edge_jump: np.ndarray
    edge_sq: np.ndarray
    meta: dict

    def summary(self) -> dict:
        out = {
            "eta_t": self.eta_t,
            "eta_m": self.eta_m,
            "eta_c": self.eta_c,
            "eta": self.eta,
            "mu_e": self.mu_e,
            "eta_e": self.eta_e,
            "rho_total": float(self.rho.sum()),
            "constants": {
                "c_tr": self.constants.c_tr,
                "c_prime": self.constants.c_prime,
                "c_e": self.constants.c_e,
                "lipschitz": self.constants.lipschitz,
            },
        }
        out.update(self.meta)
        return out

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def element_csv(self, path, mesh: CoupledMesh) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["element", "region", "area", "rho", "rho_e",
                        "m_trunc", "m_model", "m_coarse"])
            rho_e = (np.zeros_like(self.rho) if self.rho_e is None
                     else self.rho_e)
            for i in range(len(self.rho)):
                w.writerow([i, int(mesh.region[i]), repr(mesh.area[i]),
                            repr(self.rho[i]), repr(rho_e[i]),
                            repr(self.m_trunc[i]), repr(self.m_model[i]),
                            repr(self.m_coarse[i])])


def estimate(model: CoupledEnergyModel, y: np.ndarray, *,
             sigma_h: StressField | None = None,
             constants: EstimatorConstants | None = None,
             gamma: float | None = None,
             ref: ReferenceState | None = None,
             inner: float | None = None,
             include_truncation: bool = True,
             want_energy: bool = True) -> EstimatorReport:
    """Assemble every estimator part for one coupled state.

    Pass the corrected hybrid stress as sigma_h to estimate after the
    stress correction; by default the raw hybrid stress is used.
    Truncation can be switched off for fixed-domain drivers (the part
    then contributes zero everywhere).
    """
    if constants is None:
        constants = EstimatorConstants()
    mesh = model.mesh
    if ref is None:
        ref = reference_state(model, y)
    if sigma_h is None:
        sigma_h = coupling_stress(model, y)

    if include_truncation:
        trunc = truncation_estimator(ref, model.potential, mesh,
                                     constants, inner=inner)
    else:
        trunc = PieceSet.empty()
    modeling = modeling_estimator(ref, mesh, sigma_h, constants)
    coarse = coarsening_estimator(mesh, sigma_h, constants)
    eta = trunc.value + modeling.value + coarse.value

    energy = None
    mu_e = 0.0
    eta_e = None
    weight = None
    if want_energy:
        energy = energy_estimator(model, y, ref, eta, constants, gamma)
        mu_e = energy.mu_e
        eta_e = energy.eta_e
        weight = constants.energy_weight(gamma)

    loc = localize(mesh, trunc, modeling, coarse, constants,
                   mu_e=mu_e, energy_weight=weight)
    meta = {
        "n_elements": int(mesh.n_elements),
        "n_nodes": int(mesh.n_nodes),
        "radius": float(mesh.R),
        "interface_radius": int(mesh.Ra),
        "lattice_radius": int(ref.lattice.radius),
        "n_model_pieces": int(len(modeling.pieces)),
        "n_trunc_pieces": int(len(trunc.pieces)),
    }
    return EstimatorReport(trunc.value, modeling.value, coarse.value, eta,
                           mu_e, eta_e, energy, constants, loc.rho,
                           loc.rho_e, loc.m_trunc, loc.m_model,
                           loc.m_coarse, coarse.edge_jump, coarse.edge_sq,
                           meta)


# ---------------------------------------------------------------------------
# residual-bound sanity


def _test_functions(lat: TriangularLattice, n: int, seed: int,
                    support: float):
    """Deterministic mix of compactly supported displacement fields."""
    rng = np.random.default_rng(seed)
    cutoff = support * lat.radius
    rings = hexnorm(lat.mn).astype(float)
    mask = rings <= cutoff
    xy = lat.xy
    for i in range(n):
        kind = i % 3
        if kind == 0:                       # smooth bump
            center = rng.uniform(-0.4, 0.4, size=2) * cutoff
            width = rng.uniform(2.0, max(3.0, cutoff / 2.0))
            amp = rng.standard_normal(2)
            r2 = np.sum((xy - center) ** 2, axis=1)
            v = np.exp(-r2 / width ** 2)[:, None] * amp
        elif kind == 1:                     # white noise
            v = rng.standard_normal((lat.S, 2))
        else:                               # modulated wave
            kvec = rng.uniform(-1.0, 1.0, size=2)
            phase = rng.uniform(0.0, 2 * np.pi)
            amp = rng.standard_normal(2)
            env = np.exp(-np.sum(xy ** 2, axis=1) / max(cutoff, 1.0) ** 2)
            v = (np.sin(xy @ kvec + phase) * env)[:, None] * amp
        v = v.copy()
        v[~mask] = 0.0
        yield v


def residual_ratios(ref: ReferenceState, pot: EamPotential, eta: float,
                    n: int = 50, seed: int = 20260818,
                    support: float = 0.7) -> np.ndarray:
    """First-variation-to-estimator ratios over random test fields.

    Each ratio is |<dE(yhat), v>| / (eta * ||grad I v||_L2) for a
    compactly supported v on the reference lattice; values at or below
    one mean the estimator bounds the residual for that sample.  The
    caller recalibrates the constants from the maximum when needed.
    """
    if eta <= 0:
        raise EstimatorError("residual check needs a positive estimate")
    lat = ref.lattice
    grad = atomistic.gradient(lat, pot, ref.y)
    tri = lat.tri
    p = lat.xy
    e1 = p[tri[:, 1]] - p[tri[:, 0]]
    e2 = p[tri[:, 2]] - p[tri[:, 0]]
    det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
    area = 0.5 * np.abs(det)
    g0 = np.stack([(e1[:, 1] - e2[:, 1]) / det,
                   (e2[:, 0] - e1[:, 0]) / det], axis=1)
    g1 = np.stack([e2[:, 1] / det, -e2[:, 0] / det], axis=1)
    g2 = np.stack([-e1[:, 1] / det, e1[:, 0] / det], axis=1)
    shape = np.stack([g0, g1, g2], axis=1)          # (m, 3, 2)

    out = np.zeros(n)
    for i, v in enumerate(_test_functions(lat, n, seed, support)):
        num = abs(float(np.sum(grad * v)))
        gv = np.einsum("mpc,mpk->mck", v[tri], shape)
        den = float(np.sqrt(np.sum(area * np.sum(gv ** 2, axis=(1, 2)))))
        if den == 0.0:
            out[i] = 0.0
        else:
            out[i] = num / (eta * den)
    return out
