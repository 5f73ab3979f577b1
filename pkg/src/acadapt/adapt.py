"""Adaptive refinement drivers for the coupled model.

Two loops share one engine: a fixed-domain loop (Solve -> correct ->
Estimate -> Mark -> Refine/Expand) whose marking indicator excludes the
domain-truncation part, and a size-control loop that keeps the
truncation part in the indicator and enlarges the computational domain
from pre-planned nested shells whenever that part dominates.

Per step the engine records degrees of freedom, radii, the estimator
parts, the summed indicator and the action taken; the trace serializes
to a CSV with a fixed column schema, and repeated runs with the same
configuration produce byte-identical files.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace

import matplotlib.tri as mtri
import numpy as np

from .coupling import CoupledEnergyModel
from .estimator import (EstimatorConstants, EstimatorReport,
                        _reference_lattice, estimate, reference_state)
from .lattice import DET_A
from .mesh import (REGION_A, REGION_C, CoupledMesh, MeshError, NestedShells,
                   cartesian_hexnorm)
from .solver import SolveConfig, minimize_coupled
from .stress import correct_stress, coupling_stress

__all__ = [
    "AdaptConfig", "AdaptError", "AdaptTrace", "MeshSnapshot", "StepRecord",
    "dorfler_mark", "interface_decision", "run_adaptive", "run_fixed_domain",
    "run_with_size_control", "fill_errors", "h1_distance", "fit_slope",
    "TRACE_COLUMNS",
]

TRACE_COLUMNS = ("step", "N", "R", "Ra", "etaT", "etaM", "etaC", "muE",
                 "rho", "h1err", "energyErr", "action")


class AdaptError(RuntimeError):
    """Raised when an adaptive driver is configured inconsistently."""


@dataclass
class AdaptConfig:
    """Knobs of the adaptive loops.

    n_max / rho_tol terminate the loop; tau1 routes marked mass near
    the interface into interface expansion; tau2 is the fixed-domain
    saturation threshold (stop_rule "ratio" compares the truncation
    part against the sum of the other parts, "rate" compares the decay
    rate of the indicator against tau2); tau3 triggers domain
    enlargement in the size-control loop.  lookahead is the largest
    interface distance k tried by the expansion test.  driver selects
    the marking indicator: "residual" uses the gradient-error split,
    "energy" the energy-error split.
    """
    n_max: int = 4000
    rho_tol: float = 1e-4
    tau1: float = 0.7
    tau2: float = 0.2
    tau3: float = 0.5
    lookahead: int = 1
    theta: float = 0.5
    driver: str = "residual"
    size_control: bool = False
    r_max: float | None = None
    shell_targets: tuple = ()
    stop_rule: str = "ratio"
    use_correction: bool = True
    record_uncorrected: bool = False
    max_steps: int = 100
    keep_snapshots: bool = True
    constants: EstimatorConstants = field(default_factory=EstimatorConstants)
    energy_gamma: float | None = None
    solve: SolveConfig = field(default_factory=SolveConfig)

    def __post_init__(self):
        for name in ("tau1", "tau2", "tau3", "theta"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise AdaptError(f"{name} must lie in (0, 1), got {v}")
        if self.driver not in ("residual", "energy"):
            raise AdaptError(f"unknown driver {self.driver!r}")
        if self.stop_rule not in ("ratio", "rate"):
            raise AdaptError(f"unknown stop rule {self.stop_rule!r}")
        if self.lookahead < 1:
            raise AdaptError("lookahead must be >= 1")
        if self.size_control and self.r_max is None and not self.shell_targets:
            raise AdaptError("size control needs r_max or shell_targets")


@dataclass
class StepRecord:
    """One row of the trace."""
    step: int
    n_dof: int
    radius: float
    ra: int
    eta_t: float
    eta_m: float
    eta_c: float
    mu_e: float
    rho: float
    action: str = ""
    h1_err: float = math.nan
    energy_err: float = math.nan
    eta: float = math.nan
    eta_uncorrected: float = math.nan
    n_marked: int = 0

    def row(self):
        return [repr(int(v)) if isinstance(v, (int, np.integer)) else repr(v)
                for v in (self.step, self.n_dof, self.radius, self.ra,
                          self.eta_t, self.eta_m, self.eta_c, self.mu_e,
                          self.rho, self.h1_err, self.energy_err)
                ] + [self.action]


@dataclass
class MeshSnapshot:
    """Geometry + solution copy taken before the mesh is mutated."""
    xy: np.ndarray
    tri: np.ndarray
    y: np.ndarray
    radius: float
    ra: int
    energy: float
    n_dof: int


@dataclass
class AdaptTrace:
    """Full history of one adaptive run."""
    records: list
    snapshots: list
    config: AdaptConfig
    k: int
    stretch: np.ndarray
    stopped: str = ""

    @property
    def final(self) -> MeshSnapshot:
        if not self.snapshots:
            raise AdaptError("run produced no solved step")
        return self.snapshots[-1]

    def actions(self):
        return [r.action for r in self.records]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(TRACE_COLUMNS)
            for rec in self.records:
                w.writerow(rec.row())

    def summary(self) -> dict:
        return {
            "steps": len(self.records),
            "stopped": self.stopped,
            "n_dof": [r.n_dof for r in self.records],
            "radius": [r.radius for r in self.records],
            "interface_radius": [r.ra for r in self.records],
            "eta_t": [r.eta_t for r in self.records],
            "eta_m": [r.eta_m for r in self.records],
            "eta_c": [r.eta_c for r in self.records],
            "eta": [r.eta for r in self.records],
            "eta_uncorrected": [r.eta_uncorrected for r in self.records],
            "mu_e": [r.mu_e for r in self.records],
            "rho": [r.rho for r in self.records],
            "h1_err": [r.h1_err for r in self.records],
            "energy_err": [r.energy_err for r in self.records],
            "actions": self.actions(),
        }


# -- marking ---------------------------------------------------------------------------


def dorfler_mark(rho: np.ndarray, theta: float = 0.5) -> np.ndarray:
    """Minimal bulk-chasing mark set.

    Greedy selection in descending indicator order (ties broken by
    element index) until the marked mass reaches ``theta`` times the
    total.  Returns the marked element ids sorted ascending; an
    all-zero indicator yields an empty set, which callers treat as a
    stop signal.  Greedy-by-size makes the set minimal in cardinality.
    """
    rho = np.asarray(rho, dtype=float)
    total = float(rho.sum())
    if not total > 0.0:
        return np.empty(0, dtype=np.int64)
    order = np.argsort(-rho, kind="stable")
    csum = np.cumsum(rho[order])
    need = theta * total
    take = int(np.searchsorted(csum, need * (1.0 - 1e-12))) + 1
    take = min(take, len(order))
    return np.sort(order[:take]).astype(np.int64)


def interface_distance(mesh: CoupledMesh, elements: np.ndarray) -> np.ndarray:
    """Hex-metric distance from each element to the interface ring.

    Measured as the closest vertex's hex radius minus the interface
    radius; elements inside or touching the ring get values <= 0.
    """
    verts = mesh.tri[np.asarray(elements, dtype=np.int64)]
    return mesh.hexrad[verts].min(axis=1) - float(mesh.Ra)


def interface_decision(marked: np.ndarray, rho: np.ndarray,
                       mesh: CoupledMesh, tau1: float,
                       lookahead: int = 1):
    """Decide whether marked mass near the interface asks for expansion.

    Tries k = 1..lookahead and returns the first k whose marked
    elements within k layers of the interface construction band carry
    at least ``tau1`` of the total marked mass, together with the
    remaining mark set; returns (0, marked) when no k qualifies.  The
    band offset matches the refinement guard exactly, so an element
    too close to the interface to be bisected is always capturable by
    expansion instead -- marked mass can never go dead between the two
    rules.
    """
    marked = np.asarray(marked, dtype=np.int64)
    if len(marked) == 0:
        return 0, marked
    rho = np.asarray(rho, dtype=float)
    total = float(rho[marked].sum())
    if not total > 0.0:
        return 0, marked
    dist = interface_distance(mesh, marked)
    for k in range(1, int(lookahead) + 1):
        near = dist <= mesh.W + 3.0 + k + 1e-9
        mass = float(rho[marked[near]].sum())
        if mass >= tau1 * total - 1e-15 * total:
            return k, marked[~near]
    return 0, marked


def marking_indicator(report: EstimatorReport, mesh: CoupledMesh,
                      config: AdaptConfig) -> np.ndarray:
    """Per-element indicator used for marking and the rho stopping test.

    Residual driver: each part's element mass normalized by the part
    total, weighted like the global bound.  Energy driver: squared
    part masses under the energy weight plus the area-proportional
    energy-mismatch share.  The truncation part is dropped on fixed
    domains (refinement cannot reduce it), and atomistic elements are
    zeroed: the model is exact there, so their residual mass is not
    reducible by any mesh operation.
    """
    c = config.constants
    ct2 = c.c_tr ** 2
    cc2 = (c.c_tr * c.c_prime) ** 2
    with_trunc = config.size_control
    if config.driver == "residual":
        rho = np.zeros(len(mesh.tri))
        if report.eta_m > 0.0:
            rho += ct2 * report.m_model / report.eta_m
        if with_trunc and report.eta_t > 0.0:
            rho += ct2 * report.m_trunc / report.eta_t
        if report.eta_c > 0.0:
            rho += 3.0 * cc2 * report.m_coarse / report.eta_c
    else:
        weight = c.energy_weight(config.energy_gamma)
        if weight is None:
            raise AdaptError("energy driver needs a positive stability "
                             "constant for the energy weight")
        m = report.m_model + (report.m_trunc if with_trunc else 0.0)
        rho = weight * (ct2 ** 2 * m + 9.0 * cc2 ** 2 * report.m_coarse)
        rho = rho + abs(report.mu_e) * mesh.area / float(mesh.area.sum())
    rho[mesh.region == REGION_A] = 0.0
    return rho


# -- solution transfer and error measurement ---------------------------------------------


def _snapshot_sampler(snap: MeshSnapshot):
    t = mtri.Triangulation(snap.xy[:, 0], snap.xy[:, 1], snap.tri)
    finder = t.get_trifinder()

    def sample(pts, fill=None):
        pts = np.asarray(pts, dtype=float)
        el = np.asarray(finder(pts[:, 0], pts[:, 1]), dtype=np.int64)
        miss = el < 0
        if np.any(miss):
            shrunk = pts[miss] * (1.0 - 1e-12)
            el[miss] = finder(shrunk[:, 0], shrunk[:, 1])
        miss = el < 0
        if np.any(miss):
            inner = cartesian_hexnorm(pts[miss]) <= snap.radius * (1 - 1e-9)
            if np.any(inner) or fill is None:
                raise AdaptError("points not covered by the stored mesh")
        good = ~miss
        tri = snap.tri[np.maximum(el, 0)]
        a = snap.xy[tri[:, 0]]
        v0 = snap.xy[tri[:, 1]] - a
        v1 = snap.xy[tri[:, 2]] - a
        v2 = pts - a
        den = v0[:, 0] * v1[:, 1] - v0[:, 1] * v1[:, 0]
        l1 = (v2[:, 0] * v1[:, 1] - v2[:, 1] * v1[:, 0]) / den
        l2 = (v0[:, 0] * v2[:, 1] - v0[:, 1] * v2[:, 0]) / den
        bary = np.column_stack([1.0 - l1 - l2, l1, l2])
        out = np.einsum("nk,nkj->nj", bary, snap.y[tri])
        if fill is not None:
            out[miss] = fill[miss]
        elif np.any(~good):
            raise AdaptError("points not covered by the stored mesh")
        return out

    return sample


def transfer_solution(snap: MeshSnapshot, model: CoupledEnergyModel
                      ) -> np.ndarray:
    """Warm start on a mutated mesh: interpolate the stored solution at
    the new nodes, fall back to the far field outside the stored
    domain, and pin constrained nodes to their boundary values."""
    far = model.y_far()
    y0 = _snapshot_sampler(snap)(model.mesh.xy, fill=far)
    y0[~model.free_nodes] = far[~model.free_nodes]
    return y0


def h1_distance(k: int, snap_a: MeshSnapshot, snap_b: MeshSnapshot) -> float:
    """Gradient-seminorm distance of two stored solutions, measured on
    the micro-triangulation of the common (smaller) domain."""
    radius = int(round(min(snap_a.radius, snap_b.radius)))
    lat = _reference_lattice(k, radius)
    ya = _snapshot_sampler(snap_a)(lat.xy)
    yb = _snapshot_sampler(snap_b)(lat.xy)
    d = ya - yb
    tri = lat.tri
    p = lat.xy[tri]
    j0 = p[:, 1] - p[:, 0]
    j1 = p[:, 2] - p[:, 0]
    det = j0[:, 0] * j1[:, 1] - j0[:, 1] * j1[:, 0]
    area = 0.5 * np.abs(det)
    d0 = d[tri[:, 1]] - d[tri[:, 0]]
    d1 = d[tri[:, 2]] - d[tri[:, 0]]
    # gradient of the linear interpolant: D J^{-1} with D = [d0 d1]
    gx = (d0 * j1[:, 1, None] - d1 * j0[:, 1, None]) / det[:, None]
    gy = (-d0 * j1[:, 0, None] + d1 * j0[:, 0, None]) / det[:, None]
    dens = np.sum(gx * gx + gy * gy, axis=1)
    return float(np.sqrt(np.sum(area * dens)))


def fill_errors(trace: AdaptTrace, reference: MeshSnapshot) -> None:
    """Fill the per-step error columns against a reference solution."""
    for rec, snap in zip(trace.records, trace.snapshots):
        rec.h1_err = h1_distance(trace.k, snap, reference)
        rec.energy_err = abs(snap.energy - reference.energy)


def fit_slope(n: np.ndarray, err: np.ndarray) -> float:
    """Least-squares slope of log10(err) against log10(n); pairs with
    non-positive entries are dropped."""
    n = np.asarray(n, dtype=float)
    err = np.asarray(err, dtype=float)
    ok = (n > 0) & (err > 0) & np.isfinite(err)
    if ok.sum() < 2:
        raise AdaptError("need at least two positive points for a slope")
    x = np.log10(n[ok])
    y = np.log10(err[ok])
    return float(np.polyfit(x, y, 1)[0])


# -- the engine ---------------------------------------------------------------------------


_LATTICE_EL_AREA = 0.5 * DET_A


def _refinable(mesh: CoupledMesh, marked: np.ndarray,
               lookahead: int) -> np.ndarray:
    """Marked elements the driver may actually bisect.

    Continuum elements only, and never below the lattice scale: the
    continuum mesh approximates the lattice, so splitting an element
    already at lattice size gains nothing.  Elements within the reach
    of an interface expansion's zone rebuild are excluded entirely --
    refinement nodes placed there would be discarded when the zone is
    rebuilt, which could shrink the degree-of-freedom count; their
    marked mass is absorbed by interface expansion instead.
    """
    marked = np.unique(np.asarray(marked, dtype=np.int64))
    if len(marked) == 0:
        return marked
    sel = mesh.region[marked] == REGION_C
    sel &= mesh.area[marked] > 1.01 * _LATTICE_EL_AREA
    sel &= interface_distance(mesh, marked) > mesh.W + lookahead + 3.0
    return marked[sel]


def _plan_shells(mesh: CoupledMesh, config: AdaptConfig) -> NestedShells:
    targets = [float(t) for t in config.shell_targets]
    if not targets:
        r = mesh.R
        while r < config.r_max * (1 + 1e-9):
            r = 2.0 * r
            targets.append(r)
    return NestedShells.plan(mesh, targets)


def _decay_rate(records) -> float | None:
    """Decay exponent of the indicator over the last two steps with
    distinct sizes: positive when the indicator still falls with N."""
    if len(records) < 2:
        return None
    cur = records[-1]
    for prev in reversed(records[:-1]):
        if prev.n_dof != cur.n_dof and prev.rho > 0 and cur.rho > 0:
            return (math.log(prev.rho) - math.log(cur.rho)) / \
                (math.log(cur.n_dof) - math.log(prev.n_dof))
    return None


def run_adaptive(potential, stretch, *, k: int = 0, ra: int = 4,
                 r: float = 32.0, config: AdaptConfig | None = None,
                 mesh: CoupledMesh | None = None) -> AdaptTrace:
    """Run the adaptive loop from a fresh (or given) coupled mesh.

    Per step: solve the coupled problem (warm-started from the
    previous step), correct the hybrid stress, assemble the estimator,
    record a trace row, test the stopping rules, then mark and mutate
    the mesh: marked mass concentrated at the interface expands the
    atomistic region, a dominating truncation part (size control only)
    enlarges the domain by one planned shell, and the remaining marks
    bisect continuum elements.  The action column keeps the most
    significant event of the step (enlarge > expand > refine).
    """
    cfg = config if config is not None else AdaptConfig()
    B = np.asarray(stretch, dtype=float)
    if mesh is None:
        mesh = CoupledMesh.build(k, ra, r)
    shells = _plan_shells(mesh, cfg) if cfg.size_control else None
    r_max = math.inf if cfg.r_max is None else float(cfg.r_max)

    trace = AdaptTrace([], [], cfg, int(mesh.k), B.copy())
    model = CoupledEnergyModel(mesh, potential, B=B)
    prev_snap = None

    for step in range(cfg.max_steps):
        y0 = None if prev_snap is None else transfer_solution(prev_snap,
                                                              model)
        sol = minimize_coupled(model, cfg.solve, y0=y0)
        n_dof = int(model.free.sum())
        if not sol.converged:
            trace.records.append(StepRecord(
                step, n_dof, mesh.R, mesh.Ra, math.nan, math.nan, math.nan,
                math.nan, math.nan, action="stop:solverFailure"))
            trace.stopped = "stop:solverFailure"
            break

        ref = reference_state(model, sol.y)
        sigma_raw = coupling_stress(model, sol.y)
        if cfg.use_correction:
            sigma, _ = correct_stress(model, sol.y, ref.sigma, sigma_raw)
        else:
            sigma = sigma_raw
        report = estimate(model, sol.y, sigma_h=sigma, ref=ref,
                          constants=cfg.constants, gamma=cfg.energy_gamma)
        rho_el = marking_indicator(report, mesh, cfg)
        rho = float(rho_el.sum())

        rec = StepRecord(step, n_dof, mesh.R, mesh.Ra, report.eta_t,
                         report.eta_m, report.eta_c, report.mu_e, rho,
                         eta=report.eta)
        if cfg.record_uncorrected and cfg.use_correction:
            raw = estimate(model, sol.y, sigma_h=sigma_raw, ref=ref,
                           constants=cfg.constants, gamma=cfg.energy_gamma,
                           want_energy=False)
            rec.eta_uncorrected = raw.eta
        trace.records.append(rec)
        if cfg.keep_snapshots or step == cfg.max_steps - 1:
            trace.snapshots.append(MeshSnapshot(
                mesh.xy.copy(), mesh.tri.copy(), sol.y.copy(), mesh.R,
                mesh.Ra, sol.energy, n_dof))
        prev_snap = trace.snapshots[-1] if trace.snapshots else None

        # stopping rules, tested in a fixed order
        stop = None
        if n_dof > cfg.n_max:
            stop = "stop:Nmax"
        elif rho < cfg.rho_tol:
            stop = "stop:rhoTol"
        elif not cfg.size_control and cfg.stop_rule == "ratio":
            base = report.eta_m + report.eta_c
            if base > 0.0 and report.eta_t / base >= cfg.tau2:
                stop = "stop:truncation"
        elif not cfg.size_control and cfg.stop_rule == "rate":
            beta = _decay_rate(trace.records)
            if beta is not None and beta <= cfg.tau2:
                stop = "stop:rate"
        elif cfg.size_control and mesh.R > r_max * (1 + 1e-9):
            stop = "stop:Rmax"
        if stop is None and step == cfg.max_steps - 1:
            stop = "stop:maxSteps"
        if stop is not None:
            rec.action = stop
            trace.stopped = stop
            break

        marked = dorfler_mark(rho_el, cfg.theta)
        rec.n_marked = len(marked)
        if len(marked) == 0:
            rec.action = "stop:rhoTol"
            trace.stopped = "stop:rhoTol"
            break
        k_exp, keep = interface_decision(marked, rho_el, mesh, cfg.tau1,
                                         cfg.lookahead)
        enlarge = (cfg.size_control and
                   report.eta_t >= cfg.tau3 * rho and rho > 0.0)

        expanded = 0
        if k_exp > 0:
            centroids = prev_snap.xy[prev_snap.tri[keep]].mean(axis=1) \
                if len(keep) else None
            try:
                mesh.expand_interface(k_exp)
                expanded = k_exp
            except MeshError:
                keep = marked  # cannot expand; refine everything instead
                centroids = None
            if expanded and centroids is not None and len(centroids):
                el, _ = mesh.locate(centroids)
                keep = np.unique(el)

        refinable = _refinable(mesh, keep, cfg.lookahead)
        if len(refinable):
            mesh.bisect(refinable)

        enlarged = False
        if enlarge:
            try:
                mesh.enlarge_domain(shells)
                enlarged = True
            except MeshError:
                enlarged = False

        if enlarged:
            rec.action = "enlargeDomain"
        elif expanded:
            rec.action = f"expandInterface({expanded})"
        elif len(refinable):
            rec.action = "refine"
        else:
            # nothing was refinable and no zone was moved: force the
            # interface outward so the loop cannot silently stall
            try:
                mesh.expand_interface(1)
                rec.action = "expandInterface(1)"
            except MeshError:
                rec.action = "stop:stalled"
                trace.stopped = "stop:stalled"
                break

        model = CoupledEnergyModel(mesh, potential, B=B)

    if not trace.stopped and trace.records:
        trace.stopped = trace.records[-1].action
    return trace


def run_fixed_domain(potential, stretch, *, k: int = 0, ra: int = 4,
                     r: float = 32.0, config: AdaptConfig | None = None,
                     mesh: CoupledMesh | None = None) -> AdaptTrace:
    """Adaptive loop on a fixed computational domain."""
    cfg = config if config is not None else AdaptConfig()
    if cfg.size_control:
        cfg = replace(cfg, size_control=False)
    return run_adaptive(potential, stretch, k=k, ra=ra, r=r, config=cfg,
                        mesh=mesh)


def run_with_size_control(potential, stretch, *, k: int = 0, ra: int = 4,
                          r: float = 32.0,
                          config: AdaptConfig | None = None,
                          mesh: CoupledMesh | None = None) -> AdaptTrace:
    """Adaptive loop that may enlarge the computational domain."""
    cfg = config if config is not None else AdaptConfig()
    if not cfg.size_control:
        if cfg.r_max is None and not cfg.shell_targets:
            raise AdaptError("size control needs r_max or shell_targets")
        cfg = replace(cfg, size_control=True)
    return run_adaptive(potential, stretch, k=k, ra=ra, r=r, config=cfg,
                        mesh=mesh)
