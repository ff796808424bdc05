"""Parallel transport of the Klein-Gordon Fock space over the space of metrics.

S(a, b) denotes transport from metric b to metric a (target first):

    S(a, b) = U(W(a, g0)) U(W(b, g0))^*,    W(g, g0) = V(g)^{-1} V(g0)

with U the natural implementer.  Fock-level quantities use the band model (modes
|k| <= k_max, exactly symplectic) unless stated otherwise; map-level quantities use the
full-resolution solve.  Operator comparisons are made on the interior block of
particle numbers <= n_interior, where truncation effects are negligible.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .bogoliubov import BogoliubovData, blocks, compose, inverse_blocks
from .errors import PreconditionError
from .fock import FockBasis, NaturalImplementer, cocycle, field_op
from .geometry import (
    Box,
    GridSpec,
    MetricField,
    MetricPath,
    PathSegment,
    PerturbationSpec,
    TimeBumpFlow,
    build_metric,
    circular_offset,
    flat_metric,
    pullback,
    require_valid,
    validate,
)
from .oneparticle import OneParticleStructure
from .wavesolver import (
    EvolutionConfig,
    SymplecticMap,
    causal_shadow,
    scattering_map,
    smooth_frame,
    support_profile,
)


# ---------------------------------------------------------------------------
# lab context


@dataclass(eq=False)
class Lab:
    """Shared numerical setup: grid, solver settings, mode cutoff and Fock truncation."""

    grid: GridSpec = field(default_factory=GridSpec)
    k_max: int = 3
    n_max: int = 8
    substeps: int = 5
    t_minus: float | None = None
    t_plus: float | None = None
    n_interior: int = 2

    def __post_init__(self):
        self.t_minus = self.grid.t_min if self.t_minus is None else self.t_minus
        self.t_plus = self.grid.t_max if self.t_plus is None else self.t_plus
        self._cache: dict = {}

    @property
    def full_cfg(self) -> EvolutionConfig:
        return EvolutionConfig(substeps_per_dt=self.substeps)

    @property
    def band_cfg(self) -> EvolutionConfig:
        return EvolutionConfig(substeps_per_dt=self.substeps, band=self.k_max)

    @property
    def ops(self) -> OneParticleStructure:
        return self._memo(("ops",), lambda: OneParticleStructure(self.grid, self.k_max))

    @property
    def basis(self) -> FockBasis:
        return self._memo(("basis",), lambda: FockBasis(2 * self.k_max + 1, self.n_max))

    @property
    def flat(self) -> MetricField:
        return self._memo(("flat",), lambda: flat_metric(self.grid))

    def _memo(self, key, fn):
        if key not in self._cache:
            self._cache[key] = fn()
        return self._cache[key]

    def metric(self, specs: Sequence[PerturbationSpec]) -> MetricField:
        return build_metric(self.grid, tuple(specs))

    # maps -------------------------------------------------------------
    def full_map(self, g: MetricField | Sequence[PerturbationSpec], key=None) -> SymplecticMap:
        g, key = self._resolve(g, key)
        return self._memo(("full", key), lambda: scattering_map(g, self.flat, self.t_minus, self.t_plus, self.full_cfg))

    def band_map(self, g: MetricField | Sequence[PerturbationSpec], key=None) -> SymplecticMap:
        g, key = self._resolve(g, key)
        return self._memo(("band", key), lambda: scattering_map(g, self.flat, self.t_minus, self.t_plus, self.band_cfg))

    def band_blocks(self, g, key=None) -> BogoliubovData:
        g, key = self._resolve(g, key)
        return self._memo(("blocks", key), lambda: blocks(self.band_map(g, key), self.ops))

    def implementer(self, g, key=None) -> NaturalImplementer:
        g, key = self._resolve(g, key)
        return self._memo(("U", key), lambda: NaturalImplementer(self.band_blocks(g, key), self.basis))

    def _resolve(self, g, key):
        if isinstance(g, MetricField):
            return g, (key if key is not None else ("id", id(g)))
        specs = tuple(g)
        return self.metric(specs), ("specs", specs)

    # interior block ---------------------------------------------------
    @property
    def interior(self) -> int:
        return self.basis.prefix(self.n_interior)

    def interior_columns(self) -> np.ndarray:
        return np.eye(self.basis.dim, self.interior, dtype=complex)


# ---------------------------------------------------------------------------
# phase-aligned comparison


@dataclass
class PhaseAlignedDistance:
    value: float
    optimal_phase: complex

    def to_dict(self) -> dict:
        return {"value": self.value, "phase_re": self.optimal_phase.real, "phase_im": self.optimal_phase.imag}


def phase_aligned_distance(A: np.ndarray, B: np.ndarray) -> PhaseAlignedDistance:
    """min over theta of ||A - e^{i theta} B||_2 / max(||A||_2, ||B||_2); theta from arg tr(B^* A)."""
    A = np.atleast_2d(A)
    B = np.atleast_2d(B)
    tr = np.vdot(B, A)
    phase = tr / abs(tr) if abs(tr) > 0 else 1.0 + 0j
    scale = max(np.linalg.norm(A, 2), np.linalg.norm(B, 2))
    if scale == 0:
        return PhaseAlignedDistance(0.0, complex(phase))
    return PhaseAlignedDistance(float(np.linalg.norm(A - phase * B, 2) / scale), complex(phase))


# ---------------------------------------------------------------------------
# transport


class Transport:
    """Lazy S = U_end U_start^* acting on column blocks."""

    def __init__(self, U_end: NaturalImplementer, U_start: NaturalImplementer):
        self.U_end = U_end
        self.U_start = U_start

    def apply(self, X) -> np.ndarray:
        return self.U_end.apply(self.U_start.apply_adjoint(X))

    def apply_adjoint(self, X) -> np.ndarray:
        return self.U_start.apply(self.U_end.apply_adjoint(X))


class TransportChain:
    """Product of transports, rightmost applied first."""

    def __init__(self, factors: list):
        self.factors = list(factors)

    def apply(self, X) -> np.ndarray:
        Y = np.asarray(X, complex)
        for f in reversed(self.factors):
            Y = f.apply(Y)
        return Y

    def apply_adjoint(self, X) -> np.ndarray:
        Y = np.asarray(X, complex)
        for f in self.factors:
            Y = f.apply_adjoint(Y)
        return Y


@dataclass
class TransportResult:
    S: TransportChain
    endpoints: list
    segment_blocks: list
    phase_log: list

    def interior_block(self, lab: Lab) -> np.ndarray:
        n = lab.interior
        return self.S.apply(lab.interior_columns())[:n]


def S_between(lab: Lab, target, source) -> Transport:
    """S(target, source) with both metrics given as spec tuples or MetricFields."""
    return Transport(lab.implementer(target), lab.implementer(source))


def transport(path: MetricPath, lab: Lab, check: bool = True) -> TransportResult:
    """Transport along a piecewise path of metrics (endpoint metrics of each segment)."""
    if check:
        path.check()
    pts = path.endpoint_specs()
    flat_base = path.base.is_flat_on(-np.inf, np.inf)
    if flat_base:
        ends = pts
    else:
        ends = [(m, ("path", id(path.base), p)) for m, p in zip(path.endpoint_metrics(), pts)]
    factors = []
    seg_blocks = []
    phases = []
    for a, b in zip(ends[:-1], ends[1:]):
        Ua = lab.implementer(*a) if not flat_base else lab.implementer(a)
        Ub = lab.implementer(*b) if not flat_base else lab.implementer(b)
        factors.append(Transport(Ub, Ua))
        # local map W_loc = W_b W_a^{-1} and the cocycle phase relating
        # U(W_b) U(W_a)^* to U(W_loc)
        Wa, Wb = Ua.b, Ub.b
        loc = compose(Wb, inverse_blocks(Wa))
        seg_blocks.append(loc)
        phases.append(complex(np.conj(cocycle(loc, Wa))))
    return TransportResult(TransportChain(factors[::-1]), pts, seg_blocks, phases)


def holonomy_centrality(loop: MetricPath, lab: Lab) -> dict:
    if not loop.closed:
        raise PreconditionError("holonomy needs a closed loop")
    res = transport(loop, lab)
    S = res.interior_block(lab)
    c = np.trace(S) / S.shape[0]
    defect = float(np.linalg.norm(S - c * np.eye(S.shape[0]), 2))
    predicted = complex(np.prod(res.phase_log)) if res.phase_log else 1 + 0j
    return {
        "scalar": complex(c),
        "abs_scalar": float(abs(c)),
        "off_scalar_defect": defect,
        "cocycle_phase_product": predicted,
    }


# ---------------------------------------------------------------------------
# causality


def _time_range(specs) -> tuple[float, float] | None:
    if not specs:
        return None
    return min(s.box.t_range[0] for s in specs), max(s.box.t_range[1] for s in specs)


def max_characteristic_speed(metric: MetricField) -> float:
    gtt, gtx, gxx = metric.samples
    det = gtt * gxx - gtx**2
    Gtt, Gtx, Gxx = gxx / det, -gtx / det, gtt / det
    disc = np.sqrt(np.maximum(Gtx**2 - Gtt * Gxx, 0.0))
    # dx/dt of characteristics
    return float(max(1.0, np.max((np.abs(Gtx) + disc) / Gtt)))


def causally_separated(h1, h3, grid: GridSpec, speed: float = 1.0) -> bool:
    """True when supp(h3) does not meet the causal past of supp(h1) (speed bound ``speed``)."""
    if not h1 or not h3:
        return True
    for s1 in h1:
        b1 = s1.box
        for s3 in h3:
            b3 = s3.box
            a3 = b3.t_range[0]
            top1 = b1.t_range[1]
            if a3 > top1:
                continue
            gap = abs(circular_offset(b3.x0, b1.x0, grid.circumference)) - b1.r_x - b3.r_x
            if gap <= speed * (top1 - a3):
                return False
    return True


def causality_check(h1, h2, h3, lab: Lab) -> dict:
    h1, h2, h3 = tuple(h1), tuple(h2), tuple(h3)
    full = h1 + h2 + h3
    speed = max_characteristic_speed(lab.metric(full)) if full else 1.0
    if not causally_separated(h1, h3, lab.grid, speed):
        raise PreconditionError("supports not causally separated: J^-(supp h1) meets supp h3", "CAUSALITY")
    for specs in (h1 + h2, h2 + h3, h2, full):
        require_valid(lab.metric(specs))
    W = {k: lab.full_map(v).matrix for k, v in
         {"123": full, "12": h1 + h2, "23": h2 + h3, "2": h2}.items()}
    rhs = W["12"] @ np.linalg.solve(W["2"], W["23"])
    map_defect = float(np.abs(W["123"] - rhs).max())
    literal = W["23"] @ np.linalg.solve(W["2"], W["12"])
    literal_defect = float(np.abs(W["123"] - literal).max())
    # Fock level: S(g, g+h123) vs S(g, g+h23) S(g+h2, g+h12)
    X = lab.interior_columns()
    n = lab.interior
    A = S_between(lab, (), full).apply(X)[:n]
    B = S_between(lab, (), h2 + h3).apply(S_between(lab, h2, h1 + h2).apply(X))[:n]
    d = phase_aligned_distance(A, B)
    band = {k: lab.band_map(v).matrix for k, v in {"123": full, "12": h1 + h2, "23": h2 + h3, "2": h2}.items()}
    band_defect = float(np.abs(band["123"] - band["12"] @ np.linalg.solve(band["2"], band["23"])).max())
    return {
        "map_defect": map_defect,
        "map_defect_band": band_defect,
        "map_defect_reverse_order": literal_defect,
        "fock_distance": d.value,
        "fock_phase": d.optimal_phase,
        "speed_bound": speed,
    }


# ---------------------------------------------------------------------------
# covariance


def band_defect(W: SymplecticMap, grid: GridSpec, band: int) -> float:
    """max |W - I| in the Fourier basis restricted to modes |k| <= band (u and nu blocks)."""
    ops = OneParticleStructure(grid, band)
    F = ops.fourier_matrix
    S = ops.synthesis_matrix
    n = grid.n_x
    E = W.matrix - np.eye(2 * n)
    T = np.zeros((2 * F.shape[0], 2 * n), complex)
    T[: F.shape[0], :n] = F
    T[F.shape[0]:, n:] = F
    Sb = np.zeros((2 * n, 2 * S.shape[1]), complex)
    Sb[:n, : S.shape[1]] = S
    Sb[n:, S.shape[1]:] = S
    return float(np.abs(T @ E @ Sb).max())


def covariance_check(flow_params: dict, lab: Lab, band: int = 7, refine: bool = True) -> dict:
    """Scattering map of the pulled-back flat metric against the identity."""

    def one(grid: GridSpec, substeps: int):
        flow = TimeBumpFlow.from_params(grid, **flow_params)
        g = pullback(flat_metric(grid), flow)
        W = scattering_map(g, flat_metric(grid), lab.t_minus, lab.t_plus, EvolutionConfig(substeps_per_dt=substeps))
        return g, W

    g, W = one(lab.grid, lab.substeps)
    rep = validate(g)
    out = {
        "valid": rep.valid,
        "band_defect": band_defect(W, lab.grid, band),
        "nodal_defect": float(np.abs(W.matrix - np.eye(W.matrix.shape[0])).max()),
        "band": band,
    }
    # Fock level on the compressed low-mode blocks
    b = blocks(W, lab.ops, structure_tol=1e-8)
    U = NaturalImplementer(b, lab.basis)
    X = lab.interior_columns()
    n = lab.interior
    d = phase_aligned_distance(U.apply(X)[:n], X[:n])
    out["fock_distance"] = d.value
    if refine:
        coarse = lab.grid.with_resolution(lab.grid.n_x // 2)
        _, Wc = one(coarse, max(1, lab.substeps // 2))
        out["band_defect_coarse"] = band_defect(Wc, coarse, band)
        fine = out["band_defect"]
        out["refinement_ratio"] = float(out["band_defect_coarse"] / fine) if fine > 0 else float("inf")
    return out


# ---------------------------------------------------------------------------
# locality


def locality_check(specs, lab: Lab, n_max_full: int = 3, frame_radius: float = 4.0,
                   frame_sharpness: float = 8.0, fock: bool = True) -> dict:
    """Map-level and Fock-level locality of the scattering of a localized perturbation."""
    specs = tuple(specs)
    g = lab.metric(specs)
    W = lab.full_map(specs)
    box = g.support_box
    rep = support_profile(W, box, lab.grid, lab.t_minus, frame_radius, frame_sharpness)
    out = {"support": rep.to_dict()}
    if not fock or rep.vacuous:
        return out
    # all resolved modes, low particle numbers
    grid = lab.grid
    ops = OneParticleStructure(grid, grid.n_x // 2 - 1)
    b = blocks(W, ops)
    basis = FockBasis(ops.M, n_max_full)
    U = NaturalImplementer(b, basis)
    shadow = causal_shadow(box, lab.t_minus, grid.dx, grid.circumference)
    F = smooth_frame(grid, shadow, frame_radius, frame_sharpness)
    vac = basis.vacuum()
    Uvac = U.apply(vac)
    lim = basis.prefix(n_max_full - 1)
    worst = 0.0
    for j in range(F.shape[1]):
        for comp in (0, 1):
            v = np.zeros(2 * grid.n_x)
            v[comp * grid.n_x:(comp + 1) * grid.n_x] = F[:, j]
            phi = field_op(v, ops, basis).matrix
            c = U.apply(phi @ vac) - phi @ Uvac
            worst = max(worst, float(np.linalg.norm(c[:lim]) / np.linalg.norm(phi @ vac)))
    out["fock_commutator"] = worst
    out["fock_modes"] = ops.M
    return out


# ---------------------------------------------------------------------------
# stress-energy action and smoothness


def _vector(lab: Lab, v) -> np.ndarray:
    if v is None:
        return lab.basis.basis_vector([1 if i == lab.k_max else 0 for i in range(lab.basis.M)])
    return np.asarray(v, complex)


def stress_energy_action(base, h, lab: Lab, v=None, eps=(1e-2, 5e-3, 2.5e-3)) -> dict:
    """i d/de S(g + e h, g) v at e = 0 by central differences with Richardson extrapolation.

    ``base`` and ``h`` are spec tuples; ``h`` may be a list of (spec tuple) summands whose
    derivative is checked for additivity.
    """
    base = tuple(base)
    v = _vector(lab, v)

    def derivative(hs):
        ests = []
        for e in eps:
            gp = base + tuple(s.scaled(e) for s in hs)
            gm = base + tuple(s.scaled(-e) for s in hs)
            Sp = S_between(lab, gp, base).apply(v)
            Sm = S_between(lab, gm, base).apply(v)
            ests.append(1j * (Sp - Sm) / (2 * e))
        r = eps[0] / eps[1]
        d01 = np.linalg.norm(ests[0] - ests[1])
        d12 = np.linalg.norm(ests[1] - ests[2])
        order = float(np.log(d01 / d12) / np.log(r)) if d01 > 0 and d12 > 0 else float("inf")
        rich = ests[2] + (ests[2] - ests[1]) / (r**2 - 1)
        return rich, order, ests

    parts = [tuple(p) for p in h] if h and isinstance(h[0], (tuple, list)) else [tuple(h)]
    total = tuple(s for p in parts for s in p)
    D, order, ests = derivative(total)
    out = {"derivative": D, "derivative_norm": float(np.linalg.norm(D)), "convergence_order": order}
    if len(parts) > 1:
        Ds = [derivative(p)[0] for p in parts]
        out["linearity_defect"] = float(np.linalg.norm(D - sum(Ds)))
    basis = lab.basis
    nv = basis.sector[np.argmax(np.abs(v))]
    allowed = np.isin(basis.sector, [nv - 2, nv, nv + 2])
    nrm = np.linalg.norm(D)
    out["sector_leakage"] = float(np.linalg.norm(D[~allowed]) / nrm) if nrm > 0 else 0.0
    return out


def smoothness_sweep(family: Callable[[float], tuple], lab: Lab, s_grid, v=None, noise_floor: float = 1e-12) -> dict:
    """Samples U_s v on a uniform s grid; first/second differences and observed order."""
    s_grid = np.asarray(s_grid, float)
    v = _vector(lab, v)
    F = np.array([lab.implementer(family(s)).apply(v) for s in s_grid])
    vac_amp = np.array([abs(lab.implementer(family(s)).vacuum_image()[0]) for s in s_grid])
    dets = np.array([lab.band_blocks(family(s)).det_factor ** 0.25 for s in s_grid])
    h = s_grid[1] - s_grid[0]
    rows = []
    for i, s in enumerate(s_grid):
        norm = float(np.linalg.norm(F[i] - v))
        d1 = d2 = order = float("nan")
        if 0 < i < len(s_grid) - 1:
            d1 = float(np.linalg.norm((F[i + 1] - F[i - 1]) / (2 * h)))
            d2 = float(np.linalg.norm((F[i + 1] - 2 * F[i] + F[i - 1]) / h**2))
        if 4 <= i < len(s_grid) - 4:
            D = [(F[i + m] - F[i - m]) / (2 * m * h) for m in (1, 2, 4)]
            a, b = np.linalg.norm(D[2] - D[1]), np.linalg.norm(D[1] - D[0])
            if max(a, b) < noise_floor:
                order = float("inf")  # the family does not move v beyond roundoff
            elif a > 0 and b > 0:
                order = float(np.log2(a / b))
        rows.append((float(s), norm, d1, d2, order))
    dv = np.gradient(vac_amp, h)
    dd = np.gradient(dets, h)
    orders = [r[4] for r in rows if not np.isnan(r[4])]
    return {
        "rows": rows,
        "median_order": float(np.sort(orders)[(len(orders) - 1) // 2]) if orders else float("nan"),
        "vacuum_chain_rule_defect": float(np.max(np.abs(dv - dd))),
    }


def scaled_family(specs) -> Callable[[float], tuple]:
    specs = tuple(specs)
    return lambda s: tuple(p.scaled(s) for p in specs)
