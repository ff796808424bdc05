"""Metric fields on the cylinder R_t x S^1.

Metrics are stored as closed-form pointwise evaluators ``(t, x) -> (g_tt, g_tx, g_xx)``
together with a list of support boxes outside which the field is exactly the flat
metric diag(1, -1).  Grid samples are derived from the evaluator, so the wave solver
can query the metric at any RK4 stage time without interpolation.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Callable, Sequence

import numpy as np
from scipy.interpolate import CubicSpline

from .errors import AdmissibilityError, ConfigError, StructureError

PERTURBATION_KINDS = ("conformal_bump", "lapse_bump", "shift_bump", "lie_derivative")
PROFILES = ("bump", "box")

Components = tuple[np.ndarray, np.ndarray, np.ndarray]


# ---------------------------------------------------------------------------
# grid and bump profiles


@dataclass(frozen=True)
class GridSpec:
    n_x: int = 64
    circumference: float = 8 * np.pi
    t_min: float = -3.0
    t_max: float = 3.0
    dt: float = 0.02
    mass: float = 1.0

    def __post_init__(self):
        if int(self.n_x) != self.n_x or self.n_x < 8 or self.n_x % 2:
            raise ConfigError(f"n_x must be an even integer >= 8, got {self.n_x}", "CFG_NX")
        if not self.circumference > 0:
            raise ConfigError("circumference must be positive", "CFG_CIRCUMFERENCE")
        if not self.dt > 0:
            raise ConfigError("dt must be positive", "CFG_DT")
        if not self.t_min < self.t_max:
            raise ConfigError("t_min must be smaller than t_max", "CFG_TIME")
        if not self.mass > 0:
            raise ConfigError("mass must be positive (zero mode needs m > 0)", "CFG_MASS")

    @property
    def dx(self) -> float:
        return self.circumference / self.n_x

    @property
    def x(self) -> np.ndarray:
        return np.arange(self.n_x) * self.dx

    @property
    def n_t(self) -> int:
        return int(round((self.t_max - self.t_min) / self.dt)) + 1

    @property
    def t(self) -> np.ndarray:
        return self.t_min + self.dt * np.arange(self.n_t)

    def with_resolution(self, n_x: int) -> "GridSpec":
        return replace(self, n_x=n_x)


def bump(rho, sharpness: float = 1.0) -> np.ndarray:
    """Smooth compactly supported profile exp(beta (1 - 1/(1 - rho^2))), peak 1 at rho = 0."""
    rho = np.asarray(rho, dtype=float)
    out = np.zeros_like(rho)
    inside = np.abs(rho) < 1
    r2 = rho[inside] ** 2
    out[inside] = np.exp(sharpness * (1.0 - 1.0 / (1.0 - r2)))
    return out


def bump_derivative(rho, sharpness: float = 1.0) -> np.ndarray:
    """d/drho of :func:`bump`."""
    rho = np.asarray(rho, dtype=float)
    out = np.zeros_like(rho)
    inside = np.abs(rho) < 1
    r = rho[inside]
    one = 1.0 - r * r
    out[inside] = np.exp(sharpness * (1.0 - 1.0 / one)) * (-2.0 * sharpness * r / one**2)
    return out


def circular_offset(x, x0: float, circumference: float) -> np.ndarray:
    """Signed offset x - x0 wrapped into [-C/2, C/2)."""
    return (np.asarray(x, float) - x0 + circumference / 2) % circumference - circumference / 2


@dataclass(frozen=True)
class Box:
    """Rectangle [t0 - r_t, t0 + r_t] x (x0 - r_x, x0 + r_x) on the cylinder."""

    t0: float
    x0: float
    r_t: float
    r_x: float

    @property
    def t_range(self) -> tuple[float, float]:
        return (self.t0 - self.r_t, self.t0 + self.r_t)

    def hits_time(self, ta: float, tb: float) -> bool:
        lo, hi = self.t_range
        return not (tb < lo or ta > hi)

    def to_dict(self) -> dict:
        return {"t0": self.t0, "x0": self.x0, "r_t": self.r_t, "r_x": self.r_x}


@dataclass(frozen=True)
class Profile1D:
    """Bump b(y) = phi((y - center)/radius) along t (periodic=False) or x (periodic=True)."""

    center: float
    radius: float
    sharpness: float = 1.0
    circumference: float | None = None
    kind: str = "bump"

    def _rho(self, y):
        if self.circumference is None:
            return (np.asarray(y, float) - self.center) / self.radius
        return circular_offset(y, self.center, self.circumference) / self.radius

    def __call__(self, y) -> np.ndarray:
        rho = self._rho(y)
        if self.kind == "box":
            return (np.abs(rho) < 1).astype(float)
        return bump(rho, self.sharpness)

    def derivative(self, y) -> np.ndarray:
        if self.kind == "box":
            raise StructureError("box profile has no derivative")
        return bump_derivative(self._rho(y), self.sharpness) / self.radius


# ---------------------------------------------------------------------------
# perturbations


@dataclass(frozen=True)
class PerturbationSpec:
    """Compactly supported symmetric tensor h generated in closed form.

    ``center = (t0, x0)``, ``radii = (r_t, r_x)``, ``sharpness = (beta_t, beta_x)``.
    For ``lie_derivative`` the tensor is ``amplitude * L_Z eta`` with ``Z = b(t) c(x) d_t``
    and b, c the time and space profiles, i.e. h_tt = 2 b' c, h_tx = b c', h_xx = 0.
    ``profile = "box"`` replaces the smooth time profile by an indicator (a deliberately
    non-smooth test input).
    """

    kind: str = "conformal_bump"
    center: tuple[float, float] = (0.0, 0.0)
    radii: tuple[float, float] = (1.0, 1.0)
    amplitude: float = 0.1
    sharpness: tuple[float, float] = (1.0, 1.0)
    profile: str = "bump"

    def __post_init__(self):
        if self.kind not in PERTURBATION_KINDS:
            raise ConfigError(f"unknown perturbation kind {self.kind!r}", "CFG_KIND")
        if self.profile not in PROFILES:
            raise ConfigError(f"unknown profile {self.profile!r}", "CFG_PROFILE")
        if self.kind == "lie_derivative" and self.profile != "bump":
            raise ConfigError("lie_derivative needs a smooth profile", "CFG_PROFILE")
        if min(self.radii) <= 0 or min(self.sharpness) <= 0:
            raise ConfigError("radii and sharpness must be positive", "CFG_RADII")
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        object.__setattr__(self, "radii", tuple(float(c) for c in self.radii))
        object.__setattr__(self, "sharpness", tuple(float(c) for c in self.sharpness))

    @property
    def box(self) -> Box:
        return Box(self.center[0], self.center[1], self.radii[0], self.radii[1])

    def scaled(self, factor: float) -> "PerturbationSpec":
        return replace(self, amplitude=self.amplitude * factor)

    def profiles(self, circumference: float) -> tuple[Profile1D, Profile1D]:
        b = Profile1D(self.center[0], self.radii[0], self.sharpness[0], None, self.profile)
        c = Profile1D(self.center[1], self.radii[1], self.sharpness[1], circumference)
        return b, c

    def tensor(self, t, x, circumference: float) -> Components:
        """Evaluate (h_tt, h_tx, h_xx) at broadcast points (t, x)."""
        b, c = self.profiles(circumference)
        t, x = np.broadcast_arrays(np.asarray(t, float), np.asarray(x, float))
        zero = np.zeros(t.shape)
        A = self.amplitude
        if self.kind == "lie_derivative":
            return 2 * A * b.derivative(t) * c(x), A * b(t) * c.derivative(x), zero
        phi = A * b(t) * c(x)
        if self.kind == "conformal_bump":
            return phi, zero, -phi
        if self.kind == "lapse_bump":
            return phi, zero, zero.copy()
        return zero, phi, zero.copy()

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "center": list(self.center),
            "radii": list(self.radii),
            "amplitude": self.amplitude,
            "sharpness": list(self.sharpness),
            "profile": self.profile,
        }


# ---------------------------------------------------------------------------
# metric fields


def _flat(t, x) -> Components:
    t, x = np.broadcast_arrays(np.asarray(t, float), np.asarray(x, float))
    return np.ones(t.shape), np.zeros(t.shape), -np.ones(t.shape)


@dataclass(frozen=True, eq=False)
class MetricField:
    grid: GridSpec
    evaluator: Callable[[np.ndarray, np.ndarray], Components] = _flat
    support: tuple[Box, ...] = ()
    label: str = "flat"

    def components(self, t, x) -> Components:
        return self.evaluator(t, x)

    def at(self, t: float) -> Components:
        """Metric components on the spatial grid at time t."""
        x = self.grid.x
        return self.evaluator(np.full_like(x, t), x)

    def is_flat_on(self, ta: float, tb: float) -> bool:
        return not any(b.hits_time(ta, tb) for b in self.support)

    @property
    def time_support(self) -> tuple[float, float] | None:
        if not self.support:
            return None
        lo = min(b.t_range[0] for b in self.support)
        hi = max(b.t_range[1] for b in self.support)
        return lo, hi

    @cached_property
    def samples(self) -> Components:
        T, X = np.meshgrid(self.grid.t, self.grid.x, indexing="ij")
        return tuple(np.array(c, dtype=float) for c in self.evaluator(T, X))

    @property
    def g_tt(self) -> np.ndarray:
        return self.samples[0]

    @property
    def g_tx(self) -> np.ndarray:
        return self.samples[1]

    @property
    def g_xx(self) -> np.ndarray:
        return self.samples[2]

    @property
    def support_box(self) -> Box | None:
        """Single rectangle in (t, x) containing every support box (x extent may be the circle)."""
        if not self.support:
            return None
        lo, hi = self.time_support
        if len(self.support) == 1:
            b = self.support[0]
            return Box((lo + hi) / 2, b.x0, (hi - lo) / 2, b.r_x)
        C = self.grid.circumference
        return Box((lo + hi) / 2, 0.0, (hi - lo) / 2, C / 2 + max(b.r_x for b in self.support))


def flat_metric(grid: GridSpec) -> MetricField:
    return MetricField(grid)


def _check_support_inside(grid: GridSpec, box: Box):
    lo, hi = box.t_range
    if not (grid.t_min < lo and hi < grid.t_max):
        raise ConfigError(
            f"perturbation support t in [{lo:g}, {hi:g}] exceeds grid ({grid.t_min:g}, {grid.t_max:g})",
            "CFG_SUPPORT",
        )


def build_metric(grid: GridSpec, specs: Sequence[PerturbationSpec] = (), base: MetricField | None = None) -> MetricField:
    """Flat (or ``base``) metric plus the sum of the generated tensors.  Not validated."""
    specs = tuple(specs)
    for s in specs:
        _check_support_inside(grid, s.box)
    base = base if base is not None else flat_metric(grid)
    if not specs:
        return base
    C = grid.circumference

    def evaluator(t, x):
        gtt, gtx, gxx = (np.array(c, dtype=float) for c in base.evaluator(t, x))
        for s in specs:
            htt, htx, hxx = s.tensor(t, x, C)
            gtt = gtt + htt
            gtx = gtx + htx
            gxx = gxx + hxx
        return gtt, gtx, gxx

    label = "+".join(s.kind for s in specs)
    support = base.support + tuple(s.box for s in specs)
    return MetricField(grid, evaluator, support, label)


def sampled_metric(grid: GridSpec, g_tt, g_tx, g_xx, support: tuple[Box, ...], label: str = "sampled") -> MetricField:
    """Metric known only on grid samples; spline in t, exact at the spatial nodes."""
    g = [np.asarray(c, dtype=float) for c in (g_tt, g_tx, g_xx)]
    shape = (grid.n_t, grid.n_x)
    if any(c.shape != shape for c in g):
        raise StructureError(f"sample arrays must have shape {shape}")
    splines = [CubicSpline(grid.t, c, axis=0) for c in g]

    def evaluator(t, x):
        t, x = np.broadcast_arrays(np.asarray(t, float), np.asarray(x, float))
        j = np.rint(x / grid.dx).astype(int) % grid.n_x
        if not np.allclose(j * grid.dx, x % grid.circumference, atol=1e-9 * grid.circumference):
            raise StructureError("sampled metric can only be evaluated at spatial grid nodes")
        out = []
        for sp in splines:
            vals = np.empty(t.shape)
            for jj in np.unique(j):
                m = j == jj
                vals[m] = sp(t[m])[..., jj] if t[m].ndim else sp(t[m])[jj]
            out.append(vals)
        return tuple(out)

    return MetricField(grid, evaluator, support, label)


# ---------------------------------------------------------------------------
# validity


@dataclass
class ValidityReport:
    lorentzian: bool
    dt_temporal: bool
    dt_timelike_vectorfield: bool
    worst_margin: float
    failing_points: list

    @property
    def valid(self) -> bool:
        return self.lorentzian and self.dt_temporal and self.dt_timelike_vectorfield

    def to_dict(self) -> dict:
        return {
            "lorentzian": self.lorentzian,
            "dt_temporal": self.dt_temporal,
            "dt_timelike_vectorfield": self.dt_timelike_vectorfield,
            "worst_margin": self.worst_margin,
            "n_failing": len(self.failing_points),
        }


def validity_margins(g_tt, g_tx, g_xx) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Pointwise (-det, g^tt, g_tt); all positive iff the metric is admitted."""
    g_tt, g_tx, g_xx = (np.asarray(c, float) for c in (g_tt, g_tx, g_xx))
    det = g_tt * g_xx - g_tx**2
    with np.errstate(divide="ignore", invalid="ignore"):
        ginv_tt = np.where(det != 0, g_xx / np.where(det != 0, det, 1.0), -np.inf)
    return -det, ginv_tt, g_tt


def validate_components(g_tt, g_tx, g_xx, max_points: int = 20) -> ValidityReport:
    neg_det, ginv_tt, gtt = validity_margins(g_tt, g_tx, g_xx)
    lor = neg_det > 0
    temporal = lor & (ginv_tt > 0)
    timelike = gtt > 0
    bad = ~(lor & temporal & timelike)
    idx = np.argwhere(np.atleast_1d(bad))
    worst = float(min(neg_det.min(), ginv_tt.min(), gtt.min()))
    return ValidityReport(
        bool(lor.all()),
        bool(temporal.all()),
        bool(timelike.all()),
        worst,
        [tuple(int(i) for i in p) for p in idx[:max_points]],
    )


def validate(metric: MetricField) -> ValidityReport:
    """Pointwise signature and global hyperbolicity test (temporal t, timelike d_t) at every grid node."""
    return validate_components(*metric.samples)


def require_valid(metric: MetricField) -> None:
    rep = validate(metric)
    if not rep.valid:
        raise AdmissibilityError(
            f"metric {metric.label!r} not admissible (worst margin {rep.worst_margin:.3g})"
        )


# ---------------------------------------------------------------------------
# blending


def blend(g1: MetricField, g2: MetricField, chi) -> MetricField:
    """chi g1 + (1 - chi) g2 for chi a callable chi(t, x) or an (n_t, n_x) sample array."""
    if g1.grid != g2.grid:
        raise StructureError("blend needs metrics on the same grid")
    grid = g1.grid
    support = g1.support + g2.support
    if callable(chi):

        def evaluator(t, x):
            c = np.asarray(chi(t, x), float)
            a = g1.evaluator(t, x)
            b = g2.evaluator(t, x)
            return tuple(bb + c * (aa - bb) for aa, bb in zip(a, b))

        return MetricField(grid, evaluator, support, f"blend({g1.label},{g2.label})")
    chi = np.asarray(chi, float)
    if chi.shape != (grid.n_t, grid.n_x):
        raise StructureError(f"chi samples must have shape {(grid.n_t, grid.n_x)}, got {chi.shape}")
    comps = [b + chi * (a - b) for a, b in zip(g1.samples, g2.samples)]
    return sampled_metric(grid, *comps, support=support, label=f"blend({g1.label},{g2.label})")


# ---------------------------------------------------------------------------
# diffeomorphisms and pullback


@dataclass(frozen=True)
class TimeBumpFlow:
    """phi_s(t, x) = (t + s b(t) c(x), x) with b, c compactly supported bumps."""

    b: Profile1D
    c: Profile1D
    s: float

    @classmethod
    def from_params(cls, grid: GridSpec, t0=0.0, x0=0.0, r_t=2.0, r_x=4.0, beta_t=4.0, beta_x=8.0, s=0.2):
        b = Profile1D(t0, r_t, beta_t)
        c = Profile1D(x0, r_x, beta_x, grid.circumference)
        return cls(b, c, s)

    @property
    def box(self) -> Box:
        return Box(self.b.center, self.c.center, self.b.radius, self.c.radius)

    @property
    def max_shift(self) -> float:
        return abs(self.s)

    def map(self, t, x):
        t, x = np.broadcast_arrays(np.asarray(t, float), np.asarray(x, float))
        return t + self.s * self.b(t) * self.c(x), x

    def jacobian(self, t, x):
        """(dT/dt, dT/dx, dX/dt, dX/dx) at (t, x)."""
        t, x = np.broadcast_arrays(np.asarray(t, float), np.asarray(x, float))
        Ttt = 1.0 + self.s * self.b.derivative(t) * self.c(x)
        Ttx = self.s * self.b(t) * self.c.derivative(x)
        return Ttt, Ttx, np.zeros(t.shape), np.ones(t.shape)

    def check_admissible(self, grid: GridSpec, n_fine: int = 2001) -> None:
        tt = np.linspace(self.b.center - self.b.radius, self.b.center + self.b.radius, n_fine)
        xx = np.linspace(0, grid.circumference, 4 * grid.n_x, endpoint=False)
        T, X = np.meshgrid(tt, xx, indexing="ij")
        Ttt, Ttx, _, _ = self.jacobian(T, X)
        if (np.abs(Ttt - 1) >= 1).any() or (np.abs(Ttx) >= 1).any():
            raise AdmissibilityError("flow parameters not admissible (|s b'c| or |s b c'| >= 1)", "FLOW")

    def inverse(self) -> "InverseFlow":
        return InverseFlow(self)


@dataclass(frozen=True)
class InverseFlow:
    """True inverse of a :class:`TimeBumpFlow`, solved by Newton iteration in t."""

    flow: TimeBumpFlow
    tol: float = 1e-15

    @property
    def box(self) -> Box:
        return self.flow.box

    @property
    def max_shift(self) -> float:
        return self.flow.max_shift

    def map(self, t, x):
        t, x = np.broadcast_arrays(np.asarray(t, float), np.asarray(x, float))
        f = self.flow
        T = t.copy()
        for _ in range(60):
            F = T + f.s * f.b(T) * f.c(x) - t
            dF = 1.0 + f.s * f.b.derivative(T) * f.c(x)
            step = F / dF
            T = T - step
            if np.max(np.abs(step), initial=0.0) < self.tol:
                break
        return T, x

    def jacobian(self, t, x):
        T, X = self.map(t, x)
        a, b, _, _ = self.flow.jacobian(T, X)
        return 1.0 / a, -b / a, np.zeros(np.shape(T)), np.ones(np.shape(T))

    def inverse(self) -> TimeBumpFlow:
        return self.flow


def pullback(metric: MetricField, diffeo) -> MetricField:
    """(phi^* g)_{mu nu} = d_mu phi^a d_nu phi^b g_ab o phi with analytic Jacobians."""
    if isinstance(diffeo, TimeBumpFlow):
        diffeo.check_admissible(metric.grid)
    if getattr(diffeo, "flow", diffeo).s == 0:
        return metric

    def evaluator(t, x):
        T, X = diffeo.map(t, x)
        Gtt, Gtx, Gxx = metric.evaluator(T, X)
        Att, Atx, Axt, Axx = diffeo.jacobian(t, x)
        # A[alpha, mu] = d phi^alpha / d x^mu
        gtt = Att * Att * Gtt + 2 * Att * Axt * Gtx + Axt * Axt * Gxx
        gtx = Att * Atx * Gtt + (Att * Axx + Axt * Atx) * Gtx + Axt * Axx * Gxx
        gxx = Atx * Atx * Gtt + 2 * Atx * Axx * Gtx + Axx * Axx * Gxx
        return gtt, gtx, gxx

    shift = diffeo.max_shift
    moved = tuple(Box(b.t0, b.x0, b.r_t + shift, b.r_x) for b in metric.support)
    support = (diffeo.box,) + moved
    return MetricField(metric.grid, evaluator, support, f"pullback({metric.label})")


def lie_derivative_tensor(metric: MetricField, flow: TimeBumpFlow, step: float = 1e-4) -> Components:
    """h = d/ds|_0 phi_s^* g on the grid: central differences at step and step/2, Richardson-combined.

    ``flow`` supplies the profiles b, c; its own parameter s is ignored.
    """

    def central(eps):
        gp = pullback(metric, replace(flow, s=eps)).samples
        gm = pullback(metric, replace(flow, s=-eps)).samples
        return [(a - b) / (2 * eps) for a, b in zip(gp, gm)]

    d1 = central(step)
    d2 = central(step / 2)
    return tuple((4 * b - a) / 3 for a, b in zip(d1, d2))


def lie_derivative_flat(flow: TimeBumpFlow, t, x) -> Components:
    """Analytic L_Z eta for Z = b(t) c(x) d_t on the flat metric."""
    t, x = np.broadcast_arrays(np.asarray(t, float), np.asarray(x, float))
    b, c = flow.b, flow.c
    return 2 * b.derivative(t) * c(x), b(t) * c.derivative(x), np.zeros(t.shape)


# ---------------------------------------------------------------------------
# paths in the space of metrics


@dataclass(frozen=True)
class PathSegment:
    """Straight segment from the previous endpoint to base + sum(target)."""

    target: tuple[PerturbationSpec, ...]
    n_s: int = 5


@dataclass(frozen=True)
class MetricPath:
    base: MetricField
    segments: tuple[PathSegment, ...] = ()
    start: tuple[PerturbationSpec, ...] = ()

    def endpoint_specs(self) -> list[tuple[PerturbationSpec, ...]]:
        pts = [tuple(self.start)]
        pts.extend(tuple(seg.target) for seg in self.segments)
        return pts

    def endpoint_metrics(self) -> list[MetricField]:
        return [build_metric(self.base.grid, specs, base=self.base) for specs in self.endpoint_specs()]

    def sample(self, seg_index: int, s: float) -> MetricField:
        """Metric at parameter s in [0, 1] on the given segment (linear in the perturbations)."""
        pts = self.endpoint_specs()
        a = tuple(p.scaled(1 - s) for p in pts[seg_index])
        b = tuple(p.scaled(s) for p in pts[seg_index + 1])
        return build_metric(self.base.grid, a + b, base=self.base)

    def check(self) -> list[ValidityReport]:
        """Validate every sampled metric on the path; raises on the first inadmissible one."""
        reps = []
        for i, seg in enumerate(self.segments):
            for s in np.linspace(0, 1, seg.n_s):
                m = self.sample(i, float(s))
                rep = validate(m)
                if not rep.valid:
                    raise AdmissibilityError(f"path sample segment {i}, s={s:g} inadmissible")
                reps.append(rep)
        return reps

    @property
    def closed(self) -> bool:
        pts = self.endpoint_specs()
        return pts[0] == pts[-1]

    def reversed(self) -> "MetricPath":
        pts = self.endpoint_specs()[::-1]
        segs = tuple(PathSegment(p, seg.n_s) for p, seg in zip(pts[1:], self.segments[::-1]))
        return MetricPath(self.base, segs, pts[0])

    def concat(self, other: "MetricPath") -> "MetricPath":
        if self.endpoint_specs()[-1] != other.endpoint_specs()[0]:
            raise StructureError("segment endpoints do not match under concatenation")
        return MetricPath(self.base, self.segments + other.segments, self.start)
