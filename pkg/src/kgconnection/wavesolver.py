"""Klein-Gordon Cauchy evolution on the cylinder and symplectic scattering maps.

The field is discretized by a real Fourier (spectral) basis of the band |k| <= K on the
n_x-point grid.  In canonical variables (u, P) with P the densitized momentum the
semi-discrete equations are Hamiltonian:

    v   = (P / a - g^tx D u) / g^tt,          a = sqrt(-det g)
    u_t = v
    P_t = -D (a (g^tx v + g^xx D u)) - a m^2 u

Galerkin projection onto the band keeps the flow exactly Hamiltonian; modes outside the
band (always including the Nyquist mode) are left untouched.  The full solve uses
K = n_x/2 - 1; a band solve with K = k_max gives an exactly symplectic low-mode model.
Time stepping is classical RK4 on the global step grid ``t_min + j h``; steps on which
the metric is exactly flat use the exact flat propagator.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.linalg import expm

from .errors import CFLError, PreconditionError, StructureError
from .geometry import Box, GridSpec, MetricField, circular_offset

RK4_STABILITY = 2.78


@dataclass(frozen=True)
class EvolutionConfig:
    scheme: str = "rk4"
    substeps_per_dt: int = 5
    spatial_derivative: str = "spectral"
    band: int | None = None  # None: every resolved mode |k| <= n_x/2 - 1
    exact_flat_steps: bool = True

    def __post_init__(self):
        if self.scheme != "rk4":
            raise StructureError(f"unsupported scheme {self.scheme!r}")
        if self.spatial_derivative != "spectral":
            raise StructureError(f"unsupported spatial derivative {self.spatial_derivative!r}")
        if int(self.substeps_per_dt) < 1:
            raise StructureError("substeps_per_dt must be >= 1")


@dataclass(frozen=True)
class CauchyData:
    u: np.ndarray
    nu: np.ndarray
    slice_time: float = 0.0

    def __post_init__(self):
        u = np.asarray(self.u, float)
        nu = np.asarray(self.nu, float)
        if u.shape != nu.shape or u.ndim != 1:
            raise StructureError("u and nu must be 1-d arrays of equal length")
        if not (np.isfinite(u).all() and np.isfinite(nu).all()):
            raise StructureError("Cauchy data must be finite")
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "nu", nu)

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.u, self.nu])

    @classmethod
    def from_vector(cls, v, slice_time: float = 0.0) -> "CauchyData":
        v = np.asarray(v, float)
        n = v.size // 2
        return cls(v[:n], v[n:], slice_time)


@dataclass(frozen=True, eq=False)
class SymplecticMap:
    matrix: np.ndarray
    source_time: float
    target_time: float
    metric_id: str = ""

    @property
    def n(self) -> int:
        return self.matrix.shape[0] // 2

    def __matmul__(self, other):
        if isinstance(other, SymplecticMap):
            return SymplecticMap(self.matrix @ other.matrix, other.source_time, self.target_time,
                                 f"{self.metric_id}*{other.metric_id}")
        if isinstance(other, CauchyData):
            return CauchyData.from_vector(self.matrix @ other.vector, self.target_time)
        return self.matrix @ other

    def inverse(self) -> "SymplecticMap":
        return SymplecticMap(np.linalg.inv(self.matrix), self.target_time, self.source_time,
                             f"inv({self.metric_id})")

    def to_json(self) -> dict:
        """Column-major portable representation."""
        return {
            "shape": list(self.matrix.shape),
            "order": "F",
            "data": [float(v) for v in self.matrix.ravel(order="F")],
            "source_time": self.source_time,
            "target_time": self.target_time,
            "metric_id": self.metric_id,
        }

    @classmethod
    def from_json(cls, d: dict) -> "SymplecticMap":
        M = np.array(d["data"], float).reshape(d["shape"], order="F")
        return cls(M, d["source_time"], d["target_time"], d.get("metric_id", ""))


# ---------------------------------------------------------------------------
# spectral operators


@lru_cache(maxsize=32)
def spectral_derivative(n: int, circumference: float) -> np.ndarray:
    """Real antisymmetric Fourier derivative matrix with the Nyquist component removed."""
    k = np.fft.fftfreq(n, d=1.0 / n) * (2 * np.pi / circumference)
    k[n // 2] = 0.0
    F = np.fft.fft(np.eye(n), axis=0)
    D = np.real(np.fft.ifft(1j * k[:, None] * F, axis=0))
    D = 0.5 * (D - D.T)
    D.setflags(write=False)
    return D


@lru_cache(maxsize=32)
def band_basis(n: int, band: int) -> np.ndarray:
    """Orthonormal real basis (n, 2*band+1) of grid functions with |k| <= band."""
    if not 0 <= band <= n // 2 - 1:
        raise StructureError(f"band must lie in [0, {n // 2 - 1}], got {band}")
    j = np.arange(n)
    cols = [np.full(n, 1 / np.sqrt(n))]
    for k in range(1, band + 1):
        cols.append(np.sqrt(2 / n) * np.cos(2 * np.pi * k * j / n))
        cols.append(np.sqrt(2 / n) * np.sin(2 * np.pi * k * j / n))
    B = np.array(cols).T
    B.setflags(write=False)
    return B


def symplectic_matrix(n: int) -> np.ndarray:
    """Unit-weight block form [[0, -I], [I, 0]]; sigma(v, w) = v^T Omega w * dx on flat slices."""
    I = np.eye(n)
    Z = np.zeros((n, n))
    return np.block([[Z, -I], [I, Z]])


def symplectic_form(v: CauchyData, w: CauchyData, metric_at_slice=None, dx: float = 1.0) -> float:
    """sigma((h, hdot), (f, fdot)) = int (f hdot - h fdot) dVol with dVol = sqrt(-g_xx) dx.

    ``metric_at_slice`` is the tuple (g_tt, g_tx, g_xx) on the slice (flat if None).
    """
    if v.u.shape != w.u.shape:
        raise StructureError("Cauchy data live on different grids")
    if metric_at_slice is None:
        rho = 1.0
    else:
        rho = np.sqrt(-np.asarray(metric_at_slice[2], float))
    return float(np.sum((w.u * v.nu - v.u * w.nu) * rho) * dx)


def symplectic_defect(M, weights=None) -> float:
    """max |M^T Omega M - Omega| for the unit-weight form."""
    M = M.matrix if isinstance(M, SymplecticMap) else np.asarray(M)
    n = M.shape[0] // 2
    Om = symplectic_matrix(n)
    return float(np.abs(M.T @ Om @ M - Om).max())


# ---------------------------------------------------------------------------
# semi-discrete Hamiltonian operator


class _Operator:
    """Builds the reduced generator L(t) in the band basis for a given metric."""

    def __init__(self, metric: MetricField, band: int):
        grid = metric.grid
        n = grid.n_x
        self.metric = metric
        self.grid = grid
        self.B = band_basis(n, band)
        self.DB = spectral_derivative(n, grid.circumference) @ self.B
        self.d = self.B.shape[1]
        self.m2 = grid.mass**2
        self._flat_step: dict[float, np.ndarray] = {}

    def coefficients(self, t: float):
        gtt, gtx, gxx = self.metric.at(t)
        det = gtt * gxx - gtx**2
        a = np.sqrt(-det)
        Gtt = gxx / det
        Gtx = -gtx / det
        Gxx = gtt / det
        return a, Gtt, Gtx, Gxx, gxx

    def generator(self, t: float) -> np.ndarray:
        a, Gtt, Gtx, Gxx, _ = self.coefficients(t)
        B, DB = self.B, self.DB
        c_up = 1.0 / (a * Gtt)
        f = Gtx / Gtt
        e = a * (Gxx - Gtx * f)
        L_uu = -B.T @ (f[:, None] * DB)
        L_up = B.T @ (c_up[:, None] * B)
        L_pu = DB.T @ (e[:, None] * DB) - B.T @ ((a * self.m2)[:, None] * B)
        L_pp = DB.T @ (f[:, None] * B)
        return np.block([[L_uu, L_up], [L_pu, L_pp]])

    def max_rate(self, t: float) -> float:
        """Bound on the spectral radius of L(t) used for the RK4 stability check."""
        a, Gtt, Gtx, Gxx, _ = self.coefficients(t)
        kmax = np.pi * self.grid.n_x / self.grid.circumference
        # characteristic speeds: (-g^tx +- sqrt(g^tx^2 - g^tt g^xx)) / g^tt
        disc = np.sqrt(np.maximum(Gtx**2 - Gtt * Gxx, 0.0))
        speed = np.max((np.abs(Gtx) + disc) / Gtt)
        return float(speed * kmax + self.grid.mass * np.max(1 / np.sqrt(np.abs(Gtt))))

    def flat_step(self, h: float) -> np.ndarray:
        key = round(h, 15)
        if key not in self._flat_step:
            flat = MetricField(self.grid)
            self._flat_step[key] = expm(h * _Operator(flat, (self.d - 1) // 2).generator(0.0))
        return self._flat_step[key]


def _slice_factor(metric: MetricField, t: float) -> np.ndarray:
    """rho = sqrt(-g_xx) converting nu to the densitized momentum P = rho * nu."""
    return np.sqrt(-metric.at(t)[2])


def _lift(metric: MetricField, band: int, V_red: np.ndarray, t0: float, t1: float) -> np.ndarray:
    """Assemble the nodal (u, nu) map from the reduced (u, P) propagator."""
    n = metric.grid.n_x
    B = band_basis(n, band)
    Bt = np.zeros((2 * n, 2 * B.shape[1]))
    Bt[:n, : B.shape[1]] = B
    Bt[n:, B.shape[1]:] = B
    M = Bt @ V_red @ Bt.T + (np.eye(2 * n) - Bt @ Bt.T)
    r0 = _slice_factor(metric, t0)
    r1 = _slice_factor(metric, t1)
    # nu -> P on the source slice, P -> nu on the target slice
    M[:, n:] *= r0[None, :]
    M[n:, :] /= r1[:, None]
    return M


def _step_grid(grid: GridSpec, cfg: EvolutionConfig, t0: float, t1: float) -> list[tuple[float, float]]:
    h = grid.dt / cfg.substeps_per_dt
    if t1 == t0:
        return []
    sgn = 1.0 if t1 > t0 else -1.0
    lo, hi = min(t0, t1), max(t0, t1)
    j0 = int(np.ceil((lo - grid.t_min) / h - 1e-9))
    j1 = int(np.floor((hi - grid.t_min) / h + 1e-9))
    nodes = [grid.t_min + j * h for j in range(j0, j1 + 1)]
    nodes = [lo] + [t for t in nodes if lo + 1e-12 < t < hi - 1e-12] + [hi]
    steps = list(zip(nodes[:-1], nodes[1:]))
    if sgn < 0:
        steps = [(b, a) for a, b in steps[::-1]]
    return steps


def reduced_propagator(metric: MetricField, t0: float, t1: float, cfg: EvolutionConfig) -> np.ndarray:
    """Propagator of the reduced (u, P) band coordinates from t0 to t1."""
    grid = metric.grid
    band = grid.n_x // 2 - 1 if cfg.band is None else cfg.band
    op = _Operator(metric, band)
    steps = _step_grid(grid, cfg, t0, t1)
    dim = 2 * op.d
    Y = np.eye(dim)
    checked = False
    for ta, tb in steps:
        h = tb - ta
        if cfg.exact_flat_steps and metric.is_flat_on(min(ta, tb), max(ta, tb)):
            Y = op.flat_step(h) @ Y
            continue
        if not checked:
            rate = op.max_rate(ta)
            if abs(h) * rate > RK4_STABILITY:
                raise CFLError(
                    f"step {abs(h):.3g} times max rate {rate:.3g} exceeds RK4 stability; increase substeps_per_dt"
                )
            checked = True
        L1 = op.generator(ta)
        Lm = op.generator(ta + h / 2)
        L2 = op.generator(tb)
        k1 = L1 @ Y
        k2 = Lm @ (Y + (h / 2) * k1)
        k3 = Lm @ (Y + (h / 2) * k2)
        k4 = L2 @ (Y + h * k3)
        Y = Y + (h / 6) * (k1 + 2 * k2 + 2 * k3 + k4)
    return Y


def step_cauchy(metric: MetricField, data: CauchyData, t0: float, t1: float, cfg: EvolutionConfig = EvolutionConfig()) -> CauchyData:
    """Evolve Cauchy data (u, d_n u) from the slice t0 to the slice t1."""
    grid = metric.grid
    if data.u.size != grid.n_x:
        raise StructureError("data length does not match the grid")
    if not (grid.t_min - 1e-12 <= min(t0, t1) and max(t0, t1) <= grid.t_max + 1e-12):
        raise PreconditionError("time interval outside the grid")
    M = evolution_map(metric, t0, t1, cfg)
    return CauchyData.from_vector(M.matrix @ data.vector, t1)


def evolution_map(metric: MetricField, t_minus: float, t_plus: float, cfg: EvolutionConfig = EvolutionConfig()) -> SymplecticMap:
    """Matrix of the Cauchy evolution (u, nu) at t_minus -> (u, nu) at t_plus."""
    band = metric.grid.n_x // 2 - 1 if cfg.band is None else cfg.band
    V = reduced_propagator(metric, t_minus, t_plus, cfg)
    return SymplecticMap(_lift(metric, band, V, t_minus, t_plus), t_minus, t_plus, metric.label)


def scattering_map(g_pert: MetricField, g_ref: MetricField, t_minus: float, t_plus: float,
                   cfg: EvolutionConfig = EvolutionConfig()) -> SymplecticMap:
    """W = V(g_pert)^{-1} V(g_ref); source and target both at t_minus."""
    V = evolution_map(g_pert, t_minus, t_plus, cfg).matrix
    V0 = evolution_map(g_ref, t_minus, t_plus, cfg).matrix
    W = np.linalg.solve(V, V0)
    if not np.isfinite(W).all():
        raise StructureError("singular evolution map in scattering solve")
    return SymplecticMap(W, t_minus, t_minus, f"W({g_pert.label}|{g_ref.label})")


# ---------------------------------------------------------------------------
# flat evolution oracle


def flat_mode_block(k_eff: float, mass: float, dt: float) -> np.ndarray:
    w = np.hypot(k_eff, mass)
    c, s = np.cos(w * dt), np.sin(w * dt)
    return np.array([[c, s / w], [-w * s, c]])


def flat_evolution_exact(grid: GridSpec, dt: float) -> np.ndarray:
    """Exact nodal (u, nu) flat evolution over time dt; Nyquist mode frozen."""
    n = grid.n_x
    k = np.fft.fftfreq(n, d=1.0 / n)
    w = np.hypot(2 * np.pi * k / grid.circumference, grid.mass)
    c, s = np.cos(w * dt), np.sin(w * dt)
    nyq = n // 2
    c[nyq], s[nyq] = 1.0, 0.0
    F = np.fft.fft(np.eye(n), axis=0)
    Fi = np.fft.ifft(np.eye(n), axis=0)

    def mult(d):
        return np.real(Fi @ (d[:, None] * F))

    sw = s / w
    sw[nyq] = 0.0
    ws = -w * s
    ws[nyq] = 0.0
    return np.block([[mult(c), mult(sw)], [mult(ws), mult(c)]])


# ---------------------------------------------------------------------------
# locality diagnostics


def causal_shadow(h_support: Box, t_minus: float, dx: float, circumference: float, dilation: int = 2) -> tuple[float, float]:
    """Spatial interval on the slice t_minus causally connected (light speed 1) to the box."""
    top = h_support.t0 + h_support.r_t
    half = h_support.r_x + max(top - t_minus, 0.0) + dilation * dx
    return (h_support.x0 - half, h_support.x0 + half)


def _outside(x, shadow, circumference) -> np.ndarray:
    lo, hi = shadow
    if hi - lo >= circumference:
        return np.zeros(np.shape(x), bool)
    mid = 0.5 * (lo + hi)
    return np.abs(circular_offset(x, mid, circumference)) > 0.5 * (hi - lo)


def smooth_frame(grid: GridSpec, shadow, radius: float = 4.0, sharpness: float = 8.0) -> np.ndarray:
    """Columns: localized bumps whose support lies outside the shadow (possibly none)."""
    from .geometry import bump

    x = grid.x
    C = grid.circumference
    cols = []
    for xc in x:
        lo, hi = shadow
        if hi - lo >= C:
            break
        # support [xc - radius, xc + radius] must avoid the shadow
        pts = np.linspace(xc - radius, xc + radius, 33)
        if _outside(pts, shadow, C).all():
            cols.append(bump(circular_offset(x, xc, C) / radius, sharpness))
    if not cols:
        return np.zeros((grid.n_x, 0))
    return np.array(cols).T


@dataclass
class SupportReport:
    max_entry_outside_shadow: float
    max_entry_inside_shadow: float
    smooth_defect_outside: float
    shadow: tuple[float, float]
    n_outside_nodes: int
    n_frame: int
    vacuous: bool
    notes: str = ""

    def to_dict(self) -> dict:
        return {
            "max_entry_outside_shadow": self.max_entry_outside_shadow,
            "max_entry_inside_shadow": self.max_entry_inside_shadow,
            "smooth_defect_outside": self.smooth_defect_outside,
            "shadow": list(self.shadow),
            "n_outside_nodes": self.n_outside_nodes,
            "n_frame": self.n_frame,
            "vacuous": self.vacuous,
            "notes": self.notes,
        }


def support_profile(W: SymplecticMap, h_support: Box, grid: GridSpec, t_minus: float | None = None,
                    frame_radius: float = 4.0, frame_sharpness: float = 8.0) -> SupportReport:
    """Coupling of W - I to data outside the causal shadow of ``h_support``.

    Reports both the nodal entries and the response on a frame of smooth bumps supported
    outside the shadow (applied on the column side and the row side, in both the u and
    nu components).
    """
    t_minus = W.source_time if t_minus is None else t_minus
    n = grid.n_x
    E = W.matrix - np.eye(2 * n)
    shadow = causal_shadow(h_support, t_minus, grid.dx, grid.circumference)
    out = _outside(grid.x, shadow, grid.circumference)
    out2 = np.concatenate([out, out])
    if not out.any():
        return SupportReport(0.0, float(np.abs(E).max()), 0.0, shadow, 0, 0, True,
                             "shadow covers the whole circle; test is vacuous")
    nodal_out = max(np.abs(E[:, out2]).max(), np.abs(E[out2, :]).max())
    inside = ~out2
    nodal_in = float(np.abs(E[np.ix_(inside, inside)]).max())
    F = smooth_frame(grid, shadow, frame_radius, frame_sharpness)
    smooth = 0.0
    if F.shape[1]:
        Z = np.zeros_like(F)
        frame = np.hstack([np.vstack([F, Z]), np.vstack([Z, F])])
        scale = np.abs(frame).max(axis=0)
        col = np.abs(E @ frame).max(axis=0) / scale
        row = np.abs(E.T @ frame).max(axis=0) / scale
        smooth = float(max(col.max(), row.max()))
    return SupportReport(float(nodal_out), nodal_in, smooth, shadow, int(out.sum()), int(F.shape[1]), F.shape[1] == 0)
