"""Ultrastatic ground-state one-particle structure in the Fourier mode basis.

Fourier convention on the n-point grid x_j = j dx of the circle of length C:

    u_hat_k = dx / sqrt(C) * sum_j u_j exp(-i k_eff x_j),   k_eff = 2 pi k / C

so that u_j = sum_k u_hat_k exp(i k_eff x_j) / sqrt(C) on the resolved band and
int f g dx = sum_k conj(f_hat_k) g_hat_k.  Annihilation coordinates are

    a_k = (omega_k^{1/2} u_hat_k + i omega_k^{-1/2} pi_hat_k) / sqrt(2)

for which sum_k conj(a_k(v)) a_k(w) = <pv, pw> = (<v, w>_A - i sigma(v, w)) / 2.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import ConfigError, StructureError
from .geometry import GridSpec
from .wavesolver import CauchyData


@dataclass(frozen=True, eq=False)
class OneParticleStructure:
    grid: GridSpec
    k_max: int

    def __post_init__(self):
        if not self.grid.mass > 0:
            raise ConfigError("mass must be positive", "CFG_MASS")
        if not 0 <= self.k_max <= self.grid.n_x // 2 - 1:
            raise ConfigError(f"k_max must lie in [0, {self.grid.n_x // 2 - 1}]", "CFG_KMAX")

    @property
    def mass(self) -> float:
        return self.grid.mass

    @cached_property
    def modes(self) -> np.ndarray:
        """Integer mode labels -k_max..k_max (mode index i <-> label modes[i])."""
        return np.arange(-self.k_max, self.k_max + 1)

    @property
    def M(self) -> int:
        return self.modes.size

    @cached_property
    def k_eff(self) -> np.ndarray:
        return 2 * np.pi * self.modes / self.grid.circumference

    @cached_property
    def omega(self) -> np.ndarray:
        return np.sqrt(self.k_eff**2 + self.mass**2)

    def index(self, k: int) -> int:
        return int(k + self.k_max)

    @cached_property
    def partner(self) -> np.ndarray:
        """Index of mode -k for each mode index."""
        return self.M - 1 - np.arange(self.M)

    # per-mode 2x2 blocks acting on (u_hat_k, pi_hat_k)
    @cached_property
    def J(self) -> np.ndarray:
        w = self.omega
        out = np.zeros((self.M, 2, 2))
        out[:, 0, 1] = -1 / w
        out[:, 1, 0] = w
        return out

    @cached_property
    def A(self) -> np.ndarray:
        w = self.omega
        out = np.zeros((self.M, 2, 2))
        out[:, 0, 0] = w
        out[:, 1, 1] = 1 / w
        return out

    @cached_property
    def p(self) -> np.ndarray:
        w = self.omega
        out = np.empty((self.M, 2, 2), complex)
        out[:, 0, 0] = 0.5
        out[:, 0, 1] = 0.5j / w
        out[:, 1, 0] = -0.5j * w
        out[:, 1, 1] = 0.5
        return out

    # ------------------------------------------------------------------
    # Fourier coefficient maps

    @cached_property
    def fourier_matrix(self) -> np.ndarray:
        """(M, n) complex: u_hat = F u."""
        g = self.grid
        return g.dx / np.sqrt(g.circumference) * np.exp(-1j * np.outer(self.k_eff, g.x))

    @cached_property
    def synthesis_matrix(self) -> np.ndarray:
        """(n, M) complex: u = S u_hat (real for Hermitian-symmetric u_hat)."""
        g = self.grid
        return np.exp(1j * np.outer(g.x, self.k_eff)) / np.sqrt(g.circumference)

    @cached_property
    def annihilation_matrix(self) -> np.ndarray:
        """(M, 2n) complex Z with a = Z [u; pi] on a flat slice."""
        F = self.fourier_matrix
        w = self.omega[:, None]
        return np.hstack([np.sqrt(w) * F, 1j / np.sqrt(w) * F]) / np.sqrt(2)

    @cached_property
    def reconstruction_matrix(self) -> np.ndarray:
        """(2n, 2M) complex E with [u; pi] = E [a; conj(a)] for data in the truncated band."""
        S = self.synthesis_matrix
        w = self.omega
        P = np.eye(self.M)[self.partner]  # (P x)_k = x_{-k}
        # u_hat_k = (a_k + conj(a)_{-k}) / sqrt(2 w); pi_hat_k = -i sqrt(w) (a_k - conj(a)_{-k}) / sqrt(2)
        Uh = np.hstack([np.diag(1 / np.sqrt(2 * w)), np.diag(1 / np.sqrt(2 * w)) @ P])
        Ph = np.hstack([np.diag(-1j * np.sqrt(w / 2)), np.diag(1j * np.sqrt(w / 2)) @ P])
        return np.vstack([S @ Uh, S @ Ph])

    @cached_property
    def band_projector(self) -> np.ndarray:
        """(2n, 2n) real projector of nodal Cauchy data onto the kept modes."""
        Pr = np.real(self.synthesis_matrix @ self.fourier_matrix)
        Z = np.zeros_like(Pr)
        return np.block([[Pr, Z], [Z, Pr]])


@dataclass(frozen=True)
class ModeAmplitudes:
    a: np.ndarray
    ops: OneParticleStructure

    def __post_init__(self):
        a = np.asarray(self.a, complex)
        if a.shape != (self.ops.M,):
            raise StructureError(f"expected {self.ops.M} amplitudes, got shape {a.shape}")
        object.__setattr__(self, "a", a)


def build(m: float, grid: GridSpec, k_max: int) -> OneParticleStructure:
    if not m > 0:
        raise ConfigError("mass must be positive (zero-mode singularity)", "CFG_MASS")
    if m != grid.mass:
        from dataclasses import replace

        grid = replace(grid, mass=m)
    return OneParticleStructure(grid, k_max)


def _vec(data) -> np.ndarray:
    return data.vector if isinstance(data, CauchyData) else np.asarray(data, float)


def fourier(data, ops: OneParticleStructure) -> tuple[np.ndarray, np.ndarray]:
    """(u_hat, pi_hat) on the kept modes."""
    v = _vec(data)
    n = ops.grid.n_x
    F = ops.fourier_matrix
    return F @ v[:n], F @ v[n:]


def to_modes(data, ops: OneParticleStructure) -> ModeAmplitudes:
    return ModeAmplitudes(ops.annihilation_matrix @ _vec(data), ops)


def from_modes(amps: ModeAmplitudes, slice_time: float = 0.0) -> CauchyData:
    ops = amps.ops
    a = amps.a
    v = ops.reconstruction_matrix @ np.concatenate([a, a.conj()])
    return CauchyData.from_vector(np.real(v), slice_time)


def a_inner(v, w, ops: OneParticleStructure) -> float:
    """<v, w>_A = sum_k Re(omega u_hat* u_hat' + omega^{-1} pi_hat* pi_hat')."""
    uv, pv = fourier(v, ops)
    uw, pw = fourier(w, ops)
    om = ops.omega
    return float(np.real(np.sum(om * uv.conj() * uw + pv.conj() * pw / om)))


def apply_J(data, ops: OneParticleStructure) -> CauchyData:
    """J acting on data in the truncated band: u_hat' = -pi_hat/omega, pi_hat' = omega u_hat."""
    uh, ph = fourier(data, ops)
    S = ops.synthesis_matrix
    om = ops.omega
    u = np.real(S @ (-ph / om))
    p = np.real(S @ (om * uh))
    t = data.slice_time if isinstance(data, CauchyData) else 0.0
    return CauchyData(u, p, t)


def one_particle_inner(v, w, ops: OneParticleStructure) -> complex:
    """<pv, pw> = sum_k conj(a_k(v)) a_k(w)."""
    return complex(np.vdot(to_modes(v, ops).a, to_modes(w, ops).a))


def sobolev_norm(data, s: float, ops: OneParticleStructure) -> float:
    """||u||^2_{H^{s+1/2}} + ||pi||^2_{H^{s-1/2}} with weights (k_eff^2 + m^2)."""
    uh, ph = fourier(data, ops)
    w2 = ops.omega**2
    return float(np.sum(w2 ** (s + 0.5) * np.abs(uh) ** 2 + w2 ** (s - 0.5) * np.abs(ph) ** 2))


def norm_equivalence_bound(ops: OneParticleStructure) -> float:
    """Ratio bound between the kappa-norm and the unit-weight H^{1/2}+H^{-1/2} norm on kept modes."""
    w = ops.omega
    return float(max(w.max(), 1 / w.min()))


def mode_data(ops: OneParticleStructure, k: int, kind: str = "cos", component: str = "u") -> CauchyData:
    """Real trigonometric data cos(k_eff x) or sin(k_eff x) in u or nu."""
    x = ops.grid.x
    ke = 2 * np.pi * k / ops.grid.circumference
    f = np.cos(ke * x) if kind == "cos" else np.sin(ke * x)
    z = np.zeros_like(f)
    return CauchyData(f, z) if component == "u" else CauchyData(z, f)
