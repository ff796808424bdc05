"""Bogoliubov blocks of symplectic maps and Shale diagnostics.

In annihilation coordinates (a, conj(a)) a real symplectic map acts as

    W = [[q, conj(r)], [r, conj(q)]],   a(Wv) = q a(v) + conj(r) conj(a(v)).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import StructureError
from .geometry import GridSpec, build_metric, flat_metric
from .oneparticle import OneParticleStructure
from .wavesolver import EvolutionConfig, SymplecticMap, band_basis, scattering_map


@dataclass(eq=False)
class BogoliubovData:
    q: np.ndarray
    r: np.ndarray
    K: np.ndarray
    L: np.ndarray
    q_inv: np.ndarray
    ops: OneParticleStructure | None = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def M(self) -> int:
        return self.q.shape[0]

    @property
    def hs_norm_r(self) -> float:
        return float(np.linalg.norm(self.r))

    @property
    def op_norm_K(self) -> float:
        return float(np.linalg.norm(self.K, 2))

    @property
    def op_norm_L(self) -> float:
        return float(np.linalg.norm(self.L, 2))

    @property
    def det_factor(self) -> float:
        """det(1 - K^* K) from the singular values of K."""
        s = np.linalg.svd(self.K, compute_uv=False)
        return float(np.prod(1.0 - s**2))

    def complex_matrix(self) -> np.ndarray:
        q, r = self.q, self.r
        return np.block([[q, r.conj()], [r, q.conj()]])

    def identity_defects(self) -> dict:
        q, r = self.q, self.r
        I = np.eye(self.M)
        sv = np.linalg.svd(q, compute_uv=False)
        qr = q.T @ r
        qrT = q @ r.T
        return {
            "qdq_minus_rdr": float(np.abs(q.conj().T @ q - r.conj().T @ r - I).max()),
            "qqd_minus_rbar_rT": float(np.abs(q @ q.conj().T - r.conj() @ r.T - I).max()),
            "qT_r_symmetry": float(np.abs(qr - qr.T).max()),
            "q_rT_symmetry": float(np.abs(qrT - qrT.T).max()),
            "K_symmetry": float(np.abs(self.K - self.K.T).max()),
            "L_symmetry": float(np.abs(self.L - self.L.T).max()),
            "min_singular_q": float(sv.min()),
            "op_norm_K": self.op_norm_K,
            "op_norm_L": self.op_norm_L,
            "q_inv_dual_formula": float(self.diagnostics.get("q_inv_dual_formula", np.nan)),
        }


def kl_operators(q: np.ndarray, r: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, float]:
    """K = conj(r q^{-1}), L = -q^{-1} conj(r); also q^{-1} and its dual-formula discrepancy."""
    M = q.shape[0]
    q_inv = np.linalg.solve(q, np.eye(M))
    q_inv_dual = np.linalg.solve(np.eye(M) + r.conj().T @ r, q.conj().T)
    dual = float(np.abs(q_inv - q_inv_dual).max())
    K = (r @ q_inv).conj()
    L = -q_inv @ r.conj()
    return K, L, q_inv, dual


def from_blocks(q: np.ndarray, r: np.ndarray, ops: OneParticleStructure | None = None) -> BogoliubovData:
    q = np.asarray(q, complex)
    r = np.asarray(r, complex)
    K, L, q_inv, dual = kl_operators(q, r)
    return BogoliubovData(q, r, K, L, q_inv, ops, {"q_inv_dual_formula": dual})


def blocks(W, ops: OneParticleStructure, structure_tol: float = 1e-10) -> BogoliubovData:
    """Bogoliubov blocks of a nodal (u, nu) map on the kept modes of ``ops``."""
    Wm = W.matrix if isinstance(W, SymplecticMap) else np.asarray(W, float)
    n = ops.grid.n_x
    if Wm.shape != (2 * n, 2 * n):
        raise StructureError(f"map of shape {Wm.shape} does not match the grid")
    Z = ops.annihilation_matrix
    T = np.vstack([Z, Z.conj()])
    E = ops.reconstruction_matrix
    Wc = T @ Wm @ E
    M = ops.M
    q, rb, r, qb = Wc[:M, :M], Wc[:M, M:], Wc[M:, :M], Wc[M:, M:]
    scale = max(1.0, np.abs(Wc).max())
    struct = max(np.abs(rb - r.conj()).max(), np.abs(qb - q.conj()).max()) / scale
    if struct > structure_tol:
        raise StructureError(f"conjugate-block structure violated by {struct:.2e}; input not a real map")
    b = from_blocks(q, r, ops)
    b.diagnostics["block_structure"] = float(struct)
    b.diagnostics["symplectic_defect"] = float(np.abs(b.complex_matrix().conj().T
                                                      @ np.diag(np.r_[np.ones(M), -np.ones(M)])
                                                      @ b.complex_matrix()
                                                      - np.diag(np.r_[np.ones(M), -np.ones(M)])).max())
    return b


def inverse_blocks(b: BogoliubovData) -> BogoliubovData:
    """Blocks of W^{-1}: q' = q^*, r' = -r^T."""
    return from_blocks(b.q.conj().T, -b.r.T, b.ops)


def compose(b1: BogoliubovData, b2: BogoliubovData) -> BogoliubovData:
    """Blocks of W1 W2."""
    q = b1.q @ b2.q + b1.r.conj() @ b2.r
    r = b1.r @ b2.q + b1.q.conj() @ b2.r
    return from_blocks(q, r, b1.ops)


def identity_blocks(M: int, ops=None) -> BogoliubovData:
    return from_blocks(np.eye(M), np.zeros((M, M)), ops)


def squeeze_map(ops: OneParticleStructure, k: int, lam: float) -> SymplecticMap:
    """u -> lam u, pi -> pi / lam on the Fourier pair +-k (nodal matrix)."""
    n = ops.grid.n_x
    B = band_basis(n, abs(k))
    cols = [0] if k == 0 else [2 * abs(k) - 1, 2 * abs(k)]
    Pk = B[:, cols] @ B[:, cols].T
    M = np.eye(2 * n)
    M[:n, :n] += (lam - 1) * Pk
    M[n:, n:] += (1 / lam - 1) * Pk
    return SymplecticMap(M, 0.0, 0.0, f"squeeze(k={k},lam={lam:g})")


def random_symplectic_blocks(M: int, scale: float, rng: np.random.Generator) -> BogoliubovData:
    """exp of a random small Hamiltonian generator in (a, conj a) form."""
    from scipy.linalg import expm

    A = rng.normal(size=(M, M)) + 1j * rng.normal(size=(M, M))
    A = 0.5 * (A - A.conj().T)  # anti-Hermitian: passive part
    B = rng.normal(size=(M, M)) + 1j * rng.normal(size=(M, M))
    B = 0.5 * (B + B.T)  # symmetric: active part
    X = scale * np.block([[A, B.conj()], [B, A.conj()]])
    Wc = expm(X)
    return from_blocks(Wc[:M, :M], Wc[M:, :M])


# ---------------------------------------------------------------------------
# Shale sweep


@dataclass
class ShaleReport:
    cutoffs: list
    hs_norm_r: list
    modes: np.ndarray
    omega: np.ndarray
    row_norm: np.ndarray
    tail_decay_exponent: float
    tail_fraction: float
    passes: bool
    monotone: bool

    def to_dict(self) -> dict:
        return {
            "cutoffs": list(map(int, self.cutoffs)),
            "hs_norm_r": [float(v) for v in self.hs_norm_r],
            "tail_decay_exponent": self.tail_decay_exponent,
            "tail_fraction": self.tail_fraction,
            "passes": self.passes,
            "monotone": self.monotone,
        }

    def csv_rows(self):
        return [(int(k), float(rn), float(w)) for k, rn, w in zip(self.modes, self.row_norm, self.omega)]


def row_norms(b: BogoliubovData) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per |k| root-mean-square row norm of r over the +-k rows."""
    ops = b.ops
    kmax = ops.k_max
    out = []
    for k in range(kmax + 1):
        rows = [ops.index(k)] if k == 0 else [ops.index(k), ops.index(-k)]
        out.append(np.sqrt(np.mean([np.sum(np.abs(b.r[i]) ** 2) for i in rows])))
    ks = np.arange(kmax + 1)
    w = np.sqrt((2 * np.pi * ks / ops.grid.circumference) ** 2 + ops.mass**2)
    return ks, np.array(out), w


def shale_from_map(W: SymplecticMap, grid: GridSpec, cutoffs, fit_from: int = 2,
                   tail_limit: float = 0.01, slope_limit: float = -4.0, noise_floor: float = 1e-12) -> ShaleReport:
    cutoffs = sorted(int(c) for c in cutoffs)
    hs = []
    last = None
    for c in cutoffs:
        b = blocks(W, OneParticleStructure(grid, c), structure_tol=1e-8)
        hs.append(b.hs_norm_r)
        last = b
    ks, rn, w = row_norms(last)
    total = float(np.sum(np.abs(last.r) ** 2))
    kmax = cutoffs[-1]
    if np.sqrt(total) < noise_floor:  # nothing to fit: r vanishes to roundoff
        return ShaleReport(cutoffs, hs, ks, w, rn, float("-inf"), 0.0, True, True)
    sel = (ks >= fit_from) & (rn > 0)
    slope = float(np.polyfit(np.log(w[sel]), np.log(rn[sel]), 1)[0]) if sel.sum() >= 2 else float("nan")
    ops = last.ops
    top = np.abs(ops.modes) > 0.75 * kmax
    tail = float(np.sum(np.abs(last.r[top]) ** 2) / total)
    monotone = bool(np.all(np.diff(hs) >= -1e-14 * max(hs)))
    passes = bool(tail < tail_limit and slope <= slope_limit)
    return ShaleReport(cutoffs, hs, ks, w, rn, slope, tail, passes, monotone)


def shale_sweep(grid: GridSpec, specs, cutoffs, t_minus: float, t_plus: float,
                cfg: EvolutionConfig = EvolutionConfig(), **kw) -> ShaleReport:
    """Full-resolution scattering map of the scenario, then r at increasing mode cutoffs."""
    g = build_metric(grid, specs)
    W = scattering_map(g, flat_metric(grid), t_minus, t_plus, cfg)
    return shale_from_map(W, grid, cutoffs, **kw)


# ---------------------------------------------------------------------------
# smoothness of the blocks in a parameter


def block_derivatives(family, s: float, eps_ladder=(1e-2, 5e-3, 2.5e-3)) -> dict:
    """Central differences of (q, r) for ``family(s) -> BogoliubovData`` on an eps ladder.

    Returns the Richardson estimate and the observed convergence order.
    """
    ests = []
    for e in eps_ladder:
        bp, bm = family(s + e), family(s - e)
        ests.append(np.concatenate([((bp.q - bm.q) / (2 * e)).ravel(), ((bp.r - bm.r) / (2 * e)).ravel()]))
    d01 = np.linalg.norm(ests[0] - ests[1])
    d12 = np.linalg.norm(ests[1] - ests[2])
    ratio = eps_ladder[0] / eps_ladder[1]
    order = float(np.log(d01 / d12) / np.log(ratio)) if d12 > 0 and d01 > 0 else float("inf")
    rich = ests[2] + (ests[2] - ests[1]) / (ratio**2 - 1)
    return {"derivative": rich, "order": order, "increments": (float(d01), float(d12))}
