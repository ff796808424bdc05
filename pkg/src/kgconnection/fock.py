"""Truncated bosonic Fock space with total-occupation cutoff.

Basis states are multisets of mode indices ordered by particle number, then
lexicographically by the sorted index tuple; states of particle number <= s therefore
form a prefix of the basis.  Operators are scipy sparse matrices; matrix elements that
would leave the truncated space are dropped.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from itertools import combinations_with_replacement
from math import comb

import numpy as np
import scipy.sparse as sp
from scipy.linalg import logm
from scipy.sparse.linalg import expm_multiply

from .bogoliubov import BogoliubovData, compose
from .errors import PreconditionError, StructureError
from .oneparticle import OneParticleStructure, to_modes


class FockBasis:
    def __init__(self, M: int, n_max: int):
        if M < 1 or n_max < 0:
            raise StructureError("need M >= 1 and n_max >= 0")
        if (M + 1) ** max(n_max, 1) >= 2**62:
            raise StructureError("basis too large for integer state keys")
        self.M = M
        self.n_max = n_max
        rows = []
        sectors = []
        for n in range(n_max + 1):
            for c in combinations_with_replacement(range(M), n):
                rows.append(list(c) + [M] * (n_max - n))
                sectors.append(n)
        self.P = np.array(rows, dtype=np.int64).reshape(len(rows), n_max)
        self.sector = np.array(sectors, dtype=np.int64)
        self.dim = len(rows)
        self._weights = (M + 1) ** np.arange(n_max - 1, -1, -1, dtype=np.int64)
        keys = self.P @ self._weights if n_max else np.zeros(1, np.int64)
        self._order = np.argsort(keys)
        self._sorted_keys = keys[self._order]
        self.offsets = np.searchsorted(self.sector, np.arange(n_max + 2))
        self._ladder: dict[int, sp.csr_matrix] = {}

    def __repr__(self):
        return f"FockBasis(M={self.M}, n_max={self.n_max}, dim={self.dim})"

    def __eq__(self, other):
        return isinstance(other, FockBasis) and (self.M, self.n_max) == (other.M, other.n_max)

    def __hash__(self):
        return hash((self.M, self.n_max))

    @staticmethod
    def dimension(M: int, n_max: int) -> int:
        return comb(M + n_max, n_max)

    @cached_property
    def occupations(self) -> np.ndarray:
        occ = np.zeros((self.dim, self.M), dtype=np.int64)
        for k in range(self.n_max):
            col = self.P[:, k]
            m = col < self.M
            np.add.at(occ, (np.nonzero(m)[0], col[m]), 1)
        return occ

    @property
    def states(self) -> list[tuple[int, ...]]:
        return [tuple(int(v) for v in row) for row in self.occupations]

    def sector_slice(self, n: int) -> slice:
        return slice(int(self.offsets[n]), int(self.offsets[n + 1]))

    def prefix(self, n: int) -> int:
        """Number of basis states with particle number <= n."""
        return int(self.offsets[min(n, self.n_max) + 1])

    def lookup(self, P: np.ndarray) -> np.ndarray:
        """Indices of the (row-sorted, sentinel-padded) multisets in P."""
        keys = P @ self._weights
        pos = np.searchsorted(self._sorted_keys, keys)
        pos = np.minimum(pos, self.dim - 1)
        if not np.array_equal(self._sorted_keys[pos], keys):
            raise StructureError("state outside the truncated basis")
        return self._order[pos]

    def index(self, occupation) -> int:
        occ = list(occupation)
        if len(occ) != self.M or sum(occ) > self.n_max:
            raise StructureError("occupation not in basis")
        row = [i for i, c in enumerate(occ) for _ in range(c)]
        row += [self.M] * (self.n_max - len(row))
        return int(self.lookup(np.array([row], dtype=np.int64))[0])

    def vacuum(self) -> np.ndarray:
        v = np.zeros(self.dim, complex)
        v[0] = 1.0
        return v

    def basis_vector(self, occupation) -> np.ndarray:
        v = np.zeros(self.dim, complex)
        v[self.index(occupation)] = 1.0
        return v

    def _insert(self, rows: np.ndarray, modes: list[np.ndarray]) -> np.ndarray:
        """Multisets of ``rows`` with the given modes added (rows must have room)."""
        P = self.P[rows].copy()
        n = self.sector[rows]
        for j, m in enumerate(modes):
            P[np.arange(len(rows)), n + j] = m
        P.sort(axis=1)
        return self.lookup(P)

    def creation_ladder(self, j: int) -> sp.csr_matrix:
        """a*_j as a sparse matrix."""
        if j not in self._ladder:
            rows = np.nonzero(self.sector < self.n_max)[0]
            tgt = self._insert(rows, [np.full(rows.size, j)])
            coef = np.sqrt(self.occupations[rows, j] + 1.0)
            self._ladder[j] = sp.csr_matrix((coef.astype(complex), (tgt, rows)), shape=(self.dim, self.dim))
        return self._ladder[j]

    @cached_property
    def number(self) -> sp.csr_matrix:
        return sp.diags(self.sector.astype(complex)).tocsr()


@dataclass
class FockVector:
    coeffs: np.ndarray
    basis: FockBasis

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, complex)
        if self.coeffs.shape[0] != self.basis.dim:
            raise StructureError("coefficient length does not match basis")
        if not np.isfinite(self.coeffs).all():
            raise StructureError("non-finite Fock coefficients")

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.coeffs))

    def sector_norms(self) -> np.ndarray:
        b = self.basis
        return np.array([np.linalg.norm(self.coeffs[b.sector_slice(n)]) for n in range(b.n_max + 1)])

    def to_dict(self) -> dict:
        nz = np.nonzero(np.abs(self.coeffs) > 0)[0]
        return {
            "M": self.basis.M,
            "n_max": self.basis.n_max,
            "entries": [[list(self.basis.occupations[i].tolist()), float(self.coeffs[i].real), float(self.coeffs[i].imag)]
                        for i in nz],
        }


@dataclass
class FockOperator:
    matrix: sp.csr_matrix
    basis: FockBasis
    raises_by: frozenset = field(default_factory=frozenset)

    @property
    def number_conserving(self) -> bool:
        return self.raises_by <= {0}

    def __matmul__(self, other):
        if isinstance(other, FockOperator):
            rb = frozenset(a + b for a in self.raises_by for b in other.raises_by)
            return FockOperator((self.matrix @ other.matrix).tocsr(), self.basis, rb)
        if isinstance(other, FockVector):
            return FockVector(self.matrix @ other.coeffs, self.basis)
        return self.matrix @ other

    def __add__(self, other: "FockOperator") -> "FockOperator":
        return FockOperator((self.matrix + other.matrix).tocsr(), self.basis, self.raises_by | other.raises_by)

    def __sub__(self, other: "FockOperator") -> "FockOperator":
        return FockOperator((self.matrix - other.matrix).tocsr(), self.basis, self.raises_by | other.raises_by)

    def scale(self, c) -> "FockOperator":
        return FockOperator((c * self.matrix).tocsr(), self.basis, self.raises_by)

    @property
    def H(self) -> "FockOperator":
        return FockOperator(self.matrix.conj().T.tocsr(), self.basis, frozenset(-v for v in self.raises_by))

    def sparsity_consistent(self) -> bool:
        """Every nonzero entry changes the particle number by an allowed amount."""
        coo = self.matrix.tocoo()
        mask = coo.data != 0
        d = self.basis.sector[coo.row[mask]] - self.basis.sector[coo.col[mask]]
        return bool(np.isin(d, list(self.raises_by)).all()) if d.size else True

    def dense(self) -> np.ndarray:
        return self.matrix.toarray()


def _vec(v, M):
    v = np.asarray(v, complex).ravel()
    if v.size != M:
        raise StructureError(f"mode vector of length {v.size} for {M} modes")
    return v


def create(v, basis: FockBasis) -> FockOperator:
    """a*(v) = sum_j v_j a*_j (linear in v)."""
    v = _vec(v, basis.M)
    mat = sp.csr_matrix((basis.dim, basis.dim), dtype=complex)
    for j in np.nonzero(v)[0]:
        mat = mat + v[j] * basis.creation_ladder(int(j))
    return FockOperator(mat.tocsr(), basis, frozenset({1}))


def annihilate(v, basis: FockBasis) -> FockOperator:
    """a(v) = a*(v)^* (antilinear in v)."""
    return create(v, basis).H


def _check_symmetric(K, tol=1e-12):
    K = np.asarray(K, complex)
    if K.ndim != 2 or K.shape[0] != K.shape[1]:
        raise StructureError("pair operator needs a square matrix")
    if np.abs(K - K.T).max() > tol * max(1.0, np.abs(K).max()):
        raise StructureError("pair operator needs a symmetric (K = K^T) matrix")
    return K


def pair_create(K, basis: FockBasis) -> FockOperator:
    """a*(K) = sum_ij K_ij a*_i a*_j for symmetric K; raises particle number by 2."""
    K = _check_symmetric(K)
    M = basis.M
    if K.shape[0] != M:
        raise StructureError("matrix size does not match the number of modes")
    rows = np.nonzero(basis.sector <= basis.n_max - 2)[0]
    iu, ju = np.triu_indices(M)
    w = np.where(iu == ju, 1.0, 2.0) * K[iu, ju]
    keep = w != 0
    iu, ju, w = iu[keep], ju[keep], w[keep]
    if rows.size == 0 or iu.size == 0:
        return FockOperator(sp.csr_matrix((basis.dim, basis.dim), dtype=complex), basis, frozenset({2}))
    R = np.repeat(rows, iu.size)
    I = np.tile(iu, rows.size)
    J = np.tile(ju, rows.size)
    W = np.tile(w, rows.size)
    occ = basis.occupations
    ni = occ[R, I]
    nj = occ[R, J]
    coef = np.where(I == J, np.sqrt((ni + 1.0) * (ni + 2.0)), np.sqrt((ni + 1.0) * (nj + 1.0)))
    tgt = basis._insert(R, [I, J])
    mat = sp.csr_matrix((W * coef, (tgt, R)), shape=(basis.dim, basis.dim))
    return FockOperator(mat, basis, frozenset({2}))


def pair_annihilate(L, basis: FockBasis) -> FockOperator:
    """a(L) = a*(L)^* = sum_ij conj(L_ij) a_i a_j."""
    return pair_create(L, basis).H


def d_gamma(X, basis: FockBasis, max_sector: int | None = None) -> sp.csr_matrix:
    """dGamma(X) = sum_ij X_ij a*_i a_j restricted to particle numbers <= max_sector."""
    X = np.asarray(X, complex)
    M = basis.M
    s = basis.n_max if max_sector is None else min(max_sector, basis.n_max)
    dim = basis.prefix(s)
    occ = basis.occupations[:dim]
    src, jj = np.nonzero(occ)
    if src.size == 0:
        return sp.csr_matrix((dim, dim), dtype=complex)
    # remove one j, add one i
    P = basis.P[src].copy()
    first = np.argmax(P == jj[:, None], axis=1)
    R = np.repeat(np.arange(src.size), M)
    I = np.tile(np.arange(M), src.size)
    Pn = P[R].copy()
    Pn[np.arange(R.size), first[R]] = I
    Pn.sort(axis=1)
    tgt = basis.lookup(Pn)
    S = src[R]
    Jm = jj[R]
    nj = occ[S, Jm]
    ni = occ[S, I] - (I == Jm)
    data = X[I, Jm] * np.sqrt(nj * (ni + 1.0))
    keep = data != 0
    return sp.csr_matrix((data[keep], (tgt[keep], S[keep])), shape=(dim, dim))


def gamma(Q, basis: FockBasis) -> FockOperator:
    """Second quantization Gamma(Q) built sector by sector from Gamma|n> = a*(Q e_i) Gamma|n - e_i> / sqrt(n_i).

    Dense per sector; meant for small bases.
    """
    Q = np.asarray(Q, complex)
    M = basis.M
    blocks = [np.ones((1, 1), complex)]
    for s in range(1, basis.n_max + 1):
        sl, pl = basis.sector_slice(s), basis.sector_slice(s - 1)
        idx = np.arange(sl.start, sl.stop)
        first = basis.P[idx, 0]
        parentP = basis.P[idx].copy()
        parentP[:, 0] = M
        parentP.sort(axis=1)
        parent = basis.lookup(parentP) - pl.start
        n_first = basis.occupations[idx, first]
        Gprev = blocks[-1]
        Gs = np.zeros((sl.stop - sl.start, sl.stop - sl.start), complex)
        for j in range(M):
            Aj = basis.creation_ladder(j)[sl, pl]
            Cj = Aj @ Gprev  # (dim_s, dim_{s-1})
            Gs += Cj[:, parent] * Q[j, first][None, :]
        Gs /= np.sqrt(n_first)[None, :]
        blocks.append(Gs)
    mat = sp.block_diag(blocks, format="csr")
    return FockOperator(mat, basis, frozenset({0}))


def _max_sector(basis: FockBasis, X: np.ndarray) -> int:
    nz = np.nonzero(np.any(np.abs(X.reshape(basis.dim, -1)) > 0, axis=1))[0]
    return int(basis.sector[nz].max()) if nz.size else 0


def gamma_apply(Q, basis: FockBasis, X: np.ndarray) -> np.ndarray:
    """Gamma(Q) X via exp(dGamma(log Q)), using only the sectors populated by X."""
    Q = np.asarray(Q, complex)
    X = np.asarray(X, complex)
    if np.allclose(Q, np.eye(basis.M), rtol=0, atol=0):
        return X.copy()
    s = _max_sector(basis, X)
    dim = basis.prefix(s)
    G = d_gamma(logm(Q), basis, s)
    out = np.zeros_like(X)
    out[:dim] = expm_multiply(G, X[:dim]) if s > 0 else X[:dim]
    return out


def exp_pair(op: FockOperator, X: np.ndarray, coeff: complex) -> np.ndarray:
    """exp(coeff * op) X for a pair operator (nilpotent on the truncated space)."""
    out = np.array(X, complex)
    term = np.array(X, complex)
    for j in range(1, op.basis.n_max // 2 + 2):
        term = (coeff / j) * (op.matrix @ term)
        if not np.any(term):
            break
        out = out + term
    return out


def field_op(data, ops: OneParticleStructure, basis: FockBasis) -> FockOperator:
    """phi(v) = a(pv) + a*(pv) for real Cauchy data v on a flat slice."""
    if basis.M != ops.M:
        raise StructureError("Fock basis and one-particle structure disagree on the mode count")
    z = to_modes(data, ops).a
    c = create(z, basis)
    return FockOperator((c.matrix + c.matrix.conj().T).tocsr(), basis, frozenset({1, -1}))


# ---------------------------------------------------------------------------
# natural implementer


class NaturalImplementer:
    """U = det(1 - K^*K)^{1/4} exp(-a*(K)/2) Gamma((q^{-1})^*) exp(-a(L)/2).

    Applied column-wise; the normal-ordered form gives exact matrix elements of the
    untruncated operator between basis states of the truncated space.
    """

    def __init__(self, b: BogoliubovData, basis: FockBasis, norm_tol: float = 1 - 1e-12):
        if basis.M != b.M:
            raise StructureError("Fock basis and Bogoliubov data disagree on the mode count")
        if b.op_norm_K >= norm_tol or b.op_norm_L >= norm_tol:
            raise PreconditionError(f"norm condition violated: |K| = {b.op_norm_K:.3g}, |L| = {b.op_norm_L:.3g}")
        self.b = b
        self.basis = basis
        self.K = 0.5 * (b.K + b.K.T)
        self.L = 0.5 * (b.L + b.L.T)
        self.vacuum_overlap = b.det_factor ** 0.25
        self._aK = pair_create(self.K, basis)
        self._aL = pair_create(self.L, basis)

    def apply(self, X) -> np.ndarray:
        X = np.asarray(X, complex)
        Y = exp_pair(self._aL.H, X, -0.5)
        Y = gamma_apply(self.b.q_inv.conj().T, self.basis, Y)
        Y = exp_pair(self._aK, Y, -0.5)
        return self.vacuum_overlap * Y

    def apply_adjoint(self, X) -> np.ndarray:
        X = np.asarray(X, complex)
        Y = exp_pair(self._aK.H, X, -0.5)
        Y = gamma_apply(self.b.q_inv, self.basis, Y)
        Y = exp_pair(self._aL, Y, -0.5)
        return self.vacuum_overlap * Y

    def __matmul__(self, X):
        return self.apply(X)

    def matrix(self, max_dim: int = 5000) -> np.ndarray:
        if self.basis.dim > max_dim:
            raise StructureError("basis too large for a dense implementer")
        return self.apply(np.eye(self.basis.dim, dtype=complex))

    def vacuum_image(self) -> np.ndarray:
        return self.apply(self.basis.vacuum())


def natural_implementer(b: BogoliubovData, basis: FockBasis) -> NaturalImplementer:
    return NaturalImplementer(b, basis)


def intertwining_defect(U: NaturalImplementer, W, v, psi, ops: OneParticleStructure) -> float:
    """||(U phi(v) U^* - phi(Wv)) psi|| / ||psi||."""
    from .wavesolver import CauchyData, SymplecticMap

    basis = U.basis
    psi = np.asarray(psi, complex)
    vv = v.vector if isinstance(v, CauchyData) else np.asarray(v, float)
    Wm = W.matrix if isinstance(W, SymplecticMap) else np.asarray(W)
    Wv = Wm @ vv
    phi_v = field_op(vv, ops, basis).matrix
    phi_Wv = field_op(Wv, ops, basis).matrix
    lhs = U.apply(phi_v @ U.apply_adjoint(psi))
    rhs = phi_Wv @ psi
    return float(np.linalg.norm(lhs - rhs) / np.linalg.norm(psi))


def _logdet(X: np.ndarray) -> complex:
    """Sum of principal logs of the eigenvalues (continuous branch near the identity)."""
    return complex(np.sum(np.log(np.linalg.eigvals(X).astype(complex))))


def cocycle(b1: BogoliubovData, b2: BogoliubovData) -> complex:
    """Phase sigma with U_{W1} U_{W2} = sigma U_{W1 W2} for natural implementers.

    sigma = (d1 d2 / d12)^{1/4} det(1 - L1^* K2)^{-1/2},  d = det(1 - K^* K).
    """
    b12 = compose(b1, b2)
    M = b1.M
    # U1^* Omega = d1^{1/4} exp(-a*(L1)/2) Omega, U2 Omega = d2^{1/4} exp(-a*(K2)/2) Omega
    ld = _logdet(np.eye(M) - b1.L.conj().T @ b2.K)
    mag = 0.25 * (np.log(b1.det_factor) + np.log(b2.det_factor) - np.log(b12.det_factor))
    return complex(np.exp(mag - 0.5 * ld))


def cocycle_via_product(b1: BogoliubovData, b2: BogoliubovData) -> complex:
    """Same phase from the overlap of the vacuum images: (d1 d12)^{1/4} d2^{-1/4} det(1 - K12^* K1)^{-1/2}."""
    b12 = compose(b1, b2)
    M = b1.M
    ld = _logdet(np.eye(M) - b12.K.conj().T @ b1.K)
    mag = 0.25 * (np.log(b1.det_factor) + np.log(b12.det_factor) - np.log(b2.det_factor))
    return complex(np.exp(mag - 0.5 * ld))


def cocycle_reference_form(b1: BogoliubovData, b2: BogoliubovData) -> complex:
    """det(1 - K2 L1^*)^{1/4} d12^{1/4} d1^{-1/4} d2^{-1/4} (kept for comparison only)."""
    b12 = compose(b1, b2)
    M = b1.M
    ld = _logdet(np.eye(M) - b2.K @ b1.L.conj().T)
    mag = 0.25 * (np.log(b12.det_factor) - np.log(b1.det_factor) - np.log(b2.det_factor))
    return complex(np.exp(mag + 0.25 * ld))


def fock_cocycle(b1: BogoliubovData, b2: BogoliubovData, basis: FockBasis) -> complex:
    """<Omega, U_{W1W2}^* U_{W1} U_{W2} Omega> on the truncated space."""
    U1, U2 = NaturalImplementer(b1, basis), NaturalImplementer(b2, basis)
    U12 = NaturalImplementer(compose(b1, b2), basis)
    psi = U1.apply(U2.vacuum_image())
    return complex(np.vdot(U12.vacuum_image(), psi))


def expected_pairs(U: NaturalImplementer) -> float:
    """<U Omega, N U Omega>."""
    psi = U.vacuum_image()
    return float(np.real(np.vdot(psi, U.basis.number @ psi)))
