from math import comb, factorial

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.linalg import expm

from kgconnection.bogoliubov import blocks, compose, from_blocks, random_symplectic_blocks, squeeze_map
from kgconnection.errors import PreconditionError, StructureError
from kgconnection.fock import (
    FockBasis, NaturalImplementer, annihilate, cocycle, cocycle_reference_form, cocycle_via_product,
    create, d_gamma, exp_pair, expected_pairs, field_op, fock_cocycle, gamma, gamma_apply,
    intertwining_defect, pair_create,
)
from kgconnection.geometry import GridSpec
from kgconnection.oneparticle import OneParticleStructure, mode_data

GRID = GridSpec()
OPS1 = OneParticleStructure(GRID, 1)


def ladders(basis):
    return [basis.creation_ladder(j).toarray() for j in range(basis.M)]


@pytest.mark.parametrize("M,n", [(1, 5), (3, 4), (7, 3)])
def test_basis_dimension_and_sectors(M, n):
    b = FockBasis(M, n)
    assert b.dim == comb(M + n, n) == FockBasis.dimension(M, n)
    assert np.all(b.occupations.sum(axis=1) == b.sector)
    assert all(b.index(s) == i for i, s in enumerate(b.states))
    assert b.prefix(n) == b.dim


def test_basis_rejects_states_outside():
    b = FockBasis(3, 2)
    with pytest.raises(StructureError):
        b.index([1, 1, 1])


@given(st.integers(0, 2**31))
def test_ccr_below_top_sector(seed):
    basis = FockBasis(3, 4)
    rng = np.random.default_rng(seed)
    v, w = rng.normal(size=3) + 1j * rng.normal(size=3), rng.normal(size=3) + 1j * rng.normal(size=3)
    a = annihilate(v, basis).dense()
    ad = create(w, basis).dense()
    low = basis.prefix(3)
    comm = (a @ ad - ad @ a)[:low, :low]
    assert np.allclose(comm, np.vdot(v, w) * np.eye(low), atol=1e-12)


def test_number_operator():
    basis = FockBasis(3, 4)
    A = ladders(basis)
    N = sum(x @ x.conj().T for x in A)  # sum a*_j a_j
    assert np.allclose(N, basis.number.toarray())


def test_pair_and_dgamma_against_ladder_products():
    basis = FockBasis(3, 5)
    rng = np.random.default_rng(0)
    K = rng.normal(size=(3, 3)) + 1j * rng.normal(size=(3, 3))
    K = K + K.T
    A = ladders(basis)
    ref = sum(K[i, j] * A[i] @ A[j] for i in range(3) for j in range(3))
    assert np.allclose(pair_create(K, basis).dense(), ref)
    X = rng.normal(size=(3, 3)) + 1j * rng.normal(size=(3, 3))
    ref = sum(X[i, j] * A[i] @ A[j].conj().T for i in range(3) for j in range(3))
    assert np.allclose(d_gamma(X, basis).toarray(), ref)
    with pytest.raises(StructureError):
        pair_create(np.array([[0, 1], [0, 0]]), FockBasis(2, 2))


def test_gamma_multiplicative_and_matches_exponential():
    basis = FockBasis(3, 4)
    rng = np.random.default_rng(1)
    Q1 = expm(0.3 * (rng.normal(size=(3, 3)) + 1j * rng.normal(size=(3, 3))))
    Q2 = expm(0.3 * (rng.normal(size=(3, 3)) + 1j * rng.normal(size=(3, 3))))
    G1, G2 = gamma(Q1, basis).dense(), gamma(Q2, basis).dense()
    assert np.allclose(gamma(Q1 @ Q2, basis).dense(), G1 @ G2, atol=1e-12)
    one = basis.sector_slice(1)
    assert np.allclose(G1[one, one], Q1, atol=1e-13)
    X = np.eye(basis.dim, dtype=complex)
    assert np.allclose(gamma_apply(Q1, basis, X), G1, atol=1e-10)


def test_exp_pair_matches_dense_exponential():
    basis = FockBasis(2, 6)
    K = np.array([[0.2, 0.1], [0.1, -0.3]])
    op = pair_create(K, basis)
    X = np.eye(basis.dim, dtype=complex)
    assert np.allclose(exp_pair(op, X, -0.5), expm(-0.5 * op.dense()), atol=1e-13)


def test_field_operator_hermitian():
    basis = FockBasis(OPS1.M, 3)
    phi = field_op(mode_data(OPS1, 1), OPS1, basis).dense()
    assert np.allclose(phi, phi.conj().T)


@pytest.mark.parametrize("theta", [0.05, 0.3])
def test_squeezed_vacuum_closed_form(theta):
    basis = FockBasis(OPS1.M, 10)
    U = NaturalImplementer(blocks(squeeze_map(OPS1, 0, np.exp(theta)), OPS1), basis)
    psi = U.vacuum_image()
    j = OPS1.index(0)
    for n in range(6):
        occ = [0] * OPS1.M
        occ[j] = 2 * n
        ref = (-np.tanh(theta)) ** n * np.sqrt(factorial(2 * n)) / (2**n * factorial(n)) / np.sqrt(np.cosh(theta))
        assert psi[basis.index(occ)] == pytest.approx(ref, abs=1e-12)
    assert expected_pairs(U) == pytest.approx(np.sinh(theta) ** 2, abs=1e-5 if theta > 0.1 else 1e-10)


def test_intertwining_defect_decreases_with_truncation():
    W = squeeze_map(OPS1, 0, np.exp(0.05))
    b = blocks(W, OPS1)
    d = [intertwining_defect(NaturalImplementer(b, FockBasis(OPS1.M, n)), W, mode_data(OPS1, 0),
                             FockBasis(OPS1.M, n).vacuum(), OPS1) for n in (4, 6, 8, 10)]
    assert all(b2 < b1 for b1, b2 in zip(d, d[1:]))
    assert d[-1] < 1e-6


def test_unitary_on_low_sectors_and_vacuum_overlap():
    b = random_symplectic_blocks(3, 0.1, np.random.default_rng(5))
    defects = []
    for n in (6, 8, 10):
        basis = FockBasis(3, n)
        U = NaturalImplementer(b, basis)
        low = basis.prefix(2)
        X = np.eye(basis.dim, low, dtype=complex)
        G = U.apply_adjoint(U.apply(X))[:low]
        defects.append(np.abs(G - np.eye(low)).max())
    # truncation error of the unitarity defect shrinks as sectors are added
    assert defects[0] > defects[1] > defects[2] and defects[2] < 1e-5
    ov = U.vacuum_image()[0]
    det = np.linalg.det(np.eye(3) - b.K.conj().T @ b.K).real
    assert ov.real > 0 and abs(ov - det**0.25) < 1e-12


def test_norm_condition_enforced():
    b = from_blocks(np.array([[np.cosh(20.0)]]), np.array([[np.sinh(20.0)]]))
    with pytest.raises(PreconditionError):
        NaturalImplementer(b, FockBasis(1, 4))


@given(st.integers(0, 2**31))
def test_cocycle_formula_matches_fock_phase(seed):
    rng = np.random.default_rng(seed)
    b1, b2 = random_symplectic_blocks(3, 0.05, rng), random_symplectic_blocks(3, 0.05, rng)
    s = cocycle(b1, b2)
    f = fock_cocycle(b1, b2, FockBasis(3, 8))
    assert abs(abs(s) - 1) < 1e-8
    assert abs(s - f / abs(f)) < 1e-6
    assert abs(s - cocycle_via_product(b1, b2)) < 1e-10


def test_cocycle_trivial_and_reference_form_differs():
    rng = np.random.default_rng(11)
    b1 = random_symplectic_blocks(3, 0.2, rng)
    from kgconnection.bogoliubov import identity_blocks, inverse_blocks

    assert cocycle(b1, identity_blocks(3)) == pytest.approx(1.0)
    b2 = random_symplectic_blocks(3, 0.2, rng)
    # the alternative determinant form does not reproduce the Fock-level phase
    f = fock_cocycle(b1, b2, FockBasis(3, 8))
    assert abs(cocycle_reference_form(b1, b2) - f / abs(f)) > 1e-4


def test_ladder_basics():
    basis = FockBasis(3, 4)
    e1 = np.array([1.0, 0, 0])
    assert np.allclose(annihilate(e1, basis).dense() @ basis.vacuum(), 0)
    out = create(e1, basis).dense() @ basis.basis_vector([1, 0, 0])
    assert np.allclose(out, np.sqrt(2) * basis.basis_vector([2, 0, 0]))


def test_pair_create_rank_one_and_norm_bound():
    basis = FockBasis(3, 6)
    rng = np.random.default_rng(2)
    v = rng.normal(size=3) + 1j * rng.normal(size=3)
    av = create(v, basis).dense()
    assert np.allclose(pair_create(np.outer(v, v), basis).dense(), av @ av)
    assert np.allclose(pair_create(np.zeros((3, 3)), basis).dense(), 0)
    K = rng.normal(size=(3, 3)) + 1j * rng.normal(size=(3, 3))
    K = K + K.T
    P = pair_create(K, basis).dense()
    hs = np.linalg.norm(K)
    for n in range(basis.n_max - 1):
        sl = basis.sector_slice(n)
        psi = np.zeros(basis.dim, complex)
        psi[sl] = rng.normal(size=sl.stop - sl.start) + 1j * rng.normal(size=sl.stop - sl.start)
        bound = hs * np.sqrt((n + 2) * (n + 1)) * np.linalg.norm(psi)
        assert np.linalg.norm(P @ psi) <= bound * (1 + 1e-12)


def test_gamma_scalar_and_conjugation():
    basis = FockBasis(3, 4)
    c = 0.7 + 0.2j
    G = gamma(c * np.eye(3), basis).dense()
    assert np.allclose(np.diag(G), c ** basis.sector)
    assert np.allclose(gamma(np.eye(3), basis).dense(), np.eye(basis.dim))
    rng = np.random.default_rng(4)
    Q = np.eye(3) + 0.3 * (rng.normal(size=(3, 3)) + 1j * rng.normal(size=(3, 3)))
    v = rng.normal(size=3) + 1j * rng.normal(size=3)
    Gq, Gi = gamma(Q, basis).dense(), gamma(np.linalg.inv(Q), basis).dense()
    low = basis.prefix(3)
    lhs = (Gq @ create(v, basis).dense() @ Gi)[:, :low]
    assert np.allclose(lhs, create(Q @ v, basis).dense()[:, :low], atol=1e-12)


def test_field_ccr_and_two_point():
    from kgconnection.oneparticle import one_particle_inner
    from kgconnection.wavesolver import symplectic_form

    basis = FockBasis(OPS1.M, 4)
    v = mode_data(OPS1, 1, "cos", "u")
    w = mode_data(OPS1, 1, "cos", "nu")
    pv, pw = field_op(v, OPS1, basis).dense(), field_op(w, OPS1, basis).dense()
    sigma = symplectic_form(v, w, dx=GRID.dx)
    assert abs(sigma) > 1
    low = basis.prefix(basis.n_max - 2)
    comm = (pv @ pw - pw @ pv)[:low, :low]
    assert np.abs(comm + 1j * sigma * np.eye(low)).max() < 1e-10
    assert np.allclose(pv @ pv - pv @ pv, 0)
    vac = basis.vacuum()
    two = np.vdot(vac, pv @ pw @ vac)
    assert abs(two - one_particle_inner(v, w, OPS1)) < 1e-12


def test_identity_implementer_and_intertwining():
    from kgconnection.bogoliubov import identity_blocks

    basis = FockBasis(OPS1.M, 4)
    U = NaturalImplementer(identity_blocks(OPS1.M), basis)
    X = np.eye(basis.dim, dtype=complex)
    assert np.allclose(U.apply(X), X)
    W = np.eye(2 * GRID.n_x)
    assert intertwining_defect(U, W, mode_data(OPS1, 1), basis.vacuum(), OPS1) < 1e-12


def test_cocycle_same_mode_squeezes_trivial():
    b1 = blocks(squeeze_map(OPS1, 1, np.exp(0.2)), OPS1)
    b2 = blocks(squeeze_map(OPS1, 1, np.exp(0.1)), OPS1)
    s = cocycle(b1, b2)
    assert abs(s.imag) < 1e-12 and s.real > 0 and abs(abs(s) - 1) < 1e-8


def test_expected_pairs_mode_sum_oracle():
    # <N> after U equals ||r||_HS^2 (the sum of sinh^2 over Bogoliubov modes)
    b = random_symplectic_blocks(2, 0.05, np.random.default_rng(9))
    U = NaturalImplementer(b, FockBasis(2, 12))
    assert expected_pairs(U) == pytest.approx(np.linalg.norm(b.r) ** 2, rel=1e-8)
