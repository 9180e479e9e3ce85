import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from msqkd.quantum import (
    BELL,
    KET0,
    KET1,
    InvalidStateError,
    as_density_matrix,
    as_ket,
    basis_ket,
    bell_projection_probs,
    binary_entropy,
    dephase_qubit,
    partial_trace,
    projector,
    random_density_matrix,
    random_unitary,
    tensor,
    trace_norm,
    von_neumann_entropy,
    z_branch,
    z_collapse,
    z_measure_qubit,
    z_project,
)

S = 1 / math.sqrt(2)


def rng(seed=0):
    return np.random.default_rng(seed)


def random_ket(dim, gen):
    v = gen.standard_normal(dim) + 1j * gen.standard_normal(dim)
    return v / np.linalg.norm(v)


def random_hermitian(dim, gen):
    a = gen.standard_normal((dim, dim)) + 1j * gen.standard_normal((dim, dim))
    return a + a.conj().T


# -- tensor ------------------------------------------------------------------

def test_tensor_basis_kets():
    np.testing.assert_allclose(tensor(KET0, KET0), [1, 0, 0, 0])


def test_tensor_distributes():
    plus = (KET0 + KET1) * S
    np.testing.assert_allclose(tensor(plus, KET1), [0, S, 0, S])


def test_tensor_density_trace():
    rho = tensor(projector(BELL[0]), np.eye(2) / 2)
    assert rho.shape == (8, 8)
    assert np.trace(rho).real == pytest.approx(1.0, abs=1e-12)
    as_density_matrix(rho)


def test_tensor_rejects_mixed_kinds():
    with pytest.raises(TypeError):
        tensor(KET0, np.eye(2))


# -- partial trace -----------------------------------------------------------

def _partial_trace_oracle(rho, dims, keep):
    # Explicit index sums over the traced factors.
    n = len(dims)
    idx = list(np.ndindex(*dims))
    kept_dims = [dims[k] for k in keep]
    out = np.zeros((int(np.prod(kept_dims)),) * 2, dtype=complex)

    def flat(multi, ds):
        f = 0
        for m, d in zip(multi, ds):
            f = f * d + m
        return f

    for r in idx:
        for c in idx:
            if any(r[k] != c[k] for k in range(n) if k not in keep):
                continue
            out[flat([r[k] for k in keep], kept_dims), flat([c[k] for k in keep], kept_dims)] += (
                rho[flat(r, dims), flat(c, dims)])
    return out


def test_partial_trace_bell_reduction():
    rho = projector(BELL[0])
    np.testing.assert_allclose(partial_trace(rho, [2, 2], [0]), np.eye(2) / 2, atol=1e-12)
    np.testing.assert_allclose(partial_trace(rho, [2, 2], [1]), np.eye(2) / 2, atol=1e-12)


def test_partial_trace_keep_all_is_identity():
    rho = random_density_matrix(6, rng())
    np.testing.assert_allclose(partial_trace(rho, [2, 3], [0, 1]), rho)


def test_partial_trace_classical_quantum_state():
    gen = rng(1)
    p = gen.dirichlet(np.ones(4)).reshape(2, 2)
    rho_c = {(x, y): random_density_matrix(3, gen) for x in range(2) for y in range(2)}
    rho = sum(p[x, y] * np.kron(np.kron(projector(basis_ket(x, 2)), projector(basis_ket(y, 2))), rho_c[x, y])
              for x in range(2) for y in range(2))
    reduced = partial_trace(rho, [2, 2, 3], [0, 2])
    expected = sum(
        np.kron(projector(basis_ket(x, 2)), sum(p[x, y] * rho_c[x, y] for y in range(2)))
        for x in range(2))
    np.testing.assert_allclose(reduced, expected, atol=1e-12)


@pytest.mark.parametrize("dims,keep", [([2, 3], [1]), ([2, 2, 2], [0, 2]), ([3, 2, 2], [2]), ([2, 3, 2], [1, 0])])
def test_partial_trace_matches_explicit_sum(dims, keep):
    rho = random_density_matrix(int(np.prod(dims)), rng(sum(dims)))
    keep_sorted = sorted(keep)
    got = partial_trace(rho, dims, keep_sorted)
    np.testing.assert_allclose(got, _partial_trace_oracle(rho, dims, keep_sorted), atol=1e-12)
    assert np.trace(got).real == pytest.approx(1.0, abs=1e-10)


def test_partial_trace_dimension_mismatch():
    with pytest.raises(ValueError):
        partial_trace(np.eye(4) / 4, [2, 3], [0])


# -- trace norm --------------------------------------------------------------

def test_trace_norm_examples():
    assert trace_norm(np.zeros((3, 3))) == 0
    assert trace_norm(random_density_matrix(5, rng())) == pytest.approx(1.0, abs=1e-10)


def test_trace_norm_rejects_non_hermitian():
    with pytest.raises(ValueError):
        trace_norm(np.array([[0, 1], [0, 0]], dtype=complex))


def test_trace_norm_imaginary_overlap_against_reduced_block():
    gen = rng(2)
    for _ in range(50):
        dim = int(gen.integers(2, 9))
        a = gen.standard_normal(dim) + 1j * gen.standard_normal(dim)
        b = gen.standard_normal(dim) + 1j * gen.standard_normal(dim)
        b -= (np.vdot(a, b).real / np.vdot(a, a).real) * a
        na, nb, ab = np.vdot(a, a).real, np.vdot(b, b).real, np.vdot(a, b)
        assert abs(ab.real) < 1e-10
        # The operator lives on span{a, b}: write it in an orthonormal basis of that span.
        u = a / math.sqrt(na)
        w = b - np.vdot(u, b) * u
        w /= np.linalg.norm(w)
        frame = np.column_stack([u, w])
        m = np.outer(a, b.conj()) + np.outer(b, a.conj())
        block = frame.conj().T @ m @ frame
        oracle = np.abs(np.linalg.eigvals(block)).sum()
        closed = 2 * math.sqrt(na * nb - abs(ab) ** 2)
        assert trace_norm(m) == pytest.approx(oracle, rel=1e-9)
        assert trace_norm(m) == pytest.approx(closed, rel=1e-9)


def test_trace_norm_properties_random_hermitian():
    gen = rng(3)
    for _ in range(200):
        dim = int(gen.integers(1, 9))
        m = random_hermitian(dim, gen)
        u = random_unitary(dim, gen)
        assert trace_norm(m) >= abs(np.trace(m)) - 1e-12
        assert trace_norm(u @ m @ u.conj().T) == pytest.approx(trace_norm(m), abs=1e-8)


def test_rank2_norm_bound_random_zero_trace_pairs():
    gen = rng(4)
    for _ in range(1000):
        dim = int(gen.integers(1, 17))
        a = gen.standard_normal(dim) + 1j * gen.standard_normal(dim)
        b = gen.standard_normal(dim) + 1j * gen.standard_normal(dim)
        b -= (np.vdot(a, b).real / np.vdot(a, a).real) * a
        b *= gen.uniform(0.01, 3)
        m = np.outer(a, b.conj()) + np.outer(b, a.conj())
        assert abs(np.trace(m)) < 1e-9
        assert trace_norm(m) <= 2 * math.sqrt(np.vdot(a, a).real * np.vdot(b, b).real) + 1e-9


def test_holevo_gap_bounded_by_half_trace_distance():
    gen = rng(5)
    for _ in range(1000):
        dim = int(gen.integers(2, 9))
        r0 = random_density_matrix(dim, gen, int(gen.integers(1, dim + 1)))
        r1 = random_density_matrix(dim, gen, int(gen.integers(1, dim + 1)))
        gap = von_neumann_entropy((r0 + r1) / 2) - von_neumann_entropy(r0) / 2 - von_neumann_entropy(r1) / 2
        assert gap <= 0.5 * trace_norm(r0 - r1) + 1e-8


# -- entropies ---------------------------------------------------------------

def test_entropy_examples():
    assert von_neumann_entropy(projector(random_ket(4, rng()))) == pytest.approx(0, abs=1e-9)
    assert von_neumann_entropy(np.eye(2) / 2) == pytest.approx(1.0)
    for Q in (0.0, 0.03, 0.5, 0.9):
        assert von_neumann_entropy(np.diag([1 - Q, Q])) == pytest.approx(binary_entropy(Q), abs=1e-12)


def test_entropy_rejects_invalid_state():
    with pytest.raises(InvalidStateError):
        von_neumann_entropy(np.diag([0.7, 0.7]))
    with pytest.raises(InvalidStateError):
        von_neumann_entropy(np.diag([1.2, -0.2]))


def test_binary_entropy_examples():
    assert binary_entropy(0) == 0
    assert binary_entropy(1) == 0
    assert binary_entropy(0.5) == 1
    # eigen-based oracle
    assert binary_entropy(0.11) == pytest.approx(von_neumann_entropy(np.diag([0.89, 0.11])), abs=1e-12)
    assert binary_entropy(0.11) == pytest.approx(0.4999162, abs=1e-6)


@pytest.mark.parametrize("x", [-0.01, 1.01, float("nan")])
def test_binary_entropy_out_of_range(x):
    with pytest.raises(ValueError):
        binary_entropy(x)


def test_entropy_unitary_invariance():
    gen = rng(6)
    for _ in range(100):
        dim = int(gen.integers(2, 9))
        rho = random_density_matrix(dim, gen)
        u = random_unitary(dim, gen)
        assert von_neumann_entropy(u @ rho @ u.conj().T) == pytest.approx(von_neumann_entropy(rho), abs=1e-9)


# -- Bell basis ----------------------------------------------------------------

def test_bell_basis_orthonormal():
    np.testing.assert_allclose(BELL.conj() @ BELL.T, np.eye(4), atol=1e-12)
    np.testing.assert_allclose(BELL[0], [S, 0, 0, S])
    np.testing.assert_allclose(BELL[1], [S, 0, 0, -S])
    np.testing.assert_allclose(BELL[2], [0, S, S, 0])
    np.testing.assert_allclose(BELL[3], [0, S, -S, 0])


def test_bell_projection_examples():
    np.testing.assert_allclose(bell_projection_probs(BELL[0]), [1, 0, 0, 0], atol=1e-12)
    np.testing.assert_allclose(bell_projection_probs(basis_ket(0, 4)), [0.5, 0.5, 0, 0], atol=1e-12)
    Q = 0.07
    psi = math.sqrt(1 - Q) * BELL[0] + math.sqrt(Q) * BELL[2]
    np.testing.assert_allclose(bell_projection_probs(psi), [1 - Q, 0, Q, 0], atol=1e-12)


def test_bell_projection_wrong_dimension():
    with pytest.raises(ValueError):
        bell_projection_probs(np.ones(8) / math.sqrt(8))


def test_bell_projection_requires_normalized():
    with pytest.raises(InvalidStateError):
        bell_projection_probs(np.array([1, 1, 0, 0], dtype=complex))


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.floats(-1, 1), st.floats(-1, 1)), min_size=4, max_size=4))
def test_bell_projection_sums_to_one(pairs):
    v = np.array([complex(a, b) for a, b in pairs])
    norm = np.linalg.norm(v)
    if norm < 1e-3:
        return
    probs = bell_projection_probs(v / norm)
    assert abs(probs.sum() - 1) <= 1e-10
    assert np.all(probs >= 0)


# -- validation ---------------------------------------------------------------

def test_as_ket_normalization_flag():
    as_ket([1, 0])
    as_ket([0.3, 0.1])
    with pytest.raises(InvalidStateError):
        as_ket([0.3, 0.1], normalized=True)


def test_density_matrix_declared_trace():
    diff = np.diag([0.5, -0.5])
    as_density_matrix(diff, trace=0)
    with pytest.raises(InvalidStateError):
        as_density_matrix(np.diag([0.5, 0.4]))
    with pytest.raises(InvalidStateError):
        as_density_matrix(np.array([[0.5, 0.1], [0.2, 0.5]]))


# -- Z measurement ------------------------------------------------------------

def test_z_measure_basis_state():
    for seed in range(20):
        bit, post = z_measure_qubit(KET0, 0, rng(seed))
        assert bit == 0
        np.testing.assert_allclose(post, KET0)


def test_z_measure_bell_state_statistics():
    gen = rng(7)
    outcomes = []
    for _ in range(4000):
        bit, post = z_measure_qubit(BELL[0], 0, gen)
        outcomes.append(bit)
        np.testing.assert_allclose(post, basis_ket(3 * bit, 4), atol=1e-12)
    mean = np.mean(outcomes)
    assert abs(mean - 0.5) < 4 * math.sqrt(0.25 / 4000)


def test_z_measure_both_qubits_joint_distribution():
    Q = 0.2
    psi = math.sqrt(1 - Q) * BELL[0] + math.sqrt(Q) * BELL[2]
    joint = np.zeros(4)
    for a in (0, 1):
        pa, branch = z_branch(psi, 0, a)
        for b in (0, 1):
            pb, _ = z_branch(branch, 1, b) if branch is not None else (0.0, None)
            joint[2 * a + b] = pa * pb
    np.testing.assert_allclose(joint, [(1 - Q) / 2, Q / 2, Q / 2, (1 - Q) / 2], atol=1e-12)


def test_z_collapse_threshold():
    psi = np.array([math.sqrt(0.3), math.sqrt(0.7)], dtype=complex)
    assert z_collapse(psi, 0, 0.29)[0] == 0
    assert z_collapse(psi, 0, 0.31)[0] == 1


def test_z_project_zero_branch_raises():
    with pytest.raises(ValueError):
        z_project(KET0, 0, 1)


def test_z_measure_with_ancilla_dims():
    # qubit (dim 2) followed by a qutrit ancilla
    psi = np.kron(BELL[0], basis_ket(1, 3))
    bit, post = z_measure_qubit(psi, 1, rng(8), dims=[2, 2, 3])
    np.testing.assert_allclose(post, np.kron(basis_ket(3 * bit, 4), basis_ket(1, 3)), atol=1e-12)


def test_dephase_qubit_kills_coherence():
    rho = projector(BELL[0])
    out = dephase_qubit(rho, 0, [2, 2])
    np.testing.assert_allclose(out, np.diag([0.5, 0, 0, 0.5]), atol=1e-12)
