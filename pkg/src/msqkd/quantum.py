"""Dense linear-algebra primitives for small qubit/ancilla Hilbert spaces.

Kets are 1-D complex numpy arrays and density matrices are 2-D square
complex arrays.  Factor ordering follows ``(T_A, T_B, C, cl)`` with the
left factor most significant, which is exactly what ``np.kron`` produces.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

Ket = np.ndarray
DensityMatrix = np.ndarray

NORM_ATOL = 1e-10
HERMITIAN_ATOL = 1e-10
PSD_ATOL = 1e-9
TRACE_ATOL = 1e-10

_S = 1 / np.sqrt(2)

# Rows are phi_0..phi_3 = Phi+, Phi-, Psi+, Psi- in the |00>,|01>,|10>,|11> basis.
BELL = np.array(
    [
        [_S, 0, 0, _S],
        [_S, 0, 0, -_S],
        [0, _S, _S, 0],
        [0, _S, -_S, 0],
    ],
    dtype=complex,
)
BELL.setflags(write=False)
BELL_LABELS = ("Phi+", "Phi-", "Psi+", "Psi-")

KET0 = np.array([1, 0], dtype=complex)
KET1 = np.array([0, 1], dtype=complex)


class InvalidStateError(ValueError):
    """Raised when an array fails the ket or density-matrix invariants."""


def basis_ket(index: int, dim: int) -> Ket:
    ket = np.zeros(dim, dtype=complex)
    ket[index] = 1.0
    return ket


def as_ket(amplitudes, *, normalized: bool = False) -> Ket:
    """Coerce to a complex ket, optionally checking unit norm."""
    ket = np.asarray(amplitudes, dtype=complex)
    if ket.ndim != 1 or ket.size == 0:
        raise InvalidStateError(f"ket must be a non-empty vector, got shape {ket.shape}")
    if normalized:
        norm2 = float(np.vdot(ket, ket).real)
        if abs(norm2 - 1.0) > NORM_ATOL:
            raise InvalidStateError(f"ket is not normalized: <psi|psi> = {norm2!r}")
    return ket


def as_density_matrix(entries, *, trace: float | None = 1.0) -> DensityMatrix:
    """Coerce to a density matrix and check Hermiticity, PSD and trace.

    ``trace=None`` skips the trace check; ``trace=0`` is valid for
    difference matrices, which are then not required to be PSD.
    """
    rho = np.asarray(entries, dtype=complex)
    if rho.ndim != 2 or rho.shape[0] != rho.shape[1] or rho.shape[0] == 0:
        raise InvalidStateError(f"density matrix must be square, got shape {rho.shape}")
    dev = np.max(np.abs(rho - rho.conj().T))
    if dev > HERMITIAN_ATOL:
        raise InvalidStateError(f"matrix is not Hermitian (max deviation {dev:.3g})")
    if trace is not None:
        tr = np.trace(rho).real
        if abs(tr - trace) > TRACE_ATOL:
            raise InvalidStateError(f"trace {tr!r} differs from declared {trace!r}")
    if trace != 0:
        lam_min = np.linalg.eigvalsh(rho).min()
        if lam_min < -PSD_ATOL:
            raise InvalidStateError(f"matrix is not PSD (min eigenvalue {lam_min:.3g})")
    return rho


def projector(ket: Ket) -> DensityMatrix:
    """Return the (unnormalized) outer product |z><z|."""
    ket = np.asarray(ket, dtype=complex)
    return np.outer(ket, ket.conj())


def tensor(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Kronecker product of two kets or two density matrices."""
    a = np.asarray(a, dtype=complex)
    b = np.asarray(b, dtype=complex)
    if a.ndim != b.ndim or a.ndim not in (1, 2):
        raise TypeError("tensor() needs two kets or two density matrices")
    return np.kron(a, b)


def partial_trace(rho: DensityMatrix, dims: Sequence[int], keep: Sequence[int]) -> DensityMatrix:
    """Reduce ``rho`` to the factors listed in ``keep`` (in ascending order)."""
    rho = np.asarray(rho, dtype=complex)
    dims = [int(d) for d in dims]
    total = int(np.prod(dims))
    if rho.shape != (total, total):
        raise ValueError(f"dims {dims} (product {total}) do not match matrix shape {rho.shape}")
    keep = sorted(set(int(k) for k in keep))
    if any(k < 0 or k >= len(dims) for k in keep):
        raise ValueError(f"keep indices {keep} out of range for {len(dims)} factors")

    n = len(dims)
    tensor_form = rho.reshape(dims + dims)
    # Trace the highest axes first so the remaining axis numbers stay valid.
    for axis in sorted(set(range(n)) - set(keep), reverse=True):
        current = tensor_form.ndim // 2
        tensor_form = np.trace(tensor_form, axis1=axis, axis2=axis + current)
    kept_dim = int(np.prod([dims[k] for k in keep])) if keep else 1
    return tensor_form.reshape(kept_dim, kept_dim)


def _hermitian_eigvals(m: np.ndarray, atol: float) -> np.ndarray:
    m = np.asarray(m, dtype=complex)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {m.shape}")
    dev = np.max(np.abs(m - m.conj().T)) if m.size else 0.0
    if dev > atol:
        raise ValueError(f"matrix is not Hermitian (max deviation {dev:.3g})")
    return np.linalg.eigvalsh(0.5 * (m + m.conj().T))


def trace_norm(m: np.ndarray) -> float:
    """Sum of absolute eigenvalues of a Hermitian matrix."""
    return float(np.sum(np.abs(_hermitian_eigvals(m, 1e-9))))


def von_neumann_entropy(rho: DensityMatrix) -> float:
    """Entropy in bits.  Eigenvalues in [-1e-9, 0) are treated as zero."""
    rho = as_density_matrix(rho)
    lam = np.linalg.eigvalsh(rho)
    lam = lam[lam > 0]
    return float(max(0.0, -np.sum(lam * np.log2(lam))))


def binary_entropy(x: float) -> float:
    """Binary Shannon entropy h(x) in bits."""
    x = float(x)
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"binary_entropy needs a probability, got {x!r}")
    if x == 0.0 or x == 1.0:
        return 0.0
    return float(-x * np.log2(x) - (1 - x) * np.log2(1 - x))


def bell_coefficients(psi: Ket) -> np.ndarray:
    """Amplitudes c_i = <phi_i|psi> of a two-qubit ket."""
    psi = np.asarray(psi, dtype=complex)
    if psi.shape != (4,):
        raise ValueError(f"expected a two-qubit ket of dim 4, got shape {psi.shape}")
    return BELL.conj() @ psi


def bell_projection_probs(psi: Ket) -> np.ndarray:
    """Born probabilities of a Bell-basis measurement."""
    psi = np.asarray(psi, dtype=complex)
    if psi.shape != (4,):
        raise ValueError(f"expected a two-qubit ket of dim 4, got shape {psi.shape}")
    as_ket(psi, normalized=True)
    return np.abs(bell_coefficients(psi)) ** 2


def _qubit_dims(psi: Ket, dims: Sequence[int] | None) -> list[int]:
    if dims is None:
        n = int(round(np.log2(psi.size)))
        if 2**n != psi.size:
            raise ValueError(f"ket of dim {psi.size} is not a qubit register; pass dims")
        return [2] * n
    dims = [int(d) for d in dims]
    if int(np.prod(dims)) != psi.size:
        raise ValueError(f"dims {dims} do not match ket dim {psi.size}")
    return dims


def z_branch(psi: Ket, qubit: int, outcome: int, dims: Sequence[int] | None = None) -> tuple[float, Ket | None]:
    """Probability of a Z outcome on one qubit and the renormalized branch.

    The branch is ``None`` when the outcome has probability zero.
    """
    psi = np.asarray(psi, dtype=complex)
    dims = _qubit_dims(psi, dims)
    if not 0 <= qubit < len(dims) or dims[qubit] != 2:
        raise ValueError(f"factor {qubit} is not a qubit in dims {dims}")
    if outcome not in (0, 1):
        raise ValueError(f"outcome must be 0 or 1, got {outcome!r}")
    t = psi.reshape(dims).copy()
    idx = [slice(None)] * len(dims)
    idx[qubit] = 1 - outcome
    t[tuple(idx)] = 0
    branch = t.reshape(-1)
    prob = float(np.vdot(branch, branch).real)
    if prob == 0.0:
        return 0.0, None
    return prob, branch / np.sqrt(prob)


def z_project(psi: Ket, qubit: int, outcome: int, dims: Sequence[int] | None = None) -> Ket:
    """Deterministically collapse onto a Z outcome (must be possible)."""
    prob, branch = z_branch(psi, qubit, outcome, dims)
    if branch is None or prob < 1e-15:
        raise ValueError(f"outcome {outcome} on qubit {qubit} has probability zero")
    return branch


def z_collapse(psi: Ket, qubit: int, u: float, dims: Sequence[int] | None = None) -> tuple[int, Ket]:
    """Z-measure one qubit using a uniform draw ``u`` in [0, 1).

    Outcome 0 is chosen iff ``u < P(0)``.
    """
    p0, branch0 = z_branch(psi, qubit, 0, dims)
    if u < p0:
        return 0, branch0
    _, branch1 = z_branch(psi, qubit, 1, dims)
    return 1, branch1


def z_measure_qubit(psi: Ket, qubit: int, rng: np.random.Generator,
                    dims: Sequence[int] | None = None) -> tuple[int, Ket]:
    """Measure one qubit in Z and resend the observed basis state.

    Parameters
    ----------
    psi : ndarray
        Normalized ket over ``dims`` (all qubits when ``dims`` is None).
    qubit : int
        Factor index of the measured qubit.
    rng : numpy.random.Generator
        Explicit random stream.

    Returns
    -------
    (outcome, ket)
        The sampled bit and the post-measurement ket in which the measured
        qubit is exactly ``|outcome>``.
    """
    psi = as_ket(psi, normalized=True)
    return z_collapse(psi, qubit, float(rng.random()), dims)


def dephase_qubit(rho: DensityMatrix, qubit: int, dims: Sequence[int]) -> DensityMatrix:
    """Non-selective Z measurement of one factor: sum_r P_r rho P_r."""
    dims = [int(d) for d in dims]
    out = np.zeros_like(np.asarray(rho, dtype=complex))
    for r in range(dims[qubit]):
        proj = np.ones((1, 1), dtype=complex)
        for i, d in enumerate(dims):
            factor = np.eye(d, dtype=complex)
            if i == qubit:
                factor = np.zeros((d, d), dtype=complex)
                factor[r, r] = 1
            proj = np.kron(proj, factor)
        out += proj @ rho @ proj
    return out


def random_unitary(dim: int, rng: np.random.Generator) -> np.ndarray:
    """Haar-random unitary via QR of a complex Ginibre matrix."""
    z = (rng.standard_normal((dim, dim)) + 1j * rng.standard_normal((dim, dim))) / np.sqrt(2)
    q, r = np.linalg.qr(z)
    d = np.diag(r)
    return q * (d / np.abs(d))


def random_density_matrix(dim: int, rng: np.random.Generator, rank: int | None = None) -> DensityMatrix:
    rank = dim if rank is None else rank
    g = rng.standard_normal((dim, rank)) + 1j * rng.standard_normal((dim, rank))
    rho = g @ g.conj().T
    return rho / np.trace(rho).real
