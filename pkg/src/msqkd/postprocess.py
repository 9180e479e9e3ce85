"""Toy-scale classical post-processing of sifted raw keys.

Pipeline: public permutation -> block-parity reconciliation (a cascade
variant) -> Toeplitz hashing.  Every parity bit disclosed during
reconciliation is counted as leaked to the server.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.signal import fftconvolve

from .keyrate import KeyRateReport
from .protocol import RawKeys
from .quantum import binary_entropy

EC_PASSES = 4
EC_BLOCK_FACTOR = 0.73


def _apply_permutation(keys: RawKeys, perm: np.ndarray) -> RawKeys:
    return RawKeys(keys.info_A[perm], keys.info_B[perm])


def symmetrize(keys: RawKeys, seed) -> RawKeys:
    """Permute both raw keys by the same publicly seeded permutation."""
    if keys.info_A.shape != keys.info_B.shape:
        raise ValueError("raw keys differ in length")
    perm = np.random.default_rng(seed).permutation(keys.n)
    return _apply_permutation(keys, perm)


@dataclass(frozen=True, eq=False)
class Reconciliation:
    keys: RawKeys
    ec_leakage: int
    corrections: int
    verified: bool


class _Cascade:
    def __init__(self, a: np.ndarray, b: np.ndarray):
        self.a = a
        self.b = b.copy()
        self.n = a.size
        self.leak = 0
        self.corrections = 0
        self.passes: list[tuple[np.ndarray, np.ndarray, int, np.ndarray]] = []

    def _search(self, idx: np.ndarray) -> int:
        # Alice discloses the parity of the left half until one bit remains.
        while idx.size > 1:
            half = idx[: idx.size // 2]
            self.leak += 1
            if (self.a[half].sum() - self.b[half].sum()) % 2:
                idx = half
            else:
                idx = idx[idx.size // 2:]
        return int(idx[0])

    def _block(self, pass_no: int, block: int) -> np.ndarray:
        order, _, size, _ = self.passes[pass_no]
        return order[block * size:(block + 1) * size]

    def _odd(self, pass_no: int, block: int) -> bool:
        idx = self._block(pass_no, block)
        alice_parity = self.passes[pass_no][3][block]
        return bool((alice_parity - self.b[idx].sum()) % 2)

    def _fix(self, pass_no: int, block: int) -> None:
        pending = [(pass_no, block)]
        while pending:
            j, blk = pending.pop()
            if not self._odd(j, blk):
                continue
            bit = self._search(self._block(j, blk))
            self.b[bit] ^= 1
            self.corrections += 1
            for jj, (_, where, _, _) in enumerate(self.passes):
                if jj != j:
                    pending.append((jj, int(where[bit])))

    def run_pass(self, order: np.ndarray, size: int) -> None:
        where = np.empty(self.n, dtype=np.intp)
        where[order] = np.arange(self.n) // size
        n_blocks = math.ceil(self.n / size)
        padded = np.zeros(n_blocks * size, dtype=np.int64)
        padded[: self.n] = self.a[order]
        alice = padded.reshape(n_blocks, size).sum(axis=1) % 2
        self.leak += n_blocks
        self.passes.append((order, where, size, alice))
        j = len(self.passes) - 1
        for blk in range(n_blocks):
            self._fix(j, blk)


def error_correct(keys: RawKeys, qz_estimate: float, seed=0, passes: int = EC_PASSES) -> Reconciliation:
    """Correct B's key toward A's by iterated block parities.

    Block sizes start at ceil(0.73 / Q_Z) and double each pass; passes
    after the first use a seeded shuffle.  With ``qz_estimate == 0`` a
    single whole-key parity is exchanged.
    """
    if not 0.0 <= qz_estimate < 0.5:
        raise ValueError(f"qz_estimate must lie in [0, 0.5), got {qz_estimate!r}")
    n = keys.n
    if n == 0:
        return Reconciliation(keys, 0, 0, True)
    cascade = _Cascade(keys.info_A.astype(np.int64), keys.info_B.astype(np.int64))
    rng = np.random.default_rng(seed)
    if qz_estimate == 0:
        sizes = [n]
    else:
        k1 = min(n, max(1, math.ceil(EC_BLOCK_FACTOR / qz_estimate)))
        sizes = [min(n, k1 * 2**i) for i in range(passes)]
    for i, size in enumerate(sizes):
        order = np.arange(n) if i == 0 else rng.permutation(n)
        cascade.run_pass(order, size)
    corrected = RawKeys(keys.info_A, cascade.b.astype(np.uint8))
    # The simulation holds both strings, so agreement is checked directly.
    verified = bool(np.array_equal(corrected.info_A, corrected.info_B))
    return Reconciliation(corrected, cascade.leak, cascade.corrections, verified)


def toeplitz_seed_bits(n_in: int, n_out: int, seed) -> np.ndarray:
    return np.random.default_rng(seed).integers(0, 2, size=n_in + n_out - 1, dtype=np.uint8)


def privacy_amplify(key: np.ndarray, final_len: int, seed) -> np.ndarray:
    """Hash ``key`` to ``final_len`` bits with a seeded Toeplitz matrix.

    Row ``i``, column ``j`` of the matrix is ``t[i - j + n - 1]``, so the
    product is a slice of the full convolution of ``t`` with the key.
    """
    key = np.asarray(key, dtype=np.uint8)
    n = key.size
    if final_len <= 0 or n == 0:
        return np.zeros(0, dtype=np.uint8)
    if final_len > n:
        raise ValueError(f"final_len {final_len} exceeds input length {n}")
    t = toeplitz_seed_bits(n, final_len, seed)
    if n * final_len <= 1 << 20:
        full = np.convolve(t.astype(np.int64), key.astype(np.int64))
    else:
        full = np.rint(fftconvolve(t.astype(float), key.astype(float))).astype(np.int64)
    return (full[n - 1: n - 1 + final_len] % 2).astype(np.uint8)


def final_length(n: int, rate_report: KeyRateReport, ec_leakage: int) -> int:
    """floor(n * max(r, 0)) less any leakage beyond the n h(Q_Z) budget."""
    if n < 0:
        raise ValueError("n must be non-negative")
    budget = n * binary_entropy(rate_report.inputs.Q_Z)
    excess = max(0.0, ec_leakage - budget)
    return max(0, math.floor(n * max(rate_report.rate, 0.0)) - math.ceil(excess - 1e-9))


@dataclass(frozen=True, eq=False)
class FinalKeyResult:
    key_A: np.ndarray
    key_B: np.ndarray
    n: int
    qz_estimate: float
    ec_leakage: int
    final_len: int
    verified: bool

    def hex(self) -> str:
        if self.key_A.size == 0:
            return ""
        return np.packbits(self.key_A).tobytes().hex()

    def summary(self) -> str:
        return (f"n={self.n} Q_Z={self.qz_estimate:.9g} ec_leakage={self.ec_leakage} "
                f"final_len={self.final_len} verified={str(self.verified).lower()}")

    def export(self) -> str:
        return f"{self.hex()}\n{self.summary()}\n"


def distill(keys: RawKeys, rate_report: KeyRateReport, qz_estimate: float, seed=0) -> FinalKeyResult:
    """Symmetrize, reconcile and hash a raw key pair."""
    s_perm, s_ec, s_pa = np.random.SeedSequence(seed).spawn(3)
    sym = symmetrize(keys, s_perm)
    rec = error_correct(sym, qz_estimate, s_ec)
    length = min(final_length(keys.n, rate_report, rec.ec_leakage), keys.n)
    key_a = privacy_amplify(rec.keys.info_A, length, s_pa)
    key_b = privacy_amplify(rec.keys.info_B, length, s_pa)
    verified = rec.verified and bool(np.array_equal(key_a, key_b))
    return FinalKeyResult(key_a, key_b, keys.n, float(qz_estimate), rec.ec_leakage, length, verified)
