"""Monte Carlo execution of the mediated semi-quantum protocol.

Each iteration consumes a fixed row of ``N_UNIFORMS`` uniform draws:

    0  A measures?            5  B's Z outcome
    1  B measures?            6  return-channel noise fires?
    2  forward noise fires?   7  return-channel replacement Bell state
    3  forward replacement    8  server's measurement / message
    4  A's Z outcome

Row ``i`` comes from the random substream of chunk ``i // CHUNK``
(``SeedSequence(seed, spawn_key=(chunk,))``), so a transcript is identical
whether chunks run sequentially or in parallel and iteration ``i`` does
not depend on ``N``.
"""

from __future__ import annotations

import csv
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence, overload

import numpy as np

from .channels import (
    Adversarial,
    ConfigError,
    Honest,
    SemiHonest,
    ServerMode,
    _probability,
    attack_branch,
    minus_one_probability,
    server_from_dict,
    server_to_dict,
)
from .quantum import BELL, bell_projection_probs, z_branch, z_collapse

N_UNIFORMS = 9
CHUNK = 1 << 16


def worker_count() -> int:
    """Worker cap from ``SQKD_THREADS`` (default: available CPUs)."""
    env = os.environ.get("SQKD_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return os.cpu_count() or 1


@dataclass(frozen=True)
class ProtocolConfig:
    N: int
    p_M_A: float
    p_M_B: float
    tau: float
    seed: int
    server: ServerMode = field(default_factory=Honest)

    def __post_init__(self):
        if isinstance(self.N, bool) or not isinstance(self.N, (int, np.integer)) or self.N < 1:
            raise ConfigError(f"must be a positive integer, got {self.N!r}", "N")
        for name in ("p_M_A", "p_M_B", "tau"):
            object.__setattr__(self, name, _probability(getattr(self, name), name))
        if isinstance(self.seed, bool) or not isinstance(self.seed, (int, np.integer)) or self.seed < 0:
            raise ConfigError(f"must be a non-negative integer, got {self.seed!r}", "seed")

    @classmethod
    def from_dict(cls, doc, base_dir: str | Path = ".") -> "ProtocolConfig":
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        for key in ("N", "p_M_A", "p_M_B", "tau", "seed", "server"):
            if key not in doc:
                raise ConfigError("missing field", key)
        server = server_from_dict(doc["server"], base_dir)
        return cls(doc["N"], doc["p_M_A"], doc["p_M_B"], doc["tau"], doc["seed"], server)

    def to_dict(self) -> dict:
        return {"N": int(self.N), "p_M_A": self.p_M_A, "p_M_B": self.p_M_B, "tau": self.tau,
                "seed": int(self.seed), "server": server_to_dict(self.server)}


def load_config(path: str | Path) -> tuple[ProtocolConfig, dict]:
    """Read a JSON config; returns the parsed config and the raw document."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(str(exc)) from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return ProtocolConfig.from_dict(doc, path.parent), doc


@dataclass(frozen=True)
class IterationRecord:
    a_measured: bool
    b_measured: bool
    a_bit: int | None
    b_bit: int | None
    message: int

    @property
    def kept(self) -> bool:
        return self.a_measured and self.b_measured and self.message == -1

    @property
    def reflect_error(self) -> bool:
        return not self.a_measured and not self.b_measured and self.message == -1


class Transcript(Sequence[IterationRecord]):
    """Columnar store of iteration records; bits use -1 for 'not measured'."""

    def __init__(self, a_measured, b_measured, a_bit, b_bit, message):
        self.a_measured = np.asarray(a_measured, dtype=bool)
        self.b_measured = np.asarray(b_measured, dtype=bool)
        self.a_bit = np.asarray(a_bit, dtype=np.int8)
        self.b_bit = np.asarray(b_bit, dtype=np.int8)
        self.message = np.asarray(message, dtype=np.int8)
        n = self.a_measured.size
        if any(arr.shape != (n,) for arr in (self.b_measured, self.a_bit, self.b_bit, self.message)):
            raise ValueError("transcript columns must have equal length")

    @classmethod
    def from_records(cls, records: Iterable[IterationRecord]) -> "Transcript":
        if isinstance(records, Transcript):
            return records
        rows = [(r.a_measured, r.b_measured, -1 if r.a_bit is None else r.a_bit,
                 -1 if r.b_bit is None else r.b_bit, r.message) for r in records]
        cols = list(zip(*rows)) if rows else [[]] * 5
        return cls(*cols)

    @classmethod
    def concatenate(cls, parts: Sequence["Transcript"]) -> "Transcript":
        return cls(*(np.concatenate([getattr(p, name) for p in parts])
                     for name in ("a_measured", "b_measured", "a_bit", "b_bit", "message")))

    @property
    def kept(self) -> np.ndarray:
        return self.a_measured & self.b_measured & (self.message == -1)

    @property
    def reflect_error(self) -> np.ndarray:
        return ~self.a_measured & ~self.b_measured & (self.message == -1)

    def __len__(self) -> int:
        return self.a_measured.size

    @overload
    def __getitem__(self, i: int) -> IterationRecord: ...
    @overload
    def __getitem__(self, i: slice) -> "Transcript": ...

    def __getitem__(self, i):
        if isinstance(i, slice):
            return Transcript(self.a_measured[i], self.b_measured[i], self.a_bit[i], self.b_bit[i], self.message[i])
        a, b = int(self.a_bit[i]), int(self.b_bit[i])
        return IterationRecord(bool(self.a_measured[i]), bool(self.b_measured[i]),
                               None if a < 0 else a, None if b < 0 else b, int(self.message[i]))

    def __eq__(self, other):
        if not isinstance(other, Transcript):
            return NotImplemented
        return all(np.array_equal(getattr(self, n), getattr(other, n))
                   for n in ("a_measured", "b_measured", "a_bit", "b_bit", "message"))

    def write_csv(self, path: str | Path) -> None:
        action = np.array(["reflect", "measure"])
        a_act = action[self.a_measured.astype(int)].tolist()
        b_act = action[self.b_measured.astype(int)].tolist()
        a_bit = ["" if x < 0 else str(x) for x in self.a_bit.tolist()]
        b_bit = ["" if x < 0 else str(x) for x in self.b_bit.tolist()]
        kept = self.kept.astype(int).tolist()
        rerr = self.reflect_error.astype(int).tolist()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iter", "a_action", "b_action", "a_bit", "b_bit", "message", "kept", "reflect_error"])
            w.writerows(zip(range(len(self)), a_act, b_act, a_bit, b_bit, self.message.tolist(), kept, rerr))


@dataclass(frozen=True, eq=False)
class RawKeys:
    info_A: np.ndarray
    info_B: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.info_A, dtype=np.uint8)
        b = np.asarray(self.info_B, dtype=np.uint8)
        if a.shape != b.shape or a.ndim != 1:
            raise ValueError(f"raw keys must be equal-length bit strings, got {a.shape} and {b.shape}")
        object.__setattr__(self, "info_A", a)
        object.__setattr__(self, "info_B", b)

    @property
    def n(self) -> int:
        return int(self.info_A.size)

    @property
    def mismatches(self) -> int:
        return int(np.count_nonzero(self.info_A != self.info_B))

    @classmethod
    def from_transcript(cls, records: Transcript) -> "RawKeys":
        kept = records.kept
        return cls(records.a_bit[kept].astype(np.uint8), records.b_bit[kept].astype(np.uint8))


# ---------------------------------------------------------------------------
# Per-iteration physics.  The vectorized sampler below evaluates exactly
# these functions on every reachable branch, so both paths agree bit-for-bit.


def _forward_ket(server: ServerMode, k: int) -> np.ndarray:
    if isinstance(server, Adversarial):
        return server.initial.ket
    return BELL[k]


def _forward_index(server: ServerMode, u_fire: float, u_pick: float) -> int:
    if isinstance(server, SemiHonest) and u_fire < server.noise.p:
        return min(int(4 * u_pick), 3)
    return 0


def _reverse_index(server: ServerMode, u_fire: float, u_pick: float) -> int:
    if isinstance(server, SemiHonest) and u_fire < server.noise.q:
        return min(int(4 * u_pick), 3)
    return -1


def _bell_outcome(ket: np.ndarray, u: float) -> int:
    cum = np.cumsum(bell_projection_probs(ket))
    return min(int(np.searchsorted(cum, u, side="right")), 3)


def _minus_interval(server: ServerMode, ket: np.ndarray, r: int) -> tuple[float, float]:
    """Range of the message draw that yields ``-1``."""
    if isinstance(server, Adversarial):
        return 0.0, minus_one_probability(server.attack, ket)
    if r >= 0:
        ket = BELL[r]
    cum = np.cumsum(bell_projection_probs(ket))
    return float(cum[0]), float(cum[1])


def iteration_from_uniforms(server: ServerMode, p_M_A: float, p_M_B: float, u: Sequence[float]) -> IterationRecord:
    """Run one iteration with explicit state vectors, driven by a uniform row."""
    a_meas = bool(u[0] < p_M_A)
    b_meas = bool(u[1] < p_M_B)
    ket = _forward_ket(server, _forward_index(server, u[2], u[3]))
    a_bit = b_bit = None
    if a_meas:
        a_bit, ket = z_collapse(ket, 0, u[4])
    if b_meas:
        b_bit, ket = z_collapse(ket, 1, u[5])
    r = _reverse_index(server, u[6], u[7])
    if isinstance(server, Adversarial):
        message, _ = attack_branch(server.attack, ket, u[8])
    else:
        if r >= 0:
            ket = BELL[r]
        message = -1 if _bell_outcome(ket, u[8]) == 1 else +1
    return IterationRecord(a_meas, b_meas, a_bit, b_bit, message)


def run_iteration(config: ProtocolConfig, rng: np.random.Generator) -> IterationRecord:
    u = rng.random(N_UNIFORMS)
    return iteration_from_uniforms(config.server, config.p_M_A, config.p_M_B, u)


class _Tables:
    """Outcome probabilities for every reachable branch of one server mode.

    User state index: 0 reflected, 1 measured 0, 2 measured 1.
    """

    def __init__(self, server: ServerMode):
        self.server = server
        n_fwd = 4 if isinstance(server, SemiHonest) else 1
        self.p_a0 = np.zeros(n_fwd)
        self.p_b0 = np.zeros((n_fwd, 3))
        self.p_a = np.zeros((n_fwd, 3))
        self.p_b = np.zeros((n_fwd, 3, 3))
        self.lo = np.zeros((n_fwd, 3, 3, 5))
        self.hi = np.zeros((n_fwd, 3, 3, 5))
        for k in range(n_fwd):
            ket = _forward_ket(server, k)
            a_kets = self._branches(ket, 0, self.p_a[k])
            self.p_a0[k] = self.p_a[k, 1]
            for sa, ka in enumerate(a_kets):
                if ka is None:
                    continue
                b_kets = self._branches(ka, 1, self.p_b[k, sa])
                self.p_b0[k, sa] = self.p_b[k, sa, 1]
                for sb, kb in enumerate(b_kets):
                    if kb is None:
                        continue
                    for r in range(-1, 4):
                        self.lo[k, sa, sb, r + 1], self.hi[k, sa, sb, r + 1] = _minus_interval(server, kb, r)

    @staticmethod
    def _branches(ket, qubit, probs_out):
        p0, k0 = z_branch(ket, qubit, 0)
        p1, k1 = z_branch(ket, qubit, 1)
        probs_out[:] = (1.0, p0, p1)
        return [ket, k0, k1]

    def sample(self, p_M_A: float, p_M_B: float, u: np.ndarray) -> Transcript:
        server = self.server
        n = u.shape[0]
        a_meas = u[:, 0] < p_M_A
        b_meas = u[:, 1] < p_M_B
        k = np.zeros(n, dtype=np.intp)
        r = np.full(n, -1, dtype=np.intp)
        if isinstance(server, SemiHonest):
            pick = np.minimum((4 * u[:, 3]).astype(np.intp), 3)
            k = np.where(u[:, 2] < server.noise.p, pick, 0)
            pick = np.minimum((4 * u[:, 7]).astype(np.intp), 3)
            r = np.where(u[:, 6] < server.noise.q, pick, -1)
        a_bit = np.where(a_meas, (u[:, 4] >= self.p_a0[k]).astype(np.int8), np.int8(-1)).astype(np.int8)
        sa = a_bit.astype(np.intp) + 1
        b_bit = np.where(b_meas, (u[:, 5] >= self.p_b0[k, sa]).astype(np.int8), np.int8(-1)).astype(np.int8)
        sb = b_bit.astype(np.intp) + 1
        lo = self.lo[k, sa, sb, r + 1]
        hi = self.hi[k, sa, sb, r + 1]
        minus = (u[:, 8] >= lo) & (u[:, 8] < hi)
        return Transcript(a_meas, b_meas, a_bit, b_bit, np.where(minus, -1, 1).astype(np.int8))

    def forward_weights(self) -> np.ndarray:
        if isinstance(self.server, SemiHonest):
            p = self.server.noise.p
            return np.array([1 - p + p / 4, p / 4, p / 4, p / 4])
        return np.ones(1)

    def reverse_weights(self) -> np.ndarray:
        q = self.server.noise.q if isinstance(self.server, SemiHonest) else 0.0
        return np.array([1 - q, q / 4, q / 4, q / 4, q / 4])


def chunk_uniforms(seed: int, chunk: int, n: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(int(chunk),)))
    return rng.random((n, N_UNIFORMS))


def iteration_uniforms(seed: int, i: int) -> np.ndarray:
    """The uniform row consumed by iteration ``i`` under ``seed``."""
    c, j = divmod(int(i), CHUNK)
    return chunk_uniforms(seed, c, j + 1)[j]


def simulate(config: ProtocolConfig, workers: int | None = None) -> Transcript:
    tables = _Tables(config.server)
    n_chunks = math.ceil(config.N / CHUNK)
    sizes = [min(CHUNK, config.N - c * CHUNK) for c in range(n_chunks)]

    def job(c):
        return tables.sample(config.p_M_A, config.p_M_B, chunk_uniforms(config.seed, c, sizes[c]))

    workers = worker_count() if workers is None else max(1, int(workers))
    if workers == 1 or n_chunks == 1:
        parts = [job(c) for c in range(n_chunks)]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(job, range(n_chunks)))
    return Transcript.concatenate(parts)


@dataclass(frozen=True)
class Estimate:
    """Binomial frequency estimate with its standard error."""

    value: float
    stderr: float
    count: int

    @classmethod
    def of(cls, hits: int, total: int) -> "Estimate | None":
        if total == 0:
            return None
        v = hits / total
        return cls(v, math.sqrt(v * (1 - v) / total), int(total))


@dataclass(frozen=True)
class TranscriptStats:
    n_iterations: int
    n_both_measure: int
    n_both_reflect: int
    n_one_measure: int
    n_kept: int
    n_reflect_errors: int
    counts_ij: tuple[int, int, int, int]
    minus_counts_ij: tuple[int, int, int, int]
    p_ij: tuple[Estimate | None, ...]
    Q: Estimate | None
    p_a: Estimate | None
    p_w: Estimate | None
    Q_Z: Estimate | None
    p_minus1_eq: Estimate | None
    p_minus1_neq: Estimate | None
    p_minus1_given: tuple[Estimate | None, ...]
    sift_rate: Estimate

    @property
    def reflect_error_rate(self) -> float | None:
        return None if self.p_w is None else self.p_w.value

    def to_dict(self) -> dict:
        return asdict(self)


def estimate_statistics(records: Iterable[IterationRecord]) -> TranscriptStats:
    t = Transcript.from_records(records)
    if len(t) == 0:
        raise ValueError("cannot estimate statistics from an empty transcript")
    both = t.a_measured & t.b_measured
    none_ = ~t.a_measured & ~t.b_measured
    minus = t.message == -1
    kept = both & minus
    counts, minus_counts = [], []
    for a in (0, 1):
        for b in (0, 1):
            cell = both & (t.a_bit == a) & (t.b_bit == b)
            counts.append(int(cell.sum()))
            minus_counts.append(int((cell & minus).sum()))
    n_both = int(both.sum())
    n_eq, n_neq = counts[0] + counts[3], counts[1] + counts[2]
    m_eq, m_neq = minus_counts[0] + minus_counts[3], minus_counts[1] + minus_counts[2]
    n_kept = int(kept.sum())
    return TranscriptStats(
        n_iterations=len(t),
        n_both_measure=n_both,
        n_both_reflect=int(none_.sum()),
        n_one_measure=int((t.a_measured ^ t.b_measured).sum()),
        n_kept=n_kept,
        n_reflect_errors=int((none_ & minus).sum()),
        counts_ij=tuple(counts),
        minus_counts_ij=tuple(minus_counts),
        p_ij=tuple(Estimate.of(c, n_both) for c in counts),
        Q=Estimate.of(n_neq, n_both),
        p_a=Estimate.of(int((both & minus).sum()), n_both),
        p_w=Estimate.of(int((none_ & minus).sum()), int(none_.sum())),
        Q_Z=Estimate.of(int((kept & (t.a_bit != t.b_bit)).sum()), n_kept),
        p_minus1_eq=Estimate.of(m_eq, n_eq),
        p_minus1_neq=Estimate.of(m_neq, n_neq),
        p_minus1_given=tuple(Estimate.of(m, c) for m, c in zip(minus_counts, counts)),
        sift_rate=Estimate.of(n_kept, len(t)),
    )


class ProtocolRun(NamedTuple):
    records: Transcript
    keys: RawKeys
    stats: TranscriptStats
    abort: bool


def run_protocol(config: ProtocolConfig, workers: int | None = None) -> ProtocolRun:
    """Run ``config.N`` iterations; abort iff the reflect-round error rate exceeds tau."""
    records = simulate(config, workers)
    stats = estimate_statistics(records)
    abort = stats.p_w is not None and stats.p_w.value > config.tau
    return ProtocolRun(records, RawKeys.from_transcript(records), stats, abort)


@dataclass(frozen=True)
class ZTest:
    name: str
    z: float | None
    passed: bool
    insufficient: bool = False


@dataclass(frozen=True)
class SymmetryReport:
    tests: tuple[ZTest, ...]
    z_sigma: float

    @property
    def passed(self) -> bool:
        return all(t.passed for t in self.tests)

    @property
    def insufficient(self) -> tuple[str, ...]:
        return tuple(t.name for t in self.tests if t.insufficient)

    def to_dict(self) -> dict:
        return {"passed": self.passed, "z_sigma": self.z_sigma, "tests": [asdict(t) for t in self.tests]}


def _cell_test(name: str, n1: int, n2: int, z_sigma: float) -> ZTest:
    # Given n1 + n2 both-measure rounds in the two cells, n1 ~ Bin(n1 + n2, 1/2) under symmetry.
    m = n1 + n2
    if m == 0:
        return ZTest(name, None, True, insufficient=True)
    z = (n1 - n2) / math.sqrt(m)
    return ZTest(name, z, abs(z) <= z_sigma)


def _two_proportion_test(name: str, x1: int, n1: int, x2: int, n2: int, z_sigma: float) -> ZTest:
    if n1 == 0 or n2 == 0:
        return ZTest(name, None, True, insufficient=True)
    pooled = (x1 + x2) / (n1 + n2)
    if pooled in (0.0, 1.0):
        return ZTest(name, 0.0, True)
    z = (x1 / n1 - x2 / n2) / math.sqrt(pooled * (1 - pooled) * (1 / n1 + 1 / n2))
    return ZTest(name, z, abs(z) <= z_sigma)


def check_symmetry(stats: TranscriptStats, z_sigma: float = 4.0) -> SymmetryReport:
    """z-tests of p00 = p11, p01 = p10 and of equal '-1' rates within each pair."""
    if stats.n_both_measure == 0:
        raise ValueError("symmetry check needs at least one both-measure round")
    n, m = stats.counts_ij, stats.minus_counts_ij
    tests = (
        _cell_test("p00=p11", n[0], n[3], z_sigma),
        _cell_test("p01=p10", n[1], n[2], z_sigma),
        _two_proportion_test("p(-1|00)=p(-1|11)", m[0], n[0], m[3], n[3], z_sigma),
        _two_proportion_test("p(-1|01)=p(-1|10)", m[1], n[1], m[2], n[2], z_sigma),
    )
    return SymmetryReport(tests, z_sigma)


@dataclass(frozen=True)
class ModelStatistics:
    """Exact outcome probabilities of a server mode (no sampling)."""

    p_ij: tuple[float, float, float, float]
    p_minus1_given: tuple[float, float, float, float]
    Q: float
    p_a: float
    p_w: float
    Q_Z: float | None
    p_minus1_eq: float | None
    p_minus1_neq: float | None


def model_statistics(server: ServerMode) -> ModelStatistics:
    """Exact statistics from the same branch tables the sampler uses."""
    tables = _Tables(server)
    wf, wr = tables.forward_weights(), tables.reverse_weights()
    joint = np.zeros(4)
    joint_minus = np.zeros(4)
    p_w = 0.0
    for k, w_k in enumerate(wf):
        span = tables.hi[k] - tables.lo[k]
        p_w += w_k * float(span[0, 0] @ wr)
        for a in (0, 1):
            pa = tables.p_a[k, a + 1]
            for b in (0, 1):
                pb = tables.p_b[k, a + 1, b + 1]
                joint[2 * a + b] += w_k * pa * pb
                joint_minus[2 * a + b] += w_k * pa * pb * float(span[a + 1, b + 1] @ wr)
    p_a = float(joint_minus.sum())
    eq, neq = joint[0] + joint[3], joint[1] + joint[2]

    def ratio(x, y):
        return float(x / y) if y > 0 else None

    return ModelStatistics(
        p_ij=tuple(float(x) for x in joint),
        p_minus1_given=tuple(ratio(joint_minus[i], joint[i]) for i in range(4)),
        Q=float(neq),
        p_a=p_a,
        p_w=float(p_w),
        Q_Z=ratio(joint_minus[1] + joint_minus[2], p_a),
        p_minus1_eq=ratio(joint_minus[0] + joint_minus[3], eq),
        p_minus1_neq=ratio(joint_minus[1] + joint_minus[2], neq),
    )
