"""Server behaviour models: honest, semi-honest behind depolarizing
channels, and adversarial attack operators.

An adversarial server is described by the images of the four Bell states
under its unitary attack,

    U|phi_i> = |e_i>|+1>_cl + |f_i>|-1>_cl,

with ``e_i``, ``f_i`` living in ``T_A (x) T_B (x) C``.  Any auxiliary
dilation registers are folded into the ancilla dimension ``d_C``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Any, Sequence, Union

import numpy as np

from .quantum import BELL, as_density_matrix, as_ket, bell_coefficients, dephase_qubit, random_unitary

GRAM_ATOL = 1e-8
SYMMETRY_ATOL = 1e-8
DEGENERATE_NORM = 1e-12


class ConfigError(ValueError):
    """Malformed configuration or attack-spec document.

    ``field`` names the offending entry as a dotted path when known.
    """

    def __init__(self, message: str, field: str | None = None):
        self.field = field
        super().__init__(f"{field}: {message}" if field else message)


class AttackSpecError(ConfigError):
    pass


def _probability(value: Any, name: str) -> float:
    try:
        x = float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"expected a number, got {value!r}", name) from None
    if not 0.0 <= x <= 1.0:
        raise ConfigError(f"must lie in [0, 1], got {x!r}", name)
    return x


@dataclass(frozen=True)
class DepolarizingPair:
    """Forward (``p``) and reverse (``q``) depolarizing strengths."""

    p: float
    q: float

    def __post_init__(self):
        object.__setattr__(self, "p", _probability(self.p, "p"))
        object.__setattr__(self, "q", _probability(self.q, "q"))


def depolarize(rho: np.ndarray, lam: float) -> np.ndarray:
    """Return (1 - lam) rho + lam I/d."""
    lam = float(lam)
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"depolarizing parameter must be in [0, 1], got {lam!r}")
    rho = as_density_matrix(rho)
    d = rho.shape[0]
    return (1 - lam) * rho + lam * np.eye(d, dtype=complex) / d


def semi_honest_f_norms(q: float) -> tuple[float, float, float, float]:
    """<f_i|f_i> for an honest Bell measurement behind a depolarizing
    return channel of strength ``q``."""
    q = float(q)
    if not 0.0 <= q <= 1.0:
        raise ValueError(f"q must be in [0, 1], got {q!r}")
    return (q / 4, 1 - 3 * q / 4, q / 4, q / 4)


@dataclass(frozen=True)
class Check:
    name: str
    passed: bool
    deviation: float
    tolerance: float

    def __str__(self):
        status = "pass" if self.passed else "FAIL"
        return f"{status} {self.name}: deviation {self.deviation:.3g} (tol {self.tolerance:.0e})"


@dataclass(frozen=True)
class AttackReport:
    checks: tuple[Check, ...]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def __str__(self):
        return "\n".join(str(c) for c in self.checks)


@dataclass(frozen=True, eq=False)
class AttackOperator:
    """Bell-basis images ``e[i]``, ``f[i]`` (rows) of an attack unitary."""

    d_C: int
    e: np.ndarray
    f: np.ndarray

    def __post_init__(self):
        if int(self.d_C) < 1:
            raise ValueError(f"ancilla dimension must be positive, got {self.d_C!r}")
        dim = 4 * int(self.d_C)
        for name in ("e", "f"):
            arr = np.array(getattr(self, name), dtype=complex)
            if arr.shape != (4, dim):
                raise ValueError(f"{name} must have shape (4, {dim}), got {arr.shape}")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "d_C", int(self.d_C))

    @property
    def dim(self) -> int:
        return 4 * self.d_C

    @cached_property
    def gram_e(self) -> np.ndarray:
        return self.e.conj() @ self.e.T

    @cached_property
    def gram_f(self) -> np.ndarray:
        return self.f.conj() @ self.f.T

    @property
    def f_norms(self) -> np.ndarray:
        return np.real(np.diag(self.gram_f)).copy()

    @cached_property
    def gram_deviation(self) -> float:
        return float(np.max(np.abs(self.gram_e + self.gram_f - np.eye(4))))

    @property
    def symmetry_deviations(self) -> tuple[float, float]:
        g = self.gram_f
        return abs(g[0, 1].real), abs(g[2, 3].real)

    @classmethod
    def from_computational_images(cls, e_comp, f_comp, d_C: int) -> "AttackOperator":
        """Build from the images of |00>, |01>, |10>, |11> instead of the Bell states."""
        e_comp = np.asarray(e_comp, dtype=complex)
        f_comp = np.asarray(f_comp, dtype=complex)
        return cls(d_C, BELL @ e_comp, BELL @ f_comp)

    def precompose(self, unitary: np.ndarray) -> "AttackOperator":
        """Attack ``U V`` for a unitary ``V`` acting on the two returned qubits."""
        v = np.asarray(unitary, dtype=complex)
        v_bell = BELL.conj() @ v @ BELL.T
        return AttackOperator(self.d_C, v_bell.T @ self.e, v_bell.T @ self.f)

    def to_dict(self, symmetric: bool = True) -> dict:
        def pairs(rows):
            return [[[float(z.real), float(z.imag)] for z in row] for row in rows]

        return {"d_C": self.d_C, "e": pairs(self.e), "f": pairs(self.f), "symmetric": bool(symmetric)}


def _ancilla_zero(d_C: int) -> np.ndarray:
    c = np.zeros(d_C, dtype=complex)
    c[0] = 1
    return c


def honest_attack(d_C: int = 1) -> AttackOperator:
    """Honest Bell measurement: ``-1`` exactly on Phi-."""
    c0 = _ancilla_zero(d_C)
    e = np.array([np.kron(BELL[i], c0) if i != 1 else np.zeros(4 * d_C) for i in range(4)])
    f = np.array([np.kron(BELL[i], c0) if i == 1 else np.zeros(4 * d_C) for i in range(4)])
    return AttackOperator(d_C, e, f)


def always_minus_one_attack(d_C: int = 1) -> AttackOperator:
    c0 = _ancilla_zero(d_C)
    f = np.array([np.kron(BELL[i], c0) for i in range(4)])
    return AttackOperator(d_C, np.zeros_like(f), f)


_PAULIS = (
    np.eye(2, dtype=complex),
    np.array([[0, 1], [1, 0]], dtype=complex),
    np.array([[0, -1j], [1j, 0]], dtype=complex),
    np.array([[1, 0], [0, -1]], dtype=complex),
)


def semi_honest_attack(q: float) -> AttackOperator:
    """Explicit attack for an honest Bell measurement behind a two-qubit
    depolarizing return channel, with the channel environment handed to
    the server (16-dimensional ancilla)."""
    q = _probability(q, "q")
    kraus = []
    for a in _PAULIS:
        for b in _PAULIS:
            kraus.append(np.kron(a, b))
    weights = np.full(16, q / 16)
    weights[0] += 1 - q
    p1 = np.outer(BELL[1], BELL[1].conj())
    keep = np.eye(4) - p1
    e = np.zeros((4, 64), dtype=complex)
    f = np.zeros((4, 64), dtype=complex)
    for i in range(4):
        for k, (w, op) in enumerate(zip(weights, kraus)):
            out = np.sqrt(w) * (op @ BELL[i])
            env = np.zeros(16)
            env[k] = 1
            f[i] += np.kron(p1 @ out, env)
            e[i] += np.kron(keep @ out, env)
    return AttackOperator(16, e, f)


def validate_attack(attack: AttackOperator, symmetric: bool = False) -> AttackReport:
    """Check the isometry condition and, optionally, the symmetry constraints."""
    checks = [Check("isometry", attack.gram_deviation <= GRAM_ATOL, attack.gram_deviation, GRAM_ATOL)]
    if symmetric:
        d01, d23 = attack.symmetry_deviations
        checks.append(Check("Re<f0|f1>=0", d01 <= SYMMETRY_ATOL, d01, SYMMETRY_ATOL))
        checks.append(Check("Re<f2|f3>=0", d23 <= SYMMETRY_ATOL, d23, SYMMETRY_ATOL))
    return AttackReport(tuple(checks))


def _require_valid(attack: AttackOperator) -> None:
    if attack.gram_deviation > GRAM_ATOL:
        raise ValueError(f"attack is not an isometry (Gram deviation {attack.gram_deviation:.3g})")


def attack_branches(attack: AttackOperator, returned: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Unnormalized ``(+1, -1)`` branch vectors for a returned two-qubit ket."""
    _require_valid(attack)
    c = bell_coefficients(returned)
    if np.linalg.norm(c) < DEGENERATE_NORM:
        raise ValueError("returned state has (numerically) zero norm")
    return c @ attack.e, c @ attack.f


def minus_one_probability(attack: AttackOperator, returned: np.ndarray) -> float:
    _, fv = attack_branches(attack, returned)
    return float(np.vdot(fv, fv).real)


def attack_branch(attack: AttackOperator, returned: np.ndarray, u: float) -> tuple[int, np.ndarray]:
    """Resolve the server's message with a uniform draw: ``-1`` iff ``u < P(-1)``."""
    ev, fv = attack_branches(attack, returned)
    p_minus = float(np.vdot(fv, fv).real)
    if u < p_minus:
        return -1, fv / np.sqrt(p_minus)
    p_plus = float(np.vdot(ev, ev).real)
    return +1, ev / np.sqrt(p_plus)


def attack_response(attack: AttackOperator, returned: np.ndarray,
                    rng: np.random.Generator) -> tuple[int, np.ndarray]:
    """Apply the attack to a returned ket and sample the announced message.

    Returns the message (+1 or -1) and the normalized post-measurement
    ket on ``T_A (x) T_B (x) C``.
    """
    returned = as_ket(returned, normalized=True)
    return attack_branch(attack, returned, float(rng.random()))


def random_symmetric_attack(d_C: int, rng: np.random.Generator, scale: float | None = None) -> AttackOperator:
    """Random attack satisfying Re<f0|f1> = Re<f2|f3> = 0 and the isometry.

    The raw f-vectors are rescaled by the largest ``s <= 1`` keeping
    ``I - s^2 G_f`` PSD, then by ``scale`` (drawn at random when None;
    a quarter of draws sit exactly on the boundary).  The e-vectors are
    a factorization of ``I - G_f`` placed in a random subspace.
    """
    d_C = int(d_C)
    if d_C < 1:
        raise ValueError("d_C must be >= 1")
    dim = 4 * d_C
    f = (rng.standard_normal((4, dim)) + 1j * rng.standard_normal((4, dim))) / np.sqrt(2)
    f *= rng.uniform(0.0, 1.0, size=(4, 1))
    for a, b in ((0, 1), (2, 3)):
        na = np.vdot(f[a], f[a]).real
        if na > 0:
            f[b] -= (np.vdot(f[a], f[b]).real / na) * f[a]

    gram = f.conj() @ f.T
    lam_max = float(np.linalg.eigvalsh(gram).max())
    s_max = 1.0 if lam_max <= 1.0 else 1.0 / np.sqrt(lam_max)
    if scale is None:
        scale = 1.0 if rng.random() < 0.25 else float(rng.random())
    f *= s_max * float(scale)

    remainder = np.eye(4) - f.conj() @ f.T
    lam, w = np.linalg.eigh(0.5 * (remainder + remainder.conj().T))
    lam = np.clip(lam, 0.0, None)
    frame = random_unitary(dim, rng)[:, :4]
    cols = frame @ np.diag(np.sqrt(lam)) @ w.conj().T  # columns are the e_i
    return AttackOperator(d_C, cols.T, f)


def load_attack(doc: dict) -> tuple[AttackOperator, bool]:
    """Parse an attack-spec document and refuse it unless it validates."""
    try:
        d_C = int(doc["d_C"])
        vecs = {}
        for name in ("e", "f"):
            rows = doc[name]
            if len(rows) != 4:
                raise AttackSpecError(f"needs 4 vectors, got {len(rows)}", name)
            vecs[name] = np.array([[complex(re, im) for re, im in row] for row in rows])
        symmetric = bool(doc.get("symmetric", False))
    except KeyError as exc:
        raise AttackSpecError("missing field", str(exc.args[0])) from None
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise AttackSpecError(f"malformed attack spec: {exc}") from None
    try:
        attack = AttackOperator(d_C, vecs["e"], vecs["f"])
    except ValueError as exc:
        raise AttackSpecError(str(exc)) from None
    report = validate_attack(attack, symmetric)
    if not report.passed:
        raise AttackSpecError("attack failed validation:\n" + str(report))
    return attack, symmetric


def load_attack_file(path: str | Path) -> tuple[AttackOperator, bool]:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise AttackSpecError(f"invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return load_attack(doc)


def save_attack_file(attack: AttackOperator, path: str | Path, symmetric: bool = True) -> None:
    Path(path).write_text(json.dumps(attack.to_dict(symmetric), indent=1) + "\n")


@dataclass(frozen=True, eq=False)
class InitialState:
    """Two-qubit state the server sends out, amplitudes alpha_{ij}."""

    alpha: np.ndarray

    def __post_init__(self):
        alpha = np.array(self.alpha, dtype=complex).reshape(-1)
        if alpha.shape != (4,):
            raise ValueError(f"alpha needs 4 amplitudes, got {alpha.size}")
        as_ket(alpha, normalized=True)
        alpha.setflags(write=False)
        object.__setattr__(self, "alpha", alpha)

    @property
    def ket(self) -> np.ndarray:
        return self.alpha

    @property
    def Q(self) -> float:
        return float(abs(self.alpha[1]) ** 2 + abs(self.alpha[2]) ** 2)

    @classmethod
    def symmetric(cls, Q: float, phases: Sequence[float] = (0, 0, 0, 0)) -> "InitialState":
        Q = _probability(Q, "Q")
        mags = np.sqrt([(1 - Q) / 2, Q / 2, Q / 2, (1 - Q) / 2])
        return cls(mags * np.exp(1j * np.asarray(phases, dtype=float)))

    @classmethod
    def worst_case(cls, Q: float) -> "InitialState":
        """sqrt(1-Q)|Phi+> + sqrt(Q)|Psi+>."""
        Q = _probability(Q, "Q")
        return cls(np.sqrt(1 - Q) * BELL[0] + np.sqrt(Q) * BELL[2])

    def is_symmetric(self, atol: float = 1e-10) -> bool:
        w = np.abs(self.alpha) ** 2
        return abs(w[0] - w[3]) <= atol and abs(w[1] - w[2]) <= atol


@dataclass(frozen=True)
class Honest:
    mode: str = field(default="honest", init=False)


@dataclass(frozen=True)
class SemiHonest:
    noise: DepolarizingPair
    mode: str = field(default="semi-honest", init=False)


@dataclass(frozen=True)
class Adversarial:
    initial: InitialState
    attack: AttackOperator
    symmetric: bool = True
    mode: str = field(default="adversarial", init=False)


ServerMode = Union[Honest, SemiHonest, Adversarial]


_NAMED_ATTACKS = {"honest": honest_attack, "always-minus-one": always_minus_one_attack}


def _named_attack(name: str, d_C: Any, prefix: str) -> AttackOperator:
    if name not in _NAMED_ATTACKS:
        raise ConfigError(f"unknown attack {name!r} ({', '.join(_NAMED_ATTACKS)})", f"{prefix}.attack")
    if isinstance(d_C, bool) or not isinstance(d_C, int) or d_C < 1:
        raise ConfigError(f"must be a positive integer, got {d_C!r}", f"{prefix}.d_C")
    return _NAMED_ATTACKS[name](d_C)


def server_from_dict(doc: Any, base_dir: str | Path = ".", prefix: str = "server") -> ServerMode:
    """Parse the ``mode``-tagged server description of a config file."""
    if not isinstance(doc, dict):
        raise ConfigError("expected an object", prefix)
    mode = doc.get("mode")
    if mode == "honest":
        return Honest()
    if mode == "semi-honest":
        for key in ("p", "q"):
            if key not in doc:
                raise ConfigError("missing field", f"{prefix}.{key}")
        p = _probability(doc["p"], f"{prefix}.p")
        q = _probability(doc["q"], f"{prefix}.q")
        return SemiHonest(DepolarizingPair(p, q))
    if mode == "adversarial":
        init = doc.get("initial_state", {"worst_case_Q": 0.0})
        if not isinstance(init, dict):
            raise ConfigError("expected an object", f"{prefix}.initial_state")
        try:
            if "alpha" in init:
                initial = InitialState([complex(re, im) for re, im in init["alpha"]])
            elif "worst_case_Q" in init:
                initial = InitialState.worst_case(_probability(init["worst_case_Q"], f"{prefix}.initial_state.worst_case_Q"))
            else:
                raise ConfigError("needs 'alpha' or 'worst_case_Q'", f"{prefix}.initial_state")
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc), f"{prefix}.initial_state") from None
        try:
            if isinstance(doc.get("attack"), str):
                attack, symmetric = _named_attack(doc["attack"], doc.get("d_C", 1), prefix), True
            elif "attack" in doc:
                attack, symmetric = load_attack(doc["attack"])
            elif "attack_file" in doc:
                attack, symmetric = load_attack_file(Path(base_dir) / doc["attack_file"])
            else:
                raise ConfigError("needs 'attack' or 'attack_file'", prefix)
        except OSError as exc:
            raise ConfigError(str(exc), f"{prefix}.attack_file") from None
        except AttackSpecError as exc:
            raise ConfigError(str(exc), f"{prefix}.attack") from None
        return Adversarial(initial, attack, symmetric)
    raise ConfigError(f"unknown mode {mode!r} (honest, semi-honest, adversarial)", f"{prefix}.mode")


def server_to_dict(server: ServerMode) -> dict:
    if isinstance(server, Honest):
        return {"mode": "honest"}
    if isinstance(server, SemiHonest):
        return {"mode": "semi-honest", "p": server.noise.p, "q": server.noise.q}
    alpha = [[float(z.real), float(z.imag)] for z in server.initial.alpha]
    return {"mode": "adversarial", "initial_state": {"alpha": alpha}, "attack": server.attack.to_dict(server.symmetric)}


# ---------------------------------------------------------------------------
# Users' operations on an entangled start state.


def user_operations(rho: np.ndarray, dims: Sequence[int], p_M_A: float, p_M_B: float) -> np.ndarray:
    """State returned to the server, averaged over both users' choices.

    Factors 0 and 1 of ``dims`` are the transit qubits; a measure-resend
    acts as a Z dephasing of that qubit.
    """
    dims = list(dims)
    out = np.zeros_like(np.asarray(rho, dtype=complex))
    for a_meas, pa in ((True, p_M_A), (False, 1 - p_M_A)):
        for b_meas, pb in ((True, p_M_B), (False, 1 - p_M_B)):
            if pa * pb == 0:
                continue
            sigma = rho
            if a_meas:
                sigma = dephase_qubit(sigma, 0, dims)
            if b_meas:
                sigma = dephase_qubit(sigma, 1, dims)
            out = out + pa * pb * sigma
    return out


def controlled_preparation(c_kets: np.ndarray) -> np.ndarray:
    """Unitary ``V`` with ``V|i,j,0> = |i,j,c_ij>`` on ``T_A (x) T_B (x) C``.

    ``c_kets`` has one normalized ancilla ket per row, in |00>,|01>,|10>,|11> order.
    """
    c_kets = np.asarray(c_kets, dtype=complex)
    d = c_kets.shape[1]
    v = np.zeros((4 * d, 4 * d), dtype=complex)
    for ij, c in enumerate(c_kets):
        q, _ = np.linalg.qr(np.column_stack([c, np.eye(d)]))
        q = q[:, :d]
        q[:, 0] *= np.vdot(q[:, 0], c)
        block = np.zeros((4, 4))
        block[ij, ij] = 1
        v += np.kron(block, q)
    return v
