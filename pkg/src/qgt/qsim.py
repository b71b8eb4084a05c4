"""Dense statevector simulator with exact expectation gradients.

Conventions
-----------
* ``R_P(a) = exp(-i a P / 2)`` for ``P`` in ``{X, Y, Z}``.
* Qubit 0 is the most significant bit of the basis index, so ``|1000>`` is
  basis index 8 on four qubits.
* ``QFT`` is the plain DFT unitary ``F[j, k] = exp(2 pi i j k / N) / sqrt(N)``.

The array kernels (``*_array`` / ``simulate`` / ``adjoint_jacobian``) accept
amplitude arrays with arbitrary leading batch dimensions, which is how the
attention layer pushes all tokens of a sentence through a circuit at once.
The ``Statevector`` functions are thin single-state wrappers around them.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Mapping, Sequence, Union

import numpy as np

MAX_QUBITS = 12
NORM_ATOL = 1e-10

ROTATIONS = ("RX", "RY", "RZ")
GATE_KINDS = ROTATIONS + ("CNOT", "QFT")
PAULIS = ("X", "Y", "Z")


class SimulatorError(ValueError):
    pass


class BindingError(SimulatorError):
    pass


class UnsupportedGateError(SimulatorError):
    pass


# --------------------------------------------------------------------------
# Angle sources and circuit descriptions
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Param:
    """Symbolic angle: ``bindings[source][..., index]``."""

    index: int
    source: str = "params"


@dataclass(frozen=True)
class InputSum:
    """Symbolic angle: ``sum(bindings[source][..., start:stop])``."""

    start: int
    stop: int
    source: str = "inputs"


AngleSource = Union[float, Param, InputSum]
Bindings = Mapping[str, np.ndarray]


def is_symbolic(angle) -> bool:
    return isinstance(angle, (Param, InputSum))


@dataclass(frozen=True)
class GateDesc:
    kind: str
    target: int = 0
    control: int | None = None
    angle: AngleSource | None = None
    adjoint: bool = False  # QFT only: apply the inverse transform

    def __post_init__(self):
        if self.kind not in GATE_KINDS:
            raise SimulatorError(f"unknown gate kind {self.kind!r}")
        if self.kind in ROTATIONS:
            if self.angle is None:
                raise SimulatorError(f"{self.kind} needs an angle source")
            if not is_symbolic(self.angle) and not np.isfinite(self.angle):
                raise SimulatorError(f"non-finite angle {self.angle!r}")
        elif self.angle is not None:
            raise SimulatorError(f"{self.kind} takes no angle")
        if self.kind == "CNOT":
            if self.control is None or self.control == self.target:
                raise SimulatorError("CNOT requires a control distinct from its target")
        elif self.control is not None:
            raise SimulatorError(f"{self.kind} takes no control qubit")


@dataclass(frozen=True)
class CircuitDesc:
    gates: tuple[GateDesc, ...]
    qubit_count: int

    def __post_init__(self):
        object.__setattr__(self, "gates", tuple(self.gates))
        _check_qubit_count(self.qubit_count)
        for g in self.gates:
            wires = [g.target] + ([g.control] if g.control is not None else [])
            for w in wires:
                if not 0 <= w < self.qubit_count:
                    raise SimulatorError(
                        f"{g.kind} qubit {w} out of range [0, {self.qubit_count})"
                    )

    def __add__(self, other: "CircuitDesc") -> "CircuitDesc":
        if other.qubit_count != self.qubit_count:
            raise SimulatorError("cannot concatenate circuits of different widths")
        return CircuitDesc(self.gates + other.gates, self.qubit_count)

    @property
    def symbolic_gates(self) -> list[int]:
        """Positions (in gate order) of gates whose angle is symbolic."""
        return [i for i, g in enumerate(self.gates) if is_symbolic(g.angle)]

    def structure(self) -> tuple:
        """Gate layout with angle values erased (used for structural equality)."""
        return tuple((g.kind, g.target, g.control, g.adjoint) for g in self.gates)


def resolve_angle(angle: AngleSource, bindings: Bindings | None):
    if not is_symbolic(angle):
        return angle
    if bindings is None or angle.source not in bindings:
        raise BindingError(f"no binding named {angle.source!r} for {angle!r}")
    values = np.asarray(bindings[angle.source], dtype=float)
    try:
        if isinstance(angle, Param):
            if not 0 <= angle.index < values.shape[-1]:
                raise IndexError
            return values[..., angle.index]
        if angle.stop > values.shape[-1] or angle.start < 0:
            raise IndexError
        return values[..., angle.start:angle.stop].sum(axis=-1)
    except IndexError:
        raise BindingError(
            f"{angle!r} out of range for binding {angle.source!r} of shape {values.shape}"
        ) from None


def bind(desc: CircuitDesc, bindings: Bindings | None) -> CircuitDesc:
    """Replace symbolic angles by literal floats (unbatched bindings only)."""
    gates = []
    for g in desc.gates:
        if is_symbolic(g.angle):
            value = np.asarray(resolve_angle(g.angle, bindings))
            if value.ndim:
                raise BindingError("bind() needs scalar angles; got batched bindings")
            g = GateDesc(g.kind, g.target, g.control, float(value))
        gates.append(g)
    return CircuitDesc(gates, desc.qubit_count)


def inverse(desc: CircuitDesc) -> CircuitDesc:
    """Adjoint circuit: reversed order, negated angles, inverse QFT."""
    gates = []
    for g in reversed(desc.gates):
        if is_symbolic(g.angle):
            raise SimulatorError("bind() the circuit before inverting it")
        if g.kind in ROTATIONS:
            gates.append(GateDesc(g.kind, g.target, angle=-g.angle))
        elif g.kind == "QFT":
            gates.append(GateDesc("QFT", adjoint=not g.adjoint))
        else:
            gates.append(g)
    return CircuitDesc(gates, desc.qubit_count)


# --------------------------------------------------------------------------
# Array kernels
# --------------------------------------------------------------------------


def _check_qubit_count(n: int) -> None:
    if not isinstance(n, (int, np.integer)) or not 1 <= n <= MAX_QUBITS:
        raise SimulatorError(f"qubit count must be an integer in [1, {MAX_QUBITS}], got {n!r}")


def _split(psi: np.ndarray, qubit: int, n: int) -> np.ndarray:
    return psi.reshape(psi.shape[:-1] + (2**qubit, 2, 2 ** (n - qubit - 1)))


def rotation_array(psi: np.ndarray, kind: str, qubit: int, angle, n: int) -> np.ndarray:
    """``R_kind(angle)`` on ``qubit``; ``angle`` broadcasts over batch dims."""
    half = np.asarray(angle, dtype=float)[..., None, None] / 2.0
    c, s = np.cos(half), np.sin(half)
    v = _split(psi, qubit, n)
    a0, a1 = v[..., 0, :], v[..., 1, :]
    out = np.empty(np.broadcast_shapes(v.shape, half.shape[:-2] + (1, 1, 1)), dtype=complex)
    if kind == "RX":
        out[..., 0, :] = c * a0 - 1j * s * a1
        out[..., 1, :] = c * a1 - 1j * s * a0
    elif kind == "RY":
        out[..., 0, :] = c * a0 - s * a1
        out[..., 1, :] = s * a0 + c * a1
    elif kind == "RZ":
        out[..., 0, :] = (c - 1j * s) * a0
        out[..., 1, :] = (c + 1j * s) * a1
    else:
        raise UnsupportedGateError(f"{kind} is not a rotation")
    return out.reshape(out.shape[:-3] + (2**n,))


def pauli_array(psi: np.ndarray, pauli: str, qubit: int, n: int) -> np.ndarray:
    v = _split(psi, qubit, n)
    out = np.empty_like(v)
    if pauli == "X":
        out[..., 0, :] = v[..., 1, :]
        out[..., 1, :] = v[..., 0, :]
    elif pauli == "Y":
        out[..., 0, :] = -1j * v[..., 1, :]
        out[..., 1, :] = 1j * v[..., 0, :]
    elif pauli == "Z":
        out[..., 0, :] = v[..., 0, :]
        out[..., 1, :] = -v[..., 1, :]
    else:
        raise SimulatorError(f"unknown Pauli {pauli!r}")
    return out.reshape(psi.shape)


@lru_cache(maxsize=None)
def _cnot_permutation(control: int, target: int, n: int) -> np.ndarray:
    k = np.arange(2**n)
    cbit = (k >> (n - 1 - control)) & 1
    return np.where(cbit == 1, k ^ (1 << (n - 1 - target)), k)


def cnot_array(psi: np.ndarray, control: int, target: int, n: int) -> np.ndarray:
    if control == target:
        raise SimulatorError("CNOT control and target must differ")
    return psi[..., _cnot_permutation(control, target, n)]


@lru_cache(maxsize=None)
def dft_matrix(n: int) -> np.ndarray:
    dim = 2**n
    j = np.arange(dim)
    mat = np.exp(2j * np.pi * np.outer(j, j) / dim) / np.sqrt(dim)
    mat.setflags(write=False)
    return mat


def qft_array(psi: np.ndarray, n: int, adjoint: bool = False) -> np.ndarray:
    f = dft_matrix(n)
    # row-vector form: (F psi)^T = psi^T F^T, and F is symmetric
    return psi @ (f.conj() if adjoint else f)


def apply_gate_array(psi, gate: GateDesc, n: int, bindings: Bindings | None = None, dagger=False):
    if gate.kind in ROTATIONS:
        angle = resolve_angle(gate.angle, bindings)
        return rotation_array(psi, gate.kind, gate.target, -angle if dagger else angle, n)
    if gate.kind == "CNOT":
        return cnot_array(psi, gate.control, gate.target, n)
    return qft_array(psi, n, adjoint=gate.adjoint != dagger)


def simulate(desc: CircuitDesc, psi: np.ndarray, bindings: Bindings | None = None) -> np.ndarray:
    """Run ``desc`` on amplitude array(s) ``psi`` of shape ``(..., 2**n)``."""
    psi = np.asarray(psi, dtype=complex)
    for g in desc.gates:
        psi = apply_gate_array(psi, g, desc.qubit_count, bindings)
    return psi


def expectation_array(psi: np.ndarray, pauli: str, qubit: int, n: int) -> np.ndarray:
    z = np.sum(psi.conj() * pauli_array(psi, pauli, qubit, n), axis=-1)
    residue = np.max(np.abs(z.imag), initial=0.0)
    if residue > NORM_ATOL:
        raise SimulatorError(f"expectation has imaginary residue {residue:.3e}; state not normalized?")
    return z.real


def adjoint_jacobian(
    desc: CircuitDesc,
    psi0: np.ndarray,
    bindings: Bindings | None,
    observables: Sequence[tuple[str, int]],
) -> tuple[np.ndarray, np.ndarray]:
    """Expectations and their Jacobian w.r.t. every symbolic angle.

    Returns ``(values, jac)`` with shapes ``(..., M)`` and ``(..., M, S)``
    where ``M = len(observables)`` and ``S`` counts symbolic gates in order.
    One forward pass plus one reverse sweep.
    """
    n = desc.qubit_count
    sym = desc.symbolic_gates
    for i in sym:
        if desc.gates[i].kind not in ROTATIONS:
            raise UnsupportedGateError(f"cannot differentiate {desc.gates[i].kind}")
    phi = simulate(desc, psi0, bindings)
    lam = np.stack([pauli_array(phi, p, q, n) for p, q in observables], axis=-2)
    values = np.sum(phi.conj()[..., None, :] * lam, axis=-1).real

    # angles get an extra axis so they broadcast against the observable axis of lam
    bexp = None if bindings is None else {k: np.asarray(v)[..., None, :] for k, v in bindings.items()}
    jac = np.zeros(values.shape + (len(sym),))
    col = len(sym)
    for pos in range(len(desc.gates) - 1, -1, -1):
        g = desc.gates[pos]
        if is_symbolic(g.angle):
            col -= 1
            pphi = pauli_array(phi, g.kind[1], g.target, n)
            jac[..., col] = np.sum(lam.conj() * pphi[..., None, :], axis=-1).imag
        phi = apply_gate_array(phi, g, n, bindings, dagger=True)
        lam = apply_gate_array(lam, g, n, bexp, dagger=True)
    return values, jac


def _shifted_bindings(desc: CircuitDesc, bindings: Bindings, gate_pos: int, shift: float):
    """Bindings plus a literal shift on one gate, realised by rewriting that gate."""
    g = desc.gates[gate_pos]
    angle = resolve_angle(g.angle, bindings)
    gates = list(desc.gates)
    gates[gate_pos] = GateDesc(g.kind, g.target, angle=Param(0, source="__shift__"))
    shifted = dict(bindings)
    shifted["__shift__"] = (np.asarray(angle, dtype=float) + shift)[..., None]
    return CircuitDesc(gates, desc.qubit_count), shifted


def parameter_shift_jacobian(
    desc: CircuitDesc,
    psi0: np.ndarray,
    bindings: Bindings | None,
    observables: Sequence[tuple[str, int]],
) -> np.ndarray:
    """Same Jacobian as :func:`adjoint_jacobian`, via +-pi/2 shifts per gate."""
    n = desc.qubit_count
    cols = []
    for pos in desc.symbolic_gates:
        if desc.gates[pos].kind not in ROTATIONS:
            raise UnsupportedGateError(f"cannot differentiate {desc.gates[pos].kind}")
        diff = 0.0
        for sign in (1.0, -1.0):
            c, b = _shifted_bindings(desc, bindings or {}, pos, sign * np.pi / 2)
            psi = simulate(c, psi0, b)
            vals = np.stack([expectation_array(psi, p, q, n) for p, q in observables], axis=-1)
            diff = diff + sign * vals
        cols.append(diff / 2.0)
    if not cols:
        return np.zeros(np.shape(psi0)[:-1] + (len(observables), 0))
    return np.stack(cols, axis=-1)


# --------------------------------------------------------------------------
# Single-state API
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Statevector:
    amplitudes: np.ndarray = field(repr=False)

    def __post_init__(self):
        amps = np.array(self.amplitudes, dtype=complex)
        if amps.ndim != 1:
            raise SimulatorError("amplitudes must be a 1-D vector")
        n = int(round(np.log2(amps.size))) if amps.size else 0
        if amps.size != 2**n:
            raise SimulatorError(f"length {amps.size} is not a power of two")
        _check_qubit_count(n)
        norm = np.vdot(amps, amps).real
        if abs(norm - 1.0) > NORM_ATOL:
            raise SimulatorError(f"state norm {norm!r} deviates from 1")
        amps.setflags(write=False)
        object.__setattr__(self, "amplitudes", amps)

    @property
    def qubit_count(self) -> int:
        return self.amplitudes.size.bit_length() - 1


def zero_state(n: int) -> Statevector:
    _check_qubit_count(n)
    amps = np.zeros(2**n, dtype=complex)
    amps[0] = 1.0
    return Statevector(amps)


def basis_state(bits: str) -> Statevector:
    """``basis_state("1000")`` is |1000> with qubit 0 leftmost."""
    amps = np.zeros(2 ** len(bits), dtype=complex)
    amps[int(bits, 2)] = 1.0
    return Statevector(amps)


def _check_qubit(state: Statevector, qubit: int) -> None:
    if not 0 <= qubit < state.qubit_count:
        raise SimulatorError(f"qubit {qubit} out of range [0, {state.qubit_count})")


def apply_rotation(state: Statevector, kind: str, qubit: int, angle: float) -> Statevector:
    _check_qubit(state, qubit)
    if not np.isfinite(angle):
        raise SimulatorError(f"non-finite angle {angle!r}")
    if kind not in ROTATIONS:
        raise UnsupportedGateError(f"{kind} is not a rotation")
    return Statevector(rotation_array(state.amplitudes, kind, qubit, angle, state.qubit_count))


def apply_cnot(state: Statevector, control: int, target: int) -> Statevector:
    _check_qubit(state, control)
    _check_qubit(state, target)
    return Statevector(cnot_array(state.amplitudes, control, target, state.qubit_count))


def apply_qft(state: Statevector, adjoint: bool = False) -> Statevector:
    return Statevector(qft_array(state.amplitudes, state.qubit_count, adjoint))


def expectation_x(
    state: Statevector,
    qubit: int,
    shots: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """<X_qubit>; exact unless ``shots`` is given, then a seeded sample mean."""
    _check_qubit(state, qubit)
    exact = float(expectation_array(state.amplitudes, "X", qubit, state.qubit_count))
    if shots is None:
        return exact
    return float(sample_expectation(exact, shots, rng))


def sample_expectation(exact, shots: int, rng: np.random.Generator | None):
    """Estimate a +-1-valued observable mean from ``shots`` measurements."""
    if shots < 1:
        raise SimulatorError("shots must be positive")
    rng = rng if rng is not None else np.random.default_rng()
    p_plus = np.clip((1.0 + np.asarray(exact)) / 2.0, 0.0, 1.0)
    plus = rng.binomial(shots, p_plus)
    return (2.0 * plus - shots) / shots


def run_circuit(desc: CircuitDesc, input: Statevector, bindings: Bindings | None = None) -> Statevector:
    if input.qubit_count != desc.qubit_count:
        raise SimulatorError(
            f"circuit acts on {desc.qubit_count} qubits, state has {input.qubit_count}"
        )
    out = simulate(desc, input.amplitudes, bindings)
    if out.ndim != 1:
        raise BindingError("run_circuit takes unbatched bindings; use simulate() for batches")
    return Statevector(out)


def circuit_gradients(
    desc: CircuitDesc,
    input: Statevector,
    bindings: Bindings | None,
    observables: Sequence[tuple[str, int]],
    method: str = "adjoint",
) -> np.ndarray:
    """Jacobian ``(len(observables), n_symbolic)`` of expectations w.r.t. symbolic angles."""
    if method == "adjoint":
        return adjoint_jacobian(desc, input.amplitudes, bindings, observables)[1]
    if method == "parameter-shift":
        return parameter_shift_jacobian(desc, input.amplitudes, bindings, observables)
    raise ValueError(f"unknown gradient method {method!r}")
