"""Encoding and query/key circuits for quantum self-attention.

A token feature ``x`` of length ``n**2`` is loaded onto ``n`` qubits by one
merged ``RY`` per qubit (angle = sum of that qubit's ``n`` consecutive feature
components) followed by ring CNOTs. The query and key circuits share one
trainable layout (RX, RY, RZ layers, ring CNOTs, RY layer, QFT) and differ
only in their parameter vector. Queries/keys are the per-qubit Pauli
expectations of the combined circuit applied to ``|0...0>``.

Parameter ``p[n * layer + k]`` of a block drives qubit ``k`` of rotation
layer ``layer`` (layer-major, qubit-minor).
"""

from __future__ import annotations

import math
from functools import lru_cache

import numpy as np

from . import qsim
from .qsim import CircuitDesc, GateDesc, InputSum, Param

DEFAULT_QUBITS = 4


def qubits_for_dim(d: int) -> int:
    n = math.isqrt(d)
    if n * n != d:
        raise ValueError(f"feature dimension {d} is not a perfect square")
    return n


def ring_cnots(n: int) -> list[GateDesc]:
    if n == 1:
        return []
    return [GateDesc("CNOT", target=(k + 1) % n, control=k) for k in range(n)]


@lru_cache(maxsize=None)
def build_encoding(n: int = DEFAULT_QUBITS) -> CircuitDesc:
    """Encoding circuit; bind the token feature under the name ``"inputs"``."""
    gates = [GateDesc("RY", target=k, angle=InputSum(n * k, n * k + n)) for k in range(n)]
    return CircuitDesc(gates + ring_cnots(n), n)


def build_sequential_encoding(n: int = DEFAULT_QUBITS) -> CircuitDesc:
    """Unmerged form: ``n`` separate RY gates per qubit, one per feature component."""
    gates = [
        GateDesc("RY", target=k, angle=Param(j, source="inputs"))
        for k in range(n)
        for j in range(n * k, n * k + n)
    ]
    return CircuitDesc(gates + ring_cnots(n), n)


def pqc_param_count(n: int = DEFAULT_QUBITS, repeats: int = 1) -> int:
    return 4 * n * repeats


@lru_cache(maxsize=None)
def build_pqc(n: int = DEFAULT_QUBITS, repeats: int = 1) -> CircuitDesc:
    """Query/key circuit; bind its parameter vector under the name ``"params"``.

    ``repeats > 1`` stacks the rotation/entangling block before the single
    final QFT.
    """
    gates: list[GateDesc] = []
    for r in range(repeats):
        base = 4 * n * r
        for layer, kind in enumerate(("RX", "RY", "RZ")):
            gates += [GateDesc(kind, target=k, angle=Param(base + layer * n + k)) for k in range(n)]
        gates += ring_cnots(n)
        gates += [GateDesc("RY", target=k, angle=Param(base + 3 * n + k)) for k in range(n)]
    gates.append(GateDesc("QFT"))
    return CircuitDesc(gates, n)


@lru_cache(maxsize=None)
def qk_circuit(n: int = DEFAULT_QUBITS, repeats: int = 1) -> CircuitDesc:
    return build_encoding(n) + build_pqc(n, repeats)


def _observables(n: int, pauli: str) -> list[tuple[str, int]]:
    return [(pauli, k) for k in range(n)]


def _check(xs: np.ndarray, params: np.ndarray, repeats: int) -> int:
    n = qubits_for_dim(xs.shape[-1])
    if params.shape != (pqc_param_count(n, repeats),):
        raise ValueError(
            f"expected {pqc_param_count(n, repeats)} circuit parameters, got shape {params.shape}"
        )
    return n


def batch_qk(
    xs: np.ndarray,
    params: np.ndarray,
    *,
    repeats: int = 1,
    observable: str = "X",
    shots: int | None = None,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Query (or key) vectors for a stack of token features, shape ``(..., n)``."""
    xs = np.asarray(xs, dtype=float)
    params = np.asarray(params, dtype=float)
    n = _check(xs, params, repeats)
    psi = qsim.simulate(qk_circuit(n, repeats), qsim.zero_state(n).amplitudes,
                        {"inputs": xs, "params": params})
    psi = np.broadcast_to(psi, xs.shape[:-1] + psi.shape[-1:])
    vals = np.stack([qsim.expectation_array(psi, observable, k, n) for k in range(n)], axis=-1)
    if shots is not None:
        vals = qsim.sample_expectation(vals, shots, rng)
    return vals


def batch_qk_jacobian(
    xs: np.ndarray, params: np.ndarray, *, repeats: int = 1, observable: str = "X"
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Values ``(..., n)``, d/dparams ``(..., n, P)``, d/dmerged-angles ``(..., n, n)``."""
    xs = np.asarray(xs, dtype=float)
    params = np.asarray(params, dtype=float)
    n = _check(xs, params, repeats)
    vals, jac = qsim.adjoint_jacobian(
        qk_circuit(n, repeats),
        qsim.zero_state(n).amplitudes,
        {"inputs": xs, "params": params},
        _observables(n, observable),
    )
    # the first n symbolic gates are the merged encoding rotations, the rest follow params order
    return vals, jac[..., n:], jac[..., :n]


def grad_features(j_angles_upstream: np.ndarray, n: int) -> np.ndarray:
    """Spread per-qubit angle gradients onto the ``n`` features feeding each angle."""
    return np.repeat(j_angles_upstream, n, axis=-1)


def token_qk(x, params, *, repeats: int = 1, observable: str = "X") -> np.ndarray:
    """Pauli expectations ``(<P_0>, ..., <P_{n-1}>)`` for one token."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise ValueError("token_qk takes a single feature vector; use batch_qk for stacks")
    return batch_qk(x, params, repeats=repeats, observable=observable)


def token_qk_backward(x, params, upstream, *, repeats: int = 1, observable: str = "X"):
    """Vector-Jacobian product of :func:`token_qk`: ``(grad_params, grad_x)``."""
    x = np.asarray(x, dtype=float)
    upstream = np.asarray(upstream, dtype=float)
    n = qubits_for_dim(x.shape[-1])
    if x.ndim != 1 or upstream.shape != (n,):
        raise ValueError(f"expected x of shape ({n * n},) and upstream of shape ({n},)")
    _, jp, ja = batch_qk_jacobian(x, params, repeats=repeats, observable=observable)
    return upstream @ jp, grad_features(upstream @ ja, n)
