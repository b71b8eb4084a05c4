import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from qgt import circuits, qsim


def _encode(x, desc=None):
    desc = desc or circuits.build_encoding(4)
    return qsim.run_circuit(desc, qsim.zero_state(4), {"inputs": np.asarray(x, float)})


def test_encoding_layout():
    desc = circuits.build_encoding(4)
    kinds = [(g.kind, g.target, g.control) for g in desc.gates]
    assert kinds[:4] == [("RY", k, None) for k in range(4)]
    assert kinds[4:] == [("CNOT", 1, 0), ("CNOT", 2, 1), ("CNOT", 3, 2), ("CNOT", 0, 3)]
    assert [g.angle for g in desc.gates[:4]] == [qsim.InputSum(4 * k, 4 * k + 4) for k in range(4)]


def test_encoding_zero_input():
    assert np.array_equal(_encode(np.zeros(16)).amplitudes, qsim.zero_state(4).amplitudes)


def test_encoding_pi_group_gives_0111():
    x = np.zeros(16)
    x[:4] = [1.0, 0.5, math.pi - 2.0, 0.5]
    out = _encode(x).amplitudes
    expected = oracles.encoding_unitary(x) @ np.eye(16)[:, 0]
    assert np.max(np.abs(out - expected)) < 1e-12
    assert np.max(np.abs(out - qsim.basis_state("0111").amplitudes)) < 1e-12


def test_single_qubit_merge_identity(rng):
    x = rng.normal(size=4)
    seq = qsim.zero_state(1)
    for v in x:
        seq = qsim.apply_rotation(seq, "RY", 0, v)
    merged = qsim.apply_rotation(qsim.zero_state(1), "RY", 0, x.sum())
    assert np.max(np.abs(seq.amplitudes - merged.amplitudes)) < 1e-12


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, 16, elements=st.floats(-10, 10)))
def test_merge_identity_full_encoding(x):
    merged = _encode(x).amplitudes
    sequential = _encode(x, circuits.build_sequential_encoding(4)).amplitudes
    assert np.max(np.abs(merged - sequential)) < 1e-12


def test_pqc_layout():
    desc = circuits.build_pqc(4)
    assert len(desc.symbolic_gates) == 16
    assert sum(g.kind == "QFT" for g in desc.gates) == 1 and desc.gates[-1].kind == "QFT"
    rot = [(g.kind, g.target, g.angle.index) for g in desc.gates if g.kind in qsim.ROTATIONS]
    expected = [(kind, k, 4 * layer + k) for layer, kind in enumerate(("RX", "RY", "RZ", "RY"))
                for k in range(4)]
    assert rot == expected
    assert [g.kind for g in desc.gates[12:16]] == ["CNOT"] * 4


def test_pqc_zero_params_on_zero_state_is_uniform():
    out = qsim.run_circuit(circuits.build_pqc(4), qsim.zero_state(4), {"params": np.zeros(16)})
    assert np.max(np.abs(out.amplitudes - 0.25)) < 1e-12
    dense = oracles.pqc_unitary(np.zeros(16)) @ np.eye(16)[:, 0]
    assert np.max(np.abs(out.amplitudes - dense)) < 1e-12


def test_pqc_repeats():
    desc = circuits.build_pqc(4, repeats=2)
    assert len(desc.symbolic_gates) == 32
    assert sum(g.kind == "QFT" for g in desc.gates) == 1


def test_token_qk_zero():
    assert np.max(np.abs(circuits.token_qk(np.zeros(16), np.zeros(16)) - 1.0)) < 1e-10


def test_token_qk_pi_group_matches_oracle():
    x = np.zeros(16)
    x[0] = math.pi
    assert np.allclose(circuits.token_qk(x, np.zeros(16)), oracles.qk_vector(x, np.zeros(16)), atol=1e-12)


def test_token_qk_random_matches_oracle(rng):
    for _ in range(10):
        x, p = rng.normal(size=16), rng.normal(size=16)
        assert np.allclose(circuits.token_qk(x, p), oracles.qk_vector(x, p), atol=1e-12)


@pytest.mark.parametrize("pauli", ["Y", "Z"])
def test_other_observables(rng, pauli):
    x, p = rng.normal(size=16), rng.normal(size=16)
    got = circuits.token_qk(x, p, observable=pauli)
    assert np.allclose(got, oracles.qk_vector(x, p, pauli=pauli), atol=1e-12)


def test_token_qk_shape_errors():
    with pytest.raises(ValueError):
        circuits.token_qk(np.zeros(15), np.zeros(16))
    with pytest.raises(ValueError):
        circuits.token_qk(np.zeros(16), np.zeros(12))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, 16, elements=st.floats(-20, 20)), arrays(np.float64, 16, elements=st.floats(-20, 20)))
def test_token_qk_bounded(x, p):
    out = circuits.token_qk(x, p)
    assert np.all(np.abs(out) <= 1 + 1e-12)


def test_batch_qk_matches_token_qk(rng):
    xs, p = rng.normal(size=(5, 16)), rng.normal(size=16)
    batched = circuits.batch_qk(xs, p)
    assert batched.shape == (5, 4)
    for i in range(5):
        assert np.allclose(batched[i], circuits.token_qk(xs[i], p), atol=1e-14)


def test_query_key_share_structure():
    # one circuit object serves both roles; only the bound parameter vector differs
    q = qsim.bind(circuits.qk_circuit(4), {"inputs": np.ones(16), "params": np.full(16, 0.1)})
    k = qsim.bind(circuits.qk_circuit(4), {"inputs": np.ones(16), "params": np.full(16, -0.7)})
    assert q.structure() == k.structure()


def test_backward_zero_upstream(rng):
    gp, gx = circuits.token_qk_backward(rng.normal(size=16), rng.normal(size=16), np.zeros(4))
    assert not gp.any() and not gx.any()


def test_backward_group_equal_input_grads(rng):
    _, gx = circuits.token_qk_backward(rng.normal(size=16), rng.normal(size=16), rng.normal(size=4))
    assert np.all(gx.reshape(4, 4) == gx.reshape(4, 4)[:, :1])


def test_backward_matches_finite_differences(rng):
    for _ in range(50):
        x, p, up = rng.normal(size=16), rng.normal(size=16), rng.normal(size=4)
        gp, gx = circuits.token_qk_backward(x, p, up)
        fd_p = oracles.central_diff(lambda v: up @ oracles.qk_vector(x, v), p)
        fd_x = oracles.central_diff(lambda v: up @ oracles.qk_vector(v, p), x)
        assert oracles.rel_err(gp, fd_p) < 1e-5
        assert oracles.rel_err(gx, fd_x) < 1e-5


def test_backward_shape_error():
    with pytest.raises(ValueError):
        circuits.token_qk_backward(np.zeros(16), np.zeros(16), np.zeros(3))
