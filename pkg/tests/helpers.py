import numpy as np

from qgt import model, qsim
from qgt.qsim import CircuitDesc, GateDesc, Param
from qgt.textgraph import COMPLETE, SentenceGraph


def random_state(rng, n=4):
    v = rng.normal(size=2**n) + 1j * rng.normal(size=2**n)
    return qsim.Statevector(v / np.linalg.norm(v))


def random_circuit(rng, n=4, length=20, symbolic=True):
    """Random circuit over the RX/RY/RZ/CNOT/QFT inventory.

    Symbolic rotations bind ``params[i]`` for their own index ``i``; returns
    ``(desc, params)``.
    """
    gates, params = [], []
    for _ in range(length):
        kind = rng.choice(["RX", "RY", "RZ", "RX", "RY", "RZ", "CNOT", "QFT"])
        if kind == "CNOT":
            c, t = rng.choice(n, size=2, replace=False)
            gates.append(GateDesc("CNOT", target=int(t), control=int(c)))
        elif kind == "QFT":
            gates.append(GateDesc("QFT", adjoint=bool(rng.integers(2))))
        else:
            angle = float(rng.uniform(-np.pi, np.pi))
            if symbolic:
                gates.append(GateDesc(kind, target=int(rng.integers(n)), angle=Param(len(params))))
                params.append(angle)
            else:
                gates.append(GateDesc(kind, target=int(rng.integers(n)), angle=angle))
    return CircuitDesc(gates, n), np.array(params)


def random_params(config, rng, scale=0.3):
    return model.ModelParams(config, {k: rng.normal(0, scale, s) for k, s in config.shapes().items()})


def random_graph(rng, n_tokens, label=0, d0=50, scale=0.5, mode=COMPLETE):
    tokens = tuple(f"t{i}" for i in range(n_tokens))
    return SentenceGraph(tokens, rng.normal(0, scale, (n_tokens, d0)), mode.edges(n_tokens), label)
