"""Graph transformer over token graphs, with quantum or classical attention.

Forward pass for one sentence graph::

    x     = em @ proj_w.T + proj_b                 # (N, d)
    per layer:
      Q, K  = quantum circuits (theta, phi) or linear maps (wq, wk)
      alpha = row-softmax over neighbours of Q K^T / sqrt(scale_dim)
      x     = x + alpha @ (x @ value_w.T + value_b)
    z     = clf_w @ mean(x, axis=0) + clf_b

Gradients are written out by hand; the quantum part reuses the adjoint
Jacobians computed during the forward pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import circuits
from .textgraph import SentenceGraph

QUANTUM = "quantum"
CLASSICAL = "classical"


@dataclass(frozen=True)
class ModelConfig:
    kind: str = QUANTUM
    embed_dim: int = 50
    dim: int = 16
    classes: int = 2
    layer_count: int = 1
    scale_dim: int | None = None  # None: dim (quantum) or dk (classical)
    dk: int = 4
    pqc_repeats: int = 1
    observable: str = "X"

    def __post_init__(self):
        if self.kind not in (QUANTUM, CLASSICAL):
            raise ValueError(f"model kind must be quantum or classical, got {self.kind!r}")
        if self.layer_count < 1 or self.classes < 1:
            raise ValueError("layer_count and classes must be >= 1")
        if self.kind == QUANTUM:
            circuits.qubits_for_dim(self.dim)
        if self.observable not in ("X", "Y", "Z"):
            raise ValueError(f"observable must be X, Y or Z, got {self.observable!r}")

    @property
    def qubits(self) -> int:
        return circuits.qubits_for_dim(self.dim)

    @property
    def effective_scale_dim(self) -> int:
        if self.scale_dim is not None:
            return self.scale_dim
        return self.dim if self.kind == QUANTUM else self.dk

    def shapes(self) -> dict[str, tuple[int, ...]]:
        d, d0, c = self.dim, self.embed_dim, self.classes
        out = {"proj_w": (d, d0), "proj_b": (d,)}
        for layer in range(self.layer_count):
            out[f"l{layer}.value_w"] = (d, d)
            out[f"l{layer}.value_b"] = (d,)
            if self.kind == QUANTUM:
                p = circuits.pqc_param_count(self.qubits, self.pqc_repeats)
                out[f"l{layer}.theta"] = (p,)
                out[f"l{layer}.phi"] = (p,)
            else:
                out[f"l{layer}.wq"] = (self.dk, d)
                out[f"l{layer}.wk"] = (self.dk, d)
        out["clf_w"] = (c, d)
        out["clf_b"] = (c,)
        return out


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict[str, np.ndarray]

    def __post_init__(self):
        expected = self.config.shapes()
        if set(expected) != set(self.tensors):
            raise ValueError(
                f"tensor names {sorted(self.tensors)} do not match config {sorted(expected)}"
            )
        for name, shape in expected.items():
            arr = np.asarray(self.tensors[name], dtype=float)
            if arr.shape != shape:
                raise ValueError(f"{name}: shape {arr.shape}, expected {shape}")
            self.tensors[name] = arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def zeros_like(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.tensors.items()}

    @classmethod
    def zeros(cls, config: ModelConfig) -> "ModelParams":
        return cls(config, {k: np.zeros(s) for k, s in config.shapes().items()})

    def with_tensors(self, updates: dict[str, np.ndarray]) -> "ModelParams":
        tensors = {k: v.copy() for k, v in self.tensors.items()}
        tensors.update({k: np.asarray(v, dtype=float) for k, v in updates.items()})
        return ModelParams(self.config, tensors)


@dataclass
class LayerCache:
    x_in: np.ndarray
    queries: np.ndarray
    keys: np.ndarray
    alpha: np.ndarray
    values: np.ndarray
    # quantum path only: Jacobians of queries/keys w.r.t. circuit params and merged angles
    jq: tuple[np.ndarray, np.ndarray] | None = None
    jk: tuple[np.ndarray, np.ndarray] | None = None


@dataclass
class ForwardCache:
    shapes: dict[str, tuple[int, ...]]
    embeddings: np.ndarray
    mask: np.ndarray
    layers: list[LayerCache] = field(default_factory=list)
    nodes: np.ndarray | None = None
    pooled: np.ndarray | None = None
    logits: np.ndarray | None = None


# --------------------------------------------------------------------------
# Building blocks
# --------------------------------------------------------------------------


def project(params: ModelParams, features: np.ndarray) -> np.ndarray:
    features = np.asarray(features, dtype=float)
    if features.ndim != 2 or features.shape[1] != params.config.embed_dim:
        raise ValueError(
            f"features shape {features.shape}, expected (N, {params.config.embed_dim})"
        )
    return features @ params["proj_w"].T + params["proj_b"]


def masked_softmax(scores: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Row softmax restricted to ``mask``; rows with no neighbours are all zero."""
    masked = np.where(mask, scores, -np.inf)
    row_max = masked.max(axis=1, keepdims=True)
    row_max = np.where(np.isfinite(row_max), row_max, 0.0)
    e = np.where(mask, np.exp(masked - row_max), 0.0)
    total = e.sum(axis=1, keepdims=True)
    return np.divide(e, total, out=np.zeros_like(e), where=total > 0)


def attention_from_qk(queries, keys, mask, scale_dim: int) -> np.ndarray:
    return masked_softmax(queries @ keys.T / np.sqrt(scale_dim), mask)


def quantum_attention(xs, theta, phi, mask, scale_dim: int, *, repeats=1, observable="X",
                      shots=None, rng=None):
    """Attention weights ``(N, N)`` (zero off the edge set) plus the Q and K vectors."""
    q = circuits.batch_qk(xs, theta, repeats=repeats, observable=observable, shots=shots, rng=rng)
    k = circuits.batch_qk(xs, phi, repeats=repeats, observable=observable, shots=shots, rng=rng)
    return attention_from_qk(q, k, mask, scale_dim), q, k


def classical_attention(xs, wq, wk, mask, scale_dim: int):
    q = xs @ wq.T
    k = xs @ wk.T
    return attention_from_qk(q, k, mask, scale_dim), q, k


def message_pass(xs, alpha, values) -> np.ndarray:
    """Residual update ``x_i + sum_j alpha_ij V_j``; isolated nodes pass through."""
    return xs + alpha @ values


def mean_pool(xs) -> np.ndarray:
    return np.asarray(xs).mean(axis=0)


def classify(params: ModelParams, pooled) -> np.ndarray:
    return params["clf_w"] @ pooled + params["clf_b"]


def cross_entropy(logits, label: int) -> float:
    z = np.asarray(logits, dtype=float)
    m = z.max()
    if z[label] == m:
        # log1p keeps full relative precision when the label already dominates
        return float(np.log1p(np.exp(np.delete(z, label) - m).sum()))
    return float(m + np.log(np.exp(z - m).sum()) - z[label])


def softmax(z) -> np.ndarray:
    e = np.exp(z - np.max(z))
    return e / e.sum()


# --------------------------------------------------------------------------
# Forward / backward
# --------------------------------------------------------------------------


def forward(
    params: ModelParams,
    graph: SentenceGraph,
    *,
    need_grad: bool = True,
    shots: int | None = None,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, ForwardCache]:
    """Logits for one sentence graph.

    ``shots`` switches query/key expectations to sampled estimates; it is an
    inference-only mode and cannot be combined with ``need_grad``.
    """
    cfg = params.config
    if shots is not None and need_grad:
        raise ValueError("shot sampling is inference-only; pass need_grad=False")
    mask = graph.neighbor_mask()
    cache = ForwardCache({k: v.shape for k, v in params.tensors.items()}, graph.features, mask)
    x = project(params, graph.features)
    s = cfg.effective_scale_dim
    for layer in range(cfg.layer_count):
        pre = f"l{layer}."
        if cfg.kind == QUANTUM:
            if need_grad:
                kw = dict(repeats=cfg.pqc_repeats, observable=cfg.observable)
                q, jq_p, jq_a = circuits.batch_qk_jacobian(x, params[pre + "theta"], **kw)
                k, jk_p, jk_a = circuits.batch_qk_jacobian(x, params[pre + "phi"], **kw)
                alpha = attention_from_qk(q, k, mask, s)
                jq, jk = (jq_p, jq_a), (jk_p, jk_a)
            else:
                alpha, q, k = quantum_attention(
                    x, params[pre + "theta"], params[pre + "phi"], mask, s,
                    repeats=cfg.pqc_repeats, observable=cfg.observable, shots=shots, rng=rng,
                )
                jq = jk = None
        else:
            alpha, q, k = classical_attention(x, params[pre + "wq"], params[pre + "wk"], mask, s)
            jq = jk = None
        v = x @ params[pre + "value_w"].T + params[pre + "value_b"]
        cache.layers.append(LayerCache(x, q, k, alpha, v, jq, jk))
        x = message_pass(x, alpha, v)
    cache.nodes = x
    cache.pooled = mean_pool(x)
    cache.logits = classify(params, cache.pooled)
    return cache.logits, cache


def backward(params: ModelParams, cache: ForwardCache, label: int) -> tuple[float, dict[str, np.ndarray]]:
    """Loss and its gradient w.r.t. every tensor in ``params``."""
    if cache.shapes != {k: v.shape for k, v in params.tensors.items()}:
        raise ValueError("forward cache was produced with differently shaped parameters")
    cfg = params.config
    if cfg.kind == QUANTUM and any(lc.jq is None for lc in cache.layers):
        raise ValueError("forward cache has no circuit Jacobians; run forward(need_grad=True)")
    grads = params.zeros_like()
    z = cache.logits
    loss = cross_entropy(z, label)
    dz = softmax(z)
    dz[label] -= 1.0

    grads["clf_w"] = np.outer(dz, cache.pooled)
    grads["clf_b"] = dz
    n_nodes = cache.nodes.shape[0]
    g = np.tile(params["clf_w"].T @ dz / n_nodes, (n_nodes, 1))

    s = np.sqrt(cfg.effective_scale_dim)
    for layer in range(cfg.layer_count - 1, -1, -1):
        pre = f"l{layer}."
        lc = cache.layers[layer]
        d_alpha = np.where(cache.mask, g @ lc.values.T, 0.0)
        d_values = lc.alpha.T @ g
        grads[pre + "value_w"] = d_values.T @ lc.x_in
        grads[pre + "value_b"] = d_values.sum(axis=0)
        g_in = g + d_values @ params[pre + "value_w"]

        d_scores = lc.alpha * (d_alpha - np.sum(lc.alpha * d_alpha, axis=1, keepdims=True))
        d_q = d_scores @ lc.keys / s
        d_k = d_scores.T @ lc.queries / s
        if cfg.kind == QUANTUM:
            n = cfg.qubits
            for name, dvec, (jp, ja) in (("theta", d_q, lc.jq), ("phi", d_k, lc.jk)):
                grads[pre + name] = np.einsum("im,imp->p", dvec, jp)
                g_in = g_in + circuits.grad_features(np.einsum("im,ima->ia", dvec, ja), n)
        else:
            grads[pre + "wq"] = d_q.T @ lc.x_in
            grads[pre + "wk"] = d_k.T @ lc.x_in
            g_in = g_in + d_q @ params[pre + "wq"] + d_k @ params[pre + "wk"]
        g = g_in

    grads["proj_w"] = g.T @ cache.embeddings
    grads["proj_b"] = g.sum(axis=0)
    return loss, grads


def loss_and_grad(params: ModelParams, graph: SentenceGraph):
    _, cache = forward(params, graph)
    return backward(params, cache, graph.label)


def predict(params: ModelParams, graph: SentenceGraph) -> int:
    logits, _ = forward(params, graph, need_grad=False)
    return int(np.argmax(logits))
