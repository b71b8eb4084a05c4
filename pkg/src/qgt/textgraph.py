"""Sentences to token graphs: tokenizer, embedding tables, datasets, splits."""

from __future__ import annotations

import hashlib
import logging
import math
import string
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

_PUNCT = str.maketrans("", "", string.punctuation)


class DataFormatError(ValueError):
    pass


class EmptySentenceError(ValueError):
    pass


def tokenize(sentence: str) -> list[str]:
    """Lowercase, delete ASCII punctuation, split on whitespace."""
    tokens = sentence.lower().translate(_PUNCT).split()
    if not tokens:
        raise EmptySentenceError(f"sentence {sentence!r} has no tokens")
    return tokens


# --------------------------------------------------------------------------
# Embeddings
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class HashedGaussian:
    """OOV vectors drawn from N(0, scale^2), seeded by a hash of (seed, token)."""

    seed: int = 0
    scale: float = 0.4

    def vector(self, token: str, dimension: int) -> np.ndarray:
        digest = hashlib.blake2b(f"{self.seed}\x00{token}".encode(), digest_size=8).digest()
        rng = np.random.default_rng(int.from_bytes(digest, "little"))
        return rng.normal(0.0, self.scale, size=dimension)


ZERO_VECTOR = "zero"


@dataclass
class EmbeddingTable:
    dimension: int
    entries: dict[str, np.ndarray] = field(default_factory=dict)
    oov_policy: str | HashedGaussian = ZERO_VECTOR
    malformed: int = 0

    def __post_init__(self):
        for tok, vec in self.entries.items():
            if np.shape(vec) != (self.dimension,):
                raise DataFormatError(
                    f"embedding for {tok!r} has shape {np.shape(vec)}, expected ({self.dimension},)"
                )

    def __contains__(self, token: str) -> bool:
        return token in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    def lookup(self, token: str) -> np.ndarray:
        vec = self.entries.get(token)
        if vec is not None:
            return vec
        if isinstance(self.oov_policy, HashedGaussian):
            return self.oov_policy.vector(token, self.dimension)
        return np.zeros(self.dimension)

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for tok, vec in self.entries.items():
                fh.write(tok + " " + " ".join(repr(float(v)) for v in vec) + "\n")


def load_embeddings(path: str | Path, oov_policy: str | HashedGaussian = ZERO_VECTOR) -> EmbeddingTable:
    """Read a GloVe-style text file (``token v1 ... vD`` per line)."""
    entries: dict[str, np.ndarray] = {}
    dimension = None
    malformed = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.rstrip("\n").split()
            if not parts:
                continue
            try:
                vec = np.array([float(p) for p in parts[1:]])
            except ValueError:
                malformed += 1
                continue
            if vec.size == 0:
                malformed += 1
                continue
            if dimension is None:
                dimension = vec.size
            elif vec.size != dimension:
                raise DataFormatError(
                    f"{path}:{lineno}: {vec.size} values, expected {dimension}"
                )
            entries[parts[0]] = vec
    if malformed:
        log.warning("%s: skipped %d malformed line(s)", path, malformed)
    if dimension is None:
        raise DataFormatError(f"{path}: no embedding rows")
    return EmbeddingTable(dimension, entries, oov_policy, malformed)


# --------------------------------------------------------------------------
# Graphs
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class GraphMode:
    """``complete`` (k is None) or sequence-window ``knn`` with radius k."""

    k: int | None = None

    @classmethod
    def parse(cls, text: str) -> "GraphMode":
        text = text.strip().lower()
        if text == "complete":
            return cls()
        if text.startswith("knn:"):
            try:
                k = int(text[4:])
            except ValueError:
                k = 0
            if k >= 1:
                return cls(k)
        raise ValueError(f"graph mode must be 'complete' or 'knn:K' with K >= 1, got {text!r}")

    def __str__(self) -> str:
        return "complete" if self.k is None else f"knn:{self.k}"

    def edges(self, n: int) -> np.ndarray:
        i, j = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
        keep = i != j
        if self.k is not None:
            keep &= np.abs(i - j) <= self.k
        return np.stack([i[keep], j[keep]], axis=1).reshape(-1, 2)


COMPLETE = GraphMode()


@dataclass(frozen=True)
class SentenceGraph:
    """Token graph. ``edges[e] = (src, dst)``: node ``dst`` attends to ``src``."""

    tokens: tuple[str, ...]
    features: np.ndarray
    edges: np.ndarray
    label: int = 0

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        n = len(self.tokens)
        if n < 1 or self.features.shape[0] != n:
            raise ValueError("graph needs >= 1 token and one feature row per token")
        edges = np.asarray(self.edges, dtype=int).reshape(-1, 2)
        if edges.size and (edges.min() < 0 or edges.max() >= n):
            raise ValueError("edge index out of range")
        object.__setattr__(self, "edges", edges)

    @property
    def num_nodes(self) -> int:
        return len(self.tokens)

    def neighbor_mask(self) -> np.ndarray:
        """Boolean ``(N, N)``; ``mask[i, j]`` is True when j is in N(i)."""
        mask = np.zeros((self.num_nodes,) * 2, dtype=bool)
        mask[self.edges[:, 1], self.edges[:, 0]] = True
        return mask


def build_graph(
    tokens: Sequence[str],
    table: EmbeddingTable,
    mode: GraphMode = COMPLETE,
    label: int = 0,
) -> SentenceGraph:
    if not tokens:
        raise EmptySentenceError("cannot build a graph without tokens")
    feats = np.stack([np.asarray(table.lookup(t), dtype=float) for t in tokens])
    return SentenceGraph(tuple(tokens), feats, mode.edges(len(tokens)), int(label))


# --------------------------------------------------------------------------
# Datasets
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Dataset:
    samples: tuple[tuple[str, int], ...]
    name: str = ""
    class_count: int = 0

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple((s, int(y)) for s, y in self.samples))
        if not self.class_count and self.samples:
            object.__setattr__(self, "class_count", max(y for _, y in self.samples) + 1)
        for s, y in self.samples:
            if not 0 <= y < self.class_count:
                raise DataFormatError(f"label {y} outside [0, {self.class_count})")

    def __len__(self) -> int:
        return len(self.samples)

    def subset(self, indices: Iterable[int], name: str | None = None) -> "Dataset":
        return Dataset(
            tuple(self.samples[i] for i in indices),
            self.name if name is None else name,
            self.class_count,
        )

    def digest(self) -> str:
        """Order-sensitive content hash, used to prove split membership in manifests."""
        h = hashlib.sha256()
        for s, y in self.samples:
            h.update(f"{s}\t{y}\n".encode())
        return h.hexdigest()


def _parse_line(line: str, fmt: str, where: str) -> tuple[str, int]:
    if "\t" in line:
        sentence, _, label = line.rpartition("\t")
    elif fmt == "mcrp":
        # lambeq-style "label sentence" files
        label, _, sentence = line.partition(" ")
    else:
        raise DataFormatError(f"{where}: missing TAB separator")
    try:
        return sentence.strip(), int(label.strip())
    except ValueError:
        raise DataFormatError(f"{where}: label {label.strip()!r} is not an integer") from None


def load_dataset(path: str | Path, format: str = "tsv", name: str | None = None) -> Dataset:
    """Load ``sentence<TAB>label`` lines; sentences with no tokens are skipped."""
    if format not in ("tsv", "mcrp"):
        raise ValueError(f"unknown dataset format {format!r}")
    path = Path(path)
    samples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.rstrip("\r\n")
            if not line.strip():
                continue
            sentence, label = _parse_line(line, format, f"{path}:{lineno}")
            if label < 0:
                raise DataFormatError(f"{path}:{lineno}: negative label {label}")
            try:
                tokenize(sentence)
            except EmptySentenceError:
                log.warning("%s:%d: sentence has no tokens, skipped", path, lineno)
                continue
            samples.append((sentence, label))
    if not samples:
        raise DataFormatError(f"{path}: no samples")
    return Dataset(tuple(samples), name or path.stem)


def split_sizes(n: int, ratios: Sequence[float]) -> tuple[int, int, int]:
    if len(ratios) != 3 or min(ratios) <= 0 or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must be three positive numbers summing to 1, got {ratios}")
    n_val = math.floor(ratios[1] * n + 1e-9)
    n_test = math.floor(ratios[2] * n + 1e-9)
    n_train = n - n_val - n_test
    if min(n_train, n_val, n_test) < 1:
        raise ValueError(f"ratios {tuple(ratios)} leave an empty split for {n} samples")
    return n_train, n_val, n_test


def split_dataset(
    dataset: Dataset, ratios: Sequence[float] = (0.7, 0.1, 0.2), seed: int = 0
) -> tuple[Dataset, Dataset, Dataset]:
    """Seeded shuffle then contiguous (train, val, test) slices."""
    n_train, n_val, _ = split_sizes(len(dataset), ratios)
    order = np.random.default_rng(seed).permutation(len(dataset))
    return (
        dataset.subset(order[:n_train], f"{dataset.name}/train"),
        dataset.subset(order[n_train:n_train + n_val], f"{dataset.name}/val"),
        dataset.subset(order[n_train + n_val:], f"{dataset.name}/test"),
    )


def build_graphs(
    dataset: Dataset,
    table: EmbeddingTable,
    mode: GraphMode = COMPLETE,
    max_tokens: int | None = None,
) -> list[SentenceGraph]:
    graphs = []
    for sentence, label in dataset.samples:
        tokens = tokenize(sentence)
        if max_tokens is not None:
            tokens = tokens[:max_tokens]
        graphs.append(build_graph(tokens, table, mode, label))
    return graphs
