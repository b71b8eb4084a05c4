"""Versioned plain-text checkpoints.

Layout::

    QGT-CHECKPOINT 1
    model_kind quantum
    dims embed_dim=50 dim=16 qubits=4 classes=2 layer_count=1 scale_dim=16 dk=4 pqc_repeats=1 observable=X
    seed 7
    config {"lr": 0.01, ...}
    tensor proj_w 16 50
    <one row per line, %.17g decimals>
    ...
    end

Seventeen significant digits round-trip every float64 exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import ModelConfig, ModelParams

FORMAT_VERSION = 1
MAGIC = "QGT-CHECKPOINT"


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    params: ModelParams
    seed: int = 0
    config: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION


def _fmt(x: float) -> str:
    return "%.17g" % x


def dumps(ckpt: Checkpoint) -> str:
    cfg = ckpt.params.config
    dims = {
        "embed_dim": cfg.embed_dim, "dim": cfg.dim,
        "qubits": cfg.qubits if cfg.kind == "quantum" else 0,
        "classes": cfg.classes, "layer_count": cfg.layer_count,
        "scale_dim": cfg.effective_scale_dim, "dk": cfg.dk,
        "pqc_repeats": cfg.pqc_repeats, "observable": cfg.observable,
    }
    lines = [
        f"{MAGIC} {FORMAT_VERSION}",
        f"model_kind {cfg.kind}",
        "dims " + " ".join(f"{k}={v}" for k, v in dims.items()),
        f"seed {ckpt.seed}",
        "config " + json.dumps(ckpt.config, sort_keys=True),
    ]
    for name, arr in ckpt.params.tensors.items():
        lines.append(f"tensor {name} " + " ".join(str(s) for s in arr.shape))
        rows = arr.reshape(1, -1) if arr.ndim == 1 else arr
        lines += [" ".join(_fmt(v) for v in row) for row in rows]
    lines.append("end")
    return "\n".join(lines) + "\n"


def save(ckpt: Checkpoint, path: str | Path) -> None:
    Path(path).write_text(dumps(ckpt), encoding="utf-8")


def loads(text: str) -> Checkpoint:
    lines = text.splitlines()
    it = iter(enumerate(lines, 1))

    def take(prefix):
        try:
            lineno, line = next(it)
        except StopIteration:
            raise CheckpointError(f"truncated checkpoint, expected {prefix!r}") from None
        head, _, rest = line.partition(" ")
        if head != prefix:
            raise CheckpointError(f"line {lineno}: expected {prefix!r}, found {head!r}")
        return rest

    version = take(MAGIC)
    if version.strip() != str(FORMAT_VERSION):
        raise CheckpointError(f"unsupported checkpoint version {version!r}")
    kind = take("model_kind").strip()
    dims = dict(kv.split("=", 1) for kv in take("dims").split())
    seed = int(take("seed"))
    config = json.loads(take("config"))
    try:
        mcfg = ModelConfig(
            kind=kind, embed_dim=int(dims["embed_dim"]), dim=int(dims["dim"]),
            classes=int(dims["classes"]), layer_count=int(dims["layer_count"]),
            scale_dim=int(dims["scale_dim"]), dk=int(dims["dk"]),
            pqc_repeats=int(dims["pqc_repeats"]), observable=dims["observable"],
        )
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"bad dims line: {exc}") from None

    tensors = {}
    while True:
        try:
            lineno, line = next(it)
        except StopIteration:
            raise CheckpointError("missing 'end' marker") from None
        if line == "end":
            break
        head, _, rest = line.partition(" ")
        if head != "tensor" or not rest.split():
            raise CheckpointError(f"line {lineno}: expected 'tensor NAME SHAPE...', found {line!r}")
        name, *shape = rest.split()
        try:
            shape = tuple(int(s) for s in shape)
            n_rows = 1 if len(shape) == 1 else shape[0]
            rows = []
            for _ in range(n_rows):
                lineno, line = next(it, (None, None))
                if line is None:
                    raise CheckpointError(f"tensor {name} is truncated")
                rows.append([float(v) for v in line.split()])
            arr = np.array(rows, dtype=float)
        except ValueError as exc:
            raise CheckpointError(f"line {lineno}: tensor {name}: {exc}") from None
        if arr.size != int(np.prod(shape)):
            raise CheckpointError(f"tensor {name}: {arr.size} values for shape {shape}")
        tensors[name] = arr.reshape(shape)
    try:
        params = ModelParams(mcfg, tensors)
    except ValueError as exc:
        raise CheckpointError(str(exc)) from None
    return Checkpoint(params, seed, config, int(version))


def load(path: str | Path) -> Checkpoint:
    return loads(Path(path).read_text(encoding="utf-8"))
