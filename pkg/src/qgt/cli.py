"""``qgt`` command line: train, eval, attn, compare, sweep.

Exit codes: 0 success, 1 runtime failure, 2 configuration or I/O error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import checkpoint, model, train
from .textgraph import (
    DataFormatError,
    Dataset,
    EmbeddingTable,
    EmptySentenceError,
    GraphMode,
    HashedGaussian,
    ZERO_VECTOR,
    build_graph,
    build_graphs,
    load_dataset,
    load_embeddings,
    split_dataset,
    split_sizes,
    tokenize,
)

log = logging.getLogger("qgt")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


class ConfigError(ValueError):
    pass


# --------------------------------------------------------------------------
# Run configuration
# --------------------------------------------------------------------------


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    t = str(text).strip().lower()
    if t in ("on", "true", "yes", "1"):
        return True
    if t in ("off", "false", "no", "0"):
        return False
    raise ValueError(f"expected on/off, got {text!r}")


def _opt_int(text):
    if text is None or str(text).strip().lower() in ("", "none", "auto"):
        return None
    return int(text)


def _floats(text) -> tuple[float, ...]:
    if isinstance(text, (list, tuple)):
        return tuple(float(v) for v in text)
    return tuple(float(v) for v in str(text).split(",") if v.strip())


_TRAIN_CONVERTERS = {
    "lr": float, "step_size": int, "gamma": float, "batch_size": int,
    "max_epochs": int, "patience": int, "init_std": float, "seed": int,
    "rl_reg": _bool, "rl_sigma": float, "rl_step": float, "model": str,
    "dim": int, "dk": int, "scale_dim": _opt_int, "layer_count": int,
    "pqc_repeats": int, "observable": str, "graph_mode": str,
}
_RUN_CONVERTERS = {
    "dataset": str, "embeddings": str, "out": str, "format": str, "oov": str,
    "oov_seed": int, "embedding_dim": int, "max_tokens": _opt_int, "split": _floats,
    "fractions": _floats,
}
PATH_KEYS = ("dataset", "embeddings", "out")


@dataclass
class RunConfig:
    train: train.TrainConfig = field(default_factory=train.TrainConfig)
    dataset: str | None = None
    embeddings: str | None = None
    out: str | None = None
    format: str = "tsv"
    oov: str = "zero"
    oov_seed: int = 0
    embedding_dim: int = 50
    max_tokens: int | None = None
    split: tuple[float, ...] = (0.7, 0.1, 0.2)
    fractions: tuple[float, ...] = (0.1, 0.3, 0.6, 1.0)

    @classmethod
    def from_mapping(cls, values: dict[str, Any], base: "RunConfig | None" = None) -> "RunConfig":
        base = base or cls()
        train_kw = asdict(base.train)
        run_kw = {f.name: getattr(base, f.name) for f in fields(cls) if f.name != "train"}
        for key, raw in values.items():
            key = {"graph": "graph_mode", "rl": "rl_reg"}.get(key, key)
            try:
                if key in _TRAIN_CONVERTERS:
                    if key == "rl_reg" and str(raw).strip().lower().startswith("on("):
                        sigma, step = _floats(str(raw).strip()[3:-1])
                        train_kw.update(rl_reg=True, rl_sigma=sigma, rl_step=step)
                        continue
                    train_kw[key] = _TRAIN_CONVERTERS[key](raw)
                elif key in _RUN_CONVERTERS:
                    run_kw[key] = None if raw is None else _RUN_CONVERTERS[key](raw)
                else:
                    raise ConfigError(f"unknown config key {key!r}")
            except (TypeError, ValueError) as exc:
                if isinstance(exc, ConfigError):
                    raise
                raise ConfigError(f"bad value for {key!r}: {raw!r} ({exc})") from None
        try:
            cfg = cls(train.TrainConfig(**train_kw), **run_kw)
            cfg.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return cfg

    def validate(self) -> None:
        GraphMode.parse(self.train.graph_mode)
        model.ModelConfig(kind=self.train.model, dim=self.train.dim, dk=self.train.dk,
                          observable=self.train.observable)
        if self.format not in ("tsv", "mcrp"):
            raise ValueError(f"format must be tsv or mcrp, got {self.format!r}")
        if self.oov not in ("zero", "hashed"):
            raise ValueError(f"oov must be zero or hashed, got {self.oov!r}")
        split_sizes(10**6, self.split)
        for f in self.fractions:
            if not 0 < f <= 1:
                raise ValueError(f"fraction {f} outside (0, 1]")

    def echo(self) -> dict[str, Any]:
        out = asdict(self.train)
        out.update({f.name: getattr(self, f.name) for f in fields(self) if f.name != "train"})
        out["split"] = list(self.split)
        out["fractions"] = list(self.fractions)
        return out

    def require_paths(self, *keys: str) -> None:
        for key in keys:
            value = getattr(self, key)
            if value is None:
                raise ConfigError(f"{key} path is required")
            if key != "out" and not Path(value).exists():
                raise ConfigError(f"{key} path {value!r} does not exist")
        if self.embeddings is not None and not Path(self.embeddings).exists():
            raise ConfigError(f"embeddings path {self.embeddings!r} does not exist")


def parse_config_file(path: str | Path) -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment; relative paths resolve against the file."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {str(path)!r} does not exist")
    values = {}
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = key.strip(), value.strip()
        if key in PATH_KEYS and value and not Path(value).is_absolute():
            value = str(path.parent / value)
        values[key] = value
    return values


def load_run_config(args: argparse.Namespace) -> RunConfig:
    values: dict[str, Any] = {}
    if getattr(args, "config", None):
        values.update(parse_config_file(args.config))
    for key, attr in (("seed", "seed"), ("out", "out"), ("dataset", "dataset"),
                      ("embeddings", "embeddings"), ("model", "model"), ("graph_mode", "graph"),
                      ("fractions", "fractions")):
        value = getattr(args, attr, None)
        if value is not None:
            values[key] = value
    return RunConfig.from_mapping(values)


# --------------------------------------------------------------------------
# Data preparation
# --------------------------------------------------------------------------


def make_table(run: RunConfig) -> EmbeddingTable:
    policy = HashedGaussian(run.oov_seed) if run.oov == "hashed" else ZERO_VECTOR
    if run.embeddings is None:
        return EmbeddingTable(run.embedding_dim, {}, policy)
    return load_embeddings(run.embeddings, policy)


@dataclass
class Prepared:
    dataset: Dataset
    table: EmbeddingTable
    splits: tuple[Dataset, Dataset, Dataset]
    graphs: tuple[list, list, list]


def prepare(run: RunConfig) -> Prepared:
    dataset = load_dataset(run.dataset, run.format)
    table = make_table(run)
    splits = split_dataset(dataset, run.split, run.train.seed)
    mode = GraphMode.parse(run.train.graph_mode)
    graphs = tuple(build_graphs(s, table, mode, run.max_tokens) for s in splits)
    return Prepared(dataset, table, splits, graphs)


def split_manifest(splits: Sequence[Dataset]) -> dict[str, dict[str, Any]]:
    return {
        name: {"size": len(s), "sha256": s.digest()}
        for name, s in zip(("train", "val", "test"), splits)
    }


def _num(x: float) -> str:
    return repr(float(x))


def metrics_csv(metrics: Sequence[train.EpochMetrics]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "train_loss", "train_acc", "val_loss", "val_acc"])
    for m in metrics:
        w.writerow([m.epoch, _num(m.train_loss), _num(m.train_acc), _num(m.val_loss), _num(m.val_acc)])
    return buf.getvalue()


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _threads() -> int:
    raw = os.environ.get("QGT_THREADS")
    if raw is None:
        return os.cpu_count() or 1
    try:
        value = int(raw)
    except ValueError:
        raise ConfigError(f"QGT_THREADS must be an integer, got {raw!r}") from None
    if value < 1:
        raise ConfigError("QGT_THREADS must be >= 1")
    return value


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------


def cmd_train(args) -> int:
    run = load_run_config(args)
    run.require_paths("dataset", "out")
    prep = prepare(run)
    class_count = prep.dataset.class_count
    result = train.fit(run.train, prep.graphs[0], prep.graphs[1], class_count=class_count)
    test_loss, test_acc = train.evaluate(result.params, prep.graphs[2])

    out = Path(run.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(metrics_csv(result.metrics), encoding="utf-8")
    # the output location is not part of what the checkpoint reproduces
    echo = {k: v for k, v in run.echo().items() if k != "out"}
    checkpoint.save(checkpoint.Checkpoint(result.params, run.train.seed, echo), out / "checkpoint.qgt")
    _write_json(out / "manifest.json", {
        "command": "train",
        "format_version": checkpoint.FORMAT_VERSION,
        "seed": run.train.seed,
        "config": run.echo(),
        "class_count": class_count,
        "splits": split_manifest(prep.splits),
        "best_epoch": result.best_epoch,
        "epochs_run": len(result.metrics),
        "test": {"loss": test_loss, "accuracy": test_acc},
    })
    print(f"test_loss={_num(test_loss)} test_acc={_num(test_acc)} best_epoch={result.best_epoch}")
    return EXIT_OK


def _run_from_checkpoint(ckpt: checkpoint.Checkpoint, args) -> RunConfig:
    echo = dict(ckpt.config)
    for key in ("dataset", "embeddings"):
        value = getattr(args, key, None)
        if value is not None:
            echo[key] = value
    return RunConfig.from_mapping(echo)


def _load_checkpoint(path: str) -> checkpoint.Checkpoint:
    if not Path(path).exists():
        raise ConfigError(f"checkpoint {path!r} does not exist")
    return checkpoint.load(path)


def _check_compatible(params: model.ModelParams, dataset: Dataset, table: EmbeddingTable) -> None:
    cfg = params.config
    if dataset.class_count > cfg.classes:
        raise ConfigError(
            f"class-count mismatch: checkpoint expects {cfg.classes} classes, "
            f"dataset {dataset.name!r} has {dataset.class_count}"
        )
    if table.dimension != cfg.embed_dim:
        raise ConfigError(
            f"embedding dimension mismatch: checkpoint expects {cfg.embed_dim}, found {table.dimension}"
        )


def cmd_eval(args) -> int:
    ckpt = _load_checkpoint(args.checkpoint)
    run = _run_from_checkpoint(ckpt, args)
    run.require_paths("dataset")
    dataset = load_dataset(run.dataset, run.format)
    table = make_table(run)
    _check_compatible(ckpt.params, dataset, table)
    if args.split != "all":
        parts = dict(zip(("train", "val", "test"), split_dataset(dataset, run.split, run.train.seed)))
        dataset = parts[args.split]
    graphs = build_graphs(dataset, table, GraphMode.parse(run.train.graph_mode), run.max_tokens)
    loss, acc = train.evaluate(ckpt.params, graphs)
    print(f"loss={_num(loss)} accuracy={_num(acc)} samples={len(graphs)}")
    return EXIT_OK


def attention_csv(tokens: Sequence[str], alpha: np.ndarray) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([""] + list(tokens))
    for tok, row in zip(tokens, alpha):
        w.writerow([tok] + [_num(v) for v in row])
    return buf.getvalue()


def cmd_attn(args) -> int:
    ckpt = _load_checkpoint(args.checkpoint)
    run = _run_from_checkpoint(ckpt, args)
    run.require_paths()
    table = make_table(run)
    try:
        tokens = tokenize(args.sentence)
    except EmptySentenceError as exc:
        raise ConfigError(str(exc)) from None
    if run.max_tokens is not None:
        tokens = tokens[:run.max_tokens]
    graph = build_graph(tokens, table, GraphMode.parse(run.train.graph_mode))
    logits, cache = model.forward(ckpt.params, graph, need_grad=False)
    layer = args.layer if args.layer is not None else ckpt.params.config.layer_count - 1
    if not 0 <= layer < len(cache.layers):
        raise ConfigError(f"layer {layer} out of range [0, {len(cache.layers)})")
    text = attention_csv(tokens, cache.layers[layer].alpha)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "attention.csv").write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    print(f"prediction={int(np.argmax(logits))}")
    return EXIT_OK


def cmd_compare(args) -> int:
    run = load_run_config(args)
    run.require_paths("dataset")
    report = {"seed": run.train.seed, "config": run.echo(), "runs": {}}
    accs = {}
    for kind in (model.QUANTUM, model.CLASSICAL):
        kind_run = replace(run, train=replace(run.train, model=kind))
        prep = prepare(kind_run)
        result = train.fit(kind_run.train, prep.graphs[0], prep.graphs[1],
                           class_count=prep.dataset.class_count)
        loss, acc = train.evaluate(result.params, prep.graphs[2])
        accs[kind] = acc
        report["runs"][kind] = {"splits": split_manifest(prep.splits), "test_loss": loss,
                                "test_accuracy": acc, "best_epoch": result.best_epoch}
    delta = accs[model.QUANTUM] - accs[model.CLASSICAL]
    report["delta"] = delta
    if run.out:
        out = Path(run.out)
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "compare.json", report)
    print(f"qgt_acc={_num(accs[model.QUANTUM])} classical_acc={_num(accs[model.CLASSICAL])} "
          f"delta={delta:+.17g}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    run = load_run_config(args)
    run.require_paths("dataset", "out")
    workers = _threads()
    prep = prepare(run)
    for f in run.fractions:
        train.subsample_indices(len(prep.graphs[0]), f, run.train.seed)
    rows = train.sample_efficiency_sweep(run.train, *prep.graphs, run.fractions, workers=workers)
    out = Path(run.out)
    out.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["fraction", "qgt_acc", "classical_acc"])
    for r in rows:
        w.writerow([_num(r.fraction), _num(r.accuracies[model.QUANTUM]),
                    _num(r.accuracies[model.CLASSICAL])])
    (out / "sweep.csv").write_text(buf.getvalue(), encoding="utf-8")
    _write_json(out / "sweep_manifest.json", {
        "command": "sweep",
        "seed": run.train.seed,
        "config": run.echo(),
        "splits": split_manifest(prep.splits),
        "rows": [{"fraction": r.fraction, "n_train": r.n_train, "test_split_sha256": prep.splits[2].digest(),
                  **{f"{k}_acc": v for k, v in r.accuracies.items()}} for r in rows],
    })
    sys.stdout.write(buf.getvalue())
    return EXIT_OK


# --------------------------------------------------------------------------
# Entry point
# --------------------------------------------------------------------------


def _fractions(text: str) -> tuple[float, ...]:
    try:
        values = _floats(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad fraction list {text!r}") from None
    if not values:
        raise argparse.ArgumentTypeError("empty fraction list")
    return values


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qgt", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch metrics")
    sub = parser.add_subparsers(dest="command", required=True)

    def run_options(p, fractions=False):
        p.add_argument("--config", help="key = value run configuration file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        p.add_argument("--dataset")
        p.add_argument("--embeddings")
        p.add_argument("--model", choices=(model.QUANTUM, model.CLASSICAL))
        p.add_argument("--graph", help="complete or knn:K")
        if fractions:
            p.add_argument("--fractions", type=_fractions, help="comma-separated, e.g. 0.1,0.3,1.0")

    run_options(sub.add_parser("train", help="train one model and write metrics/checkpoint/manifest"))
    run_options(sub.add_parser("compare", help="train quantum and classical models on the same splits"))
    run_options(sub.add_parser("sweep", help="test accuracy vs training-set fraction"), fractions=True)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset")
    p.add_argument("--embeddings")
    p.add_argument("--split", choices=("all", "train", "val", "test"), default="all")

    p = sub.add_parser("attn", help="attention matrix of one sentence as CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--sentence", required=True)
    p.add_argument("--embeddings")
    p.add_argument("--layer", type=int)
    p.add_argument("--out", help="write attention.csv into this directory instead of stdout")
    return parser


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "attn": cmd_attn,
            "compare": cmd_compare, "sweep": cmd_sweep}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, DataFormatError, checkpoint.CheckpointError, OSError) as exc:
        print(f"qgt {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - top-level boundary
        print(f"qgt {args.command}: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
