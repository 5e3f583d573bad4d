"""Command-line entry point (``reprompt <command>``)."""

from __future__ import annotations

import argparse
import io
import json
import logging
import os
import sys
from dataclasses import fields, replace

import numpy as np

from .data import (
    DatasetSpec,
    gen_synthetic,
    ingest_embeddings,
    intra_class_variance,
    read_embeddings,
    write_embeddings,
    write_labels,
)
from .encoders import VisionEncoder
from .experiments import ConfigError, dataset_spec, load_config, run_experiment
from .numerics import Tensor, no_grad
from .prompt_learner import generate_dynamic_prompts
from .retrieval import _atomic_write, build_database, load_database, query_topk, save_database
from .training import (
    RePromptModel,
    TrainConfig,
    evaluate,
    load_checkpoint,
    save_checkpoint,
    train,
    write_metrics,
)

_TRAIN_KEYS = {f.name for f in fields(TrainConfig)}


class UsageError(ValueError):
    pass


# ---------------------------------------------------------------------------
# helpers


def _out_path(args, default_name: str) -> str:
    out = args.out or "."
    if os.path.isdir(out) or out.endswith(os.sep) or not os.path.splitext(out)[1]:
        os.makedirs(out, exist_ok=True)
        return os.path.join(out, default_name)
    parent = os.path.dirname(out)
    if parent:
        os.makedirs(parent, exist_ok=True)
    return out


def _train_config(args, **forced) -> TrainConfig:
    values = load_config(args.config) if args.config else {}
    values = {k: v for k, v in values.items() if k in _TRAIN_KEYS}
    if args.seed is not None:
        values["seed"] = args.seed
    cfg = TrainConfig.from_dict(values)
    return replace(cfg, **forced) if forced else cfg


def _load_inputs(features, labels, cfg: TrainConfig):
    return ingest_embeddings(features, labels, patches=cfg.patches if cfg.patch_input else 0)


def _shape_config(cfg: TrainConfig, X: np.ndarray) -> TrainConfig:
    return replace(cfg, dim=X.shape[-1])


def _load_rows(path, cfg: TrainConfig) -> np.ndarray:
    X = read_embeddings(path)
    if cfg.patch_input:
        if X.shape[1] % cfg.patches:
            raise UsageError("row width is not a multiple of the patch count")
        X = X.reshape(len(X), cfg.patches, -1)
    return X


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    values = load_config(args.config) if args.config else {}
    spec_keys = {f.name for f in fields(DatasetSpec)}
    spec = dataset_spec({k: v for k, v in values.items() if k in spec_keys})
    overrides = {
        name: getattr(args, name)
        for name in ("n_classes", "shots", "test_per_class", "dim", "sigma", "shift", "patches")
        if getattr(args, name) is not None
    }
    if args.seed is not None:
        overrides["seed"] = args.seed
    ds = gen_synthetic(replace(spec, **overrides))
    out = args.out or "."
    os.makedirs(out, exist_ok=True)
    write_embeddings(ds.X_train, os.path.join(out, "train.rpem"))
    write_labels(ds.y_train, ds.n_classes, os.path.join(out, "train.rplb"))
    write_embeddings(ds.X_test, os.path.join(out, "test.rpem"))
    write_labels(ds.y_test, ds.n_classes, os.path.join(out, "test.rplb"))
    print(f"wrote {len(ds.y_train)} train / {len(ds.y_test)} test rows to {out}")
    return 0


def cmd_build_db(args) -> int:
    cfg = _train_config(args)
    X, y, C = _load_inputs(args.features, args.labels, cfg)
    cfg = _shape_config(cfg, X)
    vision = VisionEncoder(cfg.vision_config())
    db = build_database(vision.encode_frozen(X), y, C, fingerprint=vision.fingerprint)
    path = _out_path(args, "database.rpdb")
    save_database(db, path)
    print(f"database: {len(db)} entries, d={db.dim}, C={db.n_classes}, shots={db.shots} -> {path}")
    return 0


def cmd_train(args) -> int:
    db = load_database(args.db)
    cfg = replace(_train_config(args), dim=db.dim)
    X, y, C = _load_inputs(args.features, args.labels, cfg)
    if C != db.n_classes:
        raise UsageError(f"label file declares {C} classes, database has {db.n_classes}")
    test = (None, None)
    if args.test_features:
        if not args.test_labels:
            raise UsageError("--test-features needs --test-labels")
        Xt, yt, _ = _load_inputs(args.test_features, args.test_labels, cfg)
        test = (Xt, yt)
    model = RePromptModel(cfg, db)
    result = train(model, db, X, y, *test)
    out = args.out or "."
    os.makedirs(out, exist_ok=True)
    save_checkpoint(model, os.path.join(out, "checkpoint.rpck"))
    write_metrics(result.metrics, os.path.join(out, "metrics.csv"))
    last = result.metrics[-1]
    print(f"epoch {last.epoch} {last.split} accuracy {last.accuracy:.4f}")
    return 0


def cmd_eval(args) -> int:
    db = load_database(args.db)
    model = load_checkpoint(args.checkpoint, db)
    X, y, _ = _load_inputs(args.features, args.labels, model.config)
    toggles = {}
    if args.lam is not None:
        toggles["lam"] = args.lam
    if args.no_adapter:
        toggles["use_adapter"] = False
    res = evaluate(model, db, X, y, **toggles)
    summary = {
        "accuracy": res["accuracy"],
        "loss": res["loss"],
        "ce": res["ce"],
        "mean_pt": res["mean_pt"],
        "per_class_accuracy": [None if np.isnan(v) else float(v) for v in res["per_class_accuracy"]],
        "confusion": res["confusion"].tolist(),
    }
    text = json.dumps(summary, indent=2) + "\n"
    if args.out:
        _atomic_write(_out_path(args, "eval.json"), text.encode("utf-8"))
    print(f"accuracy {res['accuracy']:.4f}")
    return 0


def cmd_query(args) -> int:
    db = load_database(args.db)
    cfg = replace(_train_config(args), dim=db.dim)
    X = _load_rows(args.features, cfg)
    if not 0 <= args.row < len(X):
        raise UsageError(f"row {args.row} out of range [0, {len(X)})")
    vision = VisionEncoder(cfg.vision_config())
    z = vision.encode_frozen(X[args.row : args.row + 1])[0]
    hits = query_topk(db, z, args.k, fingerprint=vision.fingerprint)
    lines = ["rank,index,label,similarity"]
    lines += [f"{r},{h.entry_index},{db.labels[h.entry_index]},{h.similarity:.6f}" for r, h in enumerate(hits, 1)]
    text = "\n".join(lines) + "\n"
    if args.out:
        _atomic_write(_out_path(args, "neighbors.csv"), text.encode("utf-8"))
    sys.stdout.write(text)
    return 0


def cmd_variance(args) -> int:
    cfg = _train_config(args)
    X, y, C = _load_inputs(args.features, args.labels, cfg)
    if args.encoded:
        X = VisionEncoder(_shape_config(cfg, X).vision_config()).encode_frozen(X)
    per_class, v_hat, scalar = intra_class_variance(X, y, C)
    buf = io.StringIO()
    buf.write("class," + ",".join(f"dim{j}" for j in range(per_class.shape[1])) + "\n")
    for c, row in enumerate(per_class):
        buf.write(f"{c}," + ",".join(repr(float(v)) for v in row) + "\n")
    buf.write("mean," + ",".join(repr(float(v)) for v in v_hat) + "\n")
    if args.out:
        _atomic_write(_out_path(args, "variance.csv"), buf.getvalue().encode("utf-8"))
    print(f"intra-class variance {scalar!r}")
    return 0


def attention_rows(model: RePromptModel, db, x_patch: np.ndarray) -> np.ndarray:
    """Head-averaged last-layer attention of prompt tokens over patch tokens."""
    cfg = model.config
    x = x_patch[None]
    with no_grad():
        z_q = model.vision.encode_frozen(x)
        dyn = []
        if cfg.use_re_prompt and model.learner.depth:
            dyn = generate_dynamic_prompts(model.learner, Tensor(model.prompt_inputs(db, z_q)))
        _, maps = model.vision.forward(x, model.learner.prompts, dyn, return_attention=True)
    last = maps[-1].data[0].mean(axis=0)  # T x T
    N = model.learner.n_prompts
    block = last[1 : 1 + N, 1 + N :]
    return block / block.sum(axis=1, keepdims=True)


def cmd_dump_attn(args) -> int:
    db = load_database(args.db)
    model = load_checkpoint(args.checkpoint, db)
    if not model.config.patch_input:
        raise UsageError("attention maps need patch-mode inputs; this checkpoint uses feature passthrough")
    X = _load_rows(args.features, model.config)
    if not 0 <= args.row < len(X):
        raise UsageError(f"row {args.row} out of range [0, {len(X)})")
    rows = attention_rows(model, db, X[args.row])
    text = "\n".join(",".join(repr(float(v)) for v in r) for r in rows) + "\n"
    path = _out_path(args, "attention.csv")
    _atomic_write(path, text.encode("utf-8"))
    print(f"{rows.shape[0]} x {rows.shape[1]} attention rows -> {path}")
    return 0


def cmd_run(args) -> int:
    if not args.config:
        raise UsageError("run needs --config <recipe file>")
    report = run_experiment(load_config(args.config), out_dir=args.out or ".", seed=args.seed)
    for name, acc in report.rows():
        print(f"{name}\t{acc:.4f}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="reprompt", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--config", default=None, help="key = value config file")
        p.add_argument("--out", default=None, help="output directory or file")
        p.set_defaults(fn=fn)
        return p

    p = command("gen-data", cmd_gen_data, "write a synthetic few-shot suite")
    p.add_argument("--n-classes", dest="n_classes", type=int)
    p.add_argument("--shots", type=int)
    p.add_argument("--test-per-class", dest="test_per_class", type=int)
    p.add_argument("--dim", type=int)
    p.add_argument("--sigma", type=float)
    p.add_argument("--shift", type=float)
    p.add_argument("--patches", type=int, help="emit S x d patch tokens per row")

    p = command("build-db", cmd_build_db, "build a retrieval database from embeddings")
    p.add_argument("--features", required=True)
    p.add_argument("--labels", required=True)

    p = command("train", cmd_train, "train prompts, REConv blocks and cache keys")
    p.add_argument("--db", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--test-features", dest="test_features")
    p.add_argument("--test-labels", dest="test_labels")

    p = command("eval", cmd_eval, "evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--db", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--lam", type=float)
    p.add_argument("--no-adapter", dest="no_adapter", action="store_true")

    p = command("query", cmd_query, "list the nearest database entries for one row")
    p.add_argument("--db", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--row", type=int, required=True)
    p.add_argument("-k", "--k", type=int, default=7)

    p = command("variance", cmd_variance, "intra-class variance of a labelled set")
    p.add_argument("--features", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--encoded", action="store_true", help="measure frozen encoder features")

    p = command("dump-attn", cmd_dump_attn, "write last-layer prompt attention as CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--db", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--row", type=int, required=True)

    command("run", cmd_run, "run a recipe (ladder, sweep, shift, fewshot)")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.fn(args)
    except (ValueError, KeyError, OSError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
