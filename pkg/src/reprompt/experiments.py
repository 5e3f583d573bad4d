"""Config-driven recipes: ablation ladder, one-parameter sweeps, shift and few-shot curves."""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from .data import Dataset, DatasetSpec, embedding_bytes, gen_synthetic, label_bytes
from .encoders import VisionEncoder
from .retrieval import RetrievalDatabase, _atomic_write, build_database
from .training import RePromptModel, TrainConfig, _coerce, evaluate, train, write_metrics

logger = logging.getLogger(__name__)

RECIPES = ("ladder", "sweep", "shift", "fewshot")
SWEEPABLE = ("lam", "J", "gamma", "k_re", "n")
FEWSHOT_N = {1: 1, 2: 2, 4: 4, 8: 4, 16: 8}
LADDER = (
    ("VLPT", dict(use_rg_loss=False, use_re_prompt=False, use_adapter=False)),
    ("+Rg", dict(use_rg_loss=True, use_re_prompt=False, use_adapter=False)),
    ("+Re", dict(use_rg_loss=True, use_re_prompt=True, use_adapter=False)),
    ("+Rb", dict(use_rg_loss=True, use_re_prompt=True, use_adapter=True)),
)
_RECIPE_KEYS = ("recipe", "param", "values", "shots_grid")
# "patches" belongs to the encoder; patch-token data follows ``patch_input``
_DATA_KEYS = tuple(f.name for f in fields(DatasetSpec) if f.name != "patches")
_TRAIN_KEYS = tuple(f.name for f in fields(TrainConfig))


class ConfigError(ValueError):
    pass


def parse_config(text: str) -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment; later keys win."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        out[key] = value
    return out


def load_config(path) -> dict[str, str]:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def split_config(values: dict) -> tuple[dict, dict, dict]:
    """Partition a flat config into (recipe, dataset, training) groups.

    ``seed`` and ``dim`` feed both the dataset and the training config.
    """
    recipe, data, trn = {}, {}, {}
    for k, v in values.items():
        if k in _RECIPE_KEYS:
            recipe[k] = v
        elif k in _DATA_KEYS or k in _TRAIN_KEYS:
            if k in _DATA_KEYS:
                data[k] = v
            if k in _TRAIN_KEYS:
                trn[k] = v
        else:
            raise ConfigError(f"unknown config key {k!r}")
    return recipe, data, trn


def dataset_spec(values: dict) -> DatasetSpec:
    kw = {}
    for k, v in values.items():
        if k == "sigma" and isinstance(v, str) and "," in v:
            kw[k] = tuple(float(s) for s in v.split(","))
        else:
            kw[k] = _coerce(v, getattr(DatasetSpec, k))
    return DatasetSpec(**kw)


def digest(payload: bytes) -> str:
    return hashlib.sha256(payload).hexdigest()


@dataclass
class RunRecord:
    name: str
    accuracy: float
    metrics_file: str
    metrics_sha256: str
    extra: dict = field(default_factory=dict)


@dataclass
class ExperimentReport:
    recipe: str
    config: dict
    input_digests: dict
    runs: list[RunRecord] = field(default_factory=list)

    def rows(self) -> list[tuple[str, float]]:
        return [(r.name, r.accuracy) for r in self.runs]

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"


def database_for(data: Dataset, config: TrainConfig) -> RetrievalDatabase:
    vision = VisionEncoder(config.vision_config())
    return build_database(
        vision.encode_frozen(data.X_train), data.y_train, data.n_classes, vision.fingerprint
    )


def _dataset_digests(data: Dataset) -> dict:
    return {
        "train_features": digest(embedding_bytes(data.X_train)),
        "train_labels": digest(label_bytes(data.y_train, data.n_classes)),
        "test_features": digest(embedding_bytes(data.X_test)),
        "test_labels": digest(label_bytes(data.y_test, data.n_classes)),
    }


class _Runner:
    def __init__(self, out_dir, report: ExperimentReport):
        self.out_dir = out_dir
        self.report = report
        if out_dir is not None:
            os.makedirs(out_dir, exist_ok=True)

    def fit(self, name: str, config: TrainConfig, data: Dataset, db=None):
        db = db if db is not None else database_for(data, config)
        model = RePromptModel(config, db)
        result = train(model, db, data.X_train, data.y_train, data.X_test, data.y_test)
        self.record(name, result.metrics[-1].accuracy, result.metrics)
        return model, db, result

    def record(self, name, accuracy, metrics, **extra):
        fname, sha = "", ""
        if self.out_dir is not None:
            fname = f"{_slug(name)}.metrics.csv"
            path = os.path.join(self.out_dir, fname)
            write_metrics(metrics, path)
            with open(path, "rb") as fh:
                sha = digest(fh.read())
        self.report.runs.append(RunRecord(name, float(accuracy), fname, sha, extra))
        logger.info("%s: accuracy %.4f", name, accuracy)


def _slug(name: str) -> str:
    return "".join(c if c.isalnum() or c in "-_." else "_" for c in name.replace("+", "plus_"))


def _values(recipe: dict, param: str) -> list:
    raw = recipe.get("values")
    if not raw:
        raise ConfigError("sweep needs 'values'")
    default = getattr(TrainConfig, param)
    try:
        vals = [_coerce(v.strip(), default) for v in raw.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"invalid sweep grid: {exc}") from None
    if not vals:
        raise ConfigError("empty sweep grid")
    return vals


def run_experiment(values: dict, out_dir=None, seed: int | None = None) -> ExperimentReport:
    """Execute the recipe named by ``values['recipe']`` and write its files."""
    values = dict(values)
    if seed is not None:
        values["seed"] = str(seed)
    recipe, data_kw, train_kw = split_config(values)
    name = recipe.get("recipe")
    if name not in RECIPES:
        raise ConfigError(f"unknown recipe {name!r}; expected one of {', '.join(RECIPES)}")
    base = TrainConfig.from_dict(train_kw)
    spec = dataset_spec(data_kw)
    if base.patch_input:
        spec = replace(spec, patches=base.patches)
    report = ExperimentReport(name, dict(sorted(values.items())), {})
    runner = _Runner(out_dir, report)

    if name == "ladder":
        data = gen_synthetic(spec)
        report.input_digests = _dataset_digests(data)
        db = database_for(data, base)
        for label, toggles in LADDER:
            runner.fit(label, replace(base, **toggles), data, db)

    elif name == "sweep":
        param = recipe.get("param")
        if param not in SWEEPABLE:
            raise ConfigError(f"sweep param must be one of {', '.join(SWEEPABLE)}")
        grid = _values(recipe, param)
        data = gen_synthetic(spec)
        report.input_digests = _dataset_digests(data)
        db = database_for(data, base)
        if param == "lam" and not (base.use_adapter and base.adapter_in_training):
            # lambda only enters at inference, so one training run serves every row
            for v in grid:
                replace(base, lam=v)  # reject out-of-range values before training
            model = RePromptModel(base, db)
            result = train(model, db, data.X_train, data.y_train, data.X_test, data.y_test)
            for v in grid:
                ev = evaluate(model, db, data.X_test, data.y_test, lam=v)
                runner.record(f"lam={v}", ev["accuracy"], result.metrics)
        else:
            for v in grid:
                runner.fit(f"{param}={v}", replace(base, **{param: v}), data, db)

    elif name == "shift":
        shift = spec.shift if spec.shift else 0.2
        source = gen_synthetic(replace(spec, shift=0.0))
        target = gen_synthetic(replace(spec, shift=shift))
        report.input_digests = _dataset_digests(source) | {
            "shifted_test_features": digest(embedding_bytes(target.X_test))
        }
        db = database_for(source, base)
        model, _, result = runner.fit("source", base, source, db)
        ev = evaluate(model, db, target.X_test, target.y_test)
        runner.record(f"shift={shift}", ev["accuracy"], result.metrics)
        knn = evaluate(model, db, target.X_test, target.y_test, lam=1.0)
        runner.record(f"shift={shift} lam=1", knn["accuracy"], result.metrics)

    else:  # fewshot
        grid = recipe.get("shots_grid", "1,2,4,8,16")
        try:
            shots = [int(s) for s in grid.split(",")]
        except ValueError:
            raise ConfigError("shots_grid must be comma-separated integers") from None
        digests = {}
        for s in shots:
            if s not in FEWSHOT_N:
                raise ConfigError(f"shots must come from {sorted(FEWSHOT_N)}")
            data = gen_synthetic(replace(spec, shots=s))
            digests[f"{s}shot_train_features"] = digest(embedding_bytes(data.X_train))
            runner.fit(f"{s}-shot", replace(base, n=FEWSHOT_N[s]), data)
        report.input_digests = digests

    if out_dir is not None:
        _atomic_write(os.path.join(out_dir, "report.json"), report.to_json().encode("utf-8"))
    return report


def ladder_accuracies(report: ExperimentReport) -> np.ndarray:
    return np.array([acc for _, acc in report.rows()])
