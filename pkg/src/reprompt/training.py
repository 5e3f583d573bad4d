"""Retrieval-guided training and evaluation of the composed model.

The model is the dual prompt-tuning baseline (text prompt + deep visual
prompts on frozen encoders) with three retrieval add-ons that can be toggled
independently: retrieval-conditioned prompts, the kNN cache adapter and the
guidance-weighted loss.
"""

from __future__ import annotations

import csv
import io
import logging
import struct
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from .adapter import AdapterState, interpolate, knn_probability
from .encoders import (
    TextEncoder,
    TextEncoderConfig,
    VisionEncoder,
    VisionEncoderConfig,
    predict_clip,
)
from .numerics import RngStream, Tensor, backward, clip_min, log, no_grad
from .prompt_learner import PromptLearner, generate_dynamic_prompts
from .retrieval import (
    RetrievalDatabase,
    _atomic_write,
    assemble_prompt_input,
    batch_topk,
    fuse_retrieved,
)

logger = logging.getLogger(__name__)

PROB_FLOOR = 1e-12
CKPT_MAGIC = b"RPCK"
CKPT_VERSION = 1
METRICS_HEADER = ("epoch", "split", "loss", "ce", "mean_pt", "accuracy")


class CheckpointFormatError(ValueError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    learning_rate: float = 1e-3
    adam_eps: float = 1e-4
    weight_decay: float = 0.01
    seed: int = 0
    gamma: float = 1e-4
    n: int = 8
    lam: float = 0.5
    tau: float = 16.0
    k_re: int = 7
    J: int = 7
    M: int = 4
    beta: float = 10.0
    logit_scale: float = 100.0
    use_rg_loss: bool = True
    use_re_prompt: bool = True
    use_adapter: bool = True
    exclude_self: bool = False
    keys_frozen: bool = False
    adapter_in_training: bool = False
    adapter_topk: int = 0
    layers: int = 12
    dim: int = 64
    patches: int = 16
    heads: int = 4
    text_layers: int = 12
    encoder_seed: int = 0
    eval_every: int = 0
    patch_input: bool = False  # CLI ingestion hint: rows hold patches x dim tokens

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.J > self.layers:
            raise ValueError("J must not exceed the layer count")
        if self.k_re < 1:
            raise ValueError("k_re must be >= 1")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lam must lie in [0, 1]")

    @property
    def N(self) -> int:
        return self.k_re + 2

    @property
    def effective_J(self) -> int:
        return self.J if self.use_re_prompt else 0

    def vision_config(self) -> VisionEncoderConfig:
        return VisionEncoderConfig(
            layers=self.layers,
            dim=self.dim,
            patches=self.patches,
            heads=self.heads,
            seed=self.encoder_seed,
        )

    def text_config(self, n_classes: int) -> TextEncoderConfig:
        return TextEncoderConfig(
            n_classes=n_classes,
            layers=self.text_layers,
            dim=self.dim,
            heads=self.heads,
            prompt_len=self.M,
            seed=self.encoder_seed + 1,
        )

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        known = {f.name: f.type for f in fields(cls)}
        kw = {}
        for k, v in values.items():
            if k not in known:
                raise KeyError(f"unknown config key {k!r}")
            kw[k] = _coerce(v, getattr(cls, k) if hasattr(cls, k) else None)
        return cls(**kw)


def _coerce(value, default):
    if not isinstance(value, str):
        return type(default)(value) if default is not None else value
    if isinstance(default, bool):
        low = value.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    return value


@dataclass
class LossBreakdown:
    ce: float
    p_t: float
    total: float


def guidance_factor(
    db: RetrievalDatabase,
    z_q,
    y_true: int,
    n: int,
    tau: float = 16.0,
    exclude_index: int | None = None,
) -> float:
    """-log p_K(y_true) over the ``C * n`` nearest database entries.

    Uses frozen features and keys only, so it carries no gradient.
    """
    return float(
        guidance_factors(db, np.atleast_2d(z_q), [y_true], n, tau,
                         None if exclude_index is None else [exclude_index])[0]
    )


def guidance_factors(db, z_q, y_true, n, tau, exclude=None) -> np.ndarray:
    size = db.n_classes * n
    avail = len(db) - (exclude is not None)
    if size > avail:
        raise ValueError(f"C*n = {size} exceeds database size {avail}")
    idx, sims = batch_topk(db, z_q, size, exclude)
    logits = tau * sims
    w = np.exp(logits - logits.max(axis=1, keepdims=True))
    hit = db.labels[idx] == np.asarray(y_true)[:, None]
    p = (w * hit).sum(axis=1) / w.sum(axis=1)
    return -np.log(np.maximum(p, PROB_FLOOR))


def reprompt_loss(p, y_true: int, p_t: float, gamma: float) -> LossBreakdown:
    """Single-sample ``(1 + gamma * p_t) * CE``."""
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    p = np.asarray(p.data if isinstance(p, Tensor) else p, dtype=np.float64)
    if p.ndim != 1 or (p < 0).any() or abs(p.sum() - 1.0) > 1e-9:
        raise ValueError("p must be a probability vector")
    ce = -np.log(max(p[y_true], PROB_FLOOR))
    return LossBreakdown(ce=float(ce), p_t=float(p_t), total=float((1.0 + gamma * p_t) * ce))


def batch_loss(p: Tensor, y: np.ndarray, weights: np.ndarray) -> tuple[Tensor, np.ndarray]:
    """Mean of per-sample weighted CE; returns (loss tensor, per-sample CE)."""
    rows = np.arange(len(y))
    ce = -log(clip_min(p[rows, y], PROB_FLOOR))
    loss = (ce * weights).mean()
    return loss, ce.data


class AdamW:
    """Adam with decoupled weight decay."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-4, weight_decay=0.01):
        self.params = list(params)
        self.lr, self.eps, self.wd = lr, eps, weight_decay
        self.b1, self.b2 = betas
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data *= 1.0 - self.lr * self.wd
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class RePromptModel:
    """Frozen encoders plus every learnable group, bound to one database."""

    def __init__(self, config: TrainConfig, db: RetrievalDatabase):
        self.config = config
        self.n_classes = db.n_classes
        self.vision = VisionEncoder(config.vision_config())
        self.text = TextEncoder(config.text_config(db.n_classes))
        db.check_fingerprint(self.vision.fingerprint)
        if db.dim != config.dim:
            raise ValueError(f"database dim {db.dim} != model dim {config.dim}")
        if db.shots and config.n > db.shots:
            raise ValueError(f"n = {config.n} exceeds the {db.shots}-shot database")
        rng = RngStream(config.seed, stream_id=4)
        self.text_prompt = (
            Tensor(rng.normal((config.dim, config.M), 0.02), requires_grad=True)
            if config.M
            else None
        )
        self.learner = PromptLearner(
            config.layers, config.dim, config.N, config.effective_J, config.beta, seed=config.seed
        )
        self.adapter = AdapterState.from_database(
            db,
            tau=config.tau,
            lam=config.lam,
            keys_frozen=config.keys_frozen,
            topk=config.adapter_topk or None,
        )

    @property
    def fingerprint(self) -> int:
        return self.vision.fingerprint

    def parameters(self) -> dict[str, Tensor]:
        params = {}
        if self.text_prompt is not None:
            params["P_T"] = self.text_prompt
        params.update(self.learner.parameters())
        params["adapter.keys"] = self.adapter.cache_keys
        return params

    def trainable(self) -> list[Tensor]:
        cfg = self.config
        out = []
        for name, t in self.parameters().items():
            if name == "adapter.keys" and (
                cfg.keys_frozen or not cfg.use_adapter or not cfg.adapter_in_training
            ):
                continue
            out.append(t)
        return out

    def frozen_hash(self) -> tuple[int, int]:
        return self.vision.parameter_hash(), self.text.parameter_hash()

    # -- pieces of the forward pass ------------------------------------------

    def frozen_features(self, inputs) -> np.ndarray:
        with no_grad():
            return self.vision.encode_frozen(inputs)

    def prompt_inputs(self, db, z_q: np.ndarray, exclude=None) -> np.ndarray:
        """Retrieval-derived prompt inputs ``B x d x (k_re + 2)`` (constants)."""
        idx, _ = batch_topk(db, z_q, self.config.k_re, exclude)
        retrieved = db.values[idx]
        with no_grad():
            z_f = fuse_retrieved(z_q, retrieved)
            return assemble_prompt_input(z_q, z_f, retrieved).data

    def forward(self, inputs, prompt_input: np.ndarray | None, use_adapter: bool | None = None):
        """Returns (final distribution, prompt-tuned distribution)."""
        cfg = self.config
        use_adapter = cfg.use_adapter if use_adapter is None else use_adapter
        f = self.text.encode(self.text_prompt)
        dyn = []
        if cfg.use_re_prompt and self.learner.depth:
            dyn = generate_dynamic_prompts(self.learner, Tensor(prompt_input))
        z_hat = self.vision.forward(inputs, self.learner.prompts, dyn)
        p_prompt = predict_clip(z_hat, f, cfg.logit_scale)
        if not use_adapter:
            return p_prompt, p_prompt
        p_knn = knn_probability(self.adapter, z_hat)
        return interpolate(p_knn, p_prompt, self.adapter.lam), p_prompt


@dataclass
class MetricsRow:
    epoch: int
    split: str
    loss: float
    ce: float
    mean_pt: float
    accuracy: float


@dataclass
class _Prepared:
    inputs: np.ndarray
    y: np.ndarray
    prompt_input: np.ndarray | None
    p_t: np.ndarray


def _prepare(model: RePromptModel, db, X, y, is_train: bool) -> _Prepared:
    cfg = model.config
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if len(X) == 0:
        raise ValueError("empty dataset")
    if y.min() < 0 or y.max() >= db.n_classes:
        raise ValueError("labels out of range for database")
    z_q = model.frozen_features(X)
    exclude = list(range(len(X))) if (is_train and cfg.exclude_self) else None
    prompt_input = model.prompt_inputs(db, z_q, exclude) if cfg.use_re_prompt else None
    if cfg.use_rg_loss:
        p_t = guidance_factors(db, z_q, y, cfg.n, cfg.tau, exclude)
    else:
        p_t = np.zeros(len(y))
    return _Prepared(X, y, prompt_input, p_t)


def _run_split(model, prep: _Prepared, chunk: int = 256):
    cfg = model.config
    gamma = cfg.gamma if cfg.use_rg_loss else 0.0
    preds, totals, ces = [], [], []
    with no_grad():
        for s in range(0, len(prep.y), chunk):
            sl = slice(s, s + chunk)
            pi = None if prep.prompt_input is None else prep.prompt_input[sl]
            p, _ = model.forward(prep.inputs[sl], pi)
            w = 1.0 + gamma * prep.p_t[sl]
            _, ce = batch_loss(p, prep.y[sl], w)
            preds.append(np.argmax(p.data, axis=1))
            totals.append(w * ce)
            ces.append(ce)
    return np.concatenate(preds), np.concatenate(totals), np.concatenate(ces)


def _row(epoch, split, prep, preds, totals, ces) -> MetricsRow:
    return MetricsRow(
        epoch,
        split,
        float(totals.mean()),
        float(ces.mean()),
        float(prep.p_t.mean()),
        float((preds == prep.y).mean()),
    )


@dataclass
class TrainResult:
    model: RePromptModel
    metrics: list[MetricsRow] = field(default_factory=list)
    batch_losses: list[LossBreakdown] = field(default_factory=list)


def train(
    model: RePromptModel,
    db: RetrievalDatabase,
    X_train,
    y_train,
    X_test=None,
    y_test=None,
) -> TrainResult:
    """Optimize the learnable groups with AdamW; frozen encoders never change."""
    cfg = model.config
    db.check_fingerprint(model.fingerprint)
    train_prep = _prepare(model, db, X_train, y_train, is_train=True)
    test_prep = None if X_test is None else _prepare(model, db, X_test, y_test, is_train=False)
    result = TrainResult(model)

    def evaluate_splits(epoch):
        result.metrics.append(_row(epoch, "train", train_prep, *_run_split(model, train_prep)))
        if test_prep is not None:
            result.metrics.append(_row(epoch, "test", test_prep, *_run_split(model, test_prep)))

    evaluate_splits(0)
    if cfg.epochs == 0:
        return result

    opt = AdamW(
        model.trainable(), lr=cfg.learning_rate, eps=cfg.adam_eps, weight_decay=cfg.weight_decay
    )
    rng = RngStream(cfg.seed, stream_id=3)
    gamma = cfg.gamma if cfg.use_rg_loss else 0.0
    use_adapter = cfg.use_adapter and cfg.adapter_in_training
    n = len(train_prep.y)
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        tot = ce_sum = 0.0
        correct = 0
        for s in range(0, n, cfg.batch_size):
            idx = np.sort(order[s : s + cfg.batch_size])
            pi = None if train_prep.prompt_input is None else train_prep.prompt_input[idx]
            opt.zero_grad()
            p, _ = model.forward(train_prep.inputs[idx], pi, use_adapter=use_adapter)
            pt = train_prep.p_t[idx]
            w = 1.0 + gamma * pt
            loss, ce = batch_loss(p, train_prep.y[idx], w)
            backward(loss)
            opt.step()
            result.batch_losses.append(
                LossBreakdown(ce=float(ce.mean()), p_t=float(pt.mean()), total=loss.item())
            )
            tot += float((w * ce).sum())
            ce_sum += float(ce.sum())
            correct += int((np.argmax(p.data, axis=1) == train_prep.y[idx]).sum())
        result.metrics.append(
            MetricsRow(epoch, "train", tot / n, ce_sum / n, float(train_prep.p_t.mean()), correct / n)
        )
        last = epoch == cfg.epochs
        if test_prep is not None and (last or (cfg.eval_every and epoch % cfg.eval_every == 0)):
            result.metrics.append(_row(epoch, "test", test_prep, *_run_split(model, test_prep)))
        logger.debug("epoch %d loss %.6f", epoch, tot / n)
    return result


def evaluate(model: RePromptModel, db: RetrievalDatabase, X, y, **toggles) -> dict:
    """Accuracy, per-class accuracy and confusion counts on a labelled set.

    ``toggles`` temporarily override config fields (e.g. ``use_adapter``,
    ``lam``) for this evaluation only.
    """
    saved_cfg, saved_lam = model.config, model.adapter.lam
    if toggles:
        model.config = replace(model.config, **toggles)
        model.adapter.lam = model.config.lam
    try:
        prep = _prepare(model, db, X, y, is_train=False)
        preds, totals, ces = _run_split(model, prep)
    finally:
        model.config, model.adapter.lam = saved_cfg, saved_lam
    C = db.n_classes
    confusion = np.zeros((C, C), dtype=np.int64)
    np.add.at(confusion, (prep.y, preds), 1)
    support = confusion.sum(axis=1)
    per_class = np.divide(
        np.diag(confusion), support, out=np.full(C, np.nan), where=support > 0
    )
    return {
        "accuracy": float((preds == prep.y).mean()),
        "per_class_accuracy": per_class,
        "confusion": confusion,
        "predictions": preds,
        "loss": float(totals.mean()),
        "ce": float(ces.mean()),
        "mean_pt": float(prep.p_t.mean()),
    }


def predict_proba(model: RePromptModel, db: RetrievalDatabase, X) -> np.ndarray:
    z_q = model.frozen_features(np.asarray(X, dtype=np.float64))
    cfg = model.config
    out = []
    with no_grad():
        for s in range(0, len(z_q), 256):
            pi = model.prompt_inputs(db, z_q[s : s + 256]) if cfg.use_re_prompt else None
            p, _ = model.forward(np.asarray(X[s : s + 256], dtype=np.float64), pi)
            out.append(p.data)
    return np.concatenate(out)


# ---------------------------------------------------------------------------
# files


def metrics_csv(rows: list[MetricsRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_HEADER)
    for r in rows:
        w.writerow([r.epoch, r.split, repr(r.loss), repr(r.ce), repr(r.mean_pt), repr(r.accuracy)])
    return buf.getvalue()


def write_metrics(rows: list[MetricsRow], path) -> None:
    _atomic_write(path, metrics_csv(rows).encode("utf-8"))


def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def checkpoint_bytes(model: RePromptModel) -> bytes:
    cfg = asdict(model.config)
    cfg["n_classes"] = model.n_classes
    cfg["fingerprint"] = model.fingerprint
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(cfg))]
    for k, v in cfg.items():
        parts += [_pack_str(k), _pack_str(repr(v))]
    params = model.parameters()
    parts.append(struct.pack("<I", len(params)))
    for name, t in params.items():
        parts += [_pack_str(name), struct.pack("<I", t.ndim)]
        parts.append(struct.pack(f"<{t.ndim}I", *t.shape))
        parts.append(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    return b"".join(parts)


def save_checkpoint(model: RePromptModel, path) -> None:
    _atomic_write(path, checkpoint_bytes(model))


class _Reader:
    def __init__(self, raw: bytes):
        self.raw, self.off = raw, 0

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.raw):
            raise CheckpointFormatError("truncated checkpoint")
        out = self.raw[self.off : self.off + n]
        self.off += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def string(self) -> str:
        return self.take(self.u32()).decode("utf-8")


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Parse a checkpoint into (config values, named float64 parameter arrays)."""
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    if r.take(4) != CKPT_MAGIC:
        raise CheckpointFormatError("bad checkpoint magic")
    version = r.u32()
    if version != CKPT_VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    cfg = {}
    for _ in range(r.u32()):
        key = r.string()
        cfg[key] = _parse_value(r.string())
    params = {}
    for _ in range(r.u32()):
        name = r.string()
        rank = r.u32()
        shape = struct.unpack(f"<{rank}I", r.take(4 * rank))
        count = int(np.prod(shape)) if rank else 1
        params[name] = np.frombuffer(r.take(4 * count), "<f4").reshape(shape).astype(np.float64)
    if r.off != len(r.raw):
        raise CheckpointFormatError("trailing bytes after checkpoint")
    return cfg, params


def _parse_value(text: str):
    if text in ("True", "False"):
        return text == "True"
    try:
        return int(text)
    except ValueError:
        return float(text)


def load_checkpoint(path, db: RetrievalDatabase) -> RePromptModel:
    values, params = read_checkpoint(path)
    n_classes = values.pop("n_classes")
    fingerprint = values.pop("fingerprint")
    config = TrainConfig(**values)
    if n_classes != db.n_classes:
        raise CheckpointFormatError("checkpoint class count does not match database")
    model = RePromptModel(config, db)
    if fingerprint != model.fingerprint:
        raise CheckpointFormatError("checkpoint encoder fingerprint mismatch")
    own = model.parameters()
    if set(own) != set(params):
        raise CheckpointFormatError("checkpoint parameter sections do not match model")
    for name, t in own.items():
        if t.shape != params[name].shape:
            raise CheckpointFormatError(f"shape mismatch for {name}")
        t.data[...] = params[name]
    return model
