"""Training protocols, evaluation, checkpoints and per-epoch metrics."""

from __future__ import annotations

import csv
import json
import math
import struct
import time
import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .data import (AugmentConfig, BatchPipeline, Dataset, channel_stats, normalize, resize_dataset,
                   smooth_labels)
from .model import MlpModel, ModelConfig, backward, count_forward_flops, features, forward, fresh_head
from .optim import LionState, SgdMomentumState, clip_global_norm, lion_step, sgd_momentum_step
from .scaling import compute_cost
from .tensor import make_rng, rand_init

MODES = ("scratch", "pretrain", "finetune", "probe")
METRICS_COLUMNS = ("epoch", "train_loss", "train_err", "test_err", "seconds", "cum_flops")

# Protocol constants per mode; anything unset by the caller falls back to these.
MODE_DEFAULTS = {
    "scratch": dict(optimizer="lion", lr=5e-5, weight_decay=0.0, batch_size=256,
                    augment=AugmentConfig(flip=True, crop_padding=4, mixup=0.8, label_smoothing=0.3)),
    "pretrain": dict(optimizer="lion", lr=1e-5, weight_decay=1e-3, batch_size=16384,
                     augment=AugmentConfig(flip=True, crop_padding=4, mixup=0.8, label_smoothing=0.3)),
    "finetune": dict(optimizer="sgd", lr_head=0.01, lr_body=0.001, momentum=0.9, epochs=50, batch_size=256,
                     augment=AugmentConfig(flip=True, crop_padding=4, mixup=0.0, label_smoothing=0.0)),
    "probe": dict(optimizer="lion", lr=1e-5, epochs=50, batch_size=256,
                  augment=AugmentConfig(flip=False, crop_padding=0, mixup=0.0, label_smoothing=0.0)),
}


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "scratch"
    epochs: int = 1
    batch_size: int = 256
    optimizer: str = "lion"
    lr: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.99
    weight_decay: float = 0.0
    momentum: float = 0.9
    lr_head: float = 0.01
    lr_body: float = 0.001
    clip_norm: float | None = None
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    seed: int = 0
    eval_every: int = 1
    auto_resize: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.optimizer not in ("lion", "sgd"):
            raise ValueError(f"optimizer must be 'lion' or 'sgd', got {self.optimizer!r}")
        if self.lr < 0 or self.lr_head < 0 or self.lr_body < 0:
            raise ValueError("learning rates must be >= 0")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ValueError("clip_norm must be positive when set")

    @classmethod
    def for_mode(cls, mode: str, **overrides) -> "TrainConfig":
        return cls(**{"mode": mode, **MODE_DEFAULTS[mode], **overrides})

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if isinstance(d.get("augment"), dict):
            d["augment"] = AugmentConfig(**d["augment"])
        return cls(**d)


@dataclass
class MetricsRecord:
    epoch: int
    train_loss: float
    train_err: float
    test_err: float
    seconds: float
    cum_flops: int

    def comparable(self) -> tuple:
        """Everything except wall-clock time."""
        return (self.epoch, self.train_loss, self.train_err, self.test_err, self.cum_flops)


# ---------------------------------------------------------------------------
# loss


def cross_entropy_smoothed(logits, targets):
    """Mean soft-target cross-entropy and its gradient w.r.t. the logits."""
    logits = np.asarray(logits)
    targets = np.asarray(targets)
    if not np.all(np.isfinite(logits)):
        raise FloatingPointError("non-finite logits")
    if logits.shape != targets.shape:
        raise ValueError(f"logits {logits.shape} and targets {targets.shape} differ in shape")
    shifted = logits - logits.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - logsumexp
    n = len(logits)
    loss = float(-(targets * log_probs).sum() / n)
    dlogits = (np.exp(log_probs) - targets) / n
    return loss, dlogits.astype(logits.dtype, copy=False)


# ---------------------------------------------------------------------------
# optimizer plumbing


def make_optimizer(config: TrainConfig):
    if config.optimizer == "lion":
        return LionState(lr=config.lr, beta1=config.beta1, beta2=config.beta2,
                         weight_decay=config.weight_decay)
    return SgdMomentumState(lr={"head": config.lr_head, "body": config.lr_body},
                            momentum=config.momentum, weight_decay=config.weight_decay)


def optimizer_step(params, grads, state):
    if isinstance(state, LionState):
        return lion_step(params, grads, state)
    return sgd_momentum_step(params, grads, state)


def set_norm_stats(model: MlpModel, dataset: Dataset) -> None:
    """Store training-split channel statistics on the model."""
    model.norm_mean, model.norm_std = channel_stats(dataset.images)


def model_inputs(model: MlpModel, images) -> np.ndarray:
    if model.norm_mean is None:
        raise ValueError("model has no normalisation statistics; call set_norm_stats first")
    return normalize(images, model.norm_mean, model.norm_std, model.dtype).reshape(len(images), -1)


# ---------------------------------------------------------------------------
# loops


def train_epoch(model: MlpModel, dataset: Dataset, config: TrainConfig, opt_state, epoch: int,
                cum_flops: int = 0) -> MetricsRecord:
    """One shuffled pass over every example (the last partial batch is kept)."""
    if dataset.image_shape != model.config.image_shape:
        raise ValueError(f"dataset images {dataset.image_shape} do not match model input {model.config.image_shape}")
    if model.norm_mean is None:
        set_norm_stats(model, dataset)
    start = time.perf_counter()
    pipe = BatchPipeline(config.augment, model.norm_mean, model.norm_std, model.config.num_classes, model.dtype)
    order = make_rng(config.seed, epoch + 1).permutation(len(dataset))
    bs = min(config.batch_size, len(dataset))
    loss_sum = 0.0
    wrong = 0
    for b, lo in enumerate(range(0, len(dataset), bs)):
        idx = order[lo:lo + bs]
        rng = make_rng(config.seed, epoch + 1, b + 1)
        x, y = pipe(dataset, idx, rng)
        logits, cache = forward(model, x, train=True, rng=rng)
        loss, dlogits = cross_entropy_smoothed(logits, y)
        grads = backward(model, cache, dlogits)
        if config.clip_norm is not None:
            grads = clip_global_norm(grads, config.clip_norm)
        optimizer_step(model.params, grads, opt_state)
        model.touch()
        loss_sum += loss * len(idx)
        wrong += int((logits.argmax(1) != y.argmax(1)).sum())
    n = len(dataset)
    flops = compute_cost(count_forward_flops(model.config), n, 1)
    return MetricsRecord(epoch + 1, loss_sum / n, wrong / n, math.nan,
                         time.perf_counter() - start, cum_flops + flops)


def predict_logits(model: MlpModel, images, batch_size: int = 1024) -> np.ndarray:
    out = []
    for lo in range(0, len(images), batch_size):
        logits, _ = forward(model, model_inputs(model, images[lo:lo + batch_size]))
        out.append(logits)
    return np.concatenate(out)


def evaluate(model: MlpModel, dataset: Dataset, batch_size: int = 1024) -> float:
    """Top-1 error with normalisation only (no augmentation)."""
    logits = predict_logits(model, dataset.images, batch_size)
    return float(np.mean(logits.argmax(1) != dataset.labels))


def dataset_loss(model: MlpModel, dataset: Dataset, label_smoothing: float) -> float:
    logits = predict_logits(model, dataset.images)
    targets = smooth_labels(dataset.labels, label_smoothing, model.config.num_classes)
    return cross_entropy_smoothed(logits.astype(np.float64), targets)[0]


def train(model: MlpModel, dataset: Dataset, config: TrainConfig, test: Dataset | None = None,
          opt_state=None, start_epoch: int = 0, cum_flops: int = 0, on_epoch=None):
    """Run epochs ``start_epoch .. config.epochs - 1``; returns (records, optimizer state).

    ``on_epoch(record, model, opt_state)`` is called after every epoch.
    """
    if opt_state is None:
        opt_state = make_optimizer(config)
    if model.norm_mean is None:
        set_norm_stats(model, dataset)
    records = []
    for epoch in range(start_epoch, config.epochs):
        rec = train_epoch(model, dataset, config, opt_state, epoch, cum_flops)
        cum_flops = rec.cum_flops
        if test is not None and (rec.epoch % config.eval_every == 0 or rec.epoch == config.epochs):
            rec.test_err = evaluate(model, test)
        records.append(rec)
        if on_epoch is not None:
            on_epoch(rec, model, opt_state)
    return records, opt_state


def _match_resolution(model: MlpModel, dataset: Dataset, auto_resize: bool) -> Dataset:
    want = model.config.image_shape
    if dataset.image_shape == want:
        return dataset
    if dataset.image_shape[2] != want[2] or want[0] != want[1]:
        raise ValueError(f"cannot adapt images {dataset.image_shape} to model input {want}")
    if not auto_resize:
        raise ValueError(f"dataset resolution {dataset.image_shape} differs from the model's {want}; "
                         "enable auto_resize to rescale")
    return resize_dataset(dataset, want[0])


def linear_probe(model: MlpModel, dataset: Dataset, config: TrainConfig, test: Dataset | None = None,
                 head: dict | None = None):
    """Train a fresh linear classifier on frozen final-block features.

    Returns ``({"head.W", "head.b"}, top-1 error)``; the error is measured on
    ``test`` when given, else on ``dataset``. ``model`` is never modified.
    """
    dataset = _match_resolution(model, dataset, config.auto_resize)
    if test is not None:
        test = _match_resolution(model, test, config.auto_resize)
    m = model.config.width
    k = dataset.num_classes

    def feats(ds):
        return np.concatenate([features(model, model_inputs(model, ds.images[lo:lo + 1024]))
                               for lo in range(0, len(ds), 1024)])

    f_train = feats(dataset)
    rng = make_rng(config.seed)
    if head is None:
        head = {"head.W": rand_init((k, m), "he_fan_in", rng, dtype=model.dtype),
                "head.b": np.zeros(k, dtype=model.dtype)}
    else:
        head = {name: np.array(v, dtype=model.dtype) for name, v in head.items()}
        if head["head.W"].shape[1] != m:
            raise ValueError(f"probe head expects features of width {head['head.W'].shape[1]}, model gives {m}")
        k = head["head.W"].shape[0]
    opt = make_optimizer(config)
    bs = min(config.batch_size, len(dataset))
    for epoch in range(config.epochs):
        order = make_rng(config.seed, epoch + 1).permutation(len(dataset))
        for lo in range(0, len(dataset), bs):
            idx = order[lo:lo + bs]
            f = f_train[idx]
            y = smooth_labels(dataset.labels[idx], config.augment.label_smoothing, k).astype(model.dtype)
            logits = f @ head["head.W"].T + head["head.b"]
            _, dl = cross_entropy_smoothed(logits, y)
            optimizer_step(head, {"head.W": dl.T @ f, "head.b": dl.sum(0)}, opt)
    eval_ds = test if test is not None else dataset
    f_eval = f_train if test is None else feats(test)
    pred = (f_eval @ head["head.W"].T + head["head.b"]).argmax(1)
    return head, float(np.mean(pred != eval_ds.labels))


def fine_tune(model: MlpModel, dataset: Dataset, config: TrainConfig, test: Dataset | None = None):
    """Fresh head for the target classes, then train everything with per-group SGD momentum.

    Returns ``(model, top-1 error)`` on ``test`` (or ``dataset``).
    """
    dataset = _match_resolution(model, dataset, config.auto_resize)
    if test is not None:
        test = _match_resolution(model, test, config.auto_resize)
    tuned = fresh_head(model, dataset.num_classes, make_rng(config.seed, 0))
    set_norm_stats(tuned, dataset)
    train(tuned, dataset, config)
    return tuned, evaluate(tuned, test if test is not None else dataset)


# ---------------------------------------------------------------------------
# checkpoints

CKPT_MAGIC = b"MLPS"
CKPT_VERSION = 1
_DTYPE_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8"), 3: np.dtype("u1")}
_TAG_OF = {np.dtype(v).str: k for k, v in _DTYPE_TAGS.items()}


class CheckpointError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


@dataclass
class Checkpoint:
    model: MlpModel
    optimizer: object
    epoch: int
    extra: dict


def _pack_tensor(name: str, arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr)
    le = arr.dtype.newbyteorder("<") if arr.dtype.itemsize > 1 else arr.dtype
    tag = _TAG_OF.get(le.str)
    if tag is None:
        raise TypeError(f"{name}: unsupported dtype {arr.dtype}")
    raw = name.encode()
    head = struct.pack("<I", len(raw)) + raw + struct.pack("<BI", tag, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.astype(le, copy=False).tobytes()


def _optimizer_meta(state) -> dict:
    if state is None:
        return {"kind": None}
    if isinstance(state, LionState):
        return {"kind": "lion", "lr": state.lr, "beta1": state.beta1, "beta2": state.beta2,
                "weight_decay": state.weight_decay}
    return {"kind": "sgd", "lr": state.lr, "momentum": state.momentum, "weight_decay": state.weight_decay}


def save_checkpoint(model: MlpModel, opt_state, path, epoch: int = 0, extra: dict | None = None) -> None:
    tensors = dict((f"param.{k}", v) for k, v in model.params.items())
    if model.norm_mean is not None:
        tensors["norm.mean"] = np.asarray(model.norm_mean, dtype=np.float64)
        tensors["norm.std"] = np.asarray(model.norm_std, dtype=np.float64)
    if opt_state is not None:
        buf = opt_state.momentum if isinstance(opt_state, LionState) else opt_state.velocity
        tensors.update((f"opt.{k}", v) for k, v in buf.items())
    body = b"".join(_pack_tensor(k, v) for k, v in tensors.items())
    meta = {"model": model.config.to_dict(), "optimizer": _optimizer_meta(opt_state), "epoch": int(epoch),
            "num_tensors": len(tensors), "crc32": zlib.crc32(body), "extra": extra or {}}
    js = json.dumps(meta, sort_keys=True).encode()
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(js)) + js + body)
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < 12:
        raise CheckpointError("truncated header", len(raw))
    if raw[:4] != CKPT_MAGIC:
        raise CheckpointError("bad magic", 0)
    version, jlen = struct.unpack_from("<II", raw, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported version {version}", 4)
    if 12 + jlen > len(raw):
        raise CheckpointError("truncated config block", len(raw))
    try:
        meta = json.loads(raw[12:12 + jlen])
        cfg = ModelConfig.from_dict(meta["model"])
        n_tensors = int(meta["num_tensors"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"corrupt config block: {exc}", 12) from exc
    pos = 12 + jlen
    if zlib.crc32(raw[pos:]) != meta.get("crc32"):
        raise CheckpointError("tensor section checksum mismatch", pos)

    def take(n):
        nonlocal pos
        if pos + n > len(raw):
            raise CheckpointError("truncated tensor section", pos)
        chunk = raw[pos:pos + n]
        pos += n
        return chunk

    tensors = {}
    for _ in range(n_tensors):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode()
        tag, ndim = struct.unpack("<BI", take(5))
        if tag not in _DTYPE_TAGS:
            raise CheckpointError(f"unknown dtype tag {tag} for {name}", pos - 5)
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        dt = _DTYPE_TAGS[tag]
        n = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        tensors[name] = np.frombuffer(take(n), dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
    if pos != len(raw):
        raise CheckpointError("trailing bytes after tensor section", pos)

    params = {k[len("param."):]: v for k, v in tensors.items() if k.startswith("param.")}
    model = MlpModel(cfg, params, tensors.get("norm.mean"), tensors.get("norm.std"))
    om = meta["optimizer"]
    buf = {k[len("opt."):]: v for k, v in tensors.items() if k.startswith("opt.")}
    if om["kind"] == "lion":
        opt = LionState(lr=om["lr"], beta1=om["beta1"], beta2=om["beta2"],
                        weight_decay=om["weight_decay"], momentum=buf)
    elif om["kind"] == "sgd":
        opt = SgdMomentumState(lr=om["lr"], momentum=om["momentum"], weight_decay=om["weight_decay"], velocity=buf)
    else:
        opt = None
    return Checkpoint(model, opt, int(meta["epoch"]), meta.get("extra", {}))


# ---------------------------------------------------------------------------
# metrics csv


def append_metrics_csv(records, path) -> None:
    path = Path(path)
    new = not path.exists() or path.stat().st_size == 0
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(METRICS_COLUMNS)
        for r in records:
            w.writerow([r.epoch, repr(r.train_loss), repr(r.train_err), repr(r.test_err),
                        f"{r.seconds:.3f}", r.cum_flops])


def read_metrics_csv(path) -> list[MetricsRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    types = {f.name: f.type for f in fields(MetricsRecord)}
    out = []
    for row in rows:
        out.append(MetricsRecord(**{k: (int(v) if types[k] == "int" else float(v)) for k, v in row.items()}))
    return out
