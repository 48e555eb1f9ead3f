"""AdaGrad, the step learning-rate schedule, and the train/evaluate loops."""

import csv
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .analysis import PredictionRecord, confusion
from .architectures import FreezeMask
from .dataset import center_crop, mean_image, random_crop, subtract_mean
from .errors import ConfigurationError, DatasetError, NonFiniteError, TrainingError
from .intrinsics import INPUT_MODES, select_input
from .weights_io import save_weights

log = logging.getLogger(__name__)


@dataclass
class TrainingConfig:
    base_lr: float = 1e-4
    lr_decay_factor: float = 0.1
    lr_step: int = 1000
    max_iterations: int = 450_000
    batch_size: int = 1
    seed: int = 0
    eval_every: int = 0           # 0 disables periodic validation
    checkpoint_every: int = 0     # 0 keeps only the final checkpoint
    freeze_k: int = 0
    input_mode: str = "rgb"
    normalize_mean: bool = False
    crop_size: int = 227
    epsilon: float = 1e-8

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ConfigurationError("base_lr must be positive")
        if not 0 < self.lr_decay_factor <= 1:
            raise ConfigurationError("lr_decay_factor must lie in (0, 1]")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.lr_step < 1:
            raise ConfigurationError("lr_step must be >= 1")
        if self.input_mode not in INPUT_MODES:
            raise ConfigurationError(f"unknown input mode {self.input_mode!r}")

    def to_dict(self):
        return asdict(self)


def lr_at(iteration, config):
    """``base_lr * factor ** floor(iteration / lr_step)``."""
    if iteration < 0:
        raise ValueError("iteration must be >= 0")
    return config.base_lr * config.lr_decay_factor ** (iteration // config.lr_step)


def adagrad_step(param, grad, accum, lr, epsilon=1e-8, scratch=None):
    """In-place AdaGrad update; returns ``param``.

    ``accum += grad**2`` then ``param -= lr * grad / (sqrt(accum) + epsilon)``.
    """
    if param.shape != grad.shape or accum.shape != grad.shape:
        raise ConfigurationError(f"shape mismatch: param {param.shape}, grad {grad.shape}, accum {accum.shape}")
    tmp = np.empty_like(grad) if scratch is None else scratch
    np.multiply(grad, grad, out=tmp)
    accum += tmp
    np.sqrt(accum, out=tmp)
    tmp += tmp.dtype.type(epsilon)
    np.divide(grad, tmp, out=tmp)
    tmp *= tmp.dtype.type(lr)
    param -= tmp
    return param


@dataclass
class AdaGradState:
    accum: dict = field(default_factory=dict)
    epsilon: float = 1e-8
    _scratch: dict = field(default_factory=dict, repr=False)

    def step(self, params, grads, lr, skip=(), iteration=None):
        for name, g in grads.items():
            if name in skip:
                continue
            if not np.isfinite(g).all():
                raise TrainingError(f"non-finite gradient for {name} at iteration {iteration}", iteration)
            p = params[name]
            if name not in self.accum:
                self.accum[name] = np.zeros_like(p)
                self._scratch[name] = np.empty_like(p)
            adagrad_step(p, g, self.accum[name], lr, self.epsilon, self._scratch[name])


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)  # dicts: iteration, lr, loss, val_accuracy
    final: dict = field(default_factory=dict)

    FIELDS = ("iteration", "lr", "loss", "val_accuracy")

    def append(self, iteration, lr, loss, val_accuracy=None):
        self.rows.append({"iteration": iteration, "lr": lr, "loss": loss, "val_accuracy": val_accuracy})

    @property
    def losses(self):
        return np.array([r["loss"] for r in self.rows])

    @staticmethod
    def format_row(row):
        va = row["val_accuracy"]
        return [row["iteration"], repr(float(row["lr"])), repr(float(row["loss"])), "" if va is None else repr(float(va))]

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.FIELDS)
            for row in self.rows:
                w.writerow(self.format_row(row))


@dataclass
class TrainResult:
    network: object
    adagrad: AdaGradState
    log: TrainLog
    mean: np.ndarray | None

    @property
    def states(self):
        return self.network.parameters()


def _prepare(samples, mode):
    images, labels, ids = [], [], []
    for s in samples:
        images.append(np.ascontiguousarray(select_input(s.load(), mode), dtype=np.float32))
        labels.append(s.label)
        ids.append(s.sample_id)
    return images, np.array(labels, dtype=np.int64), ids


def _skip_set(network, freeze_mask):
    return {n for n, st in network.parameter_stages().items() if freeze_mask.is_frozen(st)}


def train(network, freeze_mask, samples, config, val_samples=None, log_path=None, checkpoint_dir=None):
    """Run the AdaGrad training protocol on ``samples``.

    Each iteration draws ``batch_size`` samples uniformly with replacement,
    takes a random crop, optionally subtracts the training mean image, and
    applies one AdaGrad update to every parameter whose stage is not frozen.
    Everything random comes from one generator seeded with ``config.seed``.
    Rows of the log are streamed to ``log_path`` (CSV) as they are produced.
    """
    freeze_mask = freeze_mask or FreezeMask()
    crop = (config.crop_size, config.crop_size)
    if tuple(network.spec.input_size) != crop:
        raise ConfigurationError(f"network input {network.spec.input_size} != crop size {crop}")
    if not samples:
        raise ConfigurationError("training set is empty")
    images, labels, _ = _prepare(samples, config.input_mode)
    present = np.bincount(labels, minlength=network.spec.num_classes)
    if labels.max() >= network.spec.num_classes:
        raise ConfigurationError("label outside the network's class range")
    empty = np.flatnonzero(present == 0)
    if empty.size:
        raise ConfigurationError(f"categories without training samples: {empty.tolist()}")

    mean = mean_image(images, crop) if config.normalize_mean else None
    val = _prepare(val_samples, config.input_mode) if val_samples else None
    rng = np.random.default_rng(config.seed)
    opt = AdaGradState(epsilon=config.epsilon)
    skip = _skip_set(network, freeze_mask)
    params = network.parameters()
    tlog = TrainLog()

    fh = writer = None
    if log_path is not None:
        fh = open(log_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(TrainLog.FIELDS)
    try:
        for it in range(config.max_iterations):
            idx = rng.integers(0, len(images), size=config.batch_size)
            batch = np.stack([random_crop(images[i], crop, rng) for i in idx])
            if mean is not None:
                batch = batch - mean
            lr = lr_at(it, config)
            try:
                loss, _ = network.loss_and_gradients(batch, labels[idx], rng=rng,
                                                     frozen_stages=freeze_mask.frozen_stages)
            except NonFiniteError as exc:
                raise TrainingError(f"training diverged at iteration {it}: {exc}", it) from exc
            opt.step(params, network.gradients(), lr, skip=skip, iteration=it)

            val_acc = None
            if val and config.eval_every and (it + 1) % config.eval_every == 0:
                val_acc = _accuracy(network, val[0], val[1], mean, crop)
            tlog.append(it, lr, loss, val_acc)
            if writer:
                writer.writerow(TrainLog.format_row(tlog.rows[-1]))
            if checkpoint_dir and config.checkpoint_every and (it + 1) % config.checkpoint_every == 0:
                save_weights(network.parameters(), Path(checkpoint_dir) / f"iter_{it + 1:07d}")
    finally:
        if fh:
            fh.close()
    network.clear_caches()
    if checkpoint_dir:
        save_weights(network.parameters(), Path(checkpoint_dir) / "final")
    return TrainResult(network, opt, tlog, mean)


def _accuracy(network, images, labels, mean, crop, chunk=16):
    preds = _predict(network, images, mean, crop, chunk)
    return float(np.mean(preds.argmax(axis=1) == labels))


def _predict(network, images, mean, crop, chunk=16):
    out = []
    for start in range(0, len(images), chunk):
        batch = np.stack([center_crop(img, crop) for img in images[start:start + chunk]])
        if mean is not None:
            batch = batch - mean
        out.append(network.predict(batch))
    network.clear_caches()
    return np.concatenate(out) if out else np.zeros((0, network.spec.num_classes))


@dataclass
class EvalResult:
    overall_accuracy: float
    per_category_accuracy: np.ndarray
    confusion: object
    records: list
    skipped: list


def evaluate(network, samples, mean=None, input_mode="rgb", crop_size=None):
    """One centre-crop forward per sample; test mode, so fully deterministic.

    Samples whose pixels cannot be read are skipped with a warning and
    listed in ``EvalResult.skipped``.
    """
    crop = tuple(network.spec.input_size) if crop_size is None else (crop_size, crop_size)
    if not samples:
        raise ConfigurationError("evaluation split is empty")
    records, skipped = [], []
    for s in samples:
        try:
            img = np.asarray(select_input(s.load(), input_mode), dtype=np.float32)
        except DatasetError as exc:
            warnings.warn(f"skipping {s.sample_id}: {exc}", stacklevel=2)
            skipped.append(s.sample_id)
            continue
        batch = center_crop(img, crop)[None]
        if mean is not None:
            batch = subtract_mean(batch[0], mean)[None]
        probs = network.predict(batch)[0]
        pred = int(np.argmax(probs))
        records.append(PredictionRecord(s.sample_id, int(s.label), pred, float(probs[pred]), input_mode))
    network.clear_caches()
    if skipped:
        log.warning("evaluate: skipped %d unreadable sample(s)", len(skipped))
    cm = confusion(records, network.spec.num_classes)
    overall = float(np.mean([r.correct for r in records])) if records else math.nan
    return EvalResult(overall, cm.per_category_accuracy, cm, records, skipped)
