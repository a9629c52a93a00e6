"""Supervised source training and source-free adaptation loops.

Both loops are SGD with momentum under a polynomial learning-rate
decay, cycling sequences in a per-epoch seeded shuffle. Adaptation
never reads labels: sequences are loaded (or stripped) label-free, and
a dataset directory marked as source data is refused outright.
"""

import csv
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .contrast import AugmentSpec, ObjectiveConfig, OBJECTIVES, objective_loss
from .errors import ConfigError, ContractError, NumericError
from .segnet import SegModel, load_checkpoint
from .synthvid import read_dataset, read_manifest

CL_OBJECTIVES = ("stpl", "spatial", "temporal", "naive", "duplicate")


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 1500
    lr0: float = 1e-3
    momentum: float = 0.9
    poly_power: float = 0.9
    batch_size: int = 1
    seed: int = 0
    objective: str = "stpl"
    tau: float = 0.07
    k: float = 0.7
    cap_m: int = 256
    fusion: str = "stam"
    augment: AugmentSpec = field(default_factory=AugmentSpec)

    def __post_init__(self):
        if self.iterations <= 0:
            raise ConfigError(f"iterations must be positive, got {self.iterations}")
        # lr0 == 0 is a valid degenerate setting (no-op steps for audits)
        if self.lr0 < 0:
            raise ConfigError(f"base learning rate must be >= 0, got {self.lr0}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must be in [0,1), got {self.momentum}")
        if self.poly_power <= 0:
            raise ConfigError(f"poly power must be positive, got {self.poly_power}")
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be >= 1, got {self.batch_size}")
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"unknown objective {self.objective!r}")

    def objective_config(self):
        return ObjectiveConfig(tau=self.tau, k=self.k, cap_m=self.cap_m,
                               augment=self.augment)


def lr_schedule(iteration, config):
    """Polynomial decay: lr0 * (1 - iter/I) ** p."""
    if not 0 <= iteration < config.iterations:
        raise ContractError(
            f"iteration {iteration} outside [0, {config.iterations})")
    return config.lr0 * (1.0 - iteration / config.iterations) ** config.poly_power


def sgd_step(params, state, lr, momentum, names=None, iteration=None):
    """v <- mu*v + g; theta <- theta - lr*v over the named parameters."""
    for name in (names if names is not None else params):
        tensor = params[name]
        grad = tensor.grad
        if grad is None:
            continue
        if not np.all(np.isfinite(grad)):
            where = f" at iteration {iteration}" if iteration is not None else ""
            raise NumericError(f"non-finite gradient for {name!r}{where}")
        velocity = state.setdefault(name, np.zeros_like(tensor.data))
        velocity *= momentum
        velocity += grad
        tensor.data = tensor.data - lr * velocity


class LossLog:
    COLUMNS = ("iter", "loss", "lr", "skipped_queries")

    def __init__(self):
        self.rows = []

    def add(self, iteration, loss, lr, skipped):
        self.rows.append((iteration, loss, lr, skipped))

    def write(self, path, config_echo=None):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            if config_echo is not None:
                fh.write(f"# config: {config_echo}\n")
            writer = csv.writer(fh)
            writer.writerow(self.COLUMNS)
            for it, loss, lr, skipped in self.rows:
                writer.writerow([it, repr(float(loss)), repr(float(lr)), skipped])


def _sequence_order(n, seed, epoch):
    return np.random.default_rng([int(seed), 59, int(epoch)]).permutation(n)


def _sequence_stream(sequences, seed):
    n = len(sequences)
    epoch = 0
    while True:
        for idx in _sequence_order(n, seed, epoch):
            yield sequences[idx]
        epoch += 1


def _iterate_sequences(sequences, config):
    stream = _sequence_stream(sequences, config.seed)
    for it in range(config.iterations):
        yield it, next(stream)


def _iterate_batches(sequences, config):
    stream = _sequence_stream(sequences, config.seed)
    for it in range(config.iterations):
        yield it, [next(stream) for _ in range(config.batch_size)]


def _downsample_labels(labels, stride):
    return labels[stride // 2::stride, stride // 2::stride]


def train_source(model, sequences, config, log=None):
    """Minimize pixel cross-entropy of the fused-feature logits against
    ground-truth labels at feature resolution. Aborts on divergence,
    returning the parameters from the last finite iteration."""
    if not sequences:
        raise ConfigError("train_source: empty dataset")
    log = LossLog() if log is None else log
    state = {}
    trainable = model.trainable_names()
    snapshot = model.copy_params()
    for it, seq in _iterate_sequences(sequences, config):
        fused = model.fused_forward(seq)
        logits = model.classify(fused)
        targets = _downsample_labels(seq.labels[1], model.config.stride).astype(np.int64)
        mask = np.ones(targets.shape, dtype=bool)
        loss = dc.softmax_cross_entropy(logits, targets, mask)
        value = loss.item()
        if not math.isfinite(value):
            warnings.warn(f"train_source: loss diverged at iteration {it}, "
                          "restoring last finite parameters")
            model.restore_params(snapshot)
            break
        snapshot = model.copy_params()
        lr = lr_schedule(it, config)
        model.zero_grad()
        loss.backward()
        sgd_step(model.params, state, lr, config.momentum, names=trainable, iteration=it)
        model.iteration = it + 1
        log.add(it, value, lr, 0)
    return model, log


def adapt_sfda(checkpoint, target, config, expected_config=None):
    """Source-free adaptation of a source-trained model on unlabeled target video.

    ``checkpoint`` is a checkpoint directory or a SegModel; ``target`` a
    dataset directory (loaded without opening label files, refused if
    its manifest declares source data) or a sequence list (labels are
    stripped). Returns (model, LossLog).
    """
    if isinstance(checkpoint, SegModel):
        model = checkpoint
    else:
        model = load_checkpoint(checkpoint, expected_config=expected_config)
    if isinstance(target, (str, Path)):
        manifest = read_manifest(target)
        if manifest.get("domain") == "source":
            raise ConfigError(
                f"refusing to adapt on {target}: manifest declares source data")
        _, sequences = read_dataset(target, load_labels=False)
    else:
        sequences = [seq.without_labels() for seq in target]
    if not sequences:
        raise ConfigError("adapt_sfda: empty target dataset")

    freeze_classifier = config.objective in CL_OBJECTIVES
    trainable = model.trainable_names(freeze_classifier=freeze_classifier)
    obj_cfg = config.objective_config()
    state = {}
    log = LossLog()
    epoch_len = max(1, len(sequences) // config.batch_size)
    empty_in_epoch = 0
    for it, batch in _iterate_batches(sequences, config):
        lr = lr_schedule(it, config)
        model.zero_grad()
        values = []
        skipped = 0
        for j, seq in enumerate(batch):
            step_seed = int(np.random.SeedSequence(
                [config.seed, 83, it, j]).generate_state(1)[0])
            loss, info = objective_loss(model, seq, config.objective, obj_cfg,
                                        seed=step_seed)
            skipped += info["skipped_queries"]
            if loss is None:
                continue
            value = loss.item()
            if not math.isfinite(value):
                raise NumericError(f"adaptation loss became non-finite at iteration {it}")
            (loss * (1.0 / len(batch))).backward()
            values.append(value)
        if not values:
            empty_in_epoch += 1
            log.add(it, float("nan"), lr, skipped)
        else:
            sgd_step(model.params, state, lr, config.momentum, names=trainable,
                     iteration=it)
            log.add(it, float(np.mean(values)), lr, skipped)
        model.iteration = it + 1
        if (it + 1) % epoch_len == 0:
            if empty_in_epoch * 2 > epoch_len:
                warnings.warn(
                    f"adapt_sfda: {empty_in_epoch}/{epoch_len} empty steps in one epoch")
            empty_in_epoch = 0
    return model, log
