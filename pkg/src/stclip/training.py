"""Losses, few-shot sampling, cosine-annealed SGD and the training loop."""

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .aspects import ASPECTS, CLASS_WORDS
from .errors import ConfigError, ContractViolation, DataError, NumericError, SamplingError
from .model import batch_loss, class_table
from .seeding import substream

log = logging.getLogger(__name__)

SHOT_EPOCHS = {16: 100, 8: 100, 4: 50, 2: 50, 1: 20}


@dataclass(frozen=True)
class TrainConfig:
    shots: int = 16
    batch_size: int = 32
    lr: float = 0.002
    epochs: int = None  # None: pick from SHOT_EPOCHS
    seed: int = 0

    def resolved_epochs(self):
        if self.epochs is not None:
            return self.epochs
        return SHOT_EPOCHS.get(self.shots, 100)

    def validate(self):
        if self.shots < 1 or self.batch_size < 1:
            raise ConfigError("shots and batch_size must be positive")
        if self.lr < 0 or (self.epochs is not None and self.epochs < 0):
            raise ConfigError("lr and epochs must be non-negative")
        return self


def class_probabilities(image, texts, mu):
    """softmax_k(cos(i, t_k) / mu) for one image against K text features."""
    if not mu > 0:
        raise ConfigError("temperature mu must be positive")
    t = ad.stack(texts, axis=0) if isinstance(texts, (list, tuple)) else ad.as_tensor(texts)
    return ad.softmax(ad.cosine_similarity(t, ad.as_tensor(image)) * (1.0 / mu))


def aspect_loss(probs, target):
    """-sum_k y_k ln p_k with y one-hot; probabilities clamp at 1e-12 before the log."""
    y = np.asarray(target, dtype=np.float64)
    if y.ndim != 1 or y.sum() != 1 or np.any((y != 0) & (y != 1)):
        raise DataError("aspect target must be one-hot")
    return ad.cross_entropy(ad.as_tensor(probs), y)


def total_loss(items):
    """Plain sum of aspect losses over ``items`` = [(probs, one_hot), ...]."""
    if not items:
        raise DataError("total_loss needs at least one labelled aspect")
    total = None
    for probs, target in items:
        if target is None:
            raise DataError("missing aspect label")
        term = aspect_loss(probs, target)
        total = term if total is None else total + term
    return total


def cosine_lr(step, total_steps, lr0):
    if total_steps <= 0:
        return lr0
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return lr0 * (1.0 + math.cos(math.pi * step / total_steps)) / 2.0


def few_shot_sample(labels, shots, seed, aspects=ASPECTS):
    """Per aspect and class, ``shots`` rows drawn without replacement; union, sorted."""
    labels = np.asarray(labels)
    rng = substream(seed, "sampling")
    chosen = set()
    for p, aspect in enumerate(aspects):
        for k, word in enumerate(CLASS_WORDS[aspect]):
            pool = np.flatnonzero(labels[:, p] == k)
            if len(pool) < shots:
                raise SamplingError(f"{aspect}={word!r} has {len(pool)} candidates, {shots} shots requested")
            chosen.update(int(i) for i in rng.choice(pool, size=shots, replace=False))
    return np.array(sorted(chosen), dtype=int)


def sgd_step(params, grads, lr):
    for p, g in zip(params, grads):
        if g is not None:
            p.data = p.data - lr * g


def train(state, batch, config, epoch_callback=None):
    """SGD over ``batch`` (a model Batch holding the training subset).

    Only the trainable partition is updated; the frozen partition hash is
    checked before and after.  Returns (state, log rows).  Log rows carry the
    summed epoch loss, the mean per-sample loss and per-aspect training accuracy.
    """
    config.validate()
    epochs = config.resolved_epochs()
    before = state.frozen_hash()
    trainable = list(state.trainable().values())
    rng = substream(config.seed, "shuffle")
    _, cmask = class_table(state)
    n = len(batch)
    rows = []
    for epoch in range(epochs):
        lr = cosine_lr(epoch, epochs, config.lr)
        order = rng.permutation(n)
        loss_sum, correct = 0.0, np.zeros(len(state.config.aspects))
        for b, start in enumerate(range(0, n, config.batch_size)):
            mb = batch.take(order[start:start + config.batch_size])
            with ad.Tape() as tape:
                loss, lg = batch_loss(state, mb, return_logits=True)
            value = loss.item()
            if not math.isfinite(value):
                raise NumericError(f"non-finite loss at epoch {epoch + 1}, batch {b + 1}")
            grads = tape.gradient(loss, trainable)
            for g in grads:
                if g is not None and not np.all(np.isfinite(g)):
                    raise NumericError(f"non-finite gradient at epoch {epoch + 1}, batch {b + 1}")
            pred = np.where(cmask[None], lg.data, -np.inf).argmax(axis=-1)
            correct += (pred == mb.labels).sum(axis=0)
            sgd_step(trainable, grads, lr)
            loss_sum += value * len(mb)
        row = {"epoch": epoch + 1, "lr": lr, "loss": loss_sum, "mean_loss": loss_sum / max(n, 1)}
        for a, c in zip(state.config.aspects, correct):
            row[f"acc_{a}"] = c / max(n, 1)
        rows.append(row)
        log.info("epoch %d lr %.6g loss %.6g", epoch + 1, lr, loss_sum)
        if epoch_callback is not None:
            epoch_callback(row)
    if state.frozen_hash() != before:
        raise ContractViolation("frozen parameters changed during training")
    return state, rows


LOG_COLUMNS = ("epoch", "lr", "loss", "mean_loss")


def write_training_log(path, rows, aspects=ASPECTS):
    cols = LOG_COLUMNS + tuple(f"acc_{a}" for a in aspects)
    with open(path, "w", encoding="utf-8") as f:
        f.write(",".join(cols) + "\n")
        for r in rows:
            f.write(",".join(str(r[c]) if c == "epoch" else format(r[c], ".6g") for c in cols) + "\n")
