"""Shared train/test protocol used by the CLI and the acceptance suite."""

from dataclasses import dataclass, replace

import numpy as np

from .evaluation import evaluate, predict_batch
from .model import DESK_CONFIG, init_model
from .seeding import substream
from .training import TrainConfig, few_shot_sample, train

TEST_FRACTION = 0.3
# plain SGD at lr 0.002 barely moves a randomly initialised desk-size model
DESK_LR = 0.5


def train_test_split(n, seed=0, test_fraction=TEST_FRACTION):
    """Sorted (pool, test) row indices; the split depends only on ``seed`` and ``n``."""
    perm = substream(seed, "split").permutation(n)
    cut = int(round(test_fraction * n))
    return np.sort(perm[cut:]), np.sort(perm[:cut])


@dataclass
class TrialResult:
    seed: int
    train_rows: np.ndarray
    report: list           # AspectMetrics per aspect on the test rows
    log: list
    frozen_before: str
    frozen_after: str

    def f1(self, aspect):
        return next(m.macro_f1 for m in self.report if m.aspect == aspect)

    @property
    def mean_f1(self):
        return float(np.mean([m.macro_f1 for m in self.report]))


def run_trial(dataset, vocab, model_config, train_config, split_seed=0):
    """Few-shot sample from the pool, train from the seed's init, score on the test rows."""
    pool, test = train_test_split(len(dataset), split_seed)
    rows = pool[few_shot_sample(dataset.labels[pool], train_config.shots, train_config.seed)]
    state = init_model(model_config, vocab, train_config.seed)
    before = state.frozen_hash()
    state, log = train(state, dataset.batch(state, rows), train_config)
    pred, _ = predict_batch(state, dataset.batch(state, test))
    report = evaluate(pred, dataset.labels[test], model_config.aspects)
    return TrialResult(train_config.seed, rows, report, log, before, state.frozen_hash())


def desk_model_config(dataset, **changes):
    return replace(DESK_CONFIG, latent_dim=dataset.latents.shape[1], **changes).validate()


def desk_train_config(seed, shots=16, **changes):
    changes.setdefault("lr", DESK_LR)
    return TrainConfig(shots=shots, seed=seed, **changes).validate()
