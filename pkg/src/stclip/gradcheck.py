"""Full-model finite-difference gradient check at toy dimensions."""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .aspects import ASPECTS, CLASS_WORDS
from .context import FeatureVocab
from .model import Batch, ModelConfig, batch_loss, image_features, init_model
from .seeding import substream

TOY_CONFIG = ModelConfig(dim=8, prompt_len=4, prop_dim=2, patches=3, latent_dim=4, n_w=1, layers=1, heads=2,
                         cm_heads=2, text_layers=1, text_heads=2, aspects=ASPECTS[:2])
TOLERANCE = 1e-4


@dataclass
class GradCheckResult:
    errors: dict           # trainable name -> worst relative error
    frozen_nonzero: dict   # frozen name -> count of nonzero gradient entries
    tolerance: float

    @property
    def max_error(self):
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self):
        return self.max_error < self.tolerance and not any(self.frozen_nonzero.values())


def toy_vocab():
    return FeatureVocab(range(5), (1, 2), (1, 2, 3), (30, 50), 2)


def toy_batch(state, n, seed):
    """Random property indices, image latents and labels sized for ``state``."""
    rng = substream(seed, "data")
    cfg = state.config
    sizes = state.vocab.table_sizes()
    width = 2 * cfg.n_w + 1
    cols = [rng.integers(0, sizes[k], (n, width)) for k in sizes]
    indices = np.stack(cols, axis=-1)
    mask = np.ones((n, width), dtype=bool)
    mask[0, 0] = False  # one truncated tracklet
    patches, image = image_features(state, rng.normal(size=(n, cfg.latent_dim)))
    labels = np.stack([rng.integers(0, len(CLASS_WORDS[a]), n) for a in cfg.aspects], axis=1)
    return Batch(indices, mask, patches, image, labels)


def run_gradcheck(config=TOY_CONFIG, seed=0, samples=2, eps=4e-3, floor=1e-7, tolerance=TOLERANCE):
    """Compare tape gradients of the training loss with central differences.

    Every trainable entry is perturbed; frozen tensors are asked for gradients
    too and must receive none.  The five-point stencil is used because the
    loss is large at mu = 0.01 and some gradient entries are tiny; ``floor``
    lets entries whose true gradient is zero compare on an absolute scale.
    """
    state = init_model(config, toy_vocab(), seed)
    batch = toy_batch(state, samples, seed)

    def loss():
        return batch_loss(state, batch)

    errors = ad.grad_check_report(loss, state.trainable(), eps, floor, order=4)
    frozen = state.frozen_params()
    with ad.Tape() as tape:
        out = loss()
    grads = tape.gradient(out, list(frozen.values()))
    nonzero = {k: 0 if g is None else int(np.count_nonzero(g)) for k, g in zip(frozen, grads)}
    return GradCheckResult(errors, nonzero, tolerance)

