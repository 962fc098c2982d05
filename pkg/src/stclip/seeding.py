"""Named random substreams derived from one global seed.

Substreams in use: ``data`` (synthetic world), ``init`` (trainable parameters),
``stub`` (frozen encoders), ``sampling`` (few-shot selection), ``shuffle``
(mini-batch order), ``gps`` (GPS noise).
"""

import zlib

import numpy as np


def substream(seed, name):
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(name.encode())]))
