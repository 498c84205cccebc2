"""Shared helpers: stream-keyed RNGs and glorot-style weight draws."""

import numpy as np

# fixed stream keys so every consumer of the master seed gets an
# independent, reproducible generator
STREAM_MODEL = 1
STREAM_DATA = 2
STREAM_TRAIN = 3
STREAM_ATTACK = 4
STREAM_AUGMENT = 5


def rng_for(seed, *streams):
    """Deterministic generator derived from (seed, stream key...)."""
    return np.random.default_rng([int(seed)] + [int(s) for s in streams])


def glorot_uniform(rng, shape, fan_in, fan_out):
    """Uniform init in +-sqrt(6 / (fan_in + fan_out))."""
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)
