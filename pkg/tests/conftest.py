import numpy as np
import pytest

from tra import nn, envs
from tra.data import Batch


def small_dims(d_s=3, d_a=2, encode_state=False, vocab=None):
    """Tiny architecture so full finite-difference sweeps stay fast."""
    return nn.EncoderDims(d_s=d_s, d_a=d_a,
                          vocab=vocab or envs.VOCAB_SIZE, emb=4,
                          hidden=(6, 5), latent=5, policy_hidden=(7,),
                          encode_state=encode_state)


def random_theta(rng, dims, scale=0.4):
    """init_theta perturbed away from the near-zero policy head so gradient
    checks exercise generic parameter values."""
    theta = nn.init_theta(int(rng.integers(0, 2**31)), dims)
    flat = nn.flatten_theta(theta)
    flat = flat + rng.normal(0.0, scale, size=flat.shape)
    return nn.unflatten_theta(flat, theta)


def random_batch(rng, k, d_s, d_a, vocab=None, max_len=5):
    vocab = vocab or envs.VOCAB_SIZE
    lengths = rng.integers(1, max_len + 1, size=k)
    tokens = np.zeros((k, max_len), dtype=np.int64)
    for i in range(k):
        tokens[i, :lengths[i]] = rng.integers(0, vocab, size=lengths[i])
    return Batch(
        s=rng.normal(0.0, 1.0, size=(k, d_s)),
        a=rng.uniform(0.05, 0.95, size=(k, d_a)),
        s_plus=rng.normal(0.0, 1.0, size=(k, d_s)),
        s_next=rng.normal(0.0, 1.0, size=(k, d_s)),
        g=rng.normal(0.0, 1.0, size=(k, d_s)),
        tokens=tokens,
        lengths=lengths,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
