"""Minimal dense neural substrate.

Hand-rolled MLPs (tanh hidden layers, identity output) with analytic
gradients, a token-embedding instruction encoder, Adam with a linear
warm-up schedule, a central finite-difference gradient oracle, and the
checkpoint format. Everything is float64 and pure: forward passes return
explicit caches, and parameter updates return new structures.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

CKPT_MAGIC = b"TRACKPT1"


class NonFiniteError(RuntimeError):
    """Raised when a loss or gradient stops being finite."""


class CheckpointError(RuntimeError):
    """Raised for corrupt or incompatible checkpoint files."""


def sigmoid(z: np.ndarray) -> np.ndarray:
    """Numerically stable logistic squash."""
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


# ---------------------------------------------------------------------------
# MLP


@dataclass
class Mlp:
    """Dense net parameters; layer i maps (d_i -> d_{i+1}) via x @ W + b."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]


def mlp_init(rng: np.random.Generator, dims: tuple[int, ...],
             final_scale: float = 1.0) -> Mlp:
    """Fan-in scaled Gaussian weights, zero biases.

    dims chains input through hidden layers to the output, e.g.
    (14, 64, 64, 64, 64). final_scale shrinks the last layer (used to start
    the policy mean at the action-cube center).
    """
    weights, biases = [], []
    for i in range(len(dims) - 1):
        scale = 1.0 / np.sqrt(dims[i])
        if i == len(dims) - 2:
            scale *= final_scale
        weights.append(rng.normal(0.0, scale, size=(dims[i], dims[i + 1])))
        biases.append(np.zeros(dims[i + 1]))
    return Mlp(weights, biases)


def mlp_forward(p: Mlp, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    """Forward pass on a (K, d_in) batch.

    Returns (y, cache); the cache holds every layer's activation (input
    included), which is all the backward pass needs (tanh' = 1 - h^2).
    """
    h = np.asarray(x, dtype=np.float64)
    if h.ndim != 2 or h.shape[1] != p.in_dim:
        raise ValueError(f"mlp_forward: expected (K, {p.in_dim}), got {h.shape}")
    acts = [h]
    last = len(p.weights) - 1
    for i, (w, b) in enumerate(zip(p.weights, p.biases)):
        z = h @ w + b
        h = z if i == last else np.tanh(z)
        acts.append(h)
    return h, acts


def mlp_backward(p: Mlp, cache: list[np.ndarray],
                 dy: np.ndarray) -> tuple[Mlp, np.ndarray]:
    """Exact gradients of mlp_forward; returns (param grads, dx)."""
    d_w = [None] * len(p.weights)
    d_b = [None] * len(p.biases)
    dz = np.asarray(dy, dtype=np.float64)
    for i in range(len(p.weights) - 1, -1, -1):
        if i < len(p.weights) - 1:
            # dz arriving here is dh of a tanh layer; cache[i+1] is tanh(z)
            dz = dz * (1.0 - cache[i + 1] ** 2)
        d_w[i] = cache[i].T @ dz
        d_b[i] = dz.sum(axis=0)
        dz = dz @ p.weights[i].T
    return Mlp(d_w, d_b), dz


def mlp_zeros_like(p: Mlp) -> Mlp:
    return Mlp([np.zeros_like(w) for w in p.weights],
               [np.zeros_like(b) for b in p.biases])


# ---------------------------------------------------------------------------
# Instruction encoder: sum-pooled token embeddings -> small MLP
#
# Sum pooling (not mean) keeps each token's contribution at full strength
# regardless of phrase length, so a THEN-chain carries its object tokens as
# strongly as the single-step phrases seen in training.


@dataclass
class TokenEncoder:
    embed: np.ndarray  # (vocab, emb_dim)
    mlp: Mlp


def token_encode(enc: TokenEncoder, tokens: np.ndarray,
                 lengths: np.ndarray) -> tuple[np.ndarray, tuple]:
    """Encode a (K, L) padded token batch; lengths gives the valid prefix."""
    tokens = np.asarray(tokens, dtype=np.int64)
    lengths = np.asarray(lengths, dtype=np.int64)
    if np.any(lengths < 1):
        raise ValueError("token_encode: empty instruction in batch")
    if np.any(tokens >= enc.embed.shape[0]) or np.any(tokens < 0):
        raise ValueError("token_encode: token id outside vocabulary")
    k, l_max = tokens.shape
    mask = np.arange(l_max)[None, :] < lengths[:, None]  # (K, L)
    emb = enc.embed[tokens]                              # (K, L, E)
    pooled = (emb * mask[:, :, None]).sum(axis=1)
    y, mlp_cache = mlp_forward(enc.mlp, pooled)
    return y, (tokens, lengths, mask, mlp_cache)


def token_encode_backward(enc: TokenEncoder, cache: tuple,
                          dy: np.ndarray) -> TokenEncoder:
    tokens, lengths, mask, mlp_cache = cache
    mlp_grads, d_pooled = mlp_backward(enc.mlp, mlp_cache, dy)
    d_embed = np.zeros_like(enc.embed)
    # every valid token position receives d_pooled[row]
    contrib = d_pooled[:, None, :] * mask[:, :, None]
    np.add.at(d_embed, tokens.ravel(), contrib.reshape(-1, contrib.shape[-1]))
    return TokenEncoder(d_embed, mlp_grads)


def token_encoder_zeros_like(enc: TokenEncoder) -> TokenEncoder:
    return TokenEncoder(np.zeros_like(enc.embed), mlp_zeros_like(enc.mlp))


# ---------------------------------------------------------------------------
# Full parameter set


@dataclass(frozen=True)
class EncoderDims:
    """Architecture description; stored in checkpoints and validated on resume."""

    d_s: int
    d_a: int
    vocab: int
    emb: int = 32
    hidden: tuple[int, ...] = (64, 64, 64)
    latent: int = 64
    policy_hidden: tuple[int, ...] = (64, 64, 64)
    encode_state: bool = False  # policy sees phi(s) instead of raw s

    @property
    def policy_in(self) -> int:
        state_part = self.latent if self.encode_state else self.d_s
        return state_part + self.latent

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        d["policy_hidden"] = list(self.policy_hidden)
        return d

    @staticmethod
    def from_dict(d: dict) -> "EncoderDims":
        d = dict(d)
        d["hidden"] = tuple(d["hidden"])
        d["policy_hidden"] = tuple(d["policy_hidden"])
        return EncoderDims(**d)


@dataclass
class Theta:
    """Trainable parameters: policy pi and encoders phi / psi / xi.

    sigma is the fixed policy standard deviation; with sigma = 1 the Gaussian
    negative log-likelihood reduces to 0.5 * ||a - mu||^2 up to constants.
    """

    phi: Mlp
    psi: Mlp
    xi: TokenEncoder
    policy: Mlp
    dims: EncoderDims
    sigma: float = 1.0


def init_theta(seed: int, dims: EncoderDims) -> Theta:
    """Deterministic init; the policy's final layer is near-zero so the
    initial mean sits at the action-cube center (sigmoid(~0) = 0.5)."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x7E, 0x7A]))
    enc_dims = (dims.d_s, *dims.hidden, dims.latent)
    phi = mlp_init(rng, enc_dims)
    psi = mlp_init(rng, enc_dims)
    embed = rng.normal(0.0, 1.0 / np.sqrt(dims.emb), size=(dims.vocab, dims.emb))
    xi_mlp = mlp_init(rng, (dims.emb, dims.latent, dims.latent))
    # lean the instruction head toward the identity so unseen token
    # combinations compose near-linearly in embedding space
    for w in xi_mlp.weights:
        k = min(w.shape)
        w[:k, :k] += 0.7 * np.eye(k)
    policy = mlp_init(rng, (dims.policy_in, *dims.policy_hidden, dims.d_a),
                      final_scale=1e-2)
    return Theta(phi, psi, TokenEncoder(embed, xi_mlp), policy, dims)


def theta_zeros_like(theta: Theta) -> Theta:
    return Theta(mlp_zeros_like(theta.phi), mlp_zeros_like(theta.psi),
                 token_encoder_zeros_like(theta.xi),
                 mlp_zeros_like(theta.policy), theta.dims, theta.sigma)


def policy_mean(theta: Theta, state_input: np.ndarray,
                cond: np.ndarray) -> tuple[np.ndarray, tuple]:
    """Policy mean mu(s, cond) in (0,1)^{d_a}; state_input is raw s or phi(s)."""
    x = np.concatenate([state_input, cond], axis=1)
    z, cache = mlp_forward(theta.policy, x)
    mu = sigmoid(z)
    return mu, (cache, mu, state_input.shape[1])


def policy_mean_backward(theta: Theta, cache: tuple, dmu: np.ndarray
                         ) -> tuple[Mlp, np.ndarray, np.ndarray]:
    """Returns (policy grads, d_state_input, d_cond)."""
    mlp_cache, mu, split = cache
    dz = dmu * mu * (1.0 - mu)
    grads, dx = mlp_backward(theta.policy, mlp_cache, dz)
    return grads, dx[:, :split], dx[:, split:]


# ---------------------------------------------------------------------------
# Flat parameter vector (Adam, finite differences, checkpoints)


def _theta_arrays(theta: Theta) -> list[np.ndarray]:
    arrs = []
    for mlp in (theta.phi, theta.psi):
        arrs.extend(mlp.weights)
        arrs.extend(mlp.biases)
    arrs.append(theta.xi.embed)
    arrs.extend(theta.xi.mlp.weights)
    arrs.extend(theta.xi.mlp.biases)
    arrs.extend(theta.policy.weights)
    arrs.extend(theta.policy.biases)
    return arrs


def n_params(theta: Theta) -> int:
    return sum(a.size for a in _theta_arrays(theta))


def flatten_theta(theta: Theta) -> np.ndarray:
    return np.concatenate([a.ravel() for a in _theta_arrays(theta)])


def unflatten_theta(vec: np.ndarray, like: Theta) -> Theta:
    """Rebuild a Theta with like's structure from a flat vector."""
    out = theta_zeros_like(like)
    pos = 0
    for a in _theta_arrays(out):
        a[...] = vec[pos:pos + a.size].reshape(a.shape)
        pos += a.size
    if pos != vec.size:
        raise ValueError(f"flat vector has {vec.size} entries, expected {pos}")
    return out


# ---------------------------------------------------------------------------
# Optimizer


@dataclass
class OptState:
    """Adam moments over the flat parameter space."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0


def init_opt(theta: Theta) -> OptState:
    n = n_params(theta)
    return OptState(np.zeros(n), np.zeros(n), 0)


def lr_schedule(step: int, base_lr: float, warmup: int) -> float:
    """Linear ramp 0 -> base_lr over warmup steps, constant afterwards."""
    if step < 0:
        raise ValueError("step must be >= 0")
    if warmup <= 0:
        return base_lr
    return base_lr * min(1.0, step / warmup)


def adam_step(theta: Theta, grads: Theta, opt: OptState,
              lr: float) -> tuple[Theta, OptState]:
    """Bias-corrected Adam update; aborts on non-finite gradients."""
    g = flatten_theta(grads)
    if not np.all(np.isfinite(g)):
        bad = int(np.count_nonzero(~np.isfinite(g)))
        raise NonFiniteError(f"adam_step: {bad} non-finite gradient entries "
                             f"at step {opt.step}")
    t = opt.step + 1
    m = ADAM_BETA1 * opt.m + (1.0 - ADAM_BETA1) * g
    v = ADAM_BETA2 * opt.v + (1.0 - ADAM_BETA2) * g * g
    m_hat = m / (1.0 - ADAM_BETA1 ** t)
    v_hat = v / (1.0 - ADAM_BETA2 ** t)
    new_flat = flatten_theta(theta) - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
    return unflatten_theta(new_flat, theta), OptState(m, v, t)


# ---------------------------------------------------------------------------
# Finite-difference oracle


def finite_diff_grad(loss_fn, theta: Theta, eps: float = 1e-5) -> Theta:
    """Central-difference gradient of loss_fn(theta) for every parameter.

    O(2 * n_params) loss evaluations; meant for small verification nets.
    """
    base = flatten_theta(theta)
    grad = np.zeros_like(base)
    for i in range(base.size):
        vec = base.copy()
        vec[i] = base[i] + eps
        f_plus = loss_fn(unflatten_theta(vec, theta))
        vec[i] = base[i] - eps
        f_minus = loss_fn(unflatten_theta(vec, theta))
        grad[i] = (f_plus - f_minus) / (2.0 * eps)
    return unflatten_theta(grad, theta)


def grad_rel_error(analytic: Theta, reference: Theta) -> float:
    """l2-norm relative error between two Theta-shaped gradients."""
    a = flatten_theta(analytic)
    r = flatten_theta(reference)
    return float(np.linalg.norm(a - r) / max(np.linalg.norm(r), 1e-12))


# ---------------------------------------------------------------------------
# Checkpoints: magic + JSON header + packed float64 params / Adam moments


def save_checkpoint(path, theta: Theta, opt: OptState, method: str) -> None:
    header = {
        "dims": theta.dims.to_dict(),
        "sigma": theta.sigma,
        "method": method,
        "step": opt.step,
        "n_params": n_params(theta),
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    params = flatten_theta(theta)
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(params.astype("<f8").tobytes())
        f.write(opt.m.astype("<f8").tobytes())
        f.write(opt.v.astype("<f8").tobytes())


def load_checkpoint(path) -> tuple[Theta, OptState, dict]:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < len(CKPT_MAGIC) + 4 or raw[:len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    off = len(CKPT_MAGIC)
    (blob_len,) = struct.unpack_from("<I", raw, off)
    off += 4
    try:
        header = json.loads(raw[off:off + blob_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt header ({e})") from e
    off += blob_len
    dims = EncoderDims.from_dict(header["dims"])
    n = int(header["n_params"])
    expected = off + 3 * n * 8
    if len(raw) != expected:
        raise CheckpointError(f"{path}: truncated (have {len(raw)} bytes, "
                              f"expected {expected})")
    flat = np.frombuffer(raw, dtype="<f8", count=n, offset=off).copy()
    off += n * 8
    m = np.frombuffer(raw, dtype="<f8", count=n, offset=off).copy()
    off += n * 8
    v = np.frombuffer(raw, dtype="<f8", count=n, offset=off).copy()
    template = init_theta(0, dims)
    if n_params(template) != n:
        raise CheckpointError(f"{path}: parameter count mismatch")
    theta = unflatten_theta(flat, template)
    theta.sigma = float(header.get("sigma", 1.0))
    return theta, OptState(m, v, int(header["step"])), header
