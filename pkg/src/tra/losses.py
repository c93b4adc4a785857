"""Training objectives.

All losses are minimized negative log-likelihoods, computed in float64 with
exact analytic gradients returned alongside. The combined objective is

    total = bc_goal + bc_lang + align_coef * nce_temporal + nce_task

where the behavioral cloning terms condition the policy on psi(s+) (the
geometrically sampled future state) and xi(l), the temporal alignment term
is a symmetric InfoNCE between phi(s) and psi(s+), and the task alignment
term is a symmetric InfoNCE between psi(g) and xi(l).

Supported modes:

    tra       full objective above
    grif      drops the temporal alignment term
    gcbc      bc only, conditioned on psi(g) (g = trajectory end)
    lcbc      bc only, conditioned on xi(l)
    tra_goal  goal-only variant: policy sees phi(s) instead of raw s,
              loss = bc_goal + align_coef * nce_temporal (no language terms)
    gcbc_phi  tra_goal with the alignment path removed entirely
    awr_tra / awr_grif
              tra / grif with the bc terms advantage-weighted
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .data import Batch

MODES = ("tra", "grif", "gcbc", "lcbc", "gcbc_phi", "tra_goal",
         "awr_tra", "awr_grif")

AWR_WEIGHT_CLIP = 20.0


@dataclass
class LossReport:
    """Scalar components (already weighted) plus Theta-shaped gradients;
    total is exactly the sum of the four components."""

    total: float
    bc_goal: float
    bc_lang: float
    nce_temporal: float
    nce_task: float
    grads: nn.Theta


# ---------------------------------------------------------------------------
# Symmetric InfoNCE


def _l2_rows(x: np.ndarray):
    r = np.linalg.norm(x, axis=1, keepdims=True)
    r = np.maximum(r, 1e-12)
    return x / r, r


def _softmax(m: np.ndarray, axis: int) -> np.ndarray:
    z = m - m.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def info_nce(u: np.ndarray, v: np.ndarray, temperature: float | None = None,
             l2_normalize: bool = False):
    """CLIP-style symmetric contrastive loss over matched latent rows.

    With logits M_ij = u_i . v_j (optionally row-normalized and/or scaled by
    1/temperature), the loss averages the row- and column-softmax
    cross-entropies of the diagonal:

        loss = -(1/2K) [ sum_i log softmax_j(M_i:)[i]
                       + sum_j log softmax_i(M_:j)[j] ]

    Returns (loss, d_u, d_v). K = 1 degenerates to loss 0.
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape or u.ndim != 2:
        raise ValueError(f"info_nce: mismatched latents {u.shape} vs {v.shape}")
    k = u.shape[0]
    if k < 1:
        raise ValueError("info_nce: empty batch")
    un, vn = u, v
    if l2_normalize:
        un, ru = _l2_rows(u)
        vn, rv = _l2_rows(v)
    m = un @ vn.T
    if temperature is not None:
        m = m / temperature
    if not np.all(np.isfinite(m)):
        raise nn.NonFiniteError("info_nce: non-finite logits")
    p = _softmax(m, axis=1)
    q = _softmax(m, axis=0)
    diag = np.arange(k)
    loss = -(np.log(p[diag, diag]).sum() + np.log(q[diag, diag]).sum()) / (2 * k)
    d_m = (p + q) / (2 * k)
    d_m[diag, diag] -= 2.0 / (2 * k)
    if temperature is not None:
        d_m = d_m / temperature
    d_un = d_m @ vn
    d_vn = d_m.T @ un
    if l2_normalize:
        d_u = (d_un - un * (un * d_un).sum(axis=1, keepdims=True)) / ru
        d_v = (d_vn - vn * (vn * d_vn).sum(axis=1, keepdims=True)) / rv
    else:
        d_u, d_v = d_un, d_vn
    return float(loss), d_u, d_v


def info_nce_row_losses(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Per-row cross-entropy of the row softmax: -M_ii + logsumexp_j M_ij.

    Row i depends only on u_i and the full v bank; used by the advantage
    surrogate.
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    m = u @ v.T
    mx = m.max(axis=1)
    lse = mx + np.log(np.exp(m - mx[:, None]).sum(axis=1))
    diag = np.arange(u.shape[0])
    return lse - m[diag, diag]


# ---------------------------------------------------------------------------
# Conditioned behavioral cloning


def _check_actions(a: np.ndarray) -> None:
    if np.any(a <= 0.0) or np.any(a >= 1.0):
        raise ValueError("actions must lie inside the open unit cube")


def bc_term(theta: nn.Theta, s_input: np.ndarray, cond: np.ndarray,
            a: np.ndarray, weights: np.ndarray | None = None):
    """Gaussian NLL with fixed unit sigma: (1/K) sum_i w_i * 0.5||a_i - mu_i||^2.

    s_input is the raw state or phi(s) depending on the policy architecture.
    Returns (loss, policy grads, d_s_input, d_cond); weights are constants.
    """
    a = np.asarray(a, dtype=np.float64)
    _check_actions(a)
    k = a.shape[0]
    mu, cache = nn.policy_mean(theta, s_input, cond)
    resid = mu - a
    if weights is None:
        loss = 0.5 * float((resid ** 2).sum()) / k
        dmu = resid / k
    else:
        w = np.asarray(weights, dtype=np.float64)
        loss = 0.5 * float((w * (resid ** 2).sum(axis=1)).sum()) / k
        dmu = resid * w[:, None] / k
    pol_grads, d_s, d_cond = nn.policy_mean_backward(theta, cache, dmu)
    return loss, pol_grads, d_s, d_cond


# ---------------------------------------------------------------------------
# Advantage surrogate (offline RL comparison)


def awr_advantage(batch: Batch, theta: nn.Theta, modality: str = "goal"
                  ) -> np.ndarray:
    """Raw per-row advantage: row InfoNCE loss of the current state against
    the goal latents minus the same for the next state. Positive means the
    step moved the state toward the goal in representation space."""
    if batch.size < 2:
        raise ValueError("advantage needs K >= 2")
    u_cur, _ = nn.mlp_forward(theta.phi, batch.s)
    u_next, _ = nn.mlp_forward(theta.phi, batch.s_next)
    if modality == "goal":
        v, _ = nn.mlp_forward(theta.psi, batch.g)
    elif modality == "lang":
        _require_instructions(batch)
        v, _ = nn.token_encode(theta.xi, batch.tokens, batch.lengths)
    else:
        raise ValueError(f"unknown modality {modality!r}")
    return info_nce_row_losses(u_cur, v) - info_nce_row_losses(u_next, v)


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    """Batch-normalize to mean 0 / std 1; a constant vector maps to zeros."""
    centered = adv - adv.mean()
    return centered / max(float(centered.std()), 1e-8)


def awr_weights(adv: np.ndarray, beta: float) -> np.ndarray:
    if beta <= 0:
        raise ValueError("beta must be positive")
    w = np.exp(normalize_advantages(adv) / beta)
    return np.minimum(w, AWR_WEIGHT_CLIP)


def awr_weighted_bc(batch: Batch, theta: nn.Theta, beta: float = 1.0,
                    modality: str = "goal",
                    weights: np.ndarray | None = None):
    """Advantage-weighted behavioral cloning.

    Weights exp(A/beta) (clipped at 20) act as constants of the optimization;
    pass them explicitly to pin them, otherwise they are computed from the
    current theta and frozen. Conditioning matches the corresponding plain bc
    term: psi(s+) for the goal modality, xi(l) for language.

    Returns (loss, Theta-shaped grads).
    """
    if weights is None:
        weights = awr_weights(awr_advantage(batch, theta, modality), beta)
    grads = nn.theta_zeros_like(theta)
    if modality == "goal":
        cond, cond_cache = nn.mlp_forward(theta.psi, batch.s_plus)
    elif modality == "lang":
        _require_instructions(batch)
        cond, cond_cache = nn.token_encode(theta.xi, batch.tokens, batch.lengths)
    else:
        raise ValueError(f"unknown modality {modality!r}")
    s_input = batch.s
    if theta.dims.encode_state:
        s_input, phi_cache = nn.mlp_forward(theta.phi, batch.s)
    loss, pol_grads, d_s_input, d_cond = bc_term(theta, s_input, cond,
                                                 batch.a, weights)
    _accumulate_mlp(grads.policy, pol_grads)
    if modality == "goal":
        psi_grads, _ = nn.mlp_backward(theta.psi, cond_cache, d_cond)
        _accumulate_mlp(grads.psi, psi_grads)
    else:
        xi_grads = nn.token_encode_backward(theta.xi, cond_cache, d_cond)
        _accumulate_token_encoder(grads.xi, xi_grads)
    if theta.dims.encode_state:
        phi_grads, _ = nn.mlp_backward(theta.phi, phi_cache, d_s_input)
        _accumulate_mlp(grads.phi, phi_grads)
    return loss, grads


# ---------------------------------------------------------------------------
# Combined objective


def _require_instructions(batch: Batch) -> None:
    if np.any(batch.lengths < 1):
        raise ValueError("batch is missing instructions for an active "
                         "language term")


def _accumulate_mlp(dst: nn.Mlp, src: nn.Mlp) -> None:
    for d, s in zip(dst.weights, src.weights):
        d += s
    for d, s in zip(dst.biases, src.biases):
        d += s


def _accumulate_token_encoder(dst: nn.TokenEncoder, src: nn.TokenEncoder) -> None:
    dst.embed += src.embed
    _accumulate_mlp(dst.mlp, src.mlp)


def tra_loss(batch: Batch, theta: nn.Theta, align_coef: float = 1.0,
             mode: str = "tra", temperature: float | None = None,
             l2_normalize: bool = False, beta: float = 1.0) -> LossReport:
    """Evaluate the selected objective on one batch and return all component
    values plus gradients for every parameter (exact zeros for parameters the
    mode does not touch)."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    if batch.size < 2:
        raise ValueError("contrastive objectives need K >= 2")
    if align_coef < 0:
        raise ValueError("align_coef must be >= 0")

    encode_state = mode in ("gcbc_phi", "tra_goal")
    if theta.dims.encode_state != encode_state:
        raise ValueError(f"mode {mode!r} requires encode_state="
                         f"{encode_state}, theta has {theta.dims.encode_state}")

    use_bc_goal = mode != "lcbc"
    use_bc_lang = mode in ("tra", "grif", "lcbc", "awr_tra", "awr_grif")
    use_nce_temporal = mode in ("tra", "awr_tra", "tra_goal")
    use_nce_task = mode in ("tra", "grif", "awr_tra", "awr_grif")
    bc_goal_cond = "g" if mode == "gcbc" else "s_plus"
    weighted = mode in ("awr_tra", "awr_grif")

    grads = nn.theta_zeros_like(theta)
    bc_goal_val = bc_lang_val = nce_t_val = nce_task_val = 0.0

    # shared forward passes; output grads are accumulated before the single
    # backward call for each cache
    phi_s = phi_cache = d_phi_s = None
    if use_nce_temporal or encode_state:
        phi_s, phi_cache = nn.mlp_forward(theta.phi, batch.s)
        d_phi_s = np.zeros_like(phi_s)
    psi_plus = psi_plus_cache = d_psi_plus = None
    if use_bc_goal and bc_goal_cond == "s_plus" or use_nce_temporal:
        psi_plus, psi_plus_cache = nn.mlp_forward(theta.psi, batch.s_plus)
        d_psi_plus = np.zeros_like(psi_plus)
    psi_g = psi_g_cache = d_psi_g = None
    if (use_bc_goal and bc_goal_cond == "g") or use_nce_task:
        psi_g, psi_g_cache = nn.mlp_forward(theta.psi, batch.g)
        d_psi_g = np.zeros_like(psi_g)
    xi_l = xi_cache = d_xi_l = None
    if use_bc_lang or use_nce_task:
        _require_instructions(batch)
        xi_l, xi_cache = nn.token_encode(theta.xi, batch.tokens, batch.lengths)
        d_xi_l = np.zeros_like(xi_l)

    s_input = phi_s if encode_state else batch.s

    if use_bc_goal:
        w = None
        if weighted:
            w = awr_weights(awr_advantage(batch, theta, "goal"), beta)
        cond = psi_g if bc_goal_cond == "g" else psi_plus
        loss, pol_g, d_s_in, d_cond = bc_term(theta, s_input, cond, batch.a, w)
        bc_goal_val = loss
        _accumulate_mlp(grads.policy, pol_g)
        if bc_goal_cond == "g":
            d_psi_g += d_cond
        else:
            d_psi_plus += d_cond
        if encode_state:
            d_phi_s += d_s_in

    if use_bc_lang:
        w = None
        if weighted:
            w = awr_weights(awr_advantage(batch, theta, "lang"), beta)
        loss, pol_g, d_s_in, d_cond = bc_term(theta, s_input, xi_l, batch.a, w)
        bc_lang_val = loss
        _accumulate_mlp(grads.policy, pol_g)
        d_xi_l += d_cond
        if encode_state:
            d_phi_s += d_s_in

    if use_nce_temporal:
        # computed even at align_coef = 0 so the gcbc_phi shortcut can be
        # checked against this path
        raw, d_u, d_v = info_nce(phi_s, psi_plus, temperature, l2_normalize)
        nce_t_val = align_coef * raw
        d_phi_s += align_coef * d_u
        d_psi_plus += align_coef * d_v

    if use_nce_task:
        raw, d_u, d_v = info_nce(psi_g, xi_l, temperature, l2_normalize)
        nce_task_val = raw
        d_psi_g += d_u
        d_xi_l += d_v

    if phi_cache is not None and np.any(d_phi_s):
        g, _ = nn.mlp_backward(theta.phi, phi_cache, d_phi_s)
        _accumulate_mlp(grads.phi, g)
    if psi_plus_cache is not None and np.any(d_psi_plus):
        g, _ = nn.mlp_backward(theta.psi, psi_plus_cache, d_psi_plus)
        _accumulate_mlp(grads.psi, g)
    if psi_g_cache is not None and np.any(d_psi_g):
        g, _ = nn.mlp_backward(theta.psi, psi_g_cache, d_psi_g)
        _accumulate_mlp(grads.psi, g)
    if xi_cache is not None and np.any(d_xi_l):
        g = nn.token_encode_backward(theta.xi, xi_cache, d_xi_l)
        _accumulate_token_encoder(grads.xi, g)

    total = bc_goal_val + bc_lang_val + nce_t_val + nce_task_val
    if not np.isfinite(total):
        raise nn.NonFiniteError(f"non-finite loss in mode {mode!r}")
    return LossReport(total, bc_goal_val, bc_lang_val, nce_t_val,
                      nce_task_val, grads)
