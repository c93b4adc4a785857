import math

import numpy as np
import pytest

from tra import losses, nn
from conftest import small_dims, random_theta, random_batch

# frozen with the brute-force enumeration below: log(1 + e^-1)
ORTHONORMAL_K2_LOSS = 0.3132616875182228


def brute_force_info_nce(u, v):
    """Independent oracle: enumerate both softmax directions with scalar math."""
    k, d = u.shape
    logits = [[sum(u[i][c] * v[j][c] for c in range(d)) for j in range(k)]
              for i in range(k)]
    total = 0.0
    for i in range(k):  # row direction
        denom = sum(math.exp(logits[i][j]) for j in range(k))
        total += math.log(math.exp(logits[i][i]) / denom)
    for j in range(k):  # column direction
        denom = sum(math.exp(logits[i][j]) for i in range(k))
        total += math.log(math.exp(logits[j][j]) / denom)
    return -total / (2 * k)


def _fd_matrix(fn, x, eps=1e-6):
    g = np.zeros_like(x)
    for i in range(x.size):
        xp = x.copy()
        xp.ravel()[i] += eps
        xm = x.copy()
        xm.ravel()[i] -= eps
        g.ravel()[i] = (fn(xp) - fn(xm)) / (2 * eps)
    return g


def test_info_nce_matches_brute_force_enumeration(rng):
    for k in (2, 3, 4):
        for _ in range(5):
            u = rng.normal(size=(k, 3))
            v = rng.normal(size=(k, 3))
            loss, _, _ = losses.info_nce(u, v)
            assert abs(loss - brute_force_info_nce(u, v)) < 1e-10


def test_info_nce_orthonormal_k2():
    u = np.eye(2)
    loss, _, _ = losses.info_nce(u, u)
    assert abs(loss - ORTHONORMAL_K2_LOSS) < 1e-12
    assert abs(loss - math.log(1 + math.exp(-1))) < 1e-12


def test_info_nce_degenerate_k1():
    loss, du, dv = losses.info_nce(np.ones((1, 4)), np.ones((1, 4)))
    assert loss == 0.0
    np.testing.assert_allclose(du, 0.0)


def test_info_nce_permutation_invariance(rng):
    u = rng.normal(size=(5, 3))
    v = rng.normal(size=(5, 3))
    loss, _, _ = losses.info_nce(u, v)
    perm = rng.permutation(5)
    loss_p, _, _ = losses.info_nce(u[perm], v[perm])
    assert abs(loss - loss_p) < 1e-12


def test_info_nce_decreasing_in_scale():
    # U(tau) = tau * I rows, K = 2: larger dot-product gaps -> lower loss
    taus = np.linspace(0.0, 3.0, 13)
    vals = [losses.info_nce(t * np.eye(2), t * np.eye(2))[0] for t in taus]
    assert all(b < a for a, b in zip(vals, vals[1:]))


@pytest.mark.parametrize("temperature,l2", [(None, False), (0.5, False),
                                            (None, True), (2.0, True)])
def test_info_nce_gradients_match_fd(rng, temperature, l2):
    u = rng.normal(size=(4, 3))
    v = rng.normal(size=(4, 3))
    _, du, dv = losses.info_nce(u, v, temperature, l2)
    fd_u = _fd_matrix(lambda x: losses.info_nce(x, v, temperature, l2)[0], u)
    fd_v = _fd_matrix(lambda x: losses.info_nce(u, x, temperature, l2)[0], v)
    assert np.linalg.norm(du - fd_u) / np.linalg.norm(fd_u) < 1e-6
    assert np.linalg.norm(dv - fd_v) / np.linalg.norm(fd_v) < 1e-6


def test_bc_term_zero_when_actions_match_mean(rng):
    dims = small_dims()
    theta = random_theta(rng, dims)
    s = rng.normal(size=(4, dims.d_s))
    cond = rng.normal(size=(4, dims.latent))
    mu, _ = nn.policy_mean(theta, s, cond)
    loss, _, _, _ = losses.bc_term(theta, s, cond, mu)
    assert loss == 0.0


def test_bc_term_formula(rng):
    dims = small_dims()
    theta = random_theta(rng, dims)
    s = rng.normal(size=(3, dims.d_s))
    cond = rng.normal(size=(3, dims.latent))
    a = rng.uniform(0.1, 0.9, size=(3, dims.d_a))
    mu, _ = nn.policy_mean(theta, s, cond)
    expected = 0.5 * ((a - mu) ** 2).sum() / 3
    loss, _, _, _ = losses.bc_term(theta, s, cond, a)
    assert abs(loss - expected) < 1e-12


def test_bc_term_rejects_out_of_cube_actions(rng):
    dims = small_dims()
    theta = random_theta(rng, dims)
    s = rng.normal(size=(2, dims.d_s))
    cond = rng.normal(size=(2, dims.latent))
    a = np.array([[0.5, 1.5], [0.2, 0.3]])
    with pytest.raises(ValueError):
        losses.bc_term(theta, s, cond, a)


def test_bc_term_gradients_match_fd(rng):
    dims = small_dims()
    theta = random_theta(rng, dims)
    s = rng.normal(size=(4, dims.d_s))
    cond = rng.normal(size=(4, dims.latent))
    a = rng.uniform(0.1, 0.9, size=(4, dims.d_a))

    def loss_of(th):
        return losses.bc_term(th, s, cond, a)[0]

    _, pol_grads, _, _ = losses.bc_term(theta, s, cond, a)
    analytic = nn.theta_zeros_like(theta)
    for d, g in zip(analytic.policy.weights, pol_grads.weights):
        d += g
    for d, g in zip(analytic.policy.biases, pol_grads.biases):
        d += g
    fd = nn.finite_diff_grad(loss_of, theta)
    assert nn.grad_rel_error(analytic, fd) < 1e-6


# ---------------------------------------------------------------------------
# Combined objective


ALL_MODES = ["tra", "grif", "gcbc", "lcbc", "gcbc_phi", "tra_goal",
             "awr_tra", "awr_grif"]


def _theta_for(mode, rng, **kw):
    return random_theta(rng, small_dims(
        encode_state=mode in ("gcbc_phi", "tra_goal"), **kw))


@pytest.mark.parametrize("mode", ALL_MODES)
def test_tra_loss_bookkeeping_identity(rng, mode):
    theta = _theta_for(mode, rng)
    batch = random_batch(rng, 5, theta.dims.d_s, theta.dims.d_a)
    rep = losses.tra_loss(batch, theta, align_coef=0.7, mode=mode)
    parts = rep.bc_goal + rep.bc_lang + rep.nce_temporal + rep.nce_task
    assert abs(rep.total - parts) < 1e-12


def _component_nonzero(grads_mlp):
    return any(np.any(w) for w in grads_mlp.weights) or \
        any(np.any(b) for b in grads_mlp.biases)


@pytest.mark.parametrize("mode,expect", [
    ("tra", {"phi": True, "psi": True, "xi": True, "policy": True}),
    ("grif", {"phi": False, "psi": True, "xi": True, "policy": True}),
    ("gcbc", {"phi": False, "psi": True, "xi": False, "policy": True}),
    ("lcbc", {"phi": False, "psi": False, "xi": True, "policy": True}),
    ("gcbc_phi", {"phi": True, "psi": True, "xi": False, "policy": True}),
    ("tra_goal", {"phi": True, "psi": True, "xi": False, "policy": True}),
])
def test_mode_touches_exactly_its_parameters(rng, mode, expect):
    theta = _theta_for(mode, rng)
    batch = random_batch(rng, 6, theta.dims.d_s, theta.dims.d_a)
    rep = losses.tra_loss(batch, theta, align_coef=1.0, mode=mode)
    got = {
        "phi": _component_nonzero(rep.grads.phi),
        "psi": _component_nonzero(rep.grads.psi),
        "xi": np.any(rep.grads.xi.embed) or _component_nonzero(rep.grads.xi.mlp),
        "policy": _component_nonzero(rep.grads.policy),
    }
    assert got == expect


def test_tra_with_zero_align_equals_grif(rng):
    theta = _theta_for("tra", rng)
    batch = random_batch(rng, 5, theta.dims.d_s, theta.dims.d_a)
    rep_tra = losses.tra_loss(batch, theta, align_coef=0.0, mode="tra")
    rep_grif = losses.tra_loss(batch, theta, align_coef=3.0, mode="grif")
    assert rep_tra.total == pytest.approx(rep_grif.total, abs=1e-15)
    np.testing.assert_array_equal(nn.flatten_theta(rep_tra.grads),
                                  nn.flatten_theta(rep_grif.grads))


def test_gcbc_phi_equals_tra_goal_at_zero_align(rng):
    theta = _theta_for("gcbc_phi", rng)
    batch = random_batch(rng, 5, theta.dims.d_s, theta.dims.d_a)
    a = losses.tra_loss(batch, theta, align_coef=0.0, mode="gcbc_phi")
    b = losses.tra_loss(batch, theta, align_coef=0.0, mode="tra_goal")
    assert a.total == b.total
    np.testing.assert_array_equal(nn.flatten_theta(a.grads),
                                  nn.flatten_theta(b.grads))


@pytest.mark.parametrize("mode", ALL_MODES)
def test_tra_loss_gradients_match_fd(rng, mode):
    theta = _theta_for(mode, rng)
    batch = random_batch(rng, 4, theta.dims.d_s, theta.dims.d_a)
    align = 0.8

    if mode in ("awr_tra", "awr_grif"):
        # advantage weights are constants of the optimization: pin them
        w_goal = losses.awr_weights(
            losses.awr_advantage(batch, theta, "goal"), 1.0)
        w_lang = losses.awr_weights(
            losses.awr_advantage(batch, theta, "lang"), 1.0)
        base = "tra" if mode == "awr_tra" else "grif"

        def loss_of(th):
            rep = losses.tra_loss(batch, th, align, base)
            lg, _ = losses.awr_weighted_bc(batch, th, 1.0, "goal", w_goal)
            ll, _ = losses.awr_weighted_bc(batch, th, 1.0, "lang", w_lang)
            return rep.total - rep.bc_goal - rep.bc_lang + lg + ll

        rep = losses.tra_loss(batch, theta, align, base)
        analytic = nn.theta_zeros_like(theta)
        flat = nn.flatten_theta(rep.grads)
        plain_g = losses.tra_loss(batch, theta, align, base)
        # remove unweighted bc gradients, add the weighted ones
        unweighted_goal = losses.awr_weighted_bc(
            batch, theta, 1.0, "goal", np.ones(batch.size))[1]
        unweighted_lang = losses.awr_weighted_bc(
            batch, theta, 1.0, "lang", np.ones(batch.size))[1]
        weighted_goal = losses.awr_weighted_bc(batch, theta, 1.0, "goal",
                                               w_goal)[1]
        weighted_lang = losses.awr_weighted_bc(batch, theta, 1.0, "lang",
                                               w_lang)[1]
        flat = (flat - nn.flatten_theta(unweighted_goal)
                - nn.flatten_theta(unweighted_lang)
                + nn.flatten_theta(weighted_goal)
                + nn.flatten_theta(weighted_lang))
        analytic = nn.unflatten_theta(flat, theta)
    else:
        def loss_of(th):
            return losses.tra_loss(batch, th, align, mode).total

        analytic = losses.tra_loss(batch, theta, align, mode).grads

    fd = nn.finite_diff_grad(loss_of, theta)
    assert nn.grad_rel_error(analytic, fd) < 1e-6


def test_tra_loss_requires_instructions_for_language_terms(rng):
    theta = _theta_for("tra", rng)
    batch = random_batch(rng, 4, theta.dims.d_s, theta.dims.d_a)
    batch.lengths[2] = 0
    with pytest.raises(ValueError):
        losses.tra_loss(batch, theta, 1.0, "tra")
    # goal-only modes don't care
    losses.tra_loss(batch, theta, 1.0, "gcbc")


def test_tra_loss_rejects_small_batches(rng):
    theta = _theta_for("tra", rng)
    batch = random_batch(rng, 1, theta.dims.d_s, theta.dims.d_a)
    with pytest.raises(ValueError):
        losses.tra_loss(batch, theta, 1.0, "tra")


def test_mode_architecture_guard(rng):
    theta = _theta_for("tra", rng)  # raw-state policy
    batch = random_batch(rng, 4, theta.dims.d_s, theta.dims.d_a)
    with pytest.raises(ValueError):
        losses.tra_loss(batch, theta, 1.0, "gcbc_phi")


# ---------------------------------------------------------------------------
# AWR


def test_awr_advantage_zero_when_next_equals_current(rng):
    theta = _theta_for("tra", rng)
    batch = random_batch(rng, 5, theta.dims.d_s, theta.dims.d_a)
    batch.s_next[3] = batch.s[3]
    adv = losses.awr_advantage(batch, theta, "goal")
    assert abs(adv[3]) < 1e-12


def test_awr_advantage_antisymmetric_under_time_reversal(rng):
    theta = _theta_for("tra", rng)
    batch = random_batch(rng, 5, theta.dims.d_s, theta.dims.d_a)
    adv = losses.awr_advantage(batch, theta, "goal")
    swapped = random_batch(rng, 5, theta.dims.d_s, theta.dims.d_a)
    swapped.s, swapped.s_next = batch.s_next.copy(), batch.s.copy()
    swapped.g = batch.g.copy()
    adv_rev = losses.awr_advantage(swapped, theta, "goal")
    np.testing.assert_allclose(adv, -adv_rev, atol=1e-12)


def test_awr_advantage_matches_brute_force(rng):
    theta = _theta_for("tra", rng)
    batch = random_batch(rng, 4, theta.dims.d_s, theta.dims.d_a)
    adv = losses.awr_advantage(batch, theta, "goal")
    u_cur, _ = nn.mlp_forward(theta.phi, batch.s)
    u_next, _ = nn.mlp_forward(theta.phi, batch.s_next)
    v, _ = nn.mlp_forward(theta.psi, batch.g)
    k = batch.size
    for i in range(k):
        def row_loss(u_row):
            logits = [float(u_row @ v[j]) for j in range(k)]
            denom = sum(math.exp(x) for x in logits)
            return -math.log(math.exp(logits[i]) / denom)
        expected = row_loss(u_cur[i]) - row_loss(u_next[i])
        assert abs(adv[i] - expected) < 1e-10


def test_awr_weights_normalization_and_clip():
    w = losses.awr_weights(np.array([5.0, 5.0, 5.0]), beta=1.0)
    np.testing.assert_allclose(w, 1.0)  # constant advantages -> plain bc
    w = losses.awr_weights(np.array([1.0, -1.0]), beta=1.0)
    assert w[0] / w[1] == pytest.approx(np.e ** 2)
    w = losses.awr_weights(np.array([100.0, 0.0, 0.0, 0.0]), beta=0.05)
    assert w.max() == losses.AWR_WEIGHT_CLIP


def test_awr_weighted_bc_reduces_to_bc_for_unit_weights(rng):
    theta = _theta_for("tra", rng)
    batch = random_batch(rng, 5, theta.dims.d_s, theta.dims.d_a)
    loss_w, _ = losses.awr_weighted_bc(batch, theta, 1.0, "goal",
                                       np.ones(batch.size))
    cond, _ = nn.mlp_forward(theta.psi, batch.s_plus)
    loss_plain, _, _, _ = losses.bc_term(theta, batch.s, cond, batch.a)
    assert loss_w == pytest.approx(loss_plain, abs=1e-15)


def test_awr_weighted_bc_beta_infinity_limit(rng):
    theta = _theta_for("tra", rng)
    batch = random_batch(rng, 5, theta.dims.d_s, theta.dims.d_a)
    loss_big_beta, _ = losses.awr_weighted_bc(batch, theta, 1e9, "goal")
    loss_unit, _ = losses.awr_weighted_bc(batch, theta, 1.0, "goal",
                                          np.ones(batch.size))
    assert loss_big_beta == pytest.approx(loss_unit, rel=1e-6)


@pytest.mark.parametrize("modality", ["goal", "lang"])
def test_awr_weighted_bc_gradients_match_fd(rng, modality):
    theta = _theta_for("tra", rng)
    batch = random_batch(rng, 4, theta.dims.d_s, theta.dims.d_a)
    weights = losses.awr_weights(
        losses.awr_advantage(batch, theta, modality), 1.0)
    loss, analytic = losses.awr_weighted_bc(batch, theta, 1.0, modality,
                                            weights)

    def loss_of(th):
        return losses.awr_weighted_bc(batch, th, 1.0, modality, weights)[0]

    fd = nn.finite_diff_grad(loss_of, theta)
    assert nn.grad_rel_error(analytic, fd) < 1e-6
