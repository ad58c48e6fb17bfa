import numpy as np
import pytest

from fair_diag.causal import compute_effects, fused_proficiency
from fair_diag.pscrf import PscrfParameters
from fair_diag.synthgen import SynthConfig, generate
from fair_diag.trainer import TrainConfig, prepare, train
from oracles import fused_theta, sigmoid


@pytest.fixture
def params():
    p = PscrfParameters(6, 5, 4, 1, [2], backbone="mirt", latent_dim=3, seed=21)
    rng = np.random.default_rng(0)
    p.student_emb.value[:] = rng.normal(0, 1, p.student_emb.shape)
    p.attr_emb.value[:] = rng.normal(0, 1, p.attr_emb.shape)
    return p


BUCKETS = np.array([0, 3, 1, 1, 2, 0])


def test_four_pass_enumeration(params):
    rep = compute_effects(params, np.arange(6), BUCKETS, BUCKETS)
    u_star = params.student_emb.value.mean(axis=0)
    A_star = params.attr_emb.value[BUCKETS].mean(axis=0)
    for i in range(6):
        u, A = params.student_emb.value[i], params.attr_emb.value[BUCKETS[i]]
        passes = {(cu, ca): fused_theta(params, uu, aa) for cu, uu in (("f", u), ("c", u_star)) for ca, aa in (("f", A), ("c", A_star))}
        te = passes["f", "f"] - passes["c", "c"]
        nde = passes["c", "f"] - passes["c", "c"]
        np.testing.assert_allclose(rep.te[i], te, rtol=0, atol=1e-12)
        np.testing.assert_allclose(rep.nde[i], nde, rtol=0, atol=1e-12)
        np.testing.assert_allclose(rep.tie[i], passes["f", "f"] - passes["c", "f"], rtol=0, atol=1e-12)


def test_effects_vanish_at_anchors(params):
    params.student_emb.value[:] = params.student_emb.value[2]
    params.attr_emb.value[:] = params.attr_emb.value[1]
    rep = compute_effects(params, np.arange(6), BUCKETS, BUCKETS)
    for arr in (rep.te, rep.nde, rep.tie):
        np.testing.assert_allclose(arr, 0.0, atol=1e-15)


def test_tie_plus_nde_is_te(params):
    rep = compute_effects(params, np.arange(6), BUCKETS, BUCKETS, probability_scale=True)
    np.testing.assert_array_equal(rep.tie, rep.te - rep.nde)
    np.testing.assert_allclose(rep.tie + rep.nde, rep.te, rtol=0, atol=1e-16)
    np.testing.assert_allclose(rep.prob_tie + rep.prob_nde, rep.prob_te, rtol=0, atol=1e-16)


def test_fused_proficiency_fixed_alpha(params):
    u = params.student_emb.value[:2]
    A = params.attr_emb.value[:2]
    zero = fused_proficiency(params, u, A, alpha=0.0)
    W0, b0, W1, b1 = (p.value for p in params.mlp1)
    ud = sigmoid(np.tanh(A @ W0 + b0) @ W1 + b1)
    W0, b0, W1, b1 = (p.value for p in params.mlp2)
    uf = sigmoid(np.tanh(np.hstack([u, ud]) @ W0 + b0) @ W1 + b1)
    np.testing.assert_allclose(zero, sigmoid(uf), rtol=0, atol=1e-15)


def test_group_summary(params):
    groups = np.array([0, 1, 2, 0, 1, 2])
    rep = compute_effects(params, np.arange(6), BUCKETS, BUCKETS, groups)
    s = rep.summary()
    assert set(s["groups"]) == {"disadvantaged", "general", "advantaged"}
    assert s["groups"]["general"]["students"] == 2
    assert s["groups"]["advantaged"]["TE_mean"] == pytest.approx(rep.te[[2, 5]].mean(), abs=1e-15)


def test_direct_effect_dominates_when_planted():
    # only group difference is the direct response shift; beta pinned at 1
    log, attrs, q, _ = generate(
        SynthConfig(num_students=600, num_exercises=60, rho_env=0.0, g_env=0.0, delta_direct=0.8, seed=3)
    )
    cfg = TrainConfig(max_epochs=30, patience=30, seed=3, gate_mode="fixed", fixed_alpha=0.5, fixed_beta=1.0)
    data = prepare(log, attrs, q, cfg)
    res = train(data, cfg)
    n = data.log.num_students
    rep = compute_effects(
        res.params, np.arange(n), data.student_buckets, data.student_buckets, data.groups.labels, alpha=0.5
    )
    assert np.abs(rep.nde).mean() > np.abs(rep.tie).mean()
    g = rep.summary()["groups"]
    nde_gap = g["advantaged"]["NDE_mean"] - g["disadvantaged"]["NDE_mean"]
    tie_gap = g["advantaged"]["TIE_mean"] - g["disadvantaged"]["TIE_mean"]
    assert nde_gap > abs(tie_gap)
