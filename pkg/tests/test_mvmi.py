import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import log_expit

from collabmi import tensor as T
from collabmi.errors import ContractError, DimensionError
from collabmi.mvmi import (
    SceneViews,
    batch_mi_losses,
    estimate_js_mi,
    estimate_local_mi,
    init_zero_final,
    local_mi_per_voxel,
    mvmi_objective,
    pair_batch_scores,
    project,
    sample_pairs,
    score_global,
    score_global_pair,
    score_local,
    score_local_pair,
)
from collabmi.network import NetworkConfig, init_params
from collabmi.scene import GridConfig

SMALL = GridConfig(size=8)
FEAT = (4, 4, 32)


@pytest.fixture(scope="module")
def params():
    return init_params(NetworkConfig(), SMALL, np.random.default_rng(3))


def js_oracle(pos, neg):
    return float(np.mean(log_expit(pos)) - np.mean(-log_expit(-np.asarray(neg))))


def fake_views(scene_id, n_agents, rng):
    aligned = tuple(tuple(rng.standard_normal(FEAT) for _ in range(n_agents)) for _ in range(n_agents))
    collab = tuple(rng.standard_normal(FEAT) for _ in range(n_agents))
    return SceneViews(scene_id, aligned, collab)


# -- estimator ---------------------------------------------------------------------------
def test_zero_scores_give_minus_two_ln2():
    assert abs(estimate_js_mi(np.zeros(7), np.zeros(5)).item() + 2 * math.log(2)) <= 1e-12


@given(st.lists(st.floats(-30, 30), min_size=1, max_size=20), st.lists(st.floats(-30, 30), min_size=1, max_size=20))
@settings(max_examples=60, deadline=None)
def test_js_matches_log_sigmoid_form(pos, neg):
    assert estimate_js_mi(pos, neg).item() == pytest.approx(js_oracle(pos, neg), rel=1e-12, abs=1e-12)


def test_js_bounds_and_monotonicity():
    assert estimate_js_mi([50.0], [-50.0]).item() == pytest.approx(0.0, abs=1e-20)
    a = estimate_js_mi([1.0], [0.0]).item()
    b = estimate_js_mi([2.0], [0.0]).item()
    c = estimate_js_mi([2.0], [-1.0]).item()
    assert -2 * math.log(2) < a < b < c < 0


def test_js_weighted_equals_mean_for_uniform_weights():
    rng = np.random.default_rng(0)
    p, n = rng.standard_normal(6), rng.standard_normal(6)
    w = np.full(6, 1 / 6)
    assert estimate_js_mi(p, n, w, w).item() == pytest.approx(estimate_js_mi(p, n).item(), abs=1e-14)


def test_js_empty_rejected():
    with pytest.raises(ContractError):
        estimate_js_mi([], [0.0])


def test_js_gradient():
    pos = T.tensor(np.array([0.3, -1.2]), requires_grad=True)
    neg = T.tensor(np.array([0.5]), requires_grad=True)
    gp, gn = T.backward(estimate_js_mi(pos, neg), [pos, neg])
    sig = lambda x: 1 / (1 + np.exp(-x))
    assert np.allclose(gp, sig(-pos.data) / 2, atol=1e-14)
    assert np.allclose(gn, -sig(neg.data), atol=1e-14)


def test_local_flatten_matches_per_voxel_reference():
    rng = np.random.default_rng(1)
    for _ in range(20):
        k, h, w = rng.integers(1, 5, size=3)
        p, n = rng.standard_normal((k, h, w)) * 3, rng.standard_normal((k, h, w)) * 3
        flat = estimate_local_mi(T.tensor(p), T.tensor(n)).item()
        assert abs(flat - local_mi_per_voxel(p, n)) <= 1e-12


def test_local_spatial_mismatch_rejected():
    with pytest.raises(ContractError):
        estimate_local_mi(T.tensor(np.zeros((2, 3, 3))), T.tensor(np.zeros((2, 3, 4))))


# -- discriminators ------------------------------------------------------------------------
def test_score_shapes(params):
    rng = np.random.default_rng(2)
    ind, col = rng.standard_normal((5, *FEAT)), rng.standard_normal((5, *FEAT))
    proj = project(col, params)
    assert proj.shape == (5, 64)
    assert project(col[0], params).shape == (64,)
    assert score_global(ind, proj, params).shape == (5,)
    assert score_local(ind, proj, params).shape == (5, 4, 4)
    assert score_global_pair(ind[0], col[0], params).shape == ()
    assert score_local_pair(ind[0], col[0], params).shape == (4, 4)


def test_pair_forms_agree_with_batched(params):
    rng = np.random.default_rng(4)
    ind, col = rng.standard_normal((3, *FEAT)), rng.standard_normal((3, *FEAT))
    g = score_global(ind, project(col, params), params).data
    l_ = score_local(ind, project(col, params), params).data
    for i in range(3):
        assert score_global_pair(ind[i], col[i], params).item() == pytest.approx(g[i], abs=1e-12)
        assert np.allclose(score_local_pair(ind[i], col[i], params).data, l_[i], atol=1e-12)


def test_projection_dimension_checked(params):
    with pytest.raises(DimensionError):
        project(np.zeros((2, 4, 4, 16)), params)


def test_local_score_depends_only_on_its_voxel(params):
    rng = np.random.default_rng(5)
    ind, col = rng.standard_normal((1, *FEAT)), rng.standard_normal((1, *FEAT))
    proj = project(col, params)
    base = score_local(ind, proj, params).data
    bumped = ind.copy()
    bumped[0, 2, 3] += rng.standard_normal(32) * 5
    after = score_local(bumped, proj, params).data
    changed = np.abs(after - base) > 0
    assert changed[0, 2, 3]
    changed[0, 2, 3] = False
    assert not changed.any()


def test_zero_final_layer_scores_vanish(params):
    rng = np.random.default_rng(6)
    z = init_zero_final(params)
    ind, col = rng.standard_normal((3, *FEAT)), rng.standard_normal((3, *FEAT))
    assert np.all(score_global(ind, project(col, z), z).data == 0)
    assert np.all(score_local(ind, project(col, z), z).data == 0)
    only_g = init_zero_final(params, "global")
    assert np.all(score_global(ind, project(col, only_g), only_g).data == 0)
    assert np.any(score_local(ind, project(col, only_g), only_g).data != 0)


# -- pairs ---------------------------------------------------------------------------------
@pytest.mark.parametrize("n", [1, 2, 3, 4])
@pytest.mark.parametrize("b", [1, 2, 3, 4])
def test_pair_counts(n, b):
    rng = np.random.default_rng(n * 10 + b)
    batch = [fake_views(i, n, rng) for i in range(b)]
    negs = [fake_views(100 + i, n, rng) for i in range(b)]
    pb = sample_pairs(batch, negs, ego=0, seed=1)
    assert len(pb.positives) == n * b and len(pb.negatives) == n * b
    assert sorted(pb.negative_scene_ids) == sorted(v.scene_id for v in negs)
    for k, (pos, neg) in enumerate(zip(pb.positives, pb.negatives)):
        assert pos[1] is neg[1]
        assert pos[0] is batch[pb.slots[k]].aligned[0][pb.senders[k]]


def test_pairs_reject_overlap_and_short_negative_set():
    rng = np.random.default_rng(0)
    batch = [fake_views(i, 2, rng) for i in range(3)]
    with pytest.raises(ContractError):
        sample_pairs(batch, [fake_views(2, 2, rng), fake_views(9, 2, rng), fake_views(8, 2, rng)], 0)
    with pytest.raises(ContractError):
        sample_pairs(batch, [fake_views(9, 2, rng)], 0)
    with pytest.raises(ContractError):
        sample_pairs(batch, [fake_views(9 + i, 2, rng) for i in range(3)], ego=2)


def test_pairs_deterministic_under_seed():
    rng = np.random.default_rng(0)
    batch = [fake_views(i, 3, rng) for i in range(4)]
    negs = [fake_views(50 + i, 3, rng) for i in range(6)]
    a, b = sample_pairs(batch, negs, 1, seed=7), sample_pairs(batch, negs, 1, seed=7)
    assert a.negative_scene_ids == b.negative_scene_ids
    assert all(x[0] is y[0] for x, y in zip(a.negatives, b.negatives))
    others = {sample_pairs(batch, negs, 1, seed=s).negative_scene_ids for s in range(10)}
    assert len(others) > 1


def test_negative_scene_with_fewer_agents_wraps():
    rng = np.random.default_rng(0)
    pb = sample_pairs([fake_views(0, 4, rng)], [fake_views(1, 2, rng)], ego=3)
    assert len(pb.negatives) == 4


# -- objective -----------------------------------------------------------------------------
def test_objective_at_zero_scores(params):
    rng = np.random.default_rng(8)
    z = init_zero_final(params)
    pb = sample_pairs([fake_views(i, 3, rng) for i in range(2)], [fake_views(10 + i, 3, rng) for i in range(2)], 0)
    l_g, l_l, comb = mvmi_objective(pb, z, 0.5, 0.5)
    assert l_g.item() == pytest.approx(2 * math.log(2), abs=1e-12)
    assert l_l.item() == pytest.approx(2 * math.log(2), abs=1e-12)
    assert comb.item() == pytest.approx(-2 * math.log(2), abs=1e-12)


def test_objective_without_local_term(params):
    rng = np.random.default_rng(9)
    pb = sample_pairs([fake_views(0, 2, rng)], [fake_views(1, 2, rng)], 0)
    l_g, l_l, comb = mvmi_objective(pb, params, 1.0, 0.0)
    assert l_l.item() == 0.0
    assert comb.item() == pytest.approx(-l_g.item(), abs=1e-14)


def test_objective_matches_vectorised_losses(params):
    rng = np.random.default_rng(10)
    n, b = 3, 2
    batch = [fake_views(i, n, rng) for i in range(b)]
    pb = sample_pairs(batch, [fake_views(10 + i, n, rng) for i in range(b)], 0, seed=2)
    l_g, l_l, _ = mvmi_objective(pb, params, 0.5, 0.5)
    pos = np.stack([p[0] for p in pb.positives])
    neg = np.stack([p[0] for p in pb.negatives])
    collab = np.stack([v.collab[0] for v in batch])
    w = np.full(n * b, 1 / (n * b))
    v_g, v_l = batch_mi_losses(T.tensor(pos), T.tensor(neg), T.tensor(collab), np.asarray(pb.slots), w, params)
    assert v_g.item() == pytest.approx(l_g.item(), abs=1e-12)
    assert v_l.item() == pytest.approx(l_l.item(), abs=1e-12)


def test_pair_batch_scores_global_only(params):
    rng = np.random.default_rng(11)
    pb = sample_pairs([fake_views(0, 2, rng)], [fake_views(1, 2, rng)], 0)
    (gp, gn), loc = pair_batch_scores(pb, params, local=False)
    assert loc is None and gp.shape == gn.shape == (2,)
