import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hfprune import hfp
from hfprune.graph import BaseComplexity, GraphBuilder, NetworkGraph, base_complexity, tinyresnet, tinyvgg
from hfprune.hfp import (
    ComplexitySnapshot,
    LambdaSchedule,
    PruningTargets,
    compute_masks,
    effective_mults,
    effective_params,
    group_mask,
    indicator,
    indicator_ste_grad,
    lambda_at,
    pruning_loss,
    pruning_loss_grad_gamma,
    snapshot,
)

from helpers import brute_force_counts, gradient_instance, random_graph, random_gammas, random_masks, rel_err


def test_indicator_examples():
    assert indicator(5e-5, 1e-4) == 0
    assert indicator(-0.2, 1e-4) == 1
    assert indicator(1e-4, 1e-4) == 0
    assert hfp.DEFAULT_THRESHOLD == 1e-4
    assert indicator(np.array([0.0, 2e-4, -2e-4])).tolist() == [0, 1, 1]
    with pytest.raises(ValueError):
        indicator(0.1, 0.0)


def test_ste_examples():
    assert indicator_ste_grad(-0.3) == -1
    assert indicator_ste_grad(0.3) == 1
    assert indicator_ste_grad(0.0) == -1


def test_group_mask_examples():
    assert group_mask([np.array([0, 2e-4]), np.array([3e-4, 0])]).tolist() == [True, True]
    assert group_mask([np.array([0.0, 0.0]), np.array([5e-5, 0.0])]).tolist() == [False, False]
    with pytest.raises(ValueError, match="different channel counts"):
        group_mask([np.zeros(2), np.zeros(3)])


@given(st.lists(st.floats(-1e-3, 1e-3, allow_nan=False), min_size=1, max_size=8))
def test_single_member_group_is_indicator(values):
    g = np.array(values)
    assert group_mask([g]).tolist() == indicator(g).astype(bool).tolist()


# ---------------------------------------------------------------------------
# counting


def two_conv_chain():
    g = GraphBuilder((3, 8, 8), 10)
    b1 = g.bn(g.conv(None, 4))
    b2 = g.bn(g.conv(g.relu(b1), 2))
    g.fc(g.gap(g.relu(b2)), 10)
    return g.build(), b1, b2


def test_identity_masks_give_base_counts():
    for graph in (tinyvgg(), tinyresnet()):
        base = base_complexity(graph)
        masks = {b: np.ones(graph.layer(b).out_channels, bool) for b in graph.batchnorm_ids()}
        assert effective_params(graph, masks) == base.total_params
        assert effective_mults(graph, masks) == base.total_mults


def test_chain_example():
    graph, b1, b2 = two_conv_chain()
    masks = {b1: np.array([1, 0, 1, 0], bool), b2: np.array([0, 1], bool)}
    snap = snapshot(graph, masks)
    assert snap.effective_params == 82
    assert snap.kept_params == {0: 54, 3: 18, 7: 10}
    assert snap.kept_mults[0] == 3456
    assert brute_force_counts(graph, masks) == (snap.effective_params, snap.effective_mults)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.booleans())
def test_counts_match_brute_force(seed, shortcuts):
    rng = np.random.default_rng(seed)
    graph = random_graph(rng, shortcuts)
    masks = random_masks(graph, rng, p_active=float(rng.uniform(0.0, 1.0)))
    snap = snapshot(graph, masks)
    assert (snap.effective_params, snap.effective_mults) == brute_force_counts(graph, masks)


def test_group_members_must_share_masks():
    graph = tinyresnet()
    group = next(g for g in graph.shortcut_groups if len(g) > 1)
    masks = {b: np.ones(graph.layer(b).out_channels, bool) for b in graph.batchnorm_ids()}
    masks[group[0]] = masks[group[0]].copy()
    masks[group[0]][0] = False
    with pytest.raises(ValueError, match="different masks"):
        snapshot(graph, masks)


def test_compute_masks_shares_group_mask():
    graph = tinyresnet()
    rng = np.random.default_rng(0)
    masks = compute_masks(graph, random_gammas(graph, rng))
    for group in graph.shortcut_groups:
        for b in group[1:]:
            assert np.array_equal(masks[b], masks[group[0]])


# ---------------------------------------------------------------------------
# loss


def test_loss_is_point_nine_at_zero_pruning():
    base = base_complexity(tinyvgg())
    targets = PruningTargets.from_rates(base, 0.5, 0.4)
    full = ComplexitySnapshot(base.total_params, base.total_mults, {}, {})
    assert pruning_loss(full, targets, base) == pytest.approx(0.9, abs=1e-6)
    met = ComplexitySnapshot(targets.target_params, targets.target_mults, {}, {})
    assert pruning_loss(met, targets, base) == 0.0


def test_loss_hand_example():
    base = BaseComplexity({}, {}, 100, 200)
    snap = ComplexitySnapshot(60, 110, {}, {})
    assert pruning_loss(snap, PruningTargets(50, 120), base) == pytest.approx(0.1)


def test_targets_from_rates():
    base = BaseComplexity({}, {}, 100, 1000)
    t = PruningTargets.from_rates(base, 0.7, 0.25)
    assert (t.target_params, t.target_mults) == (30, 750)
    assert t.rates(base) == pytest.approx((0.7, 0.25))
    with pytest.raises(ValueError, match=r"\[0, 1\]"):
        PruningTargets.from_rates(base, 1.5, 0.5)


def test_grad_zero_once_budgets_met():
    graph = tinyvgg()
    rng = np.random.default_rng(1)
    gammas = random_gammas(graph, rng)
    masks = compute_masks(graph, gammas)
    snap = snapshot(graph, masks)
    for slack in (0, 5):  # rectifier subgradient at exactly 0 is 0
        targets = PruningTargets(snap.effective_params + slack, snap.effective_mults + slack)
        grads = pruning_loss_grad_gamma(graph, gammas, masks, targets)
        assert all(not g.any() for g in grads.values())


def test_grad_single_layer_by_hand():
    g = GraphBuilder((3, 5, 5), 4)
    bn = g.bn(g.conv(None, 4))
    g.gap(bn)
    graph = g.build()
    base = base_complexity(graph)
    gammas = {bn: np.array([0.5, -0.2, 5e-5, -3e-5])}
    masks = compute_masks(graph, gammas)
    targets = PruningTargets(10, base.total_mults)  # only the params term is active
    grads = pruning_loss_grad_gamma(graph, gammas, masks, targets)
    unit = 108 / (3 * 4)
    expected = np.array([1, -1, 1, -1]) * unit * 3 / base.total_params
    assert np.allclose(grads[bn], expected, rtol=1e-12)


def test_grad_rejects_stale_masks():
    graph, b1, b2 = two_conv_chain()
    gammas = {b1: np.ones(4), b2: np.ones(2)}
    masks = {b1: np.array([1, 0, 1, 1], bool), b2: np.ones(2, bool)}
    with pytest.raises(ValueError, match="inconsistent"):
        pruning_loss_grad_gamma(graph, gammas, masks, PruningTargets(0, 0))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.booleans())
def test_grad_matches_relaxed_finite_differences(seed, shortcuts):
    graph, gammas, tp, tm, expected = gradient_instance(np.random.default_rng(seed), shortcuts)
    masks = compute_masks(graph, gammas)
    grads = pruning_loss_grad_gamma(graph, gammas, masks, PruningTargets(tp, tm))
    for b in graph.batchnorm_ids():
        assert rel_err(grads[b], expected[b]) <= 1e-6


# ---------------------------------------------------------------------------
# lambda schedule


def test_heatup_endpoints():
    s = LambdaSchedule("linear_heatup", 1.0, 7.25, 150)
    assert lambda_at(s, 0) == 1.0
    assert lambda_at(s, 149) == 7.25
    values = [lambda_at(s, e) for e in range(150)]
    assert all(a <= b for a, b in zip(values, values[1:]))
    assert lambda_at(s, 500) == 7.25


def test_constant_schedule():
    s = LambdaSchedule("constant", 1.0, 3.0, 10)
    assert {lambda_at(s, e) for e in range(10)} == {3.0}


def test_schedule_validation():
    with pytest.raises(ValueError):
        LambdaSchedule("cosine", 1.0, 2.0, 3)
    with pytest.raises(ValueError):
        LambdaSchedule("linear_heatup", 2.0, 1.0, 3)
    with pytest.raises(ValueError):
        LambdaSchedule("constant", 1.0, 2.0, 0)


@given(st.floats(1.0, 50.0), st.integers(1, 200))
def test_heatup_monotone_and_exact(target, epochs):
    s = LambdaSchedule("linear_heatup", 1.0, target, epochs)
    values = [lambda_at(s, e) for e in range(epochs)]
    assert values[-1] == target
    assert epochs == 1 or values[0] == 1.0
    assert all(a <= b for a, b in zip(values, values[1:]))
