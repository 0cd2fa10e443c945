import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from _oracles import fd_gradient, rel_error
from dmsd.losses import (
    BatchConstructionError,
    ClusterBank,
    LossWeights,
    center_distances,
    classification_loss,
    designate_positives,
    feature_decoupling_loss,
    motion_clustering_loss,
    nearest_center_distance,
    scenario_contrast_loss,
)


def orthogonal_fixture(groups: int, dim: int = 8):
    """Pairs of identical unit vectors, one basis direction per group."""
    s = torch.zeros(2 * groups, dim, dtype=torch.float64)
    for g in range(groups):
        s[2 * g : 2 * g + 2, g] = 1.0
    ids = [f"sc{g}" for g in range(groups) for _ in range(2)]
    return s, ids


@pytest.mark.parametrize("groups", [2, 3, 5])
def test_contrast_closed_form(groups):
    s, ids = orthogonal_fixture(groups)
    n_neg = 2 * (groups - 1)
    assert abs(scenario_contrast_loss(s, ids).item() - (math.log(n_neg) - 1)) < 1e-9
    with_pos = scenario_contrast_loss(s, ids, include_positive=True).item()
    assert abs(with_pos - (math.log(n_neg + math.e) - 1)) < 1e-9


def test_contrast_against_loop_reference():
    torch.manual_seed(1)
    s = torch.randn(7, 5, dtype=torch.float64)
    scen = ["a", "a", "b", "b", "b", "c", "c"]
    sess = ["x", "x", "x", "x", "x", "y", "y"]
    keys = list(zip(scen, sess))
    pos = designate_positives(keys)
    z = s / s.norm(dim=1, keepdim=True)
    total, count = 0.0, 0
    for i in range(7):
        negs = [j for j in range(7) if keys[j] != keys[i]]
        sims = [float(z[i] @ z[j]) / 0.5 for j in negs]
        total += -float(z[i] @ z[pos[i]]) / 0.5 + math.log(sum(math.exp(v) for v in sims))
        count += 1
    ref = total / count
    assert scenario_contrast_loss(s, scen, sess, temperature=0.5).item() == pytest.approx(ref, abs=1e-12)


def test_positive_designation_is_cyclic_within_group():
    assert designate_positives(["a", "b", "a", "a", "b"]) == [2, 4, 3, 0, 1]
    assert designate_positives(["a", "b"]) == [None, None]


def test_contrast_batch_errors():
    s = torch.randn(3, 4)
    with pytest.raises(BatchConstructionError):
        scenario_contrast_loss(s, ["a", "a", "b"])
    with pytest.raises(BatchConstructionError):
        scenario_contrast_loss(torch.randn(2, 4), ["a", "a"])
    with pytest.raises(ValueError):
        scenario_contrast_loss(s, ["a", "a"])


def test_contrast_session_splits_groups():
    s, _ = orthogonal_fixture(2)
    # the same scenario in two sessions counts as two groups
    val = scenario_contrast_loss(s, ["a"] * 4, ["x", "x", "y", "y"]).item()
    assert abs(val - (math.log(2) - 1)) < 1e-9


def test_clustering_closed_form():
    bank = ClusterBank(6, num_centers=4)
    with torch.no_grad():
        c = torch.randn(4, 5, 6, dtype=torch.float64)
        bank.centers.data = c / c.norm(dim=-1, keepdim=True)
    m = torch.zeros(3, 6, dtype=torch.float64)
    val = motion_clustering_loss(m, torch.tensor([0, 2, 4]), bank).item()
    assert abs(val - math.log(5)) < 1e-9


def test_classification_closed_form():
    logits = torch.full((4, 5), 0.37, dtype=torch.float64)
    assert abs(classification_loss(logits, torch.tensor([0, 1, 3, 4])).item() - math.log(5)) < 1e-9


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 5), st.integers(1, 6), st.integers(0, 10_000))
def test_nearest_center_distance_brute_force(k, d, seed):
    g = torch.Generator().manual_seed(seed)
    centers = torch.randn(k, 5, d, generator=g, dtype=torch.float64)
    m = torch.randn(3, d, generator=g, dtype=torch.float64)
    dist = center_distances(m, centers)
    for b in range(3):
        for cls in range(5):
            ref = min(float(torch.linalg.norm(m[b] - centers[j, cls])) for j in range(k))
            assert dist[b, cls].item() == pytest.approx(ref, abs=1e-12)
            assert nearest_center_distance(m[b], cls, centers).item() == pytest.approx(ref, abs=1e-12)


def test_bank_shape_and_init():
    torch.manual_seed(0)
    bank = ClusterBank(64, 4, 0.1)
    assert bank.centers.shape == (4, 5, 64)
    assert 0.08 < bank.centers.std().item() < 0.12


def test_clustering_gradient_goes_to_nearest_center_only():
    centers = torch.zeros(2, 5, 2, dtype=torch.float64)
    centers[0, :, 0] = 1.0
    centers[1, :, 0] = 5.0
    centers.requires_grad_(True)
    motion_clustering_loss(torch.zeros(1, 2, dtype=torch.float64), torch.tensor([1]), centers).backward()
    assert centers.grad[1].abs().sum() == 0
    assert centers.grad[0].abs().sum() > 0


def test_decoupling_weights():
    torch.manual_seed(2)
    s, ids = orthogonal_fixture(2)
    m = torch.randn(4, 8, dtype=torch.float64)
    bank = ClusterBank(8).double()
    meta = {"scenario_id": ids, "session_id": ["x"] * 4, "label": [0, 1, 2, 3]}
    sc = scenario_contrast_loss(s, ids, ["x"] * 4)
    mc = motion_clustering_loss(m, torch.tensor([0, 1, 2, 3]), bank)
    total = feature_decoupling_loss(s, m, meta, bank, LossWeights(0.1, 1.0))
    assert total.item() == pytest.approx(0.1 * sc.item() + mc.item(), abs=1e-12)
    # a zero weight skips its term, so an infeasible contrast batch is fine
    meta_bad = dict(meta, scenario_id=["a", "b", "c", "d"])
    only_mc = feature_decoupling_loss(s, m, meta_bad, bank, LossWeights(0.0, 1.0))
    assert only_mc.item() == pytest.approx(mc.item(), abs=1e-12)
    with pytest.raises(ValueError):
        LossWeights(-0.1, 1.0)


@settings(max_examples=20, deadline=None)
@given(st.permutations(list(range(6))))
def test_losses_invariant_to_batch_order(perm):
    torch.manual_seed(4)
    s = torch.randn(6, 5, dtype=torch.float64)
    ids = ["a", "a", "b", "b", "c", "c"]
    m = torch.randn(6, 5, dtype=torch.float64)
    z = torch.tensor([0, 1, 2, 3, 4, 0])
    centers = torch.randn(3, 5, 5, dtype=torch.float64)
    p = list(perm)
    a = scenario_contrast_loss(s, ids).item()
    b = scenario_contrast_loss(s[p], [ids[i] for i in p]).item()
    # the designated positive can change with order but pairs of two are symmetric
    assert a == pytest.approx(b, abs=1e-12)
    assert motion_clustering_loss(m, z, centers).item() == pytest.approx(
        motion_clustering_loss(m[p], z[p], centers).item(), abs=1e-12
    )


def _grad_check(loss_fn, tensors):
    for t in tensors:
        t.grad = None
    loss_fn().backward()
    for t in tensors:
        idx, num = fd_gradient(loss_fn, t)
        assert rel_error(t.grad.view(-1)[idx].numpy(), num) <= 1e-4


def test_gradients_match_finite_differences():
    torch.manual_seed(5)
    s = torch.randn(6, 4, dtype=torch.float64, requires_grad=True)
    ids = ["a", "a", "b", "b", "c", "c"]
    _grad_check(lambda: scenario_contrast_loss(s, ids, temperature=0.7), [s])
    m = torch.randn(5, 4, dtype=torch.float64, requires_grad=True)
    centers = torch.randn(3, 5, 4, dtype=torch.float64, requires_grad=True)
    z = torch.tensor([0, 1, 2, 3, 4])
    _grad_check(lambda: motion_clustering_loss(m, z, centers), [m, centers])
    logits = torch.randn(5, 5, dtype=torch.float64, requires_grad=True)
    _grad_check(lambda: classification_loss(logits, z), [logits])
