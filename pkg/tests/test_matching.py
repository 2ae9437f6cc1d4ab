import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from deyo.geometry import BoundingBox, giou
from deyo.matching import MatchWeights, hungarian, match_cost
from oracles import brute_force_assignment


def test_single_entry():
    a = hungarian([[5.0]])
    assert a.pairs == [(0, 0)] and a.total(np.array([[5.0]])) == 5.0


def test_two_by_two():
    cost = np.array([[1.0, 2.0], [2.0, 1.0]])
    a = hungarian(cost)
    assert a.pairs == [(0, 0), (1, 1)] and a.total(cost) == 2.0


def test_three_by_three():
    cost = np.array([[4.0, 1, 3], [2, 0, 5], [3, 2, 2]])
    a = hungarian(cost)
    assert a.pairs == [(0, 1), (1, 0), (2, 2)] and a.total(cost) == 5.0


def test_empty_matrices():
    assert len(hungarian(np.zeros((0, 3)))) == 0
    assert len(hungarian(np.zeros((4, 0)))) == 0


def test_rejects_non_finite():
    with pytest.raises(ValueError):
        hungarian([[1.0, np.nan]])
    with pytest.raises(ValueError):
        hungarian([[np.inf]])


def test_constant_matrix_tie_break_is_lowest_indices():
    a = hungarian(np.full((3, 5), 2.0))
    assert a.pairs == [(0, 0), (1, 1), (2, 2)]
    b = hungarian(np.full((4, 2), 2.0))
    assert b.pairs == [(0, 0), (1, 1)]


def test_deterministic():
    rng = np.random.default_rng(3)
    cost = rng.integers(0, 3, (6, 6)).astype(float)
    assert hungarian(cost).pairs == hungarian(cost.copy()).pairs


def test_brute_force_200_matrices():
    rng = np.random.default_rng(0)
    for _ in range(200):
        n, m = rng.integers(1, 8, 2)
        cost = rng.normal(size=(n, m))
        a = hungarian(cost)
        assert len(a) == min(n, m)
        assert a.total(cost) == pytest.approx(brute_force_assignment(cost), abs=1e-12)


matrices = st.integers(1, 6).flatmap(lambda n: st.integers(1, 6).flatmap(
    lambda m: arrays(np.float64, (n, m), elements=st.floats(-100, 100, allow_nan=False))))


@given(matrices)
def test_assignment_is_valid_and_optimal(cost):
    a = hungarian(cost)
    assert len(set(a.pred_idx.tolist())) == len(a) == len(set(a.gt_idx.tolist())) == min(cost.shape)
    assert a.total(cost) == pytest.approx(brute_force_assignment(cost), abs=1e-9)


@given(matrices, st.floats(-50, 50))
def test_constant_shift(cost, c):
    a, b = hungarian(cost), hungarian(cost + c)
    assert b.total(cost + c) == pytest.approx(a.total(cost) + c * len(a), abs=1e-7)
    assert b.total(cost) == pytest.approx(a.total(cost), abs=1e-7)


def _scalar_cost(logits, box, label, gt_box, w=MatchWeights()):
    p = 1 / (1 + math.exp(-logits[label]))
    pos = 0.25 * (1 - p) ** 2 * -math.log(p + 1e-8)
    neg = 0.75 * p ** 2 * -math.log(1 - p + 1e-8)
    l1 = sum(abs(a - b) for a, b in zip(box, gt_box))
    g = giou(BoundingBox(*box), BoundingBox(*gt_box))
    return w.cls * (pos - neg) + w.l1 * l1 + w.giou * (1 - g)


def test_match_cost_against_scalar_recomputation():
    logits = torch.tensor([[2.0, -1.0, 0.3], [-0.5, 1.5, -2.0]], dtype=torch.float64)
    boxes = torch.tensor([[0.3, 0.4, 0.2, 0.3], [0.6, 0.5, 0.3, 0.2]], dtype=torch.float64)
    labels = torch.tensor([0, 1])
    gts = torch.tensor([[0.32, 0.38, 0.22, 0.28], [0.55, 0.52, 0.25, 0.25]], dtype=torch.float64)
    cost = match_cost(logits, boxes, labels, gts)
    for i in range(2):
        for j in range(2):
            expect = _scalar_cost(logits[i].tolist(), boxes[i].tolist(), int(labels[j]), gts[j].tolist())
            assert cost[i, j].item() == pytest.approx(expect, abs=1e-9)


def test_match_cost_empty_gt_and_mismatch():
    logits = torch.zeros(4, 3)
    boxes = torch.full((4, 4), 0.5)
    assert match_cost(logits, boxes, torch.zeros(0, dtype=torch.long), torch.zeros(0, 4)).shape == (4, 0)
    with pytest.raises(ValueError):
        match_cost(torch.zeros(3, 3), boxes, torch.tensor([0]), torch.full((1, 4), 0.5))


def test_perfect_prediction_is_column_minimum():
    gt = torch.tensor([[0.5, 0.5, 0.2, 0.2]])
    logits = torch.tensor([[-8.0, -8.0], [12.0, -8.0], [-8.0, 12.0]])
    boxes = torch.tensor([[0.2, 0.2, 0.1, 0.1], [0.5, 0.5, 0.2, 0.2], [0.5, 0.5, 0.2, 0.2]])
    cost = match_cost(logits, boxes, torch.tensor([0]), gt)
    assert int(cost[:, 0].argmin()) == 1
    assert hungarian(cost).pairs == [(1, 0)]
