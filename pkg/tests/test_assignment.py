#!/usr/bin/env python3
"""
Test Assignment

Tests GIoU and its gradient, cost matrix construction and Hungarian matching
against the brute-force permutation oracle.
"""

import math
import sys
import os

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

# Add src to path so we can import our modules
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))

from core.errors import ContractViolation
from core.numeric_kernel import finite_diff_grad, relative_error
from core.assignment import (
    CostMatrix,
    MatchingWeights,
    brute_force_assignment,
    build_center_cost_matrix,
    build_cost_matrix,
    giou_2d,
    match_hungarian,
    pairwise_giou,
    pairwise_iou,
)

def cost_matrices(integer):
    """Hypothesis strategy for (rows >= cols) cost matrices."""
    elements = st.integers(0, 4).map(float) if integer else st.floats(-10.0, 10.0, allow_nan=False)

    @st.composite
    def build(draw):
        rows = draw(st.integers(1, 5))
        cols = draw(st.integers(0, rows))
        return draw(arrays(np.float64, (rows, cols), elements=elements))
    return build()

def test_giou_values():
    """Test GIoU closed forms."""
    print("Testing GIoU values...")

    same, _ = giou_2d((0.0, 0.0, 4.0, 2.0), (0.0, 0.0, 4.0, 2.0))
    assert math.isclose(same, 1.0), f"Identical boxes have GIoU 1, got {same}"

    partial, _ = giou_2d((0.0, 0.0, 2.0, 2.0), (1.0, 1.0, 3.0, 3.0))
    assert math.isclose(partial, 1.0 / 7.0 - 2.0 / 9.0), f"Expected 1/7 - 2/9, got {partial}"

    apart, _ = giou_2d((0.0, 0.0, 1.0, 1.0), (3.0, 0.0, 4.0, 1.0))
    assert math.isclose(apart, -0.5), f"Disjoint unit boxes 2 apart have GIoU -0.5, got {apart}"

    boxes_a = np.array([[0.0, 0.0, 2.0, 2.0], [0.5, 0.5, 4.0, 3.0]])
    boxes_b = np.array([[1.0, 1.0, 3.0, 3.0], [0.0, 0.0, 2.0, 2.0], [5.0, 5.0, 6.0, 7.0]])
    matrix = pairwise_giou(boxes_a, boxes_b)
    for i, a in enumerate(boxes_a):
        for j, b in enumerate(boxes_b):
            assert math.isclose(matrix[i, j], giou_2d(a, b)[0]), f"pairwise_giou disagrees at ({i}, {j})"
    assert math.isclose(pairwise_iou(boxes_a[:1], boxes_b[:1])[0, 0], 1.0 / 7.0), "IoU of the example pair is 1/7"

    with pytest.raises(ContractViolation):
        giou_2d((0.0, 0.0, 0.0, 1.0), (0.0, 0.0, 1.0, 1.0))
    with pytest.raises(ContractViolation):
        pairwise_giou([[0.0, 0.0, 1.0, 0.0]], [[0.0, 0.0, 1.0, 1.0]])

    print("✅ GIoU values verified")

def test_giou_gradient():
    """Test the analytic GIoU gradient against finite differences."""
    print("Testing GIoU gradient...")

    cases = [
        ((0.0, 0.0, 2.0, 2.0), (1.0, 1.0, 3.0, 3.0)),
        ((0.2, 0.4, 3.1, 2.7), (1.3, -0.5, 2.2, 4.4)),
        ((0.0, 0.0, 1.0, 1.0), (3.0, 0.5, 4.0, 2.0)),
        ((1.5, 1.5, 2.5, 2.5), (0.0, 0.0, 4.0, 4.0)),
    ]
    for a, b in cases:
        _, analytic = giou_2d(a, b)
        numeric = finite_diff_grad(lambda x: giou_2d(x, b)[0], a)
        assert relative_error(analytic, numeric) < 1e-6, f"Gradient mismatch for {a} vs {b}: {analytic} vs {numeric}"

    print("✅ GIoU gradient verified")

def random_box_pair(rng):
    """Two boxes whose edges stay well apart, so GIoU is smooth around them."""
    while True:
        a = rng.uniform(-2.0, 2.0, size=2)
        b = rng.uniform(-2.0, 2.0, size=2)
        a = np.concatenate([a, a + rng.uniform(0.5, 3.0, size=2)])
        b = np.concatenate([b, b + rng.uniform(0.5, 3.0, size=2)])
        x_edges = np.array([a[0], a[2]])[:, None] - np.array([b[0], b[2]])[None, :]
        y_edges = np.array([a[1], a[3]])[:, None] - np.array([b[1], b[3]])[None, :]
        if np.min(np.abs(x_edges)) > 1e-3 and np.min(np.abs(y_edges)) > 1e-3:
            return a, b

def test_giou_gradient_over_seeds():
    """Test the analytic GIoU gradient on 100 seeded box pairs."""
    print("Testing GIoU gradient over 100 seeds...")

    overlapping = 0
    for seed in range(100):
        a, b = random_box_pair(np.random.default_rng(seed))
        value, analytic = giou_2d(a, b)
        numeric = finite_diff_grad(lambda x: giou_2d(x, b)[0], a)
        assert relative_error(analytic, numeric) < 1e-6, f"Seed {seed}: gradient mismatch for {a} vs {b}"
        overlapping += pairwise_iou([a], [b])[0, 0] > 0.0

    assert 0 < overlapping < 100, f"Seeds should cover both overlapping and disjoint pairs, got {overlapping} overlapping"

    print("✅ GIoU gradient verified on 100 seeds")

def test_giou_symmetry():
    """GIoU does not depend on argument order."""
    print("Testing GIoU symmetry...")

    for seed in range(100):
        a, b = random_box_pair(np.random.default_rng(seed + 1000))
        forward, _ = giou_2d(a, b)
        backward, _ = giou_2d(b, a)
        assert math.isclose(forward, backward, abs_tol=1e-12), f"Seed {seed}: GIoU({a}, {b}) != GIoU({b}, {a})"
        assert -1.0 <= forward <= 1.0, f"Seed {seed}: GIoU must lie in [-1, 1], got {forward}"

    rng = np.random.default_rng(7)
    boxes_a = np.array([np.concatenate([p, p + rng.uniform(0.5, 3.0, size=2)]) for p in rng.uniform(-2.0, 2.0, size=(5, 2))])
    boxes_b = np.array([np.concatenate([p, p + rng.uniform(0.5, 3.0, size=2)]) for p in rng.uniform(-2.0, 2.0, size=(4, 2))])
    assert np.allclose(pairwise_giou(boxes_a, boxes_b), pairwise_giou(boxes_b, boxes_a).T, atol=1e-12), \
        "Pairwise GIoU is symmetric under transposition"

    print("✅ GIoU symmetry verified")

def test_hungarian_against_brute_force_seeded():
    """Test 200 seeded instances up to 7x7 against exhaustive search."""
    print("Testing Hungarian matching on 200 seeded instances...")

    for seed in range(200):
        rng = np.random.default_rng(seed)
        rows = int(rng.integers(1, 8))
        cols = int(rng.integers(0, rows + 1))
        integer = seed % 2 == 0
        costs = rng.integers(0, 5, size=(rows, cols)).astype(float) if integer else rng.uniform(-10.0, 10.0, size=(rows, cols))
        fast = match_hungarian(costs)
        slow = brute_force_assignment(costs)
        assert len(set(fast.row_of_col)) == cols, f"Seed {seed}: each ground truth needs its own prediction"
        if integer:
            assert fast.row_of_col == slow.row_of_col, f"Seed {seed}: {fast.row_of_col} != {slow.row_of_col}"
            assert fast.total == slow.total, f"Seed {seed}: totals must agree exactly on integer costs"
        else:
            assert abs(fast.total - slow.total) <= 1e-8 * max(1.0, abs(slow.total)), \
                f"Seed {seed}: Hungarian total {fast.total} differs from optimum {slow.total}"

    print("✅ Hungarian matching agrees with brute force on 200 instances")

def test_column_shift_invariance():
    """Adding a constant to a column shifts every complete assignment equally, so the matching stays."""
    print("Testing column shift invariance...")

    for seed in range(50):
        rng = np.random.default_rng(seed + 500)
        rows = int(rng.integers(1, 7))
        cols = int(rng.integers(1, rows + 1))
        costs = rng.integers(0, 5, size=(rows, cols)).astype(float)
        shifts = rng.integers(-20, 21, size=cols).astype(float)
        base = match_hungarian(costs)
        shifted = match_hungarian(costs + shifts[None, :])
        assert shifted.row_of_col == base.row_of_col, f"Seed {seed}: column shifts changed the matching"
        assert shifted.total == base.total + shifts.sum(), f"Seed {seed}: total must move by the summed shifts"

    print("✅ Column shift invariance verified")

def test_cost_matrix():
    """Test the matching cost."""
    print("Testing cost matrix...")

    unit = MatchingWeights(class_weight=1.0, l1_weight=1.0, giou_weight=1.0)
    box = [[10.0, 10.0, 30.0, 40.0]]
    perfect = build_cost_matrix(box, [[0.0, 1.0, 0.0]], box, [1], (128, 64), unit)
    assert math.isclose(perfect.costs[0, 0], -1.0), f"Perfect prediction costs -1, got {perfect.costs[0, 0]}"

    blind = build_cost_matrix(box, [[0.0, 0.0, 0.0]], box, [1], (128, 64), unit)
    assert abs(blind.costs[0, 0]) < 1e-12, f"Zero scores on identical boxes cost 0, got {blind.costs[0, 0]}"

    with pytest.raises(ContractViolation):
        build_cost_matrix(box, [[0.5, 0.5]], box, [2], (128, 64), unit)
    with pytest.raises(ContractViolation):
        CostMatrix([[0.0, np.inf]])

    centers = build_center_cost_matrix([[0.0, 0.0, 0.0], [10.0, 0.0, 0.0]], [[1.0, 0.0], [0.0, 1.0]],
                                       [[10.0, 0.0, 0.0]], [1], (20.0, 20.0, 20.0), MatchingWeights())
    assert centers.costs[1, 0] < centers.costs[0, 0], "The co-located, correctly labeled prediction is cheaper"
    assert math.isclose(centers.costs[1, 0], -2.0), f"Exact center with probability 1 costs -w_cls, got {centers.costs[1, 0]}"

    weights = MatchingWeights.from_config({"class_weight": 2, "l1_weight": 5, "giou_weight": 2})
    assert weights == MatchingWeights(), "Config weights should match the defaults"

    print("✅ Cost matrix verified")

def test_match_hungarian():
    """Test matching on hand-checked matrices."""
    print("Testing Hungarian matching...")

    diagonal = np.array([[0.0, 5.0, 5.0], [5.0, 0.0, 5.0], [5.0, 5.0, 0.0]])
    assert match_hungarian(diagonal).row_of_col == (0, 1, 2), "Zero diagonal gives the identity"

    result = match_hungarian(CostMatrix([[1.0, 2.0], [2.0, 4.0]]))
    assert set(result.pairs) == {(0, 1), (1, 0)}, f"Expected {{(0,1),(1,0)}}, got {result.pairs}"
    assert result.total == 4.0, f"Optimal total is 4, got {result.total}"

    ties = match_hungarian(np.ones((4, 3)))
    assert ties.row_of_col == (0, 1, 2), f"Ties go to the lowest rows in column order, got {ties.row_of_col}"

    tall = match_hungarian([[3.0], [1.0], [1.0]])
    assert tall.row_of_col == (1,), "Equal-cost rows resolve to the lower index"

    assert match_hungarian(np.zeros((3, 0))).row_of_col == (), "No ground truths gives an empty assignment"

    with pytest.raises(ContractViolation):
        match_hungarian(np.zeros((2, 3)))

    print("✅ Hungarian matching verified")

@settings(max_examples=80, deadline=None)
@given(cost_matrices(integer=True))
def test_hungarian_matches_brute_force_on_ties(costs):
    """Integer costs have many ties; both solvers pick the same assignment."""
    fast = match_hungarian(costs)
    slow = brute_force_assignment(costs)
    assert fast.row_of_col == slow.row_of_col, f"{fast.row_of_col} != {slow.row_of_col} for\n{costs}"
    assert fast.total == slow.total, "Totals must agree exactly on integer costs"

@settings(max_examples=80, deadline=None)
@given(cost_matrices(integer=False))
def test_hungarian_total_is_optimal(costs):
    """Real-valued costs reach the brute-force optimum."""
    fast = match_hungarian(costs)
    slow = brute_force_assignment(costs)
    assert abs(fast.total - slow.total) <= 1e-8 * max(1.0, abs(slow.total)), \
        f"Hungarian total {fast.total} differs from optimum {slow.total}"
    assert len(set(fast.row_of_col)) == costs.shape[1], "Each ground truth needs its own prediction"

def main():
    """Run all assignment tests."""
    print("🧪 Testing Assignment")
    print("=====================")

    try:
        test_giou_values()
        test_giou_gradient()
        test_giou_gradient_over_seeds()
        test_giou_symmetry()
        test_cost_matrix()
        test_match_hungarian()
        test_hungarian_matches_brute_force_on_ties()
        test_hungarian_total_is_optimal()
        test_hungarian_against_brute_force_seeded()
        test_column_shift_invariance()

        print("\n🎉 All assignment tests passed!")
        return 0

    except AssertionError as e:
        print(f"\n❌ Test failed: {e}")
        return 1
    except Exception as e:
        print(f"\n💥 Unexpected error: {e}")
        return 1

if __name__ == "__main__":
    exit(main())
