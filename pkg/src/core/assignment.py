"""
Assignment

One-to-one label assignment between predictions and ground truths: GIoU with
its analytic gradient, the classification + L1 + GIoU cost matrix, exact
Hungarian matching with a deterministic tie rule, and a brute-force
permutation oracle.
"""

import itertools
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import ContractViolation
from .focal_sampling import Box2D

TIE_TOLERANCE = 1e-9

#=============================================================================
# TYPES
#=============================================================================

@dataclass(frozen=True)
class MatchingWeights:
    class_weight: float = 2.0
    l1_weight: float = 5.0
    giou_weight: float = 2.0

    @classmethod
    def from_config(cls, matching):
        return cls(
            class_weight=float(matching["class_weight"]),
            l1_weight=float(matching["l1_weight"]),
            giou_weight=float(matching["giou_weight"]),
        )


@dataclass(frozen=True)
class CostMatrix:
    """Rows are predictions, columns are ground truths."""

    costs: np.ndarray

    def __post_init__(self):
        costs = np.asarray(self.costs, dtype=np.float64)
        if costs.ndim != 2:
            raise ContractViolation(f"cost matrix must be 2-D, got shape {costs.shape}")
        if not np.all(np.isfinite(costs)):
            raise ContractViolation("cost matrix has non-finite entries")
        object.__setattr__(self, "costs", costs)

    @property
    def shape(self):
        return self.costs.shape


@dataclass(frozen=True)
class Assignment:
    """row_of_col[j] is the prediction row matched to ground truth j."""

    row_of_col: tuple
    total: float

    @property
    def pairs(self):
        return [(row, col) for col, row in enumerate(self.row_of_col)]

#=============================================================================
# GIOU
#=============================================================================

def as_box(box):
    if isinstance(box, Box2D):
        return box
    return Box2D.from_array(box)


def giou_2d(a, b):
    """
    Generalized IoU of two boxes and its gradient with respect to a.

    Args:
        a, b: Box2D or (x_min, y_min, x_max, y_max)

    Returns:
        tuple: (giou, np.ndarray of d giou / d (a.x_min, a.y_min, a.x_max, a.y_max))

    Raises:
        ContractViolation: either box has zero area
    """
    a = as_box(a)
    b = as_box(b)

    inter_w = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    inter_h = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    overlapping = inter_w > 0.0 and inter_h > 0.0
    intersection = inter_w * inter_h if overlapping else 0.0
    union = a.area + b.area - intersection
    hull_w = max(a.x_max, b.x_max) - min(a.x_min, b.x_min)
    hull_h = max(a.y_max, b.y_max) - min(a.y_min, b.y_min)
    hull = hull_w * hull_h

    giou = intersection / union - (hull - union) / hull

    d_area = np.array([-a.height, -a.width, a.height, a.width])
    d_intersection = np.zeros(4)
    if overlapping:
        d_inter_w = np.array([-1.0 if a.x_min > b.x_min else 0.0, 0.0, 1.0 if a.x_max < b.x_max else 0.0, 0.0])
        d_inter_h = np.array([0.0, -1.0 if a.y_min > b.y_min else 0.0, 0.0, 1.0 if a.y_max < b.y_max else 0.0])
        d_intersection = d_inter_w * inter_h + d_inter_h * inter_w
    d_hull_w = np.array([-1.0 if a.x_min < b.x_min else 0.0, 0.0, 1.0 if a.x_max > b.x_max else 0.0, 0.0])
    d_hull_h = np.array([0.0, -1.0 if a.y_min < b.y_min else 0.0, 0.0, 1.0 if a.y_max > b.y_max else 0.0])
    d_hull = d_hull_w * hull_h + d_hull_h * hull_w
    d_union = d_area - d_intersection

    # giou = I/U - 1 + U/H
    gradient = (
        d_intersection / union
        - intersection * d_union / union ** 2
        + d_union / hull
        - union * d_hull / hull ** 2
    )
    return float(giou), gradient


def pairwise_giou(boxes_a, boxes_b):
    """GIoU for every pair, shape (len(boxes_a), len(boxes_b)). Boxes are (n, 4) xyxy arrays."""
    boxes_a = np.asarray(boxes_a, dtype=np.float64).reshape(-1, 4)
    boxes_b = np.asarray(boxes_b, dtype=np.float64).reshape(-1, 4)
    for boxes in (boxes_a, boxes_b):
        if np.any(boxes[:, 2] <= boxes[:, 0]) or np.any(boxes[:, 3] <= boxes[:, 1]):
            raise ContractViolation("degenerate box in GIoU input")
    area_a = (boxes_a[:, 2] - boxes_a[:, 0]) * (boxes_a[:, 3] - boxes_a[:, 1])
    area_b = (boxes_b[:, 2] - boxes_b[:, 0]) * (boxes_b[:, 3] - boxes_b[:, 1])

    top_left = np.maximum(boxes_a[:, None, :2], boxes_b[None, :, :2])
    bottom_right = np.minimum(boxes_a[:, None, 2:], boxes_b[None, :, 2:])
    overlap = np.clip(bottom_right - top_left, 0.0, None)
    intersection = overlap[..., 0] * overlap[..., 1]
    union = area_a[:, None] + area_b[None, :] - intersection

    hull_top_left = np.minimum(boxes_a[:, None, :2], boxes_b[None, :, :2])
    hull_bottom_right = np.maximum(boxes_a[:, None, 2:], boxes_b[None, :, 2:])
    hull_size = hull_bottom_right - hull_top_left
    hull = hull_size[..., 0] * hull_size[..., 1]
    return intersection / union - (hull - union) / hull


def pairwise_iou(boxes_a, boxes_b):
    boxes_a = np.asarray(boxes_a, dtype=np.float64).reshape(-1, 4)
    boxes_b = np.asarray(boxes_b, dtype=np.float64).reshape(-1, 4)
    area_a = (boxes_a[:, 2] - boxes_a[:, 0]) * (boxes_a[:, 3] - boxes_a[:, 1])
    area_b = (boxes_b[:, 2] - boxes_b[:, 0]) * (boxes_b[:, 3] - boxes_b[:, 1])
    top_left = np.maximum(boxes_a[:, None, :2], boxes_b[None, :, :2])
    bottom_right = np.minimum(boxes_a[:, None, 2:], boxes_b[None, :, 2:])
    overlap = np.clip(bottom_right - top_left, 0.0, None)
    intersection = overlap[..., 0] * overlap[..., 1]
    return intersection / (area_a[:, None] + area_b[None, :] - intersection)

#=============================================================================
# COSTS
#=============================================================================

def xyxy_to_normalized_cxcywh(boxes, image_width, image_height):
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scale = np.array([image_width, image_height, image_width, image_height], dtype=np.float64)
    center = 0.5 * (boxes[:, :2] + boxes[:, 2:])
    size = boxes[:, 2:] - boxes[:, :2]
    return np.concatenate([center, size], axis=1) / scale


def build_cost_matrix(pred_boxes, pred_scores, gt_boxes, gt_labels, image_size, weights):
    """
    cost(i, j) = -w_cls * score_i[label_j] + w_l1 * |box_i - box_j|_1 + w_giou * (1 - GIoU(i, j))

    The L1 term compares (cx, cy, w, h) normalized by the image size.

    Args:
        pred_boxes: (n, 4) xyxy pixels
        pred_scores: (n, n_classes) class probabilities
        gt_boxes: (m, 4) xyxy pixels
        gt_labels: (m,) class ids
        image_size: (width, height)
        weights: MatchingWeights

    Returns:
        CostMatrix
    """
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    gt_labels = np.asarray(gt_labels, dtype=np.int64).reshape(-1)
    pred_scores = np.asarray(pred_scores, dtype=np.float64)
    if gt_boxes.shape[0] == 0:
        raise ContractViolation("cost matrix needs at least one ground truth")
    if pred_scores.ndim != 2:
        raise ContractViolation(f"class scores must be 2-D, got shape {pred_scores.shape}")
    class_count = pred_scores.shape[1]
    if np.any((gt_labels < 0) | (gt_labels >= class_count)):
        raise ContractViolation(f"ground-truth label outside [0, {class_count})")

    width, height = image_size
    pred_cxcywh = xyxy_to_normalized_cxcywh(pred_boxes, width, height)
    gt_cxcywh = xyxy_to_normalized_cxcywh(gt_boxes, width, height)
    cost_class = -pred_scores[:, gt_labels]
    cost_l1 = np.abs(pred_cxcywh[:, None, :] - gt_cxcywh[None, :, :]).sum(axis=2)
    cost_giou = 1.0 - pairwise_giou(pred_boxes, gt_boxes)
    costs = weights.class_weight * cost_class + weights.l1_weight * cost_l1 + weights.giou_weight * cost_giou
    return CostMatrix(costs)


def build_center_cost_matrix(pred_centers, pred_probabilities, gt_centers, gt_labels, roi_extent, weights):
    """Class probability plus ROI-normalized center L1, used to match 3D predictions to truth."""
    gt_labels = np.asarray(gt_labels, dtype=np.int64).reshape(-1)
    pred_probabilities = np.asarray(pred_probabilities, dtype=np.float64)
    if gt_labels.size == 0:
        raise ContractViolation("cost matrix needs at least one ground truth")
    if np.any((gt_labels < 0) | (gt_labels >= pred_probabilities.shape[1])):
        raise ContractViolation("ground-truth label outside the class range")
    extent = np.asarray(roi_extent, dtype=np.float64)
    difference = (np.asarray(pred_centers)[:, None, :] - np.asarray(gt_centers)[None, :, :]) / extent
    cost_l1 = np.abs(difference).sum(axis=2)
    costs = -weights.class_weight * pred_probabilities[:, gt_labels] + weights.l1_weight * cost_l1
    return CostMatrix(costs)

#=============================================================================
# MATCHING
#=============================================================================

def assignment_total(costs, row_of_col):
    return float(costs[np.asarray(row_of_col, dtype=np.int64), np.arange(len(row_of_col))].sum())


def optimal_total(costs):
    if costs.shape[1] == 0:
        return 0.0
    rows, cols = linear_sum_assignment(costs)
    return float(costs[rows, cols].sum())


def match_hungarian(cost_matrix):
    """
    Minimum-cost one-to-one assignment of every column to a distinct row.

    Among optimal assignments the lexicographically smallest row_of_col is
    returned: columns are fixed in order, each to the lowest row that still
    admits an optimal completion.

    Raises:
        ContractViolation: more ground truths than predictions
    """
    if not isinstance(cost_matrix, CostMatrix):
        cost_matrix = CostMatrix(cost_matrix)
    costs = cost_matrix.costs
    row_count, col_count = costs.shape
    if col_count > row_count:
        raise ContractViolation(f"cannot match {col_count} ground truths to {row_count} predictions")
    if col_count == 0:
        return Assignment(row_of_col=(), total=0.0)

    best = optimal_total(costs)
    tolerance = TIE_TOLERANCE * max(1.0, abs(best))
    free_rows = list(range(row_count))
    row_of_col = []
    fixed_cost = 0.0
    for col in range(col_count):
        for row in free_rows:
            remaining_rows = [r for r in free_rows if r != row]
            remainder = optimal_total(costs[np.ix_(remaining_rows, range(col + 1, col_count))])
            if fixed_cost + costs[row, col] + remainder <= best + tolerance:
                row_of_col.append(row)
                fixed_cost += costs[row, col]
                free_rows = remaining_rows
                break
        else:
            raise ContractViolation(f"no optimal completion found for column {col}")
    return Assignment(row_of_col=tuple(row_of_col), total=assignment_total(costs, row_of_col))


def brute_force_assignment(cost_matrix):
    """Exhaustive search over all injective column-to-row maps; first minimum in lexicographic order."""
    if not isinstance(cost_matrix, CostMatrix):
        cost_matrix = CostMatrix(cost_matrix)
    costs = cost_matrix.costs
    row_count, col_count = costs.shape
    if col_count > row_count:
        raise ContractViolation(f"cannot match {col_count} ground truths to {row_count} predictions")
    if col_count == 0:
        return Assignment(row_of_col=(), total=0.0)
    candidates = np.array(list(itertools.permutations(range(row_count), col_count)))
    totals = costs[candidates, np.arange(col_count)].sum(axis=1)
    winner = candidates[int(np.argmin(totals))]
    return Assignment(row_of_col=tuple(int(r) for r in winner), total=assignment_total(costs, winner))
