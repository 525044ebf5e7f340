"""
Focal Sampling

Instance-guided token targets (FCOS ltrb, Gaussian centerness heatmap, 2.5D
center offsets), the auxiliary losses with analytic gradients, sampling
priority, top-ratio token selection and the weighted auxiliary total.
"""

import logging
import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation, ConfigurationError

logger = logging.getLogger(__name__)

PROBABILITY_CLAMP = 1e-6

DEFAULT_DELTA_COEFFICIENT = 0.15
DEFAULT_DELTA_FLOOR = 0.25

BACKGROUND = -1

POOLING_MODES = ("global", "per_camera")
SAMPLERS = ("focal", "uniform")

#=============================================================================
# TYPES
#=============================================================================

@dataclass(frozen=True)
class Box2D:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ContractViolation(
                f"degenerate box ({self.x_min}, {self.y_min}, {self.x_max}, {self.y_max})"
            )

    @classmethod
    def from_array(cls, values):
        x_min, y_min, x_max, y_max = (float(v) for v in values)
        return cls(x_min, y_min, x_max, y_max)

    @property
    def width(self):
        return self.x_max - self.x_min

    @property
    def height(self):
        return self.y_max - self.y_min

    @property
    def area(self):
        return self.width * self.height

    @property
    def center(self):
        return (0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))

    def as_array(self):
        return np.array([self.x_min, self.y_min, self.x_max, self.y_max])

    def contains(self, u, v):
        return self.x_min <= u <= self.x_max and self.y_min <= v <= self.y_max


@dataclass
class TokenTargets:
    """
    Per-token supervision for one camera, flattened row-major.

    class_ids is BACKGROUND (-1) for tokens outside every projected box.
    assigned_object and matched_object index into the camera's visible object list.
    matched_ltrb is the regression target of positive tokens toward their matched
    box; it may be negative when a matched token's center lies outside that box.
    """

    camera_index: int
    class_ids: np.ndarray
    assigned_object: np.ndarray
    ltrb: np.ndarray
    heatmap: np.ndarray
    offsets: np.ndarray
    center_mask: np.ndarray
    iou: np.ndarray
    positive_mask: np.ndarray
    matched_object: np.ndarray
    matched_ltrb: np.ndarray

    @property
    def token_count(self):
        return self.class_ids.shape[0]

    @property
    def foreground_mask(self):
        return self.class_ids != BACKGROUND

    @property
    def positive_count(self):
        return int(self.positive_mask.sum())


@dataclass
class TokenPredictions:
    """Per-token outputs of the sampling heads for one camera."""

    quality: np.ndarray
    centerness: np.ndarray
    ltrb: np.ndarray
    offsets: np.ndarray


@dataclass
class QualityMaps:
    """Score maps across all cameras, flattened as camera * tokens_per_camera + token."""

    quality: np.ndarray
    centerness: np.ndarray
    priority: np.ndarray
    alpha: float
    ratio: float
    sampled: np.ndarray

    @property
    def sampled_indices(self):
        return np.flatnonzero(self.sampled)


@dataclass(frozen=True)
class AuxiliaryLossComponents:
    quality: float
    center_offset: float
    giou: float
    ltrb: float
    centerness: float

    def as_tuple(self):
        return (self.quality, self.center_offset, self.giou, self.ltrb, self.centerness)


@dataclass(frozen=True)
class LossWeights:
    quality: float = 2.0
    center_offset: float = 10.0
    giou: float = 5.0
    ltrb: float = 2.0
    centerness: float = 1.0

    @classmethod
    def from_config(cls, weights):
        return cls(**{key: float(value) for key, value in weights.items()})

    def as_tuple(self):
        return (self.quality, self.center_offset, self.giou, self.ltrb, self.centerness)

#=============================================================================
# TARGETS
#=============================================================================

def ltrb_targets(box, u, v, normalizer):
    """
    Normalized distances from a token center to the four box sides.

    Returns:
        np.ndarray: (l, t, r, b) / normalizer
    """
    if not normalizer > 0.0:
        raise ContractViolation(f"ltrb normalizer must be positive, got {normalizer}")
    return np.array([u - box.x_min, v - box.y_min, box.x_max - u, box.y_max - v]) / normalizer


def ltrb_to_box(u, v, ltrb, normalizer):
    """Inverse of ltrb_targets."""
    left, top, right, bottom = np.asarray(ltrb, dtype=np.float64) * normalizer
    return Box2D(u - left, v - top, u + right, v + bottom)


def image_diagonal(width, height):
    return math.hypot(width, height)


def fcos_assign(boxes, pixel_centers):
    """
    Assign each token to the smallest box containing its pixel center.

    Args:
        boxes: list of Box2D
        pixel_centers: (n, 2) token centers in pixels

    Returns:
        np.ndarray: box index per token, BACKGROUND where no box contains it
    """
    assigned = np.full(len(pixel_centers), BACKGROUND, dtype=np.int64)
    best_area = np.full(len(pixel_centers), np.inf)
    for index, box in enumerate(boxes):
        inside = (
            (pixel_centers[:, 0] >= box.x_min) & (pixel_centers[:, 0] <= box.x_max)
            & (pixel_centers[:, 1] >= box.y_min) & (pixel_centers[:, 1] <= box.y_max)
        )
        better = inside & (box.area < best_area)
        assigned[better] = index
        best_area[better] = box.area
    return assigned


def heatmap_delta(box, center_u, center_v, stride,
                  coefficient=DEFAULT_DELTA_COEFFICIENT, floor=DEFAULT_DELTA_FLOOR):
    """Size-adaptive spread: (coefficient * shortest center-to-side distance in tokens)^2, at least floor."""
    sides = np.array([
        center_u - box.x_min, center_v - box.y_min, box.x_max - center_u, box.y_max - center_v,
    ]) / stride
    shortest = max(float(sides.min()), 0.0)
    return max((coefficient * shortest) ** 2, floor)


def gaussian_heatmap(centers, grid_width, grid_height, stride,
                     coefficient=DEFAULT_DELTA_COEFFICIENT, floor=DEFAULT_DELTA_FLOOR):
    """
    Centerness heatmap over one token grid.

    Each center peaks at the token containing it; objects combine by max.

    Args:
        centers: iterable of (center_u, center_v, Box2D) in pixels
        grid_width, grid_height: token grid size
        stride: pixels per token

    Returns:
        tuple: (heatmap of shape (grid_width * grid_height,), skipped center count)
    """
    rows, cols = np.divmod(np.arange(grid_width * grid_height), grid_width)
    heatmap = np.zeros(grid_width * grid_height)
    skipped = 0
    for center_u, center_v, box in centers:
        peak_col = math.floor(center_u / stride)
        peak_row = math.floor(center_v / stride)
        if not (0 <= peak_col < grid_width and 0 <= peak_row < grid_height):
            skipped += 1
            continue
        delta = heatmap_delta(box, center_u, center_v, stride, coefficient, floor)
        squared_distance = (cols - peak_col) ** 2 + (rows - peak_row) ** 2
        np.maximum(heatmap, np.exp(-squared_distance / (2.0 * delta)), out=heatmap)
    if skipped:
        logger.warning("Skipped %d heatmap centers outside the %dx%d token grid", skipped, grid_width, grid_height)
    return heatmap, skipped


def center_offset_targets(center_u, center_v, stride, grid_width, grid_height):
    """
    Token holding a 2.5D center and the center's fractional position inside it.

    Returns:
        tuple: (col, row, (du, dv)) with du, dv in [0, 1), or None when the center is off the grid
    """
    col = math.floor(center_u / stride)
    row = math.floor(center_v / stride)
    if not (0 <= col < grid_width and 0 <= row < grid_height):
        return None
    du = center_u / stride - col
    dv = center_v / stride - row
    return col, row, (min(du, math.nextafter(1.0, 0.0)), min(dv, math.nextafter(1.0, 0.0)))

#=============================================================================
# LOSSES
#=============================================================================

def clamp_probability(values, clamp=PROBABILITY_CLAMP):
    values = np.asarray(values, dtype=np.float64)
    clamped = np.clip(values, clamp, 1.0 - clamp)
    return clamped, (values >= clamp) & (values <= 1.0 - clamp)


def quality_focal_loss(quality, target, beta=2.0, clamp=PROBABILITY_CLAMP):
    """
    IoU-aware quality focal loss, per token, with its gradient.

    L = -|y - Q|^beta * ((1 - y) log(1 - Q) + y log Q)

    Args:
        quality: predicted Q, clamped to [clamp, 1 - clamp]
        target: IoU target y in [0, 1]
        beta: modulating exponent

    Returns:
        tuple: (per-token loss, dL/dQ); the gradient is zero where the clamp is active
    """
    if beta < 0.0:
        raise ContractViolation(f"beta must be non-negative, got {beta}")
    q, active = clamp_probability(quality, clamp)
    y = np.asarray(target, dtype=np.float64)
    if np.any((y < 0.0) | (y > 1.0)):
        raise ContractViolation("quality targets must lie in [0, 1]")
    gap = q - y
    magnitude = np.abs(gap)
    with np.errstate(divide="ignore", invalid="ignore"):
        modulator = magnitude ** beta
        if beta == 0.0:
            modulator_grad = np.zeros_like(q)
        else:
            modulator_grad = np.where(magnitude > 0.0, beta * magnitude ** (beta - 1.0) * np.sign(gap), 0.0)
    log_likelihood = (1.0 - y) * np.log1p(-q) + y * np.log(q)
    log_likelihood_grad = -(1.0 - y) / (1.0 - q) + y / q
    loss = -modulator * log_likelihood
    gradient = -(modulator_grad * log_likelihood + modulator * log_likelihood_grad)
    return loss, np.where(active, gradient, 0.0)


def centerness_focal_loss(centerness, heatmap, alpha=2.0, beta=4.0, clamp=PROBABILITY_CLAMP):
    """
    Penalty-reduced focal loss on the centerness map, averaged over tokens.

    Peak tokens (H == 1) use -(1 - C)^alpha log C; the rest use
    -(1 - H)^beta C^alpha log(1 - C).

    Returns:
        tuple: (mean loss, gradient w.r.t. C)
    """
    c, active = clamp_probability(centerness, clamp)
    h = np.asarray(heatmap, dtype=np.float64)
    if h.shape != c.shape:
        raise ContractViolation(f"heatmap shape {h.shape} does not match centerness {c.shape}")
    if c.size == 0:
        raise ContractViolation("centerness loss needs at least one token")
    peak = h == 1.0
    penalty = (1.0 - h) ** beta

    peak_loss = -((1.0 - c) ** alpha) * np.log(c)
    peak_grad = alpha * (1.0 - c) ** (alpha - 1.0) * np.log(c) - (1.0 - c) ** alpha / c
    rest_loss = -penalty * c ** alpha * np.log1p(-c)
    rest_grad = -penalty * (alpha * c ** (alpha - 1.0) * np.log1p(-c) - c ** alpha / (1.0 - c))

    loss = np.where(peak, peak_loss, rest_loss)
    gradient = np.where(peak, peak_grad, rest_grad) / c.size
    return float(loss.mean()), np.where(active, gradient, 0.0)


def l1_loss(prediction, target):
    """Summed absolute error and its (sub)gradient sign(prediction - target)."""
    difference = np.asarray(prediction, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    return float(np.abs(difference).sum()), np.sign(difference)

#=============================================================================
# PRIORITY AND SELECTION
#=============================================================================

def sampling_priority(quality, centerness, alpha):
    """P = Q^alpha * C^(1 - alpha)."""
    if not 0.0 <= alpha <= 1.0:
        raise ContractViolation(f"alpha must be in [0, 1], got {alpha}")
    q = np.asarray(quality, dtype=np.float64)
    c = np.asarray(centerness, dtype=np.float64)
    if np.any((q <= 0.0) | (q > 1.0)) or np.any((c <= 0.0) | (c > 1.0)):
        raise ContractViolation("priority inputs must lie in (0, 1]")
    return q ** alpha * c ** (1.0 - alpha)


def sampled_token_count(token_count, ratio):
    """ceil(ratio * token_count), rounded first so 0.25 * 192 stays 48."""
    if not 0.0 < ratio <= 1.0:
        raise ContractViolation(f"sampling ratio must be in (0, 1], got {ratio}")
    return int(math.ceil(round(ratio * token_count, 9)))


def select_top_ratio(priority, ratio):
    """
    Indices of the ceil(ratio * N) highest-priority tokens, ascending.

    Ties go to the lower flat index, so the set at a smaller ratio is always
    a subset of the set at a larger one.
    """
    priority = np.asarray(priority, dtype=np.float64).reshape(-1)
    if priority.size == 0:
        raise ContractViolation("cannot select from an empty token set")
    keep = sampled_token_count(priority.size, ratio)
    order = np.argsort(-priority, kind="stable")
    return np.sort(order[:keep])


def select_top_ratio_per_camera(priority, ratio, tokens_per_camera):
    """Top-ratio selection applied to each camera's block of tokens separately."""
    priority = np.asarray(priority, dtype=np.float64).reshape(-1)
    if priority.size == 0:
        raise ContractViolation("cannot select from an empty token set")
    if priority.size % tokens_per_camera:
        raise ContractViolation(f"{priority.size} tokens do not split into cameras of {tokens_per_camera}")
    selected = []
    for start in range(0, priority.size, tokens_per_camera):
        selected.append(start + select_top_ratio(priority[start:start + tokens_per_camera], ratio))
    return np.concatenate(selected)


def select_uniform_random(token_count, ratio, rng):
    """Seeded uniform sampler used as the score-free baseline."""
    if token_count == 0:
        raise ContractViolation("cannot select from an empty token set")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    keep = sampled_token_count(token_count, ratio)
    return np.sort(rng.choice(token_count, size=keep, replace=False))


def build_quality_maps(quality, centerness, alpha, ratio, tokens_per_camera,
                       pooling="global", sampler="focal", rng=None, clamp=PROBABILITY_CLAMP):
    """
    Priority and sampled mask for score maps covering every camera.

    Scores are clamped into [clamp, 1] before the priority is taken.
    """
    if pooling not in POOLING_MODES:
        raise ConfigurationError(f"unknown pooling '{pooling}', expected one of {POOLING_MODES}")
    if sampler not in SAMPLERS:
        raise ConfigurationError(f"unknown sampler '{sampler}', expected one of {SAMPLERS}")
    quality = np.clip(np.asarray(quality, dtype=np.float64), clamp, 1.0)
    centerness = np.clip(np.asarray(centerness, dtype=np.float64), clamp, 1.0)
    priority = sampling_priority(quality, centerness, alpha)

    if sampler == "uniform":
        indices = select_uniform_random(priority.size, ratio, rng if rng is not None else 0)
    elif pooling == "per_camera":
        indices = select_top_ratio_per_camera(priority, ratio, tokens_per_camera)
    else:
        indices = select_top_ratio(priority, ratio)

    sampled = np.zeros(priority.size, dtype=bool)
    sampled[indices] = True
    return QualityMaps(
        quality=quality,
        centerness=centerness,
        priority=priority,
        alpha=alpha,
        ratio=ratio,
        sampled=sampled,
    )

#=============================================================================
# TOTAL
#=============================================================================

def auxiliary_loss_total(components, weights, positive_count):
    """
    Weighted auxiliary loss divided by the number of positive tokens.

    A scene without positives contributes zero and logs a warning.
    """
    values = components.as_tuple()
    if not all(math.isfinite(value) for value in values):
        raise ContractViolation(f"auxiliary loss components must be finite, got {values}")
    if positive_count == 0:
        logger.warning("No positive tokens; auxiliary loss defined as 0")
        return 0.0
    if positive_count < 0:
        raise ContractViolation(f"positive count must be non-negative, got {positive_count}")
    weighted = sum(weight * value for weight, value in zip(weights.as_tuple(), values))
    return weighted / positive_count
