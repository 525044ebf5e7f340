"""
Positional Encoding

3D position embedding of image tokens from their camera rays, the cone-driven
spatial alignment of token features, and key/value composition for the
decoder.
"""

import logging
from dataclasses import dataclass, replace

import numpy as np

from .camera_geometry import frustum_cone, normalize_points, pixel_ray_directions, cone_vector_length
from .errors import ContractViolation, ConfigurationError
from .numeric_kernel import Mlp2, constant_mlp2, init_mlp2, mlp2_forward

logger = logging.getLogger(__name__)

KEY_VALUE_MODES = ("petr", "focal", "pos")

#=============================================================================
# TYPES
#=============================================================================

@dataclass(frozen=True)
class TokenGrid:
    """
    Per-camera feature map flattened row-major: token index = row * width + col.

    features has shape (width * height, d_model).
    """

    camera_index: int
    width: int
    height: int
    stride: int
    features: np.ndarray
    aligned: bool = False

    def __post_init__(self):
        features = np.asarray(self.features, dtype=np.float64)
        if features.ndim != 2 or features.shape[0] != self.width * self.height:
            raise ContractViolation(
                f"token grid {self.width}x{self.height} needs {self.width * self.height} "
                f"feature rows, got shape {features.shape}"
            )
        object.__setattr__(self, "features", features)

    @property
    def token_count(self):
        return self.width * self.height

    @property
    def d_model(self):
        return self.features.shape[1]

    @property
    def pixel_centers(self):
        return token_pixel_centers(self.width, self.height, self.stride)


@dataclass(frozen=True)
class PosEmbedGrid:
    camera_index: int
    embeddings: np.ndarray

    @property
    def token_count(self):
        return self.embeddings.shape[0]


@dataclass(frozen=True)
class AlignmentNet:
    """T_w and T_b networks mapping a cone vector to per-channel scale and shift."""

    weight_net: Mlp2
    bias_net: Mlp2
    content: str = "cone"

    def __post_init__(self):
        expected = cone_vector_length(self.content)
        for name, net in (("weight_net", self.weight_net), ("bias_net", self.bias_net)):
            if net.in_dim != expected:
                raise ContractViolation(f"{name} expects {net.in_dim} inputs, {self.content} content has {expected}")
        if self.weight_net.out_dim != self.bias_net.out_dim:
            raise ContractViolation("alignment networks must emit the same width")

    @property
    def d_model(self):
        return self.weight_net.out_dim


def token_pixel_centers(width, height, stride):
    """Pixel centers ((col + 0.5) * stride, (row + 0.5) * stride), shape (width * height, 2)."""
    rows, cols = np.divmod(np.arange(width * height), width)
    return np.column_stack([(cols + 0.5) * stride, (rows + 0.5) * stride]).astype(np.float64)

#=============================================================================
# NETWORK CONSTRUCTION
#=============================================================================

def init_position_mlp(depth_count, hidden_dim, d_model, rng, activation="relu"):
    """phi: 3 * depth_count normalized coordinates -> d_model."""
    return init_mlp2(3 * depth_count, hidden_dim, d_model, rng, activation=activation)


def init_alignment_net(d_model, hidden_dim, rng, content="cone", activation="relu"):
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    in_dim = cone_vector_length(content)
    return AlignmentNet(
        weight_net=init_mlp2(in_dim, hidden_dim, d_model, rng, activation=activation),
        bias_net=init_mlp2(in_dim, hidden_dim, d_model, rng, activation=activation),
        content=content,
    )


def identity_alignment_net(d_model, hidden_dim, content="cone", activation="relu"):
    """T_w outputs 1 and T_b outputs 0 for every cone, so alignment leaves F unchanged."""
    in_dim = cone_vector_length(content)
    return AlignmentNet(
        weight_net=constant_mlp2(in_dim, hidden_dim, d_model, 1.0, activation=activation),
        bias_net=constant_mlp2(in_dim, hidden_dim, d_model, 0.0, activation=activation),
        content=content,
    )

#=============================================================================
# OPERATIONS
#=============================================================================

def ray_point_features(grid, cam, depths, roi):
    """Normalized ray points per token, flattened to (token_count, 3 * len(depths)) in depth order."""
    depths = np.asarray(depths, dtype=np.float64).reshape(-1)
    directions = pixel_ray_directions(cam, grid.pixel_centers)
    points = cam.origin[None, None, :] + depths[None, :, None] * directions[:, None, :]
    normalized = normalize_points(points, roi)
    return normalized.reshape(grid.token_count, 3 * depths.size)


def position_embedding(grid, cam, phi, depths, roi):
    """
    E = phi(Norm(ray points)) for every token of one camera.

    Args:
        grid: TokenGrid of the camera
        cam: CameraModel the grid was taken with
        phi: Mlp2 with in_dim == 3 * len(depths)
        depths: depth samples along each ray (D + 1 values)
        roi: Roi3D used for normalization

    Returns:
        PosEmbedGrid
    """
    depth_count = len(depths)
    if phi.in_dim != 3 * depth_count:
        raise ContractViolation(f"position MLP expects {phi.in_dim} inputs, {depth_count} depths give {3 * depth_count}")
    if phi.out_dim != grid.d_model:
        raise ContractViolation(f"position MLP emits {phi.out_dim} channels, grid has {grid.d_model}")
    embeddings = mlp2_forward(ray_point_features(grid, cam, depths, roi), phi)
    return PosEmbedGrid(camera_index=grid.camera_index, embeddings=embeddings)


def token_cones(grid, cam):
    return [frustum_cone(cam, u, v, grid.stride) for u, v in grid.pixel_centers]


def spatial_align(grid, cones, net):
    """
    F* = T_w(cone) * F + T_b(cone), elementwise per token.

    Returns:
        TokenGrid: a new grid flagged aligned; the input grid is untouched
    """
    if len(cones) != grid.token_count:
        raise ContractViolation(f"spatial alignment needs {grid.token_count} cones, got {len(cones)}")
    if net.d_model != grid.d_model:
        raise ContractViolation(f"alignment emits {net.d_model} channels, grid has {grid.d_model}")
    cone_inputs = np.stack([cone.as_vector(net.content) for cone in cones])
    scale = mlp2_forward(cone_inputs, net.weight_net)
    shift = mlp2_forward(cone_inputs, net.bias_net)
    return replace(grid, features=scale * grid.features + shift, aligned=True)


def compose_key_value(grid, embed, mode):
    """
    Build decoder keys and values for one grid.

    Modes:
        petr:  k = F + E, v = F
        focal: k = F* + E, v = F*   (grid is expected to be the aligned one)
        pos:   k = F + E, v = F + E

    Returns:
        tuple: (keys, values), each (token_count, d_model)
    """
    if mode not in KEY_VALUE_MODES:
        raise ConfigurationError(f"unknown key/value mode '{mode}', expected one of {KEY_VALUE_MODES}")
    if embed.embeddings.shape != grid.features.shape:
        raise ContractViolation(
            f"embedding shape {embed.embeddings.shape} does not match features {grid.features.shape}"
        )
    if mode == "focal" and not grid.aligned:
        logger.debug("focal key/value composition on unaligned grid %d", grid.camera_index)
    keys = grid.features + embed.embeddings
    if mode == "pos":
        values = keys.copy()
    else:
        values = grid.features.copy()
    return keys, values
