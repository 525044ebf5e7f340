"""
Camera Geometry

Pinhole cameras in a shared ego frame: per-pixel rays, depth discretization,
ray-point sampling and normalization, forward projection, and the frustum cone
seen by one token.

Conventions: the camera frame is x right, y down, z forward. A CameraModel's
rotation maps camera-frame directions into the ego frame and its translation
is the optical center in the ego frame.
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation, ConfigurationError

ORTHONORMAL_TOLERANCE = 1e-9

BEHIND_CAMERA_EPSILON = 1e-6

CONE_CONTENTS = ("cone", "ray")

#=============================================================================
# TYPES
#=============================================================================

@dataclass(frozen=True)
class CameraModel:
    """Intrinsics, image size and camera-to-ego pose of one camera."""

    fx: float
    fy: float
    cu: float
    cv: float
    width: int
    height: int
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        if not (self.fx > 0.0 and self.fy > 0.0):
            raise ContractViolation(f"focal lengths must be positive, got ({self.fx}, {self.fy})")
        if self.width < 1 or self.height < 1:
            raise ContractViolation(f"image size must be positive, got {self.width}x{self.height}")
        rotation = np.array(self.rotation, dtype=np.float64)
        translation = np.array(self.translation, dtype=np.float64).reshape(-1)
        if rotation.shape != (3, 3) or translation.shape != (3,):
            raise ContractViolation("pose needs a 3x3 rotation and a 3-vector translation")
        deviation = np.max(np.abs(rotation.T @ rotation - np.eye(3)))
        if deviation > ORTHONORMAL_TOLERANCE:
            raise ContractViolation(f"rotation is not orthonormal (max deviation {deviation:.3e})")
        rotation.setflags(write=False)
        translation.setflags(write=False)
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "translation", translation)

    @property
    def origin(self):
        return self.translation

    @property
    def intrinsic_matrix(self):
        return np.array([
            [self.fx, 0.0, self.cu],
            [0.0, self.fy, self.cv],
            [0.0, 0.0, 1.0],
        ])

    def with_pose(self, rotation, translation):
        return CameraModel(self.fx, self.fy, self.cu, self.cv, self.width, self.height, rotation, translation)


@dataclass(frozen=True)
class CameraRig:
    cameras: tuple
    yaws: tuple = ()

    def __len__(self):
        return len(self.cameras)

    def __iter__(self):
        return iter(self.cameras)

    def __getitem__(self, index):
        return self.cameras[index]


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray

    def point_at(self, depth):
        return self.origin + depth * self.direction


@dataclass(frozen=True)
class ConeParams:
    """Frustum cone viewed by one token: its ray, optical center, focal lengths and angular footprint."""

    direction: np.ndarray
    origin: np.ndarray
    fx: float
    fy: float
    footprint: tuple

    def __post_init__(self):
        if not all(component > 0.0 for component in self.footprint):
            raise ContractViolation(f"cone footprint must be positive, got {self.footprint}")

    def as_vector(self, content="cone"):
        """
        Flatten to the alignment-network input.

        Args:
            content: "cone" gives 9 reals (direction, origin, fx, fy, mean footprint);
                     "ray" gives 6 reals (direction, origin)
        """
        if content == "ray":
            return np.concatenate([self.direction, self.origin])
        if content == "cone":
            return np.concatenate([
                self.direction,
                self.origin,
                [self.fx, self.fy, 0.5 * (self.footprint[0] + self.footprint[1])],
            ])
        raise ConfigurationError(f"unknown cone content '{content}', expected one of {CONE_CONTENTS}")


def cone_vector_length(content):
    if content not in CONE_CONTENTS:
        raise ConfigurationError(f"unknown cone content '{content}', expected one of {CONE_CONTENTS}")
    return 9 if content == "cone" else 6


@dataclass(frozen=True)
class Roi3D:
    minimum: tuple
    maximum: tuple

    def __post_init__(self):
        if len(self.minimum) != 3 or len(self.maximum) != 3:
            raise ContractViolation("ROI bounds need three axes")
        for axis, (low, high) in enumerate(zip(self.minimum, self.maximum)):
            if not low < high:
                raise ContractViolation(f"ROI axis {axis} has min {low} >= max {high}")

    @property
    def extent(self):
        return np.asarray(self.maximum, dtype=np.float64) - np.asarray(self.minimum, dtype=np.float64)

    def contains(self, point):
        point = np.asarray(point, dtype=np.float64)
        return bool(np.all(point >= self.minimum) and np.all(point <= self.maximum))

    def denormalize(self, normalized):
        """Map unit-cube coordinates back to meters."""
        return np.asarray(self.minimum, dtype=np.float64) + np.asarray(normalized, dtype=np.float64) * self.extent


@dataclass(frozen=True)
class Projection:
    u: float
    v: float
    depth: float
    behind_camera: bool = False

#=============================================================================
# RAYS AND PROJECTION
#=============================================================================

def check_pixel_bounds(cam, u, v):
    if not (0.0 <= u <= cam.width and 0.0 <= v <= cam.height):
        raise ContractViolation(f"pixel ({u}, {v}) outside image {cam.width}x{cam.height}")


def pixel_ray(cam, u, v):
    """
    Ray through pixel (u, v) in the ego frame.

    Raises:
        ContractViolation: pixel outside [0, width] x [0, height]
    """
    check_pixel_bounds(cam, u, v)
    camera_direction = np.array([(u - cam.cu) / cam.fx, (v - cam.cv) / cam.fy, 1.0])
    direction = cam.rotation @ camera_direction
    direction = direction / np.linalg.norm(direction)
    return Ray(origin=cam.origin.copy(), direction=direction)


def pixel_ray_directions(cam, pixels):
    """Unit ego-frame directions for an (n, 2) array of in-bounds pixels."""
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    for u, v in pixels:
        check_pixel_bounds(cam, u, v)
    camera_directions = np.column_stack([
        (pixels[:, 0] - cam.cu) / cam.fx,
        (pixels[:, 1] - cam.cv) / cam.fy,
        np.ones(len(pixels)),
    ])
    directions = camera_directions @ cam.rotation.T
    return directions / np.linalg.norm(directions, axis=1, keepdims=True)


def project_point(cam, point, epsilon=BEHIND_CAMERA_EPSILON):
    """
    Project an ego-frame point into the image.

    Returns:
        Projection: pixel coordinates and depth, or behind_camera=True when z <= epsilon
    """
    camera_point = cam.rotation.T @ (np.asarray(point, dtype=np.float64) - cam.translation)
    x, y, z = camera_point
    if z <= epsilon:
        return Projection(u=math.nan, v=math.nan, depth=float(z), behind_camera=True)
    return Projection(u=float(cam.cu + cam.fx * x / z), v=float(cam.cv + cam.fy * y / z), depth=float(z))


def frustum_cone(cam, u, v, stride):
    """Cone parameters of the token whose center is (u, v)."""
    if stride < 1:
        raise ContractViolation(f"stride must be at least 1, got {stride}")
    ray = pixel_ray(cam, u, v)
    return ConeParams(
        direction=ray.direction,
        origin=ray.origin,
        fx=cam.fx,
        fy=cam.fy,
        footprint=(stride / cam.fx, stride / cam.fy),
    )

#=============================================================================
# DEPTH SAMPLING
#=============================================================================

def check_depth_range(d_min, d_max, bin_count):
    if not 0.0 < d_min < d_max:
        raise ContractViolation(f"depth range must satisfy 0 < d_min < d_max, got ({d_min}, {d_max})")
    if bin_count < 1:
        raise ContractViolation(f"bin count must be at least 1, got {bin_count}")


def lid_depth_bins(d_min, d_max, bin_count):
    """
    Linear-increasing depth discretization.

    Returns:
        np.ndarray: bin_count + 1 depths d_min + (d_max - d_min) * i(i+1) / (D(D+1))
    """
    check_depth_range(d_min, d_max, bin_count)
    index = np.arange(bin_count + 1, dtype=np.float64)
    depths = d_min + (d_max - d_min) * index * (index + 1.0) / (bin_count * (bin_count + 1.0))
    depths[-1] = d_max
    return depths


def uniform_depth_bins(d_min, d_max, bin_count):
    check_depth_range(d_min, d_max, bin_count)
    return np.linspace(d_min, d_max, bin_count + 1)


def depth_bins(d_min, d_max, bin_count, binning="lid"):
    if binning == "lid":
        return lid_depth_bins(d_min, d_max, bin_count)
    if binning == "uniform":
        return uniform_depth_bins(d_min, d_max, bin_count)
    raise ConfigurationError(f"unknown depth binning '{binning}', expected 'lid' or 'uniform'")


def sample_ray_points(ray, depths):
    """Points o + t d for each depth, shape (len(depths), 3), in depth order."""
    depths = np.asarray(depths, dtype=np.float64).reshape(-1)
    if np.any(depths < 0.0):
        raise ContractViolation("ray sample depths must be non-negative")
    return ray.origin[None, :] + depths[:, None] * ray.direction[None, :]


def normalize_points(points, roi):
    """Per-axis (x - min) / (max - min), clamped to [0, 1]."""
    points = np.asarray(points, dtype=np.float64)
    minimum = np.asarray(roi.minimum, dtype=np.float64)
    return np.clip((points - minimum) / roi.extent, 0.0, 1.0)

#=============================================================================
# RIGS
#=============================================================================

def focal_from_fov(width, horizontal_fov_degrees):
    return width / (2.0 * math.tan(math.radians(horizontal_fov_degrees) / 2.0))


def yaw_rotation(yaw):
    """Camera-to-ego rotation for a level camera looking along ego heading `yaw` (z up)."""
    forward = np.array([math.cos(yaw), math.sin(yaw), 0.0])
    right = np.array([math.sin(yaw), -math.cos(yaw), 0.0])
    down = np.array([0.0, 0.0, -1.0])
    return np.column_stack([right, down, forward])


def build_ring_rig(scene_config):
    """
    Ring of outward-facing cameras at equal yaw spacing.

    Args:
        scene_config: SceneConfig supplying camera count, image size, fov and mount geometry

    Returns:
        CameraRig
    """
    focal = focal_from_fov(scene_config.image_width, scene_config.horizontal_fov_degrees)
    cameras = []
    for yaw in scene_config.camera_yaws:
        translation = np.array([
            scene_config.mount_radius * math.cos(yaw),
            scene_config.mount_radius * math.sin(yaw),
            scene_config.mount_height,
        ])
        cameras.append(CameraModel(
            fx=focal,
            fy=focal,
            cu=scene_config.image_width / 2.0,
            cv=scene_config.image_height / 2.0,
            width=scene_config.image_width,
            height=scene_config.image_height,
            rotation=yaw_rotation(yaw),
            translation=translation,
        ))
    return CameraRig(cameras=tuple(cameras), yaws=tuple(scene_config.camera_yaws))
