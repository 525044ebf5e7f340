"""
Scene Generator

Seeded synthetic multi-camera scenes: a ring rig, 3D boxes resting on the
ground, and the per-camera token targets rendered from their projections.
Also reads and writes the JSON scene file.
"""

import json
import logging
import math
from dataclasses import dataclass, field

import faker
import numpy as np

from .assignment import MatchingWeights, build_cost_matrix, match_hungarian, pairwise_iou
from .camera_geometry import CameraModel, CameraRig, Roi3D, build_ring_rig, project_point
from .config_loader import build_scene_config, load_object_classes
from .errors import InputError, SceneGenerationError
from .focal_sampling import (
    BACKGROUND,
    DEFAULT_DELTA_COEFFICIENT,
    DEFAULT_DELTA_FLOOR,
    Box2D,
    TokenTargets,
    center_offset_targets,
    fcos_assign,
    gaussian_heatmap,
    image_diagonal,
    ltrb_targets,
)
from .positional_encoding import token_pixel_centers

logger = logging.getLogger(__name__)

SCENE_FORMAT_VERSION = 1

# Corner sign pattern (length, width, height) in box frame
CORNER_SIGNS = np.array([
    [sx, sy, sz] for sx in (-1.0, 1.0) for sy in (-1.0, 1.0) for sz in (-1.0, 1.0)
])

#=============================================================================
# TYPES
#=============================================================================

@dataclass(frozen=True)
class Box3D:
    """Ground-truth object: center and size in meters, yaw about +z in radians."""

    center: tuple
    size: tuple
    yaw: float
    class_id: int
    class_name: str
    token: str = ""

    def corners(self):
        """The 8 corners in the ego frame, shape (8, 3)."""
        half = 0.5 * np.asarray(self.size, dtype=np.float64)
        local = CORNER_SIGNS * half
        cos_yaw, sin_yaw = math.cos(self.yaw), math.sin(self.yaw)
        rotation = np.array([[cos_yaw, -sin_yaw, 0.0], [sin_yaw, cos_yaw, 0.0], [0.0, 0.0, 1.0]])
        return local @ rotation.T + np.asarray(self.center, dtype=np.float64)


@dataclass
class SceneTruth:
    """Targets of one camera and the objects it sees."""

    camera_index: int
    object_indices: list
    boxes: list
    centers: list
    labels: list
    targets: TokenTargets
    skipped_centers: int = 0
    unmatched_objects: int = 0

    @property
    def visible_count(self):
        return len(self.object_indices)


@dataclass
class SyntheticScene:
    scene_config: object
    rig: CameraRig
    objects: list
    config: dict
    scene_token: str = ""
    location: str = ""
    truths: list = field(default_factory=list)

    @property
    def roi(self):
        return Roi3D(self.scene_config.roi_min, self.scene_config.roi_max)

#=============================================================================
# GENERATION
#=============================================================================

def is_visible(rig, box):
    """True when some camera keeps the box and sees its projected center on-image."""
    for camera in rig:
        if project_box(camera, box) is None:
            continue
        projection = project_point(camera, box.center)
        if 0.0 <= projection.u < camera.width and 0.0 <= projection.v < camera.height:
            return True
    return False


def footprint_radius(size):
    return 0.5 * math.hypot(size[0], size[1])


def sample_object(rng, object_classes, scene_config):
    record = object_classes[int(rng.integers(len(object_classes)))]
    size = tuple(float(rng.uniform(*record[key])) for key in ("length_meters", "width_meters", "height_meters"))
    distance = float(rng.uniform(*scene_config.object_distance_range))
    azimuth = float(rng.uniform(-math.pi, math.pi))
    yaw = float(rng.uniform(-math.pi, math.pi))
    center = (distance * math.cos(azimuth), distance * math.sin(azimuth), 0.5 * size[2])
    return Box3D(center=center, size=size, yaw=yaw, class_id=record["id"], class_name=record["name"])


def overlaps_placed(candidate, placed):
    for other in placed:
        gap = math.hypot(candidate.center[0] - other.center[0], candidate.center[1] - other.center[1])
        if gap < footprint_radius(candidate.size) + footprint_radius(other.size):
            return True
    return False


def generate_scene(scene_config, config, object_classes=None):
    """
    Place the configured number of objects around a ring rig.

    Each object is drawn until it neither overlaps a placed object on the
    ground plane nor falls outside every camera view, up to
    max_placement_attempts draws.

    Args:
        scene_config: validated SceneConfig
        config: merged configuration mapping (embedded in the scene file)
        object_classes: class table, defaults to object_classes.yaml

    Returns:
        SyntheticScene

    Raises:
        SceneGenerationError: an object could not be placed within the attempt budget
    """
    object_classes = object_classes or load_object_classes()
    rng = np.random.default_rng(scene_config.seed)
    fake = faker.Faker()
    fake.seed_instance(scene_config.seed)

    rig = build_ring_rig(scene_config)
    roi = Roi3D(scene_config.roi_min, scene_config.roi_max)
    placed = []
    for index in range(scene_config.object_count):
        for attempt in range(scene_config.max_placement_attempts):
            candidate = sample_object(rng, object_classes, scene_config)
            if not roi.contains(candidate.center):
                continue
            if overlaps_placed(candidate, placed):
                continue
            if not is_visible(rig, candidate):
                continue
            placed.append(Box3D(
                center=candidate.center,
                size=candidate.size,
                yaw=candidate.yaw,
                class_id=candidate.class_id,
                class_name=candidate.class_name,
                token=fake.bothify(text=f"{candidate.class_name[:3]}-########"),
            ))
            break
        else:
            raise SceneGenerationError(
                f"object {index} could not be placed after {scene_config.max_placement_attempts} attempts "
                f"(seed {scene_config.seed})"
            )

    scene = SyntheticScene(
        scene_config=scene_config,
        rig=rig,
        objects=placed,
        config=config,
        scene_token=fake.bothify(text="scene-####-????"),
        location=fake.city(),
    )
    logger.info("Generated scene %s with %d objects", scene.scene_token, len(placed))
    return scene


def make_scene(scene_config, config, objects, rig=None):
    """A scene with hand-placed objects, used for fixtures."""
    return SyntheticScene(
        scene_config=scene_config,
        rig=rig if rig is not None else build_ring_rig(scene_config),
        objects=list(objects),
        config=config,
    )

#=============================================================================
# TARGETS
#=============================================================================

def project_box(camera, box):
    """
    Clipped 2D bounding rectangle of a box's corner projections.

    Returns:
        Box2D or None when a corner is behind the camera or the clipped box is empty
    """
    projections = [project_point(camera, corner) for corner in box.corners()]
    if any(projection.behind_camera for projection in projections):
        return None
    us = [projection.u for projection in projections]
    vs = [projection.v for projection in projections]
    x_min, x_max = max(min(us), 0.0), min(max(us), float(camera.width))
    y_min, y_max = max(min(vs), 0.0), min(max(vs), float(camera.height))
    if x_min >= x_max or y_min >= y_max:
        return None
    return Box2D(x_min, y_min, x_max, y_max)


def token_cell_boxes(grid_width, grid_height, stride):
    rows, cols = np.divmod(np.arange(grid_width * grid_height), grid_width)
    return np.column_stack([cols * stride, rows * stride, (cols + 1) * stride, (rows + 1) * stride]).astype(np.float64)


def empty_targets(camera_index, token_count):
    return TokenTargets(
        camera_index=camera_index,
        class_ids=np.full(token_count, BACKGROUND, dtype=np.int64),
        assigned_object=np.full(token_count, BACKGROUND, dtype=np.int64),
        ltrb=np.zeros((token_count, 4)),
        heatmap=np.zeros(token_count),
        offsets=np.zeros((token_count, 2)),
        center_mask=np.zeros(token_count, dtype=bool),
        iou=np.zeros(token_count),
        positive_mask=np.zeros(token_count, dtype=bool),
        matched_object=np.full(token_count, BACKGROUND, dtype=np.int64),
        matched_ltrb=np.zeros((token_count, 4)),
    )


def render_camera_targets(scene, camera_index, class_count, weights, delta_coefficient, delta_floor):
    scene_config = scene.scene_config
    camera = scene.rig[camera_index]
    stride = scene_config.stride
    grid_width, grid_height = scene_config.grid_width, scene_config.grid_height
    pixel_centers = token_pixel_centers(grid_width, grid_height, stride)
    token_count = grid_width * grid_height
    targets = empty_targets(camera_index, token_count)

    object_indices, boxes, centers, labels = [], [], [], []
    for index, box3d in enumerate(scene.objects):
        box = project_box(camera, box3d)
        if box is None:
            continue
        center = project_point(camera, box3d.center)
        object_indices.append(index)
        boxes.append(box)
        centers.append((center.u, center.v, center.depth))
        labels.append(box3d.class_id)

    truth = SceneTruth(camera_index, object_indices, boxes, centers, labels, targets)
    if not boxes:
        return truth

    diagonal = image_diagonal(camera.width, camera.height)
    assigned = fcos_assign(boxes, pixel_centers)
    targets.assigned_object = assigned
    for token in np.flatnonzero(assigned != BACKGROUND):
        box = boxes[assigned[token]]
        targets.class_ids[token] = labels[assigned[token]]
        targets.ltrb[token] = ltrb_targets(box, pixel_centers[token, 0], pixel_centers[token, 1], diagonal)

    heatmap, skipped = gaussian_heatmap(
        [(u, v, box) for (u, v, _), box in zip(centers, boxes)],
        grid_width, grid_height, stride, delta_coefficient, delta_floor,
    )
    targets.heatmap = heatmap
    truth.skipped_centers = skipped

    for u, v, _ in centers:
        located = center_offset_targets(u, v, stride, grid_width, grid_height)
        if located is None:
            continue
        col, row, offset = located
        token = row * grid_width + col
        if not targets.center_mask[token]:
            targets.offsets[token] = offset
            targets.center_mask[token] = True

    token_boxes = token_cell_boxes(grid_width, grid_height, stride)
    token_scores = np.zeros((token_count, class_count))
    foreground = np.flatnonzero(assigned != BACKGROUND)
    token_boxes[foreground] = np.array([boxes[assigned[token]].as_array() for token in foreground]).reshape(-1, 4)
    token_scores[foreground, targets.class_ids[foreground]] = heatmap[foreground]
    gt_boxes = np.array([box.as_array() for box in boxes])
    ious = pairwise_iou(token_boxes, gt_boxes)

    # Candidates are an object's own foreground tokens; these sets are disjoint,
    # so the restricted matching splits into one problem per object.
    for column in range(len(boxes)):
        own = np.flatnonzero(assigned == column)
        if own.size == 0:
            truth.unmatched_objects += 1
            logger.debug("Camera %d: object %d covers no token center", camera_index, object_indices[column])
            continue
        costs = build_cost_matrix(
            token_boxes[own], token_scores[own], gt_boxes[column:column + 1], [labels[column]],
            (camera.width, camera.height), weights,
        )
        token = int(own[match_hungarian(costs).row_of_col[0]])
        targets.positive_mask[token] = True
        targets.matched_object[token] = column
        targets.iou[token] = ious[token, column]
        targets.matched_ltrb[token] = ltrb_targets(
            boxes[column], pixel_centers[token, 0], pixel_centers[token, 1], diagonal,
        )
    return truth


def render_targets(scene, class_count=None):
    """
    Per-camera targets for every camera of the scene.

    Objects with a corner behind a camera, or whose box clips to nothing, are
    skipped for that camera. Each visible object gets one positive token,
    Hungarian-matched among the foreground tokens assigned to it; objects
    whose box covers no token center get none and are counted in
    unmatched_objects.

    Returns:
        list: SceneTruth per camera (also stored on scene.truths)
    """
    config = scene.config
    if class_count is None:
        class_count = len(load_object_classes())
    weights = MatchingWeights.from_config(config["matching"])
    sampling = config["sampling"]
    truths = []
    for camera_index in range(len(scene.rig)):
        truth = render_camera_targets(
            scene, camera_index, class_count, weights,
            float(sampling.get("heatmap_delta_coefficient", DEFAULT_DELTA_COEFFICIENT)),
            float(sampling.get("heatmap_delta_floor", DEFAULT_DELTA_FLOOR)),
        )
        logger.debug(
            "Camera %d: %d visible objects, %d foreground tokens",
            camera_index, truth.visible_count, int(truth.targets.foreground_mask.sum()),
        )
        truths.append(truth)
    scene.truths = truths
    return truths

#=============================================================================
# SCENE FILE
#=============================================================================

def camera_to_dict(index, yaw, camera):
    return {
        "index": index,
        "yaw_radians": yaw,
        "fx_pixels": camera.fx,
        "fy_pixels": camera.fy,
        "cu_pixels": camera.cu,
        "cv_pixels": camera.cv,
        "width_pixels": camera.width,
        "height_pixels": camera.height,
        "rotation_camera_to_ego": camera.rotation.tolist(),
        "translation_meters": camera.translation.tolist(),
    }


def scene_to_dict(scene):
    return {
        "format_version": SCENE_FORMAT_VERSION,
        "scene_token": scene.scene_token,
        "location": scene.location,
        "seed": scene.scene_config.seed,
        "config": scene.config,
        "cameras": [
            camera_to_dict(index, yaw, camera)
            for index, (yaw, camera) in enumerate(zip(scene.rig.yaws, scene.rig.cameras))
        ],
        "objects": [
            {
                "token": box.token,
                "class_name": box.class_name,
                "class_id": box.class_id,
                "center_meters": list(box.center),
                "size_meters": list(box.size),
                "yaw_radians": box.yaw,
            }
            for box in scene.objects
        ],
    }


def scene_to_json(scene):
    return json.dumps(scene_to_dict(scene), sort_keys=True, indent=2) + "\n"


def scene_from_dict(data, source="<scene>"):
    """Rebuild a SyntheticScene from its dict form; InputError on missing or malformed fields."""
    try:
        if data.get("format_version") != SCENE_FORMAT_VERSION:
            raise InputError(f"unsupported scene format version {data.get('format_version')!r}", path=source)
        config = data["config"]
        scene_config = build_scene_config(config)
        cameras, yaws = [], []
        for entry in data["cameras"]:
            cameras.append(CameraModel(
                fx=float(entry["fx_pixels"]),
                fy=float(entry["fy_pixels"]),
                cu=float(entry["cu_pixels"]),
                cv=float(entry["cv_pixels"]),
                width=int(entry["width_pixels"]),
                height=int(entry["height_pixels"]),
                rotation=np.array(entry["rotation_camera_to_ego"], dtype=np.float64),
                translation=np.array(entry["translation_meters"], dtype=np.float64),
            ))
            yaws.append(float(entry["yaw_radians"]))
        objects = [
            Box3D(
                center=tuple(float(x) for x in entry["center_meters"]),
                size=tuple(float(x) for x in entry["size_meters"]),
                yaw=float(entry["yaw_radians"]),
                class_id=int(entry["class_id"]),
                class_name=str(entry["class_name"]),
                token=str(entry.get("token", "")),
            )
            for entry in data["objects"]
        ]
    except InputError:
        raise
    except (KeyError, TypeError, ValueError, AttributeError) as e:
        raise InputError(f"malformed scene file: {e}", path=source) from e
    if len(cameras) != scene_config.camera_count:
        raise InputError(
            f"scene lists {len(cameras)} cameras but config asks for {scene_config.camera_count}", path=source
        )
    return SyntheticScene(
        scene_config=scene_config,
        rig=CameraRig(cameras=tuple(cameras), yaws=tuple(yaws)),
        objects=objects,
        config=config,
        scene_token=str(data.get("scene_token", "")),
        location=str(data.get("location", "")),
    )


def load_scene(path):
    """Read a scene JSON file written by scene_to_json."""
    try:
        with open(path, "r") as f:
            data = json.load(f)
    except OSError as e:
        raise InputError(f"cannot read scene: {e.strerror}", path=path) from e
    except json.JSONDecodeError as e:
        raise InputError(f"invalid scene JSON: {e.msg}", path=path, line=e.lineno) from e
    if not isinstance(data, dict):
        raise InputError("scene root must be an object", path=path)
    return scene_from_dict(data, source=path)
