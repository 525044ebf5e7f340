"""
Config Loader

Loads the YAML defaults and class table, merges user overrides and builds the
validated SceneConfig that seeds every downstream stage.
"""

import copy
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import yaml

from .errors import ConfigurationError, InputError

logger = logging.getLogger(__name__)

DATA_DIR = Path(__file__).parent.parent / "data"

# YAML caches - load once, use many times
default_config_cache = None
object_classes_cache = None

#=============================================================================
# YAML LOADING
#=============================================================================

def load_default_config():
    """Load and cache default_config.yaml. Returns a private deep copy."""
    global default_config_cache
    if default_config_cache is None:
        with open(DATA_DIR / "default_config.yaml", "r") as f:
            default_config_cache = yaml.safe_load(f)
    return copy.deepcopy(default_config_cache)


def load_object_classes():
    """
    Load and cache the object class table.

    Returns:
        list: class records sorted by id, each {"name", "id", "length_meters", ...}
    """
    global object_classes_cache
    if object_classes_cache is None:
        with open(DATA_DIR / "object_classes.yaml", "r") as f:
            raw_yaml = yaml.safe_load(f)
        records = []
        for name, spec in raw_yaml.get("classes", {}).items():
            records.append({
                "name": name,
                "id": int(spec["id"]),
                "length_meters": tuple(spec["length_meters"]),
                "width_meters": tuple(spec["width_meters"]),
                "height_meters": tuple(spec["height_meters"]),
            })
        records.sort(key=lambda record: record["id"])
        if [record["id"] for record in records] != list(range(len(records))):
            raise ConfigurationError("object class ids must be 0..n-1 without gaps")
        object_classes_cache = records
    return copy.deepcopy(object_classes_cache)


def load_override_file(path):
    """
    Read a YAML or JSON override file.

    Raises:
        InputError: file missing, unparsable, or not a mapping
    """
    path = Path(path)
    try:
        with open(path, "r") as f:
            data = yaml.safe_load(f)
    except OSError as e:
        raise InputError(f"cannot read config: {e.strerror}", path=path) from e
    except yaml.YAMLError as e:
        line = None
        mark = getattr(e, "problem_mark", None)
        if mark is not None:
            line = mark.line + 1
        raise InputError(f"invalid config syntax: {e}", path=path, line=line) from e

    if data is None:
        return {}
    if not isinstance(data, dict):
        raise InputError("config root must be a mapping", path=path)
    return data


def merge_config(base, override):
    """Deep-merge override into a copy of base. Nested mappings merge, everything else replaces."""
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = merge_config(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def load_config(override_path=None, overrides=None):
    """
    Build the effective configuration: defaults, then an override file, then explicit overrides.

    Args:
        override_path: optional path to a YAML/JSON file
        overrides: optional nested dict applied last (CLI flags)

    Returns:
        dict: merged configuration
    """
    config = load_default_config()
    if override_path is not None:
        config = merge_config(config, load_override_file(override_path))
        logger.info("Merged config overrides from %s", override_path)
    if overrides:
        config = merge_config(config, overrides)
    return config


def require_choice(value, choices, key):
    """Return value if it is one of choices, else raise ConfigurationError naming key."""
    if value not in choices:
        raise ConfigurationError(f"{key} contains invalid value '{value}' not {smart_join(choices)}")
    return value


def smart_join(items, final_joiner=" or "):
    """Join items with commas, using final_joiner before the last item."""
    items = list(items)
    if len(items) <= 1:
        return "".join(f"'{item}'" for item in items)
    return ", ".join(f"'{item}'" for item in items[:-1]) + f"{final_joiner}'{items[-1]}'"

#=============================================================================
# SCENE CONFIG
#=============================================================================

@dataclass(frozen=True)
class SceneConfig:
    """Scene and model sizing for one run. Built by build_scene_config, never by hand in the CLI."""

    seed: int
    camera_count: int
    image_width: int
    image_height: int
    horizontal_fov_degrees: float
    mount_radius: float
    mount_height: float
    stride: int
    object_count: int
    object_distance_range: tuple
    max_placement_attempts: int
    roi_min: tuple
    roi_max: tuple
    depth_min: float
    depth_max: float
    depth_bins: int
    depth_binning: str
    d_model: int
    decoder_layers: int
    num_queries: int
    alpha: float
    rho: float

    @property
    def grid_width(self):
        return self.image_width // self.stride

    @property
    def grid_height(self):
        return self.image_height // self.stride

    @property
    def tokens_per_camera(self):
        return self.grid_width * self.grid_height

    @property
    def token_count(self):
        return self.camera_count * self.tokens_per_camera

    @property
    def camera_yaws(self):
        """Outward-facing yaw of each camera, evenly spaced around the ring (radians)."""
        return tuple(2.0 * math.pi * index / self.camera_count for index in range(self.camera_count))


def build_scene_config(config):
    """
    Validate the merged configuration and build a SceneConfig.

    Raises:
        ConfigurationError: any count non-positive, ratio out of range, ROI inverted, etc.
    """
    try:
        scene = config["scene"]
        geometry = config["geometry"]
        model = config["model"]
        sampling = config["sampling"]
        scene_config = SceneConfig(
            seed=int(scene["seed"]),
            camera_count=int(scene["camera_count"]),
            image_width=int(scene["image_width_pixels"]),
            image_height=int(scene["image_height_pixels"]),
            horizontal_fov_degrees=float(scene["horizontal_fov_degrees"]),
            mount_radius=float(scene["mount_radius_meters"]),
            mount_height=float(scene["mount_height_meters"]),
            stride=int(scene["stride_pixels"]),
            object_count=int(scene["object_count"]),
            object_distance_range=tuple(float(d) for d in scene["object_distance_meters"]),
            max_placement_attempts=int(scene["max_placement_attempts"]),
            roi_min=tuple(float(x) for x in geometry["roi_min_meters"]),
            roi_max=tuple(float(x) for x in geometry["roi_max_meters"]),
            depth_min=float(geometry["depth_min_meters"]),
            depth_max=float(geometry["depth_max_meters"]),
            depth_bins=int(geometry["depth_bins"]),
            depth_binning=str(geometry["depth_binning"]),
            d_model=int(model["d_model"]),
            decoder_layers=int(model["decoder_layers"]),
            num_queries=int(model["num_queries"]),
            alpha=float(sampling["alpha"]),
            rho=float(sampling["rho"]),
        )
    except KeyError as e:
        raise ConfigurationError(f"missing config key {e}") from e
    except (TypeError, ValueError) as e:
        raise ConfigurationError(f"malformed config value: {e}") from e

    validate_scene_config(scene_config)
    return scene_config


def validate_scene_config(scene_config):
    """Check SceneConfig invariants, raising ConfigurationError on the first violation."""
    positive_counts = {
        "scene.camera_count": scene_config.camera_count,
        "scene.image_width_pixels": scene_config.image_width,
        "scene.image_height_pixels": scene_config.image_height,
        "scene.stride_pixels": scene_config.stride,
        "scene.object_count": scene_config.object_count,
        "scene.max_placement_attempts": scene_config.max_placement_attempts,
        "geometry.depth_bins": scene_config.depth_bins,
        "model.d_model": scene_config.d_model,
        "model.decoder_layers": scene_config.decoder_layers,
        "model.num_queries": scene_config.num_queries,
    }
    for key, value in positive_counts.items():
        if value < 1:
            raise ConfigurationError(f"{key} must be positive, got {value}")

    if scene_config.image_width < scene_config.stride or scene_config.image_height < scene_config.stride:
        raise ConfigurationError("image dimensions must be at least one stride")
    if not 0.0 < scene_config.horizontal_fov_degrees < 180.0:
        raise ConfigurationError("scene.horizontal_fov_degrees must be in (0, 180)")
    if not 0.0 < scene_config.rho <= 1.0:
        raise ConfigurationError(f"sampling.rho must be in (0, 1], got {scene_config.rho}")
    if not 0.0 <= scene_config.alpha <= 1.0:
        raise ConfigurationError(f"sampling.alpha must be in [0, 1], got {scene_config.alpha}")
    if not 0.0 < scene_config.depth_min < scene_config.depth_max:
        raise ConfigurationError("geometry depth range must satisfy 0 < depth_min < depth_max")

    near, far = scene_config.object_distance_range
    if not 0.0 < near < far:
        raise ConfigurationError("scene.object_distance_meters must satisfy 0 < near < far")
    if len(scene_config.roi_min) != 3 or len(scene_config.roi_max) != 3:
        raise ConfigurationError("geometry ROI bounds need three axes")
    for axis, (low, high) in enumerate(zip(scene_config.roi_min, scene_config.roi_max)):
        if not low < high:
            raise ConfigurationError(f"geometry ROI axis {axis} has min >= max")
    if far > min(-scene_config.roi_min[0], scene_config.roi_max[0], -scene_config.roi_min[1], scene_config.roi_max[1]):
        raise ConfigurationError("scene.object_distance_meters reaches outside the ROI")

    require_choice(scene_config.depth_binning, ("lid", "uniform"), "geometry.depth_binning")
    if len(set(scene_config.camera_yaws)) != scene_config.camera_count:
        raise ConfigurationError("camera yaws must be distinct")
