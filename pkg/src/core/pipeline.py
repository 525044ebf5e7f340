"""
Pipeline

End-to-end forward chain on one scene: targets, features, positional
embedding, score maps, priority and sampling, spatial alignment, key/value
composition and decoding. Produces the run report and the tables behind the
CLI dumps.
"""

import csv
import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .assignment import (
    MatchingWeights,
    build_center_cost_matrix,
    giou_2d,
    match_hungarian,
)
from .camera_geometry import Roi3D, depth_bins
from .config_loader import build_scene_config, load_object_classes, require_choice
from .cost_model import decoder_flops, decoder_memory, head_config_from_run, published_residuals, ratio_sweep
from .decoder import DecoderOptions, decode, init_anchor_queries, init_decoder_weights
from .errors import ConfigurationError, ContractViolation, InputError
from .focal_sampling import (
    AuxiliaryLossComponents,
    LossWeights,
    TokenPredictions,
    auxiliary_loss_total,
    build_quality_maps,
    centerness_focal_loss,
    l1_loss,
    ltrb_to_box,
    image_diagonal,
    quality_focal_loss,
)
from .positional_encoding import (
    KEY_VALUE_MODES,
    TokenGrid,
    compose_key_value,
    identity_alignment_net,
    init_alignment_net,
    init_position_mlp,
    position_embedding,
    spatial_align,
    token_cones,
    token_pixel_centers,
)
from .scene_generator import render_targets

logger = logging.getLogger(__name__)

SCORE_FILE_COLUMNS = ("camera", "row", "col", "Q", "C")

# Sub-streams of the scene seed
FEATURE_STREAM = 1
RANDOM_SCORE_STREAM = 2
UNIFORM_SAMPLER_STREAM = 3

#=============================================================================
# TYPES
#=============================================================================

@dataclass
class PipelineRun:
    """Everything a run computed, kept for reports and dumps."""

    scene: object
    scene_config: object
    config: dict
    mode: str
    score_source: str
    truths: list
    grids: list
    aligned_grids: list
    embeddings: list
    keys_all: np.ndarray
    values_all: np.ndarray
    quality_maps: object
    keys: np.ndarray
    values: np.ndarray
    trace: object
    report: dict = field(default_factory=dict)

#=============================================================================
# INPUTS
#=============================================================================

def parse_score_source(text):
    """
    Split a score source string.

    Returns:
        tuple: (kind, path) with path None unless kind is "file"
    """
    if text.startswith("file:"):
        path = text[len("file:"):]
        if not path:
            raise ConfigurationError("score source 'file:' needs a path")
        return "file", path
    require_choice(text, ("oracle", "random"), "scores")
    return text, None


def make_token_grids(scene_config):
    """Seeded standard-normal content vectors standing in for image features."""
    rng = np.random.default_rng([scene_config.seed, FEATURE_STREAM])
    return [
        TokenGrid(
            camera_index=camera_index,
            width=scene_config.grid_width,
            height=scene_config.grid_height,
            stride=scene_config.stride,
            features=rng.standard_normal((scene_config.tokens_per_camera, scene_config.d_model)),
        )
        for camera_index in range(scene_config.camera_count)
    ]


def read_score_file(path, scene_config):
    """
    Read injected Q and C maps from a CSV with columns camera,row,col,Q,C.

    Every token must appear exactly once.

    Returns:
        tuple: (quality, centerness) flattened camera-major

    Raises:
        InputError: unreadable file, missing columns, bad values or coverage, with path and line
    """
    tokens_per_camera = scene_config.tokens_per_camera
    total = scene_config.token_count
    quality = np.full(total, np.nan)
    centerness = np.full(total, np.nan)
    try:
        with open(path, "r", newline="") as f:
            reader = csv.DictReader(f)
            missing = [column for column in SCORE_FILE_COLUMNS if column not in (reader.fieldnames or [])]
            if missing:
                raise InputError(f"missing score columns {missing}", path=path, line=1)
            for record in reader:
                line = reader.line_num
                try:
                    camera, row, col = int(record["camera"]), int(record["row"]), int(record["col"])
                    q_value, c_value = float(record["Q"]), float(record["C"])
                except (TypeError, ValueError) as e:
                    raise InputError(f"bad score row: {e}", path=path, line=line) from e
                if not (0 <= camera < scene_config.camera_count
                        and 0 <= row < scene_config.grid_height
                        and 0 <= col < scene_config.grid_width):
                    raise InputError(f"token ({camera}, {row}, {col}) outside the grid", path=path, line=line)
                if not (0.0 <= q_value <= 1.0 and 0.0 <= c_value <= 1.0):
                    raise InputError("scores must lie in [0, 1]", path=path, line=line)
                index = camera * tokens_per_camera + row * scene_config.grid_width + col
                if not np.isnan(quality[index]):
                    raise InputError(f"duplicate token ({camera}, {row}, {col})", path=path, line=line)
                quality[index] = q_value
                centerness[index] = c_value
    except OSError as e:
        raise InputError(f"cannot read score file: {e.strerror}", path=path) from e
    uncovered = int(np.isnan(quality).sum())
    if uncovered:
        raise InputError(f"{uncovered} tokens have no score row", path=path)
    return quality, centerness


def score_maps(kind, path, truths, scene_config):
    if kind == "oracle":
        quality = np.concatenate([truth.targets.iou for truth in truths])
        centerness = np.concatenate([truth.targets.heatmap for truth in truths])
        return quality, centerness
    if kind == "random":
        rng = np.random.default_rng([scene_config.seed, RANDOM_SCORE_STREAM])
        return rng.uniform(0.0, 1.0, scene_config.token_count), rng.uniform(0.0, 1.0, scene_config.token_count)
    return read_score_file(path, scene_config)

#=============================================================================
# LOSSES
#=============================================================================

def oracle_predictions(truth):
    """Predictions that reproduce every target exactly: Q = y, C = peak indicator, exact ltrb and offsets."""
    targets = truth.targets
    return TokenPredictions(
        quality=targets.iou.copy(),
        centerness=(targets.heatmap == 1.0).astype(np.float64),
        ltrb=targets.matched_ltrb.copy(),
        offsets=targets.offsets.copy(),
    )


def auxiliary_components(truths, predictions, scene_config, config):
    """
    The five auxiliary loss terms summed over all cameras.

    Returns:
        tuple: (AuxiliaryLossComponents, positive token count)
    """
    losses = config["losses"]
    beta = float(losses["quality_beta"])
    quality_total = 0.0
    offset_total = 0.0
    giou_total = 0.0
    ltrb_total = 0.0
    positives = 0
    pixel_centers = token_pixel_centers(scene_config.grid_width, scene_config.grid_height, scene_config.stride)
    diagonal = image_diagonal(scene_config.image_width, scene_config.image_height)

    for truth, prediction in zip(truths, predictions):
        targets = truth.targets
        per_token, _ = quality_focal_loss(prediction.quality, targets.iou, beta)
        quality_total += float(per_token.sum())
        centers = targets.center_mask
        offset_total += l1_loss(prediction.offsets[centers], targets.offsets[centers])[0]
        positive = targets.positive_mask
        ltrb_total += l1_loss(prediction.ltrb[positive], targets.matched_ltrb[positive])[0]
        for token in np.flatnonzero(positive):
            u, v = pixel_centers[token]
            predicted_box = ltrb_to_box(u, v, prediction.ltrb[token], diagonal)
            giou, _ = giou_2d(predicted_box, truth.boxes[targets.matched_object[token]])
            giou_total += 1.0 - giou
        positives += int(positive.sum())

    centerness_total, _ = centerness_focal_loss(
        np.concatenate([prediction.centerness for prediction in predictions]),
        np.concatenate([truth.targets.heatmap for truth in truths]),
        float(losses["centerness_alpha"]),
        float(losses["centerness_beta"]),
    )
    components = AuxiliaryLossComponents(
        quality=quality_total,
        center_offset=offset_total,
        giou=giou_total,
        ltrb=ltrb_total,
        centerness=centerness_total,
    )
    return components, positives

#=============================================================================
# RUN
#=============================================================================

def build_alignment(config, d_model, rng):
    model = config["model"]
    alignment = require_choice(model["alignment"], ("learned", "identity"), "model.alignment")
    content = require_choice(model["alignment_content"], ("cone", "ray"), "model.alignment_content")
    hidden = int(model["alignment_hidden_dim"])
    if alignment == "identity":
        return identity_alignment_net(d_model, hidden, content=content, activation=model["activation"])
    return init_alignment_net(d_model, hidden, rng, content=content, activation=model["activation"])


def run_pipeline(scene, mode="focal", score_source="oracle", config=None):
    """
    Run the full forward chain on a scene.

    Args:
        scene: SyntheticScene
        mode: key/value composition, one of petr, focal, pos
        score_source: "oracle", "random" or "file:<csv path>"
        config: merged configuration; defaults to the one embedded in the scene

    Returns:
        PipelineRun with its report filled in
    """
    config = config if config is not None else scene.config
    scene_config = build_scene_config(config)
    require_choice(mode, KEY_VALUE_MODES, "mode")
    kind, score_path = parse_score_source(score_source)
    if len(scene.rig) != scene_config.camera_count:
        raise ContractViolation(f"scene has {len(scene.rig)} cameras, config expects {scene_config.camera_count}")
    for camera in scene.rig:
        if (camera.width, camera.height) != (scene_config.image_width, scene_config.image_height):
            raise ContractViolation("scene camera image size differs from the configured image size")
    scene = replace(scene, scene_config=scene_config, config=config)

    model = config["model"]
    sampling = config["sampling"]
    class_count = len(load_object_classes())
    roi = Roi3D(scene_config.roi_min, scene_config.roi_max)

    logger.info("Rendering targets for %d cameras", scene_config.camera_count)
    truths = render_targets(scene, class_count)

    weight_seed = int(model["weight_seed"])
    encoder_rng = np.random.default_rng([weight_seed, 0])
    depths = depth_bins(scene_config.depth_min, scene_config.depth_max, scene_config.depth_bins,
                        scene_config.depth_binning)
    phi = init_position_mlp(len(depths), int(model["positional_hidden_dim"]), scene_config.d_model,
                            encoder_rng, activation=model["activation"])
    alignment_net = build_alignment(config, scene_config.d_model, encoder_rng)

    grids = make_token_grids(scene_config)
    embeddings = [position_embedding(grid, camera, phi, depths, roi) for grid, camera in zip(grids, scene.rig)]

    logger.info("Scoring tokens from %s source", kind)
    quality, centerness = score_maps(kind, score_path, truths, scene_config)
    quality_maps = build_quality_maps(
        quality, centerness,
        alpha=scene_config.alpha,
        ratio=scene_config.rho,
        tokens_per_camera=scene_config.tokens_per_camera,
        pooling=sampling["pooling"],
        sampler=sampling["sampler"],
        rng=np.random.default_rng([scene_config.seed, UNIFORM_SAMPLER_STREAM]),
        clamp=float(sampling["probability_clamp"]),
    )

    if mode == "focal":
        aligned_grids = [spatial_align(grid, token_cones(grid, camera), alignment_net)
                         for grid, camera in zip(grids, scene.rig)]
    else:
        aligned_grids = list(grids)

    composed = [compose_key_value(grid, embed, mode) for grid, embed in zip(aligned_grids, embeddings)]
    keys_all = np.concatenate([keys for keys, _ in composed])
    values_all = np.concatenate([values for _, values in composed])
    sampled = quality_maps.sampled_indices
    keys = keys_all[sampled]
    values = values_all[sampled]

    logger.info("Decoding %d queries over %d of %d tokens", scene_config.num_queries, len(sampled), len(keys_all))
    queries = init_anchor_queries(scene_config.num_queries, scene_config.d_model, [weight_seed, 1],
                                  activation=model["activation"])
    weights = init_decoder_weights(scene_config.d_model, int(model["d_ff"]), scene_config.decoder_layers,
                                   class_count, [weight_seed, 2], activation=model["activation"])
    options = DecoderOptions(
        scale_attention=bool(model["scale_attention"]),
        self_attention=bool(model["self_attention"]),
        layer_norm=bool(model["layer_norm"]),
        center_offset_range=float(model["center_offset_range"]),
    )
    trace = decode(queries, keys, values, weights, roi, options)

    run = PipelineRun(
        scene=scene,
        scene_config=scene_config,
        config=config,
        mode=mode,
        score_source=score_source,
        truths=truths,
        grids=grids,
        aligned_grids=aligned_grids,
        embeddings=embeddings,
        keys_all=keys_all,
        values_all=values_all,
        quality_maps=quality_maps,
        keys=keys,
        values=values,
        trace=trace,
    )
    run.report = build_report(run)
    return run

#=============================================================================
# REPORT
#=============================================================================

def center_token_indices(truths, tokens_per_camera):
    """Flat indices of tokens that hold a visible object's 2.5D center."""
    indices = []
    for truth in truths:
        base = truth.camera_index * tokens_per_camera
        indices.extend(base + int(token) for token in np.flatnonzero(truth.targets.center_mask))
    return np.array(indices, dtype=np.int64)


def foreground_center_recall(truths, quality_maps, tokens_per_camera):
    """Fraction of center tokens that were sampled, or None when no center is on a grid."""
    centers = center_token_indices(truths, tokens_per_camera)
    if centers.size == 0:
        return None
    return float(quality_maps.sampled[centers].mean())


def layer_center_errors(run):
    """Mean matched center L1 distance (meters) per decoder layer."""
    objects = run.scene.objects
    if not objects:
        return [None] * run.trace.layer_count
    gt_centers = np.array([box.center for box in objects])
    gt_labels = [box.class_id for box in objects]
    roi = Roi3D(run.scene_config.roi_min, run.scene_config.roi_max)
    weights = MatchingWeights.from_config(run.config["matching"])
    errors = []
    for predictions in run.trace.predictions:
        costs = build_center_cost_matrix(
            predictions.centers, predictions.class_probabilities(), gt_centers, gt_labels, roi.extent, weights,
        )
        assignment = match_hungarian(costs)
        matched = predictions.centers[list(assignment.row_of_col)]
        errors.append(float(np.abs(matched - gt_centers).sum(axis=1).mean()))
    return errors


def prediction_dump(predictions):
    probabilities = predictions.class_probabilities()
    return [
        {
            "query": index,
            "center_meters": predictions.centers[index],
            "size_meters": predictions.sizes[index],
            "yaw_radians": predictions.yaws[index],
            "label": int(np.argmax(probabilities[index])),
            "score": float(np.max(probabilities[index])),
        }
        for index in range(predictions.centers.shape[0])
    ]


def build_report(run):
    """Deterministic JSON-ready summary of a run (no timestamps)."""
    scene_config = run.scene_config
    config = run.config
    maps = run.quality_maps
    tokens_per_camera = scene_config.tokens_per_camera
    sampled_per_camera = maps.sampled.reshape(scene_config.camera_count, tokens_per_camera).sum(axis=1)

    oracle_components, positives = auxiliary_components(
        run.truths, [oracle_predictions(truth) for truth in run.truths], scene_config, config,
    )
    loss_weights = LossWeights.from_config(config["losses"]["weights"])
    losses = config["losses"]
    all_iou = np.concatenate([truth.targets.iou for truth in run.truths])
    all_heatmap = np.concatenate([truth.targets.heatmap for truth in run.truths])
    quality_per_token, _ = quality_focal_loss(maps.quality, all_iou, float(losses["quality_beta"]))
    centerness_mean, _ = centerness_focal_loss(
        maps.centerness, all_heatmap, float(losses["centerness_alpha"]), float(losses["centerness_beta"]),
    )

    head = head_config_from_run(scene_config, config)
    sweep = ratio_sweep(head, config["cost_model"]["ratios"])
    center_errors = layer_center_errors(run)
    foreground = int(sum(truth.targets.foreground_mask.sum() for truth in run.truths))

    return {
        "scene_token": run.scene.scene_token,
        "seed": scene_config.seed,
        "mode": run.mode,
        "score_source": run.score_source,
        "sampling": {
            "alpha": scene_config.alpha,
            "ratio": scene_config.rho,
            "pooling": config["sampling"]["pooling"],
            "sampler": config["sampling"]["sampler"],
            "token_count": scene_config.token_count,
            "sampled_count": int(maps.sampled.sum()),
            "foreground_tokens": foreground,
            "foreground_fraction": foreground / scene_config.token_count,
            "foreground_center_recall": foreground_center_recall(run.truths, maps, tokens_per_camera),
        },
        "cameras": [
            {
                "camera": truth.camera_index,
                "visible_objects": truth.visible_count,
                "foreground_tokens": int(truth.targets.foreground_mask.sum()),
                "positive_tokens": truth.targets.positive_count,
                "sampled_tokens": int(sampled_per_camera[truth.camera_index]),
                "skipped_centers": truth.skipped_centers,
                "unmatched_objects": truth.unmatched_objects,
            }
            for truth in run.truths
        ],
        "layers": [
            {
                "layer": index,
                "attention_columns": int(attention.shape[1]),
                "attention_row_sum_max_error": float(np.max(np.abs(attention.sum(axis=1) - 1.0))),
                "mean_center_l1_meters": center_errors[index],
                "predictions": prediction_dump(predictions),
            }
            for index, (attention, predictions) in enumerate(zip(run.trace.attentions, run.trace.predictions))
        ],
        "losses": {
            "oracle_predictions": {
                "components": {
                    "quality": oracle_components.quality,
                    "center_offset": oracle_components.center_offset,
                    "giou": oracle_components.giou,
                    "ltrb": oracle_components.ltrb,
                    "centerness": oracle_components.centerness,
                },
                "positive_tokens": positives,
                "total": auxiliary_loss_total(oracle_components, loss_weights, positives),
            },
            "score_maps": {
                "quality_focal_sum": float(quality_per_token.sum()),
                "centerness_focal_mean": centerness_mean,
            },
        },
        "cost_model": {
            "convention": "1 MAC = 2 FLOPs; memory in bytes; deltas against ratio 1.0 of the same head",
            "head": {
                "num_queries": head.num_queries,
                "token_count": head.token_count,
                "d_model": head.d_model,
                "d_ff": head.d_ff,
                "layers": head.layers,
                "bytes_per_scalar": head.bytes_per_scalar,
            },
            "flops": decoder_flops(head),
            "memory": decoder_memory(head),
            "sweep": [asdict(row) for row in sweep],
            "published_residuals": published_residuals(),
        },
    }

#=============================================================================
# TABLES
#=============================================================================

def token_table_rows(run):
    """Rows camera,row,col,Q,C,P,sampled,H,y for every token."""
    scene_config = run.scene_config
    maps = run.quality_maps
    heatmap = np.concatenate([truth.targets.heatmap for truth in run.truths])
    iou = np.concatenate([truth.targets.iou for truth in run.truths])
    rows = []
    for index in range(scene_config.token_count):
        camera, token = divmod(index, scene_config.tokens_per_camera)
        row, col = divmod(token, scene_config.grid_width)
        rows.append((
            camera, row, col,
            float(maps.quality[index]), float(maps.centerness[index]), float(maps.priority[index]),
            int(maps.sampled[index]), float(heatmap[index]), float(iou[index]),
        ))
    return rows


TARGET_TABLE_COLUMNS = (
    "camera", "row", "col", "class_id", "l", "t", "r", "b", "H", "du", "dv", "center", "y", "positive",
)


def target_table_rows(truths, grid_width):
    rows = []
    for truth in truths:
        targets = truth.targets
        for token in range(targets.token_count):
            row, col = divmod(token, grid_width)
            rows.append((
                truth.camera_index, row, col, int(targets.class_ids[token]),
                *(float(x) for x in targets.ltrb[token]),
                float(targets.heatmap[token]),
                float(targets.offsets[token, 0]), float(targets.offsets[token, 1]),
                int(targets.center_mask[token]),
                float(targets.iou[token]),
                int(targets.positive_mask[token]),
            ))
    return rows
