"""
Artifact Writer

Deterministic file outputs: JSON documents, CSV tables and 8-bit binary PGM
heat images with a sidecar note describing their scaling.
"""

import csv
import json
import logging
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

PGM_MAX_VALUE = 255

TOKEN_TABLE_COLUMNS = ("camera", "row", "col", "Q", "C", "P", "sampled", "H", "y")


def to_builtin(value):
    """Convert numpy scalars and arrays (recursively) to JSON-ready Python values."""
    if isinstance(value, dict):
        return {str(key): to_builtin(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_builtin(item) for item in value]
    if isinstance(value, np.ndarray):
        return to_builtin(value.tolist())
    if isinstance(value, np.bool_):
        return bool(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    return value


def dumps_json(data):
    return json.dumps(to_builtin(data), sort_keys=True, indent=2) + "\n"


def write_text(path, text):
    path = Path(path)
    if path.parent and not path.parent.exists():
        path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        f.write(text)
    return path


def write_json(path, data):
    return write_text(path, dumps_json(data))


def write_csv(path, columns, rows):
    """Write a header row and data rows; floats use repr so values survive a round trip."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([repr(float(cell)) if isinstance(cell, (float, np.floating)) else cell for cell in row])
    return path

#=============================================================================
# PGM IMAGES
#=============================================================================

def pgm_bytes(values):
    """
    Encode a non-negative 2-D array as binary PGM (P5, maxval 255).

    Pixels are round(255 * value / max(values)); an all-zero array stays black.

    Returns:
        tuple: (encoded bytes, max value used for scaling)
    """
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise ValueError(f"PGM image must be 2-D, got shape {values.shape}")
    values = np.clip(values, 0.0, None)
    peak = float(values.max()) if values.size else 0.0
    if peak > 0.0:
        pixels = np.rint(PGM_MAX_VALUE * values / peak)
    else:
        pixels = np.zeros_like(values)
    pixels = np.clip(pixels, 0, PGM_MAX_VALUE).astype(np.uint8)
    height, width = pixels.shape
    header = f"P5\n{width} {height}\n{PGM_MAX_VALUE}\n".encode("ascii")
    return header + pixels.tobytes(), peak


def write_pgm(path, values, description):
    """Write a PGM heat image plus a .txt sidecar noting its max-normalized scaling."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data, peak = pgm_bytes(values)
    with open(path, "wb") as f:
        f.write(data)
    sidecar = path.with_suffix(".txt")
    write_text(sidecar, (
        f"image: {path.name}\n"
        f"content: {description}\n"
        f"shape: {np.asarray(values).shape[0]} rows x {np.asarray(values).shape[1]} cols\n"
        f"scaling: pixel = round({PGM_MAX_VALUE} * value / max_value)\n"
        f"max_value: {peak!r}\n"
    ))
    logger.debug("Wrote %s (max %.6g)", path, peak)
    return path
