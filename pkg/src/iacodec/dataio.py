"""Frame folders, fps subsampling, and CSV report writing."""

from __future__ import annotations

import csv
import math
import os

import numpy as np
from PIL import Image

_FRAME_EXTS = (".png", ".ppm")


def subsample_step(source_fps: float, target_fps: float) -> int:
    """Keep-every-k step whose resulting rate is nearest the target.

    Candidates are floor and ceil of source/target; exact ties go to the
    larger step (the lower frame rate).  Upsampling is not a thing here,
    the step is at least 1.
    """
    if source_fps <= 0 or target_fps <= 0:
        raise ValueError("subsample_step: frame rates must be positive")
    ratio = source_fps / target_fps
    lo = max(1, math.floor(ratio))
    hi = max(1, math.ceil(ratio))
    return min({lo, hi}, key=lambda k: (abs(source_fps / k - target_fps), -k))


def load_frame(path: str) -> np.ndarray:
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
    return arr.transpose(2, 0, 1)


def load_instance(folder: str, source_fps: float | None = None,
                  target_fps: float | None = None):
    """Load an instance set: sorted frames, optionally fps-subsampled.

    Returns (frames, names).  All frames must share one shape.
    """
    entries = sorted(e for e in os.listdir(folder)
                     if e.lower().endswith(_FRAME_EXTS))
    if not entries:
        raise ValueError(f"no frames (png/ppm) in {folder}")
    if (source_fps is None) != (target_fps is None):
        raise ValueError("give both frame rates or neither")
    if source_fps is not None:
        step = subsample_step(source_fps, target_fps)
        entries = entries[::step]
    frames = []
    for name in entries:
        frame = load_frame(os.path.join(folder, name))
        if frames and frame.shape != frames[0].shape:
            raise ValueError(
                f"frame {name} has shape {frame.shape}, expected "
                f"{frames[0].shape}")
        frames.append(frame)
    return frames, entries


def save_frame(path: str, frame: np.ndarray):
    arr = np.clip(frame, 0.0, 1.0)
    img = (arr * 255.0).round().astype(np.uint8).transpose(1, 2, 0)
    Image.fromarray(img).save(path)


def save_frames(folder: str, frames, prefix: str = "frame"):
    os.makedirs(folder, exist_ok=True)
    width = max(4, len(str(len(frames))))
    paths = []
    for i, frame in enumerate(frames):
        path = os.path.join(folder, f"{prefix}{i:0{width}d}.png")
        save_frame(path, frame)
        paths.append(path)
    return paths


def write_csv(path: str, rows, fieldnames=None):
    rows = list(rows)
    if not rows:
        raise ValueError("write_csv: nothing to write")
    if fieldnames is None:
        fieldnames = list(rows[0])
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fieldnames)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
