"""Run records, atomic JSON writes and 8-bit PNG I/O."""
from __future__ import annotations

import json
import os
import tempfile
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from PIL import Image

RECORD_FORMAT = "cri-run-v1"
METRIC_KEYS = ("perceptual", "mse", "psnr", "frechet", "observed_loss")


@dataclass
class RunRecord:
    run_id: str
    config: dict
    class_index: int
    spec: dict
    target: dict  # {"source": "synthetic"|"image", "seed"/"path", ...}
    centroid: dict  # {"index": k or None, "distances": [...]}
    trajectories: dict  # {"stage1": {...}, "stage2": {...}}
    best: dict  # best iterate / loss per stage
    metrics: dict
    artifacts: dict = field(default_factory=dict)
    locality_radius: float = float("nan")
    offset_norm: dict = field(default_factory=dict)
    extractor: dict = field(default_factory=dict)
    plan_hash: str | None = None
    timestamps: dict = field(default_factory=dict)
    wall_clock: dict = field(default_factory=dict)
    tool_version: str = ""
    backend: str = ""
    format: str = RECORD_FORMAT

    def to_json(self):
        return json.dumps(asdict(self), indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown run record field(s): {sorted(extra)}")
        return cls(**d)

    def save(self, path):
        return write_atomic(path, self.to_json())

    @classmethod
    def load(cls, path):
        return cls.from_json(Path(path).read_text())

    def metric_fields(self):
        return {k: self.metrics[k] for k in METRIC_KEYS if k in self.metrics}


def write_atomic(path, data):
    """Write text or bytes to a sibling temp file, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(data, (bytes, bytearray)) else "w"
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, mode) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def to_uint8(img):
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def save_png(path, img):
    """Save an ``(H, W, 3)`` [0, 1] image as 8-bit RGB PNG (atomically)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".png")
    os.close(fd)
    try:
        Image.fromarray(to_uint8(img), mode="RGB").save(tmp, format="PNG")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def load_png(path):
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def load_mask(path):
    """Binary observation mask from an image file: nonzero pixels are observed."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    return (arr > 0).astype(np.float64)


def trajectory_lists(traj):
    return {k: [float(v) for v in vals] for k, vals in traj.items()}
