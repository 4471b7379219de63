"""Linear degradation operators D(.) and their adjoints.

All operators act on ``(H, W, 3)`` float arrays. Because each one is linear,
back-propagating through it is just applying the adjoint.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidSpecError

LUMA = np.array([0.299, 0.587, 0.114])
KINDS = ("mask", "grayscale", "downsample", "identity")
TASK_KINDS = {"inpaint": "mask", "colorize": "grayscale", "sr": "downsample", "identity": "identity"}


@dataclass(frozen=True, eq=False)
class DegradationSpec:
    kind: str
    mask: np.ndarray | None = field(default=None, repr=False)
    scale: int | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidSpecError(f"unknown degradation kind {self.kind!r}")
        if (self.mask is not None) != (self.kind == "mask"):
            raise InvalidSpecError("mask must be given exactly when kind='mask'")
        if (self.scale is not None) != (self.kind == "downsample"):
            raise InvalidSpecError("scale must be given exactly when kind='downsample'")
        if self.scale is not None and (int(self.scale) != self.scale or self.scale < 1):
            raise InvalidSpecError(f"scale must be a positive integer, got {self.scale!r}")
        if self.mask is not None:
            m = np.asarray(self.mask, dtype=np.float64)
            if m.ndim != 2 or not np.all((m == 0) | (m == 1)):
                raise InvalidSpecError("mask must be a binary H x W array")
            object.__setattr__(self, "mask", m)

    def __eq__(self, other):
        if not isinstance(other, DegradationSpec):
            return NotImplemented
        same_mask = (self.mask is None and other.mask is None) or (
            self.mask is not None and other.mask is not None and np.array_equal(self.mask, other.mask)
        )
        return self.kind == other.kind and self.scale == other.scale and same_mask

    def validate_for(self, shape):
        h, w = shape[:2]
        if len(shape) != 3 or shape[2] != 3:
            raise InvalidSpecError(f"expected an H x W x 3 image, got shape {shape}")
        if self.kind == "mask" and self.mask.shape != (h, w):
            raise InvalidSpecError(f"mask shape {self.mask.shape} does not match image {(h, w)}")
        if self.kind == "downsample" and (h % self.scale or w % self.scale):
            raise InvalidSpecError(f"scale {self.scale} does not divide image size {(h, w)}")

    def output_shape(self, shape):
        if self.kind == "downsample":
            return (shape[0] // self.scale, shape[1] // self.scale, 3)
        return tuple(shape)

    def to_dict(self):
        d = {"kind": self.kind}
        if self.scale is not None:
            d["scale"] = int(self.scale)
        if self.mask is not None:
            d["mask_rows"] = ["".join("1" if v else "0" for v in row) for row in self.mask]
        return d

    @classmethod
    def from_dict(cls, d):
        mask = d.get("mask_rows")
        if mask is not None:
            mask = np.array([[c == "1" for c in row] for row in mask], dtype=np.float64)
        return cls(kind=d["kind"], mask=mask, scale=d.get("scale"))


def center_mask(h, w, fraction=0.25):
    """Binary mask (1 = observed) with a centred hole covering ``fraction`` of the area."""
    side = np.sqrt(fraction)
    mh, mw = int(round(h * side)), int(round(w * side))
    top, left = (h - mh) // 2, (w - mw) // 2
    m = np.ones((h, w))
    m[top:top + mh, left:left + mw] = 0.0
    return m


def spec_for_task(task, resolution, scale=4, mask=None, mask_fraction=0.25):
    """Build the spec for a task name (``inpaint``, ``colorize``, ``sr``, ``identity``)."""
    if task not in TASK_KINDS:
        raise InvalidSpecError(f"unknown task {task!r}; expected one of {sorted(TASK_KINDS)}")
    kind = TASK_KINDS[task]
    if kind == "mask":
        return DegradationSpec("mask", mask=center_mask(resolution, resolution, mask_fraction) if mask is None else mask)
    if kind == "downsample":
        return DegradationSpec("downsample", scale=int(scale))
    return DegradationSpec(kind)


def apply(spec: DegradationSpec, img):
    img = np.asarray(img, dtype=np.float64)
    spec.validate_for(img.shape)
    if spec.kind == "mask":
        return img * spec.mask[:, :, None]
    if spec.kind == "grayscale":
        # same linear map as img @ LUMA, arranged so a gray pixel maps to itself exactly
        r, g, b = img[:, :, 0], img[:, :, 1], img[:, :, 2]
        y = g + LUMA[0] * (r - g) + LUMA[2] * (b - g)
        return np.repeat(y[:, :, None], 3, axis=2)
    if spec.kind == "downsample":
        s = spec.scale
        h, w, c = img.shape
        return img.reshape(h // s, s, w // s, s, c).mean(axis=(1, 3))
    return img.copy()


def adjoint(spec: DegradationSpec, grad, full_shape):
    """Apply D^T to ``grad`` (shaped like the degraded image)."""
    grad = np.asarray(grad, dtype=np.float64)
    if spec.kind == "mask":
        return grad * spec.mask[:, :, None]
    if spec.kind == "grayscale":
        s = grad.sum(axis=2)
        return np.stack([LUMA[0] * s, (1.0 - LUMA[0] - LUMA[2]) * s, LUMA[2] * s], axis=2)
    if spec.kind == "downsample":
        s = spec.scale
        up = np.repeat(np.repeat(grad, s, axis=0), s, axis=1)
        return up / (s * s)
    return grad.copy()


def adjoint_check(spec, img, perturbation, eps=1e-3):
    """Linearity residual ``|D(x + eps p) - D(x) - eps D(p)| / eps`` (max norm)."""
    lhs = apply(spec, img + eps * perturbation) - apply(spec, img)
    rhs = eps * apply(spec, perturbation)
    return float(np.max(np.abs(lhs - rhs)) / eps)
