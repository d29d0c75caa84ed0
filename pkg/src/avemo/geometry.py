"""Agent bounding boxes from BODY25 keypoints, context masking and body crops."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

N_JOINTS = 25

# Snap tolerance before outward rounding; keeps 30 + 0.1 * 20 from ceiling to 33.
_INT_SNAP = 1e-9


class Keypoint(NamedTuple):
    x: float
    y: float
    confidence: float


@dataclass(frozen=True)
class KeypointSet:
    """The 25 joints of one agent at one frame, stored as a (25, 3) array of x, y, conf."""

    joints: np.ndarray
    frame_index: int = 0

    def __post_init__(self):
        joints = np.asarray(self.joints, dtype=np.float64)
        if joints.shape != (N_JOINTS, 3):
            raise ValueError(f"expected ({N_JOINTS}, 3) joints, got {joints.shape}")
        if not np.all(np.isfinite(joints)):
            raise ValueError("keypoint coordinates must be finite")
        conf = joints[:, 2]
        if np.any((conf < 0) | (conf > 1)):
            raise ValueError("keypoint confidence must lie in [0, 1]")
        if self.frame_index < 0:
            raise ValueError("frame_index must be >= 0")
        joints.setflags(write=False)
        object.__setattr__(self, "joints", joints)

    @classmethod
    def from_flat(cls, values, frame_index: int = 0) -> "KeypointSet":
        """Build from the flat ``x1, y1, c1, ..., x25, y25, c25`` layout."""
        arr = np.asarray(values, dtype=np.float64)
        if arr.shape != (3 * N_JOINTS,):
            raise ValueError(f"expected {3 * N_JOINTS} values, got {arr.size}")
        return cls(arr.reshape(N_JOINTS, 3), frame_index)

    @classmethod
    def from_keypoints(cls, keypoints, frame_index: int = 0) -> "KeypointSet":
        return cls(np.array([tuple(k) for k in keypoints], dtype=np.float64), frame_index)

    def to_flat(self) -> list[float]:
        return [float(v) for v in self.joints.reshape(-1)]

    def __len__(self):
        return N_JOINTS

    def __getitem__(self, n: int) -> Keypoint:
        x, y, c = self.joints[n]
        return Keypoint(float(x), float(y), float(c))


@dataclass(frozen=True)
class BBox:
    """Half-open pixel box: rows ``[top, bottom)``, columns ``[left, right)``."""

    top: int
    bottom: int
    left: int
    right: int

    @property
    def height(self) -> int:
        return self.bottom - self.top

    @property
    def width(self) -> int:
        return self.right - self.left

    @property
    def area(self) -> int:
        return self.height * self.width

    def check_within(self, H: int, W: int) -> None:
        if not (0 <= self.top <= self.bottom <= H and 0 <= self.left <= self.right <= W):
            raise ValueError(f"{self} does not fit inside a {H}x{W} image")


@dataclass(frozen=True)
class ExpansionConfig:
    lambda_x: float = 0.1
    lambda_y: float = 0.25
    conf_threshold: float = 0.10

    def __post_init__(self):
        if self.lambda_x < 0 or self.lambda_y < 0:
            raise ValueError("expansion factors must be non-negative")
        if not 0.0 <= self.conf_threshold <= 1.0:
            raise ValueError("conf_threshold must lie in [0, 1]")


def _floor(v: float) -> int:
    r = round(v)
    return int(r) if abs(v - r) < _INT_SNAP else math.floor(v)


def _ceil(v: float) -> int:
    r = round(v)
    return int(r) if abs(v - r) < _INT_SNAP else math.ceil(v)


def compute_agent_bbox(
    kps: KeypointSet, H: int, W: int, cfg: ExpansionConfig = ExpansionConfig()
) -> Optional[BBox]:
    """Expanded, clipped bounding box of the confident joints, or None if none survive.

    Each side is pushed out by ``lambda * extent`` of the surviving joints,
    rounded outward to whole pixels and clipped to the image.
    """
    if H <= 0 or W <= 0:
        raise ValueError("image dimensions must be positive")
    joints = kps.joints
    keep = joints[joints[:, 2] >= cfg.conf_threshold]
    if keep.shape[0] == 0:
        return None
    xs, ys = keep[:, 0], keep[:, 1]
    x_min, x_max = float(xs.min()), float(xs.max())
    y_min, y_max = float(ys.min()), float(ys.max())
    e_x = cfg.lambda_x * (x_max - x_min)
    e_y = cfg.lambda_y * (y_max - y_min)

    top = min(max(0, _floor(y_min - e_y)), H)
    bottom = max(min(_ceil(y_max + e_y), H), top)
    left = min(max(0, _floor(x_min - e_x)), W)
    right = max(min(_ceil(x_max + e_x), W), left)
    return BBox(top=top, bottom=bottom, left=left, right=right)


def _check_image(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim not in (2, 3) or (img.ndim == 3 and img.shape[2] not in (1, 3)):
        raise ValueError(f"expected an HxW or HxWxC image with C in (1, 3), got {img.shape}")
    if img.shape[0] * img.shape[1] == 0:
        raise ValueError("empty image")
    return img


def mask_agent(img: np.ndarray, bbox: Optional[BBox]) -> np.ndarray:
    """Return a copy of ``img`` with every channel zeroed inside ``bbox``.

    ``None`` (no agent detected) leaves the image untouched.
    """
    img = _check_image(img)
    out = img.copy()
    if bbox is None:
        return out
    bbox.check_within(img.shape[0], img.shape[1])
    out[bbox.top:bbox.bottom, bbox.left:bbox.right] = 0
    return out


def crop_bounds(bbox: BBox, H: int, W: int) -> BBox:
    """Box actually used for cropping: zero-extent sides grow to one pixel, clamped inside."""
    top, bottom, left, right = bbox.top, bbox.bottom, bbox.left, bbox.right
    if bottom == top:
        top = min(top, H - 1)
        bottom = top + 1
    if right == left:
        left = min(left, W - 1)
        right = left + 1
    return BBox(top=top, bottom=bottom, left=left, right=right)


def crop_body(img: np.ndarray, bbox: Optional[BBox]) -> np.ndarray:
    """Sub-image inside ``bbox``; the whole image when no agent was found."""
    img = _check_image(img)
    if bbox is None:
        return img.copy()
    H, W = img.shape[:2]
    bbox.check_within(H, W)
    b = crop_bounds(bbox, H, W)
    return img[b.top:b.bottom, b.left:b.right].copy()


def read_png(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB")
        return np.asarray(im, dtype=np.uint8).copy()


def write_png(path, img: np.ndarray) -> None:
    from PIL import Image

    img = np.asarray(img, dtype=np.uint8)
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[:, :, 0]
    Image.fromarray(img).save(path, format="PNG")
