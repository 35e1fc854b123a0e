"""Surface normals from depth maps, the angular supervision loss, and a
PNG encoding for visual inspection.

The depth gradient uses central differences wherever both neighbors are
valid and falls back to one-sided differences at borders or next to invalid
pixels; a pixel's output normal is valid only when the pixel itself is valid
and at least one finite difference exists in each direction.  Gradients are
in depth units per pixel; there is no camera-intrinsics deprojection.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from trifuse.tensor import Tensor, _wrap

UNIT_TOLERANCE = 1e-6


class EmptyOverlapError(ValueError):
    """Raised when a loss is requested over zero jointly valid pixels."""


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class DepthMap:
    """Per-pixel scalar depth (meters) with a validity mask.

    Valid pixels must hold finite, strictly positive depth.
    """

    depth: np.ndarray  # (H, W) float32
    valid: np.ndarray  # (H, W) bool

    def __post_init__(self):
        depth = np.ascontiguousarray(self.depth, dtype=np.float32)
        valid = np.ascontiguousarray(self.valid, dtype=bool)
        if depth.ndim != 2 or valid.shape != depth.shape:
            raise ValueError(f"depth {depth.shape} and valid {valid.shape} must be matching (H, W) arrays")
        held = depth[valid]
        if held.size and not (np.isfinite(held).all() and (held > 0).all()):
            raise ValueError("valid pixels must hold finite depth > 0")
        object.__setattr__(self, "depth", _freeze(depth))
        object.__setattr__(self, "valid", _freeze(valid))

    @property
    def height(self) -> int:
        return self.depth.shape[0]

    @property
    def width(self) -> int:
        return self.depth.shape[1]

    @classmethod
    def from_array(cls, depth) -> "DepthMap":
        """Build a map from raw values; non-finite or non-positive pixels become invalid."""
        depth = np.asarray(depth, dtype=np.float32)
        valid = np.isfinite(depth) & (depth > 0)
        return cls(depth, valid)

    def to_tensor(self) -> Tensor:
        """Rank-2 tensor with NaN marking invalid pixels."""
        out = self.depth.copy()
        out[~self.valid] = np.nan
        return _wrap(out)

    @classmethod
    def from_tensor(cls, t: Tensor) -> "DepthMap":
        if t.rank != 2:
            raise ValueError(f"depth tensor must be rank 2 (H, W), got shape {t.shape}")
        return cls.from_array(t.data)


@dataclass(frozen=True, eq=False)
class NormalMap:
    """Per-pixel unit 3-vector (n_u, n_v, n_z) with a validity mask.

    Every valid normal is unit length within 1e-6 and has n_z > 0.
    """

    normal: np.ndarray  # (3, H, W) float32
    valid: np.ndarray   # (H, W) bool

    def __post_init__(self):
        normal = np.ascontiguousarray(self.normal, dtype=np.float32)
        valid = np.ascontiguousarray(self.valid, dtype=bool)
        if normal.ndim != 3 or normal.shape[0] != 3 or valid.shape != normal.shape[1:]:
            raise ValueError(f"normal {normal.shape} must be (3, H, W) with valid {valid.shape} = (H, W)")
        held = normal[:, valid].astype(np.float64)
        if held.size:
            norms = np.sqrt((held * held).sum(axis=0))
            if np.abs(norms - 1.0).max() > UNIT_TOLERANCE:
                raise ValueError("valid normals must be unit length within 1e-6")
            if (held[2] <= 0).any():
                raise ValueError("valid normals must have n_z > 0")
        object.__setattr__(self, "normal", _freeze(normal))
        object.__setattr__(self, "valid", _freeze(valid))

    @property
    def height(self) -> int:
        return self.normal.shape[1]

    @property
    def width(self) -> int:
        return self.normal.shape[2]

    def to_tensor(self) -> Tensor:
        """Rank-3 (3, H, W) tensor with NaN in all channels of invalid pixels."""
        out = self.normal.copy()
        out[:, ~self.valid] = np.nan
        return _wrap(out)

    @classmethod
    def from_tensor(cls, t: Tensor) -> "NormalMap":
        if t.rank != 3 or t.shape[0] != 3:
            raise ValueError(f"normal tensor must be (3, H, W), got shape {t.shape}")
        arr = np.array(t.data)
        valid = np.isfinite(arr).all(axis=0)
        arr[:, ~valid] = 0.0
        return cls(arr, valid)


def _directional_diff(depth: np.ndarray, valid: np.ndarray, axis: int):
    """Finite difference along one axis.

    Returns (grad, has) where ``has`` marks pixels with at least one usable
    difference; invalid neighbors never contribute to the selected value.
    """
    minus_d = np.zeros_like(depth)
    minus_v = np.zeros_like(valid)
    plus_d = np.zeros_like(depth)
    plus_v = np.zeros_like(valid)
    if axis == 0:  # v, along height
        minus_d[1:, :] = depth[:-1, :]
        minus_v[1:, :] = valid[:-1, :]
        plus_d[:-1, :] = depth[1:, :]
        plus_v[:-1, :] = valid[1:, :]
    else:  # u, along width
        minus_d[:, 1:] = depth[:, :-1]
        minus_v[:, 1:] = valid[:, :-1]
        plus_d[:, :-1] = depth[:, 1:]
        plus_v[:, :-1] = valid[:, 1:]
    central = (plus_d - minus_d) * np.float32(0.5)
    forward = plus_d - depth
    backward = depth - minus_d
    grad = np.where(minus_v & plus_v, central, np.where(plus_v, forward, backward))
    has = minus_v | plus_v
    grad[~has] = 0.0
    return grad, has


def depth_to_normals(d: DepthMap) -> NormalMap:
    """Unit normals (dD/du, dD/dv, 1) / norm from per-pixel depth gradients."""
    du, has_u = _directional_diff(d.depth, d.valid, axis=1)
    dv, has_v = _directional_diff(d.depth, d.valid, axis=0)
    valid = d.valid & has_u & has_v

    n = np.stack([du, dv, np.ones_like(du)]).astype(np.float64)
    norm = np.sqrt((n * n).sum(axis=0, keepdims=True))
    n = (n / norm).astype(np.float32)
    n[:, ~valid] = 0.0
    return NormalMap(n, valid)


@dataclass(frozen=True, eq=False)
class AngularLossResult:
    """Angular error between two normal maps over their jointly valid pixels."""

    total: float   # sum of per-pixel angles, radians
    mean: float
    count: int
    per_pixel: np.ndarray  # (H, W) float32, NaN outside the joint mask

    def __post_init__(self):
        object.__setattr__(self, "per_pixel", _freeze(np.ascontiguousarray(self.per_pixel, dtype=np.float32)))


def angular_loss(pred: NormalMap, gt: NormalMap) -> AngularLossResult:
    """Sum over jointly valid pixels of the angle between the two normals.

    The angle is arccos of the clamped dot product, evaluated through the
    chord length (2 * arcsin(|a - b| / 2), identical for unit vectors): the
    dot of a stored unit vector with itself can land just below 1, and only
    the chord form keeps identical inputs at exactly zero and the result
    bitwise symmetric in its arguments.
    """
    if pred.normal.shape != gt.normal.shape:
        raise ValueError(f"normal maps disagree in shape: {pred.normal.shape} vs {gt.normal.shape}")
    joint = pred.valid & gt.valid
    count = int(joint.sum())
    if count == 0:
        raise EmptyOverlapError("no jointly valid pixels between the two normal maps")

    diff = pred.normal.astype(np.float64) - gt.normal.astype(np.float64)
    chord = np.sqrt(diff[0] * diff[0] + diff[1] * diff[1] + diff[2] * diff[2])
    theta = 2.0 * np.arcsin(np.clip(chord * 0.5, 0.0, 1.0))
    per_pixel = np.where(joint, theta, np.nan).astype(np.float32)
    total = float(theta[joint].sum())
    return AngularLossResult(total=total, mean=total / count, count=count, per_pixel=per_pixel)


def encode_normal_png(n: NormalMap) -> np.ndarray:
    """8-bit RGB image: channel = round((component + 1) / 2 * 255).

    Invalid pixels encode as (0, 0, 0); valid pixels can never collide with
    that value because n_z > 0 forces the blue channel to at least 128.
    """
    scaled = np.rint((n.normal.astype(np.float64) + 1.0) / 2.0 * 255.0)
    img = np.ascontiguousarray(np.clip(scaled, 0, 255).astype(np.uint8).transpose(1, 2, 0))
    img[~n.valid] = 0
    return img


def decode_normal_png(image: np.ndarray) -> NormalMap:
    """Invert :func:`encode_normal_png`, renormalizing to unit length.

    (0, 0, 0) pixels decode as invalid; so does any pixel whose decoded
    z-component is not positive, since no valid normal can encode that way.
    """
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
        raise ValueError(f"malformed normal image: expected (H, W, 3) uint8, got {image.shape} {image.dtype}")
    comp = image.astype(np.float64).transpose(2, 0, 1) / 255.0 * 2.0 - 1.0
    valid = image.any(axis=2)
    norm = np.sqrt((comp * comp).sum(axis=0, keepdims=True))
    norm[norm == 0] = 1.0
    comp = comp / norm
    valid &= comp[2] > 0
    out = comp.astype(np.float32)
    out[:, ~valid] = 0.0
    return NormalMap(out, valid)


def save_normal_png(path, n: NormalMap) -> None:
    from PIL import Image

    Image.fromarray(encode_normal_png(n), mode="RGB").save(path, format="PNG")


def load_normal_png(path) -> NormalMap:
    from PIL import Image

    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.uint8)
    return decode_normal_png(arr)
