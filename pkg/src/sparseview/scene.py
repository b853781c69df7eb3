"""Core domain types: cameras, rasters, Gaussian clouds, datasets.

Conventions (asserted by tests):
  * world-to-camera pose with +Z forward,
  * image origin top-left, pixel (row i, col j) centered at (j + 0.5, i + 0.5),
  * depth means camera-space Z,
  * non-positive values in a depth raster mark invalid pixels.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .errors import GeometryError

ROTATION_TOL = 1e-6
QUAT_TOL = 1e-6
MIN_DEPTH = 1e-8


def sigmoid(x: np.ndarray | float) -> np.ndarray | float:
    return 1.0 / (1.0 + np.exp(-x))


def inverse_sigmoid(y: np.ndarray | float) -> np.ndarray | float:
    return np.log(y) - np.log1p(-y)


@dataclass
class Camera:
    """Pinhole camera with a world-to-camera rigid pose."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray  # (3, 3) world-to-camera
    translation: np.ndarray  # (3,)

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        self.validate()

    def validate(self) -> None:
        if not (self.fx > 0 and self.fy > 0):
            raise GeometryError(f"focal lengths must be positive, got fx={self.fx} fy={self.fy}")
        if self.width < 1 or self.height < 1:
            raise GeometryError(f"image size must be >= 1, got {self.width}x{self.height}")
        R = self.rotation
        if not np.allclose(R @ R.T, np.eye(3), atol=ROTATION_TOL):
            raise GeometryError("rotation not orthonormal")
        if np.linalg.det(R) < 0:
            raise GeometryError("rotation not special-orthogonal")

    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        return pts @ self.rotation.T + self.translation


def project_point(camera: Camera, p: np.ndarray) -> tuple[float, float, float]:
    """Project a world point to pixel coordinates plus camera-space depth.

    Raises:
        GeometryError: if the point lies at or behind the camera plane.
    """
    pc = camera.rotation @ np.asarray(p, dtype=np.float64).reshape(3) + camera.translation
    x, y, z = pc
    if z <= MIN_DEPTH:
        raise GeometryError(f"point behind camera (z={z:.3e})")
    u = camera.fx * x / z + camera.cx
    v = camera.fy * y / z + camera.cy
    return float(u), float(v), float(z)


def unproject_pixel(camera: Camera, u: float, v: float, depth: float) -> np.ndarray:
    """World point at the given camera-space depth along the ray through (u, v)."""
    if depth <= 0:
        raise GeometryError(f"depth must be positive, got {depth}")
    pc = np.array(
        [
            (u - camera.cx) / camera.fx * depth,
            (v - camera.cy) / camera.fy * depth,
            depth,
        ]
    )
    return camera.rotation.T @ (pc - camera.translation)


def unproject_grid(camera: Camera, depth: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Unproject every valid pixel center of a depth raster. Returns (K, 3) world points."""
    ii, jj = np.nonzero(valid)
    z = depth[ii, jj]
    u = jj + 0.5
    v = ii + 0.5
    pc = np.stack(
        [(u - camera.cx) / camera.fx * z, (v - camera.cy) / camera.fy * z, z], axis=1
    )
    return (pc - camera.translation) @ camera.rotation


@dataclass
class ImageRGB:
    """Row-major RGB raster with channels in [0, 1]."""

    pixels: np.ndarray  # (H, W, 3) float64

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ValueError(f"expected (H, W, 3) pixels, got {self.pixels.shape}")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def validate(self) -> None:
        if not np.isfinite(self.pixels).all():
            raise ValueError("image has non-finite channel values")
        if self.pixels.min() < 0 or self.pixels.max() > 1:
            raise ValueError("image channels outside [0, 1]")


@dataclass
class DepthMap:
    """Metric depth raster; values <= 0 mark invalid pixels."""

    values: np.ndarray  # (H, W) float64

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError(f"expected (H, W) depth, got {self.values.shape}")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def valid(self) -> np.ndarray:
        return self.values > 0

    def validate(self) -> None:
        if not np.isfinite(self.values).all():
            raise ValueError("depth map has non-finite values")


@dataclass
class ConfidenceMap:
    """Per-pixel confidence in [0, 1]."""

    values: np.ndarray  # (H, W) float64

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError(f"expected (H, W) confidence, got {self.values.shape}")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def validate(self) -> None:
        if not np.isfinite(self.values).all():
            raise ValueError("confidence map has non-finite values")
        if self.values.min() < 0 or self.values.max() > 1:
            raise ValueError("confidence values outside [0, 1]")

    def threshold(self, level: float) -> "BinaryMask":
        return BinaryMask(self.values >= level)


@dataclass
class BinaryMask:
    """One bit per pixel."""

    bits: np.ndarray  # (H, W) bool

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=bool)
        if self.bits.ndim != 2:
            raise ValueError(f"expected (H, W) mask, got {self.bits.shape}")

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    def count(self) -> int:
        return int(self.bits.sum())


# Source tags for Gaussians.
SOURCE_INPUT_VIEW = 0
SOURCE_INPAINT = 1


@dataclass
class GaussianCloud:
    """Optimizable scene representation as per-Gaussian parameter arrays.

    Opacity is stored pre-activation; the activated value sigmoid(opacity_raw)
    lies in (0, 1). Scales are positive extents in scene units. Rotations are
    unit quaternions in (w, x, y, z) order.
    """

    position: np.ndarray  # (N, 3)
    opacity_raw: np.ndarray  # (N,)
    scale: np.ndarray  # (N, 3)
    rotation: np.ndarray  # (N, 4) unit quaternion, wxyz
    color: np.ndarray  # (N, 3) in [0, 1]
    source_kind: np.ndarray  # (N,) int8, SOURCE_* constants
    source_view: np.ndarray  # (N,) int32 originating view index
    source_pixel: np.ndarray  # (N,) int64 row-major pixel in the source view

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64).reshape(-1, 3)
        n = self.position.shape[0]
        self.opacity_raw = np.asarray(self.opacity_raw, dtype=np.float64).reshape(n)
        self.scale = np.asarray(self.scale, dtype=np.float64).reshape(n, 3)
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(n, 4)
        self.color = np.asarray(self.color, dtype=np.float64).reshape(n, 3)
        self.source_kind = np.asarray(self.source_kind, dtype=np.int8).reshape(n)
        self.source_view = np.asarray(self.source_view, dtype=np.int32).reshape(n)
        self.source_pixel = np.asarray(self.source_pixel, dtype=np.int64).reshape(n)

    def __len__(self) -> int:
        return self.position.shape[0]

    @property
    def opacity(self) -> np.ndarray:
        """Activated opacity in (0, 1)."""
        return sigmoid(self.opacity_raw)

    @classmethod
    def empty(cls) -> "GaussianCloud":
        return cls(
            position=np.empty((0, 3)),
            opacity_raw=np.empty(0),
            scale=np.empty((0, 3)),
            rotation=np.empty((0, 4)),
            color=np.empty((0, 3)),
            source_kind=np.empty(0, dtype=np.int8),
            source_view=np.empty(0, dtype=np.int32),
            source_pixel=np.empty(0, dtype=np.int64),
        )

    @classmethod
    def concatenate(cls, clouds: list["GaussianCloud"]) -> "GaussianCloud":
        if not clouds:
            return cls.empty()
        return cls(
            position=np.concatenate([c.position for c in clouds]),
            opacity_raw=np.concatenate([c.opacity_raw for c in clouds]),
            scale=np.concatenate([c.scale for c in clouds]),
            rotation=np.concatenate([c.rotation for c in clouds]),
            color=np.concatenate([c.color for c in clouds]),
            source_kind=np.concatenate([c.source_kind for c in clouds]),
            source_view=np.concatenate([c.source_view for c in clouds]),
            source_pixel=np.concatenate([c.source_pixel for c in clouds]),
        )

    def copy(self) -> "GaussianCloud":
        return GaussianCloud(
            position=self.position.copy(),
            opacity_raw=self.opacity_raw.copy(),
            scale=self.scale.copy(),
            rotation=self.rotation.copy(),
            color=self.color.copy(),
            source_kind=self.source_kind.copy(),
            source_view=self.source_view.copy(),
            source_pixel=self.source_pixel.copy(),
        )

    def validate(self) -> None:
        if not np.isfinite(self.position).all():
            raise ValueError("cloud has non-finite positions")
        if not np.isfinite(self.opacity_raw).all():
            raise ValueError("cloud has non-finite pre-activation opacities")
        if len(self) and self.scale.min() <= 0:
            raise ValueError("cloud has non-positive scales")
        norms = np.linalg.norm(self.rotation, axis=1)
        if len(self) and np.abs(norms - 1.0).max() > QUAT_TOL:
            raise ValueError("cloud has non-unit quaternions")
        if len(self) and (self.color.min() < 0 or self.color.max() > 1):
            raise ValueError("cloud colors outside [0, 1]")


@dataclass
class View:
    """One input view: camera, image, and its depth/confidence rasters."""

    camera: Camera
    image: ImageRGB
    mvs_depth: DepthMap
    mvs_confidence: ConfidenceMap
    mono_depth: DepthMap


@dataclass
class SceneDataset:
    """A sparse capture: N >= 2 posed views with MVS and monocular depth."""

    views: list[View]
    config: dict[str, Any] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.views)

    @property
    def cameras(self) -> list[Camera]:
        return [v.camera for v in self.views]

    def validate(self) -> None:
        if len(self.views) < 2:
            raise ValueError(f"dataset needs at least 2 views, got {len(self.views)}")
        for i, view in enumerate(self.views):
            cam = view.camera
            for name, raster in (
                ("image", view.image),
                ("mvs_depth", view.mvs_depth),
                ("mvs_confidence", view.mvs_confidence),
                ("mono_depth", view.mono_depth),
            ):
                if raster.height != cam.height or raster.width != cam.width:
                    raise ValueError(
                        f"view {i} {name} is {raster.width}x{raster.height}, "
                        f"camera expects {cam.width}x{cam.height}"
                    )
