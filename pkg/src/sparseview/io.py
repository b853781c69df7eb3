"""Dataset directory I/O: cameras.json, 8-bit PNG images, PFM float rasters.

Directory layout:
    cameras.json              array of {fx,fy,cx,cy,width,height,R:[9],t:[3]}
    images/view_%03d.png      8-bit RGB
    depth_mvs/view_%03d.pfm   MVS depth (any resolution; upsampled on load)
    conf_mvs/view_%03d.pfm    MVS confidence
    depth_mono/view_%03d.pfm  monocular depth
    scene.json                optional free-form scene config

PFM files are little-endian grayscale portable float maps with bottom-up
scanline order.
"""

from __future__ import annotations

import json
import logging
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DatasetError
from .scene import (
    BinaryMask,
    Camera,
    ConfidenceMap,
    DepthMap,
    GeometryError,
    ImageRGB,
    SceneDataset,
    View,
)

logger = logging.getLogger(__name__)


def read_pfm(path: str | Path) -> np.ndarray:
    """Read a grayscale PFM file into a (H, W) float64 array (top-down rows)."""
    path = Path(path)
    with open(path, "rb") as f:
        header = f.readline().rstrip()
        if header == b"Pf":
            channels = 1
        elif header == b"PF":
            channels = 3
        else:
            raise DatasetError("not a PFM file", file=str(path), field="header")
        dims = f.readline().split()
        if len(dims) != 2:
            raise DatasetError("malformed PFM dimensions", file=str(path), field="dims")
        width, height = int(dims[0]), int(dims[1])
        scale = float(f.readline().strip())
        endian = "<" if scale < 0 else ">"
        data = np.frombuffer(f.read(width * height * channels * 4), dtype=endian + "f4")
        if data.size != width * height * channels:
            raise DatasetError("truncated PFM payload", file=str(path), field="data")
    shape = (height, width) if channels == 1 else (height, width, 3)
    arr = data.reshape(shape)
    # PFM stores scanlines bottom-up.
    arr = np.flipud(arr)
    if channels == 3:
        arr = arr.mean(axis=2)
    return np.ascontiguousarray(arr, dtype=np.float64)


def write_pfm(path: str | Path, values: np.ndarray) -> None:
    """Write a (H, W) array as a little-endian grayscale PFM."""
    arr = np.asarray(values, dtype=np.float32)
    if arr.ndim != 2:
        raise ValueError(f"expected (H, W) array, got {arr.shape}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(b"Pf\n")
        f.write(f"{arr.shape[1]} {arr.shape[0]}\n".encode())
        f.write(b"-1.0\n")
        f.write(np.flipud(arr).astype("<f4").tobytes())


def read_image(path: str | Path) -> ImageRGB:
    """Read an 8-bit RGB PNG into channels in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return ImageRGB(arr)


def write_image(path: str | Path, image: ImageRGB | np.ndarray) -> None:
    """Write an RGB raster in [0, 1] as an 8-bit PNG."""
    pixels = image.pixels if isinstance(image, ImageRGB) else np.asarray(image)
    quantized = np.clip(np.rint(pixels * 255.0), 0, 255).astype(np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(quantized, mode="RGB").save(path)


def write_mask(path: str | Path, mask: BinaryMask) -> None:
    """Write a binary mask as an 8-bit grayscale PNG (255 = set)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.where(mask.bits, 255, 0).astype(np.uint8), mode="L").save(path)


def read_mask(path: str | Path) -> BinaryMask:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    return BinaryMask(arr >= 128)


def resize_bilinear(values: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resample of a (H, W) array to the requested size."""
    src = Image.fromarray(np.asarray(values, dtype=np.float32), mode="F")
    out = src.resize((width, height), resample=Image.BILINEAR)
    return np.asarray(out, dtype=np.float64)


def _load_camera(entry: dict, index: int, path: Path) -> Camera:
    required = ("fx", "fy", "cx", "cy", "width", "height", "R", "t")
    for key in required:
        if key not in entry:
            raise DatasetError(
                f"camera {index} missing key '{key}'", file=str(path), field=key
            )
    try:
        return Camera(
            fx=float(entry["fx"]),
            fy=float(entry["fy"]),
            cx=float(entry["cx"]),
            cy=float(entry["cy"]),
            width=int(entry["width"]),
            height=int(entry["height"]),
            rotation=np.array(entry["R"], dtype=np.float64).reshape(3, 3),
            translation=np.array(entry["t"], dtype=np.float64),
        )
    except GeometryError as exc:
        raise DatasetError(
            f"camera {index}: {exc}", file=str(path), field=f"cameras[{index}]"
        ) from exc


def _load_raster(path: Path, view: int, cam: Camera, *, exact_size: bool) -> np.ndarray:
    if not path.exists():
        raise DatasetError("missing file", file=str(path), field=f"view {view}")
    arr = read_pfm(path)
    if arr.shape != (cam.height, cam.width):
        if exact_size:
            raise DatasetError(
                f"view {view}: raster is {arr.shape[1]}x{arr.shape[0]}, "
                f"camera expects {cam.width}x{cam.height}",
                file=str(path),
                field="dimensions",
            )
        arr = resize_bilinear(arr, cam.height, cam.width)
    return arr


def _sanitize_depth(arr: np.ndarray) -> np.ndarray:
    # Non-finite entries are normalized to the invalid sentinel.
    out = arr.copy()
    out[~np.isfinite(out)] = 0.0
    out[out < 0] = 0.0
    return out


def _sanitize_confidence(arr: np.ndarray, path: Path) -> np.ndarray:
    out = arr.copy()
    out[~np.isfinite(out)] = 0.0
    lo, hi = out.min(), out.max()
    if lo < 0 or hi > 1:
        # Raw (e.g. unbounded MVS) confidences are min-max normalized.
        logger.info("normalizing confidence range [%.3g, %.3g] in %s", lo, hi, path)
        span = hi - lo
        out = (out - lo) / span if span > 0 else np.zeros_like(out)
    return out


def load_dataset(root_path: str | Path, *, strict_mvs_size: bool = False) -> SceneDataset:
    """Load and validate a dataset directory.

    MVS depth/confidence rasters at a lower resolution than the camera are
    bilinearly upsampled to image resolution. Set ``strict_mvs_size`` to make
    any size mismatch an error instead.

    Raises:
        DatasetError: missing files, dimension mismatches, invalid cameras or
            rasters; the message names the offending file and field.
    """
    root = Path(root_path)
    cameras_path = root / "cameras.json"
    if not cameras_path.exists():
        raise DatasetError("missing file", file=str(cameras_path), field="cameras")
    try:
        entries = json.loads(cameras_path.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(f"malformed JSON: {exc}", file=str(cameras_path)) from exc
    if not isinstance(entries, list) or len(entries) < 2:
        raise DatasetError(
            "cameras.json must hold an array of at least 2 cameras",
            file=str(cameras_path),
            field="length",
        )

    views = []
    for i, entry in enumerate(entries):
        cam = _load_camera(entry, i, cameras_path)
        image_path = root / "images" / f"view_{i:03d}.png"
        if not image_path.exists():
            raise DatasetError("missing file", file=str(image_path), field=f"view {i}")
        image = read_image(image_path)
        if (image.height, image.width) != (cam.height, cam.width):
            raise DatasetError(
                f"view {i}: image is {image.width}x{image.height}, "
                f"camera expects {cam.width}x{cam.height}",
                file=str(image_path),
                field="dimensions",
            )

        mvs_path = root / "depth_mvs" / f"view_{i:03d}.pfm"
        conf_path = root / "conf_mvs" / f"view_{i:03d}.pfm"
        mono_path = root / "depth_mono" / f"view_{i:03d}.pfm"
        mvs = _sanitize_depth(_load_raster(mvs_path, i, cam, exact_size=strict_mvs_size))
        conf = _sanitize_confidence(
            _load_raster(conf_path, i, cam, exact_size=strict_mvs_size), conf_path
        )
        mono_raw = _load_raster(mono_path, i, cam, exact_size=True)
        mono = _sanitize_depth(mono_raw)

        view = View(
            camera=cam,
            image=image,
            mvs_depth=DepthMap(mvs),
            mvs_confidence=ConfidenceMap(conf),
            mono_depth=DepthMap(mono),
        )
        view.image.validate()
        view.mvs_depth.validate()
        view.mvs_confidence.validate()
        view.mono_depth.validate()
        views.append(view)

    config = {}
    scene_json = root / "scene.json"
    if scene_json.exists():
        config = json.loads(scene_json.read_text())

    dataset = SceneDataset(views=views, config=config)
    dataset.validate()
    return dataset


def save_dataset(dataset: SceneDataset, root_path: str | Path) -> None:
    """Write a dataset back out in the canonical directory layout."""
    root = Path(root_path)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for view in dataset.views:
        cam = view.camera
        entries.append(
            {
                "fx": cam.fx,
                "fy": cam.fy,
                "cx": cam.cx,
                "cy": cam.cy,
                "width": cam.width,
                "height": cam.height,
                "R": cam.rotation.reshape(9).tolist(),
                "t": cam.translation.tolist(),
            }
        )
    (root / "cameras.json").write_text(json.dumps(entries, indent=1))
    for i, view in enumerate(dataset.views):
        write_image(root / "images" / f"view_{i:03d}.png", view.image)
        write_pfm(root / "depth_mvs" / f"view_{i:03d}.pfm", view.mvs_depth.values)
        write_pfm(root / "conf_mvs" / f"view_{i:03d}.pfm", view.mvs_confidence.values)
        write_pfm(root / "depth_mono" / f"view_{i:03d}.pfm", view.mono_depth.values)
    if dataset.config:
        (root / "scene.json").write_text(json.dumps(dataset.config, indent=1))
