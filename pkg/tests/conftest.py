"""Shared fixtures: synthetic ground-truth scenes and dataset builders.

The standing scene is a 360-degree room: a foreground cluster at the origin
surrounded by a ring wall of large Gaussians. Input cameras sit on a circle
looking inward; every frustum ends on wall, so rendered depth is dense.
For missing-region tests the perturbed starting cloud drops a wall chunk
outside every input frustum.
"""

from __future__ import annotations

import numpy as np
import pytest

from sparseview.fusion import harmonic_fill
from sparseview.io import save_dataset
from sparseview.renderer import render
from sparseview.scene import (
    Camera,
    ConfidenceMap,
    DepthMap,
    GaussianCloud,
    ImageRGB,
    SceneDataset,
    View,
)

GT_BACKGROUND = (0.0, 0.0, 0.0)
GT_SEED = 11
N_FORE = 8
N_BACK = 12
WALL_RADIUS = 8.0
INPUT_ANGLES = (0.0, np.radians(40.0), np.radians(80.0))
HELDOUT_ANGLE = np.radians(20.0)
DROPPED_WALL_DEG = (290.0, 345.0)
DIM_OPACITY_RAW = -3.0


def random_cloud(rng: np.random.Generator, n: int, *, z_center: float = 2.5) -> GaussianCloud:
    """A generic random cloud in front of an identity camera."""
    rotation = rng.normal(0, 1, (n, 4))
    rotation /= np.linalg.norm(rotation, axis=1, keepdims=True)
    return GaussianCloud(
        position=rng.normal(0, 0.4, (n, 3)) + np.array([0, 0, z_center]),
        opacity_raw=rng.normal(0.0, 0.8, n),
        scale=np.exp(rng.normal(np.log(0.15), 0.3, (n, 3))),
        rotation=rotation,
        color=rng.uniform(0.05, 0.95, (n, 3)),
        source_kind=np.zeros(n, dtype=np.int8),
        source_view=np.zeros(n, dtype=np.int32),
        source_pixel=np.zeros(n, dtype=np.int64),
    )


def identity_camera(width: int = 16, height: int = 12, fx: float = 20.0, fy: float = 22.0) -> Camera:
    return Camera(
        fx=fx, fy=fy, cx=width / 2, cy=height / 2, width=width, height=height,
        rotation=np.eye(3), translation=np.zeros(3),
    )


def ring_camera(angle: float, *, radius: float = 4.0, size: int = 64, focal: float = 60.0) -> Camera:
    """Camera on a circle in the world x-y plane looking at the origin."""
    from sparseview.pipeline import look_at_camera

    position = np.array([radius * np.cos(angle), radius * np.sin(angle), 0.0])
    intr = Camera(
        fx=focal, fy=focal, cx=size / 2, cy=size / 2, width=size, height=size,
        rotation=np.eye(3), translation=np.zeros(3),
    )
    return look_at_camera(position, np.zeros(3), np.array([0.0, 0.0, 1.0]), intr)


def make_gt_scene(seed: int = GT_SEED) -> tuple[GaussianCloud, np.ndarray]:
    """20-Gaussian ground truth: foreground cluster plus a ring wall.

    Returns the cloud and the wall angles in degrees (for chunk dropping).
    """
    rng = np.random.default_rng(seed)
    fore_pos = rng.normal(0, 0.5, (N_FORE, 3)) * np.array([1.0, 1.0, 0.55])
    angles = np.linspace(0.0, 2 * np.pi, N_BACK, endpoint=False)
    back_pos = np.stack(
        [WALL_RADIUS * np.cos(angles), WALL_RADIUS * np.sin(angles), rng.normal(0, 0.4, N_BACK)],
        axis=1,
    )
    n = N_FORE + N_BACK
    rotation = rng.normal(0, 1, (n, 4))
    rotation /= np.linalg.norm(rotation, axis=1, keepdims=True)
    fore_scale = np.exp(rng.normal(np.log(0.25), 0.2, (N_FORE, 3)))
    # Wall pieces are wide and tall so every frustum ends on wall.
    back_scale = np.column_stack(
        [np.full(N_BACK, 2.1), np.full(N_BACK, 2.1), np.full(N_BACK, 3.2)]
    ) * np.exp(rng.normal(0, 0.08, (N_BACK, 3)))
    cloud = GaussianCloud(
        position=np.concatenate([fore_pos, back_pos]),
        opacity_raw=np.full(n, 4.5),
        scale=np.concatenate([fore_scale, back_scale]),
        rotation=rotation,
        color=rng.uniform(0.15, 0.95, (n, 3)),
        source_kind=np.zeros(n, dtype=np.int8),
        source_view=np.zeros(n, dtype=np.int32),
        source_pixel=np.zeros(n, dtype=np.int64),
    )
    return cloud, np.degrees(angles)


def gt_view(gt: GaussianCloud, camera: Camera, *, mono_affine=(0.8, 0.3)) -> View:
    """Render a ground-truth view into a dataset View with derived rasters.

    The rendered depth doubles as the MVS estimate (confidence from the
    accumulated opacity); the monocular estimate is a densified affine
    transform of it, exercising the alignment step.
    """
    out = render(gt, camera, GT_BACKGROUND)
    depth = out.depth.values.copy()
    conf = np.clip(out.alpha, 0.0, 1.0)
    dense = harmonic_fill(depth, depth <= 0) if (depth <= 0).any() else depth
    a, b = mono_affine
    mono = np.maximum(a * dense + b, 1e-3)
    return View(
        camera=camera,
        image=out.color,
        mvs_depth=DepthMap(depth),
        mvs_confidence=ConfidenceMap(conf),
        mono_depth=DepthMap(mono),
    )


def make_synthetic_dataset(
    *, size: int = 64, seed: int = GT_SEED, input_angles=INPUT_ANGLES
) -> tuple[SceneDataset, GaussianCloud]:
    gt, _ = make_gt_scene(seed)
    views = [gt_view(gt, ring_camera(a, size=size)) for a in input_angles]
    return SceneDataset(views=views), gt


def perturbed_start_cloud(
    gt: GaussianCloud,
    wall_deg: np.ndarray,
    *,
    seed: int = 5,
    drop_deg=DROPPED_WALL_DEG,
    opacity_raw: float = DIM_OPACITY_RAW,
) -> GaussianCloud:
    """Dim, recolored, lightly jittered copy of the ground truth with a wall
    chunk removed outside the input frusta (the stage-2 missing region)."""
    rng = np.random.default_rng(seed)
    keep = np.ones(len(gt), dtype=bool)
    keep[N_FORE:] = ~((wall_deg >= drop_deg[0]) & (wall_deg <= drop_deg[1]))
    n = int(keep.sum())
    cloud = GaussianCloud(
        position=gt.position[keep] + rng.normal(0, 0.05, (n, 3)),
        opacity_raw=np.full(n, opacity_raw),
        scale=gt.scale[keep] * np.exp(rng.normal(0, 0.1, (n, 3))),
        rotation=gt.rotation[keep] + rng.normal(0, 0.05, (n, 4)),
        color=np.clip(gt.color[keep] + rng.normal(0, 0.25, (n, 3)), 0, 1),
        source_kind=gt.source_kind[keep],
        source_view=gt.source_view[keep],
        source_pixel=gt.source_pixel[keep],
    )
    cloud.rotation /= np.linalg.norm(cloud.rotation, axis=1, keepdims=True)
    return cloud


def e2e_schedule():
    """Desk-scale schedule used by the end-to-end and pipeline tests."""
    from sparseview.optimizer import Schedule, StepSizes

    return Schedule(
        stage1_iters=500,
        stage1_refresh=100,
        stage1_views=5,
        stage2_iters=500,
        stage2_cycle=100,
        stage2_views=6,
        inpaint_stop_iter=400,
        loo_pretrain_iters=60,
        loo_total_iters=120,
        snapshot_iters=(60, 90, 120),
        step_sizes=StepSizes(
            position_init=2.4e-3,
            position_final=2.4e-5,
            opacity=0.1,
            scale=8e-3,
            rotation=2e-3,
            color=5e-3,
        ),
    )


@pytest.fixture(scope="session")
def synthetic_dataset() -> tuple[SceneDataset, GaussianCloud]:
    return make_synthetic_dataset()


@pytest.fixture(scope="session")
def heldout_camera() -> Camera:
    return ring_camera(HELDOUT_ANGLE)


@pytest.fixture()
def dataset_dir(tmp_path, synthetic_dataset):
    dataset, _ = synthetic_dataset
    root = tmp_path / "dataset"
    save_dataset(dataset, root)
    return root
