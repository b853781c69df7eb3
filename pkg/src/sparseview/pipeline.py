"""Two-stage optimization driver and leave-one-out pair generation.

Stage 1 reconstructs regions covered by the inputs: every step optimizes one
input view (reconstruction bundle) and one novel view (masked bundle against
the repaired pseudo ground truth plus the opacity suppression term); pseudo
ground truths refresh on a fixed interval.

Stage 2 fills missing regions: on a fixed cycle, alternating view-parity
subsets are inpainted, their holes are unprojected onto a depth surface
blended from the rendered depth, new Gaussians are spawned there, and all
pseudo ground truths are refreshed; between cycles the loss keeps the renders
close to the inpainted content in the hole regions.

All randomness flows from the state's seeded generator, and oracle seeds are
derived deterministically, so runs with stub oracles are bitwise reproducible
and checkpoint/resume matches a straight-through run.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import OptimizationError, OracleUnavailableError, PathFitError
from .fusion import FusionConfig, background_mask, harmonic_fill, poisson_blend
from .io import write_image
from .losses import (
    LossReport,
    LossWeights,
    camera_distance_weight,
    loss_l1,
    loss_perceptual_proxy,
    metric_psnr,
    opacity_suppression,
    reconstruction_bundle,
    visibility_mask,
)
from .optimizer import OptimState, Schedule, save_checkpoint, step_params
from .oracle import OracleClient
from .renderer import (
    render,
    render_backward,
    render_with_context,
    spawn_from_depth,
)
from .scene import (
    SOURCE_INPAINT,
    BinaryMask,
    Camera,
    DepthMap,
    GaussianCloud,
    ImageRGB,
    SceneDataset,
    unproject_grid,
)

logger = logging.getLogger(__name__)

DEFAULT_BACKGROUND = (0.0, 0.0, 0.0)
INPAINT_ANCHOR_BAND_PX = 4


@dataclass
class NovelView:
    """One novel camera with its cached supervision data."""

    camera: Camera
    weight: float
    pseudo_gt: ImageRGB | None = None
    alpha_mask: BinaryMask | None = None
    bg_mask: BinaryMask | None = None
    inpainted: ImageRGB | None = None
    inpaint_mask: BinaryMask | None = None


@dataclass
class NovelCameraSet:
    """Novel cameras ordered along the fitted path."""

    views: list[NovelView]
    stats: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.views)


def derive_seed(*parts: int) -> int:
    """Deterministic 63-bit seed from integer parts."""
    state = np.random.SeedSequence([int(p) & 0x7FFFFFFF for p in parts]).generate_state(2)
    return int(state[0]) | (int(state[1] & 0x7FFFFFFF) << 32)


def _canonical_direction(v: np.ndarray) -> np.ndarray:
    idx = int(np.argmax(np.abs(v)))
    return -v if v[idx] < 0 else v


def look_at_camera(
    position: np.ndarray, target: np.ndarray, up: np.ndarray, intrinsics: Camera
) -> Camera:
    """Camera at ``position`` looking at ``target`` with +Z forward, y down."""
    z = target - position
    zn = np.linalg.norm(z)
    if zn == 0:
        raise PathFitError("camera position coincides with the look-at target")
    z = z / zn
    x = np.cross(z, up)
    xn = np.linalg.norm(x)
    if xn < 1e-9:
        # View direction parallel to up; pick any stable perpendicular.
        alt = np.array([1.0, 0.0, 0.0]) if abs(z[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
        x = np.cross(z, alt)
        xn = np.linalg.norm(x)
    x = x / xn
    y = np.cross(z, x)
    rotation = np.stack([x, y, z])
    return Camera(
        fx=intrinsics.fx,
        fy=intrinsics.fy,
        cx=intrinsics.cx,
        cy=intrinsics.cy,
        width=intrinsics.width,
        height=intrinsics.height,
        rotation=rotation,
        translation=-rotation @ position,
    )


def _fit_circle(xy: np.ndarray) -> tuple[np.ndarray, float, float]:
    """Algebraic least-squares circle; exact circumcircle for three points."""
    A = np.column_stack([2.0 * xy[:, 0], 2.0 * xy[:, 1], np.ones(len(xy))])
    b = (xy**2).sum(axis=1)
    sol, *_ = np.linalg.lstsq(A, b, rcond=None)
    center = sol[:2]
    r_sq = sol[2] + center @ center
    if r_sq <= 0:
        raise PathFitError("circle fit degenerated; supply a manual path file")
    r = float(np.sqrt(r_sq))
    return center, r, r


def _fit_ellipse(xy: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Direct least-squares conic fit constrained to an ellipse.

    Returns (center, semi-axes (a, b), 2x2 axis directions as columns).
    """
    x = xy[:, 0]
    y = xy[:, 1]
    D1 = np.column_stack([x * x, x * y, y * y])
    D2 = np.column_stack([x, y, np.ones_like(x)])
    S1 = D1.T @ D1
    S2 = D1.T @ D2
    S3 = D2.T @ D2
    try:
        T = -np.linalg.solve(S3, S2.T)
    except np.linalg.LinAlgError as exc:
        raise PathFitError(f"ellipse fit singular ({exc}); supply a manual path file") from exc
    M = S1 + S2 @ T
    M = np.stack([M[2] / 2.0, -M[1], M[0] / 2.0])
    eigvals, eigvecs = np.linalg.eig(M)
    best = None
    for i in range(3):
        v = np.real(eigvecs[:, i])
        cond = 4.0 * v[0] * v[2] - v[1] ** 2
        if cond > 0:
            best = v
            break
    if best is None:
        raise PathFitError("conic fit is not an ellipse; supply a manual path file")
    coeff = np.concatenate([best, T @ best])  # A, B, C, D, E, F
    A, B, C, D, E, F = coeff
    K = np.array([[A, B / 2.0], [B / 2.0, C]])
    L = np.array([D, E])
    try:
        center = np.linalg.solve(2.0 * K, -L)
    except np.linalg.LinAlgError as exc:
        raise PathFitError(f"ellipse center singular ({exc})") from exc
    f_c = center @ K @ center + L @ center + F
    lam, q = np.linalg.eigh(K)
    radii_sq = -f_c / lam
    if (radii_sq <= 0).any():
        raise PathFitError("ellipse fit produced non-positive axes")
    return center, np.sqrt(radii_sq), q


def fit_novel_cameras(
    inputs: list[Camera],
    foreground_points: np.ndarray,
    count: int,
    *,
    tau: float | None = None,
) -> NovelCameraSet:
    """Fit an elliptical camera path through the input camera centers.

    A plane is fitted to the centers; the projected centers get a direct
    least-squares ellipse fit (a least-squares circle below five cameras);
    ``count`` cameras are placed at equal angular spacing looking at the
    centroid of ``foreground_points`` with the plane normal as up vector.

    Raises:
        PathFitError: fewer than three cameras or (near-)collinear centers.
    """
    if foreground_points is None or len(foreground_points) == 0:
        raise PathFitError("foreground point set is empty")
    if count < 1:
        raise PathFitError("need at least one novel camera")
    centers = np.stack([c.center() for c in inputs])
    if len(inputs) < 3:
        raise PathFitError(
            "path fitting needs >= 3 input cameras; supply a manual path file"
        )
    centroid = centers.mean(axis=0)
    centered = centers - centroid
    _, svals, vt = np.linalg.svd(centered, full_matrices=True)
    scale = svals[0]
    if scale == 0 or svals[1] / scale < 1e-9:
        raise PathFitError("camera centers are collinear; supply a manual path file")
    e1 = _canonical_direction(vt[0])
    normal = _canonical_direction(vt[2])
    e2 = np.cross(normal, e1)
    xy = np.column_stack([centered @ e1, centered @ e2])

    if len(inputs) >= 5:
        c2d, axes, q = _fit_ellipse(xy)
    else:
        c2d, r1, r2 = _fit_circle(xy)
        axes = np.array([r1, r2])
        q = np.eye(2)

    # Anchor the angular sampling at the first input camera's path angle.
    rel = q.T @ (xy[0] - c2d)
    theta0 = float(np.arctan2(rel[1] / axes[1], rel[0] / axes[0]))
    target = np.asarray(foreground_points, dtype=np.float64).mean(axis=0)

    views = []
    for k in range(count):
        theta = theta0 + 2.0 * np.pi * k / count
        local = c2d + axes[0] * np.cos(theta) * q[:, 0] + axes[1] * np.sin(theta) * q[:, 1]
        position = centroid + local[0] * e1 + local[1] * e2
        cam = look_at_camera(position, target, normal, inputs[0])
        weight = camera_distance_weight(cam, inputs, tau)
        views.append(NovelView(camera=cam, weight=weight))
    return NovelCameraSet(views=views)


def init_cloud(
    dataset: SceneDataset,
    fused_depths: list[DepthMap],
    *,
    scale_factor: float = 1.4,
    opacity: float = 0.1,
) -> GaussianCloud:
    """Per-pixel Gaussian initialization over every input view."""
    fragments = []
    for i, view in enumerate(dataset.views):
        region = BinaryMask(np.ones((view.camera.height, view.camera.width), dtype=bool))
        fragments.append(
            spawn_from_depth(
                view.image,
                fused_depths[i],
                view.camera,
                region,
                scale_factor=scale_factor,
                opacity=opacity,
                view_index=i,
            )
        )
    return GaussianCloud.concatenate(fragments)


def foreground_points_from_depth(
    dataset: SceneDataset,
    fused_depths: list[DepthMap],
    *,
    confidence_threshold: float = 0.5,
    max_points: int = 4096,
) -> np.ndarray:
    """High-confidence fused-depth unprojections for path fitting."""
    chunks = []
    for view, depth in zip(dataset.views, fused_depths):
        sel = depth.valid & (view.mvs_confidence.values >= confidence_threshold)
        if sel.any():
            chunks.append(unproject_grid(view.camera, depth.values, sel))
    if not chunks:
        raise PathFitError("no high-confidence depth available for path fitting")
    points = np.concatenate(chunks)
    if len(points) > max_points:
        stride = int(np.ceil(len(points) / max_points))
        points = points[::stride]
    return points


def _repair_with_fallback(
    oracle: OracleClient, image: ImageRGB, seed: int, stats: dict
) -> ImageRGB:
    try:
        return oracle.repair(image, seed)
    except OracleUnavailableError as exc:
        stats["repair_fallbacks"] = stats.get("repair_fallbacks", 0) + 1
        logger.warning("repair oracle unavailable (%s); using un-repaired render", exc)
        return ImageRGB(image.pixels.copy())


def _extended_depth(out_depth: DepthMap) -> DepthMap:
    """Rendered depth with invalid regions filled harmonically.

    Stands in for monocular depth of the (repaired) novel render when
    clustering background; holes inherit the depth of their surroundings.
    """
    coverage = out_depth.valid
    if not coverage.any():
        return out_depth
    if coverage.all():
        return out_depth
    return DepthMap(harmonic_fill(out_depth.values, ~coverage))


def _novel_masks(out, threshold: float) -> tuple[BinaryMask, BinaryMask]:
    alpha_mask = visibility_mask(out.alpha, threshold)
    extended = _extended_depth(out.depth)
    if int(extended.valid.sum()) < 2:
        bg = BinaryMask(np.ones_like(out.alpha, dtype=bool))
    else:
        bg = background_mask(extended)
    return alpha_mask, bg


def refresh_pseudo_gt(
    state: OptimState,
    novel: NovelCameraSet,
    oracle: OracleClient,
    schedule: Schedule,
    background: np.ndarray,
    refresh_index: int,
    *,
    stage: int,
) -> None:
    """Re-render all novel views, repair them, and refresh the cached masks."""
    for j, nv in enumerate(novel.views):
        out = render(state.cloud, nv.camera, background)
        seed = derive_seed(state.seed, stage, refresh_index, j)
        nv.pseudo_gt = _repair_with_fallback(oracle, out.color, seed, novel.stats)
        nv.alpha_mask, nv.bg_mask = _novel_masks(out, schedule.opacity_mask_threshold)


def _input_view_step(state, dataset, weights, background):
    i = int(state.rng.integers(0, len(dataset)))
    view = dataset.views[i]
    out, ctx = render_with_context(state.cloud, view.camera, background)
    report = reconstruction_bundle(
        out.color,
        view.image,
        weights,
        rendered_depth=out.depth,
        mono_depth=view.mono_depth,
    )
    grads = render_backward(
        state.cloud,
        view.camera,
        background,
        d_color=report.d_color,
        d_depth=report.d_depth,
        context=ctx,
    )
    return i, report, grads


def run_stage1(
    state: OptimState,
    dataset: SceneDataset,
    novel: NovelCameraSet,
    oracle: OracleClient,
    schedule: Schedule,
    weights: LossWeights,
    *,
    background=DEFAULT_BACKGROUND,
    stop_at: int | None = None,
    dump_path: str | Path | None = None,
    refresh_hook=None,
) -> OptimState:
    """Visible-region optimization against repaired pseudo ground truths."""
    bg = np.asarray(background, dtype=np.float64)
    m = len(novel)
    end = schedule.stage1_iters if stop_at is None else min(stop_at, schedule.stage1_iters)
    while state.iteration < end:
        t = state.iteration
        if t % schedule.stage1_refresh == 0:
            refresh_pseudo_gt(
                state, novel, oracle, schedule, bg, t // schedule.stage1_refresh, stage=1
            )
            if refresh_hook is not None:
                refresh_hook(state, novel, t // schedule.stage1_refresh)

        _, in_report, grads = _input_view_step(state, dataset, weights, bg)

        j = t % m
        nv = novel.views[j]
        out_j, ctx_j = render_with_context(state.cloud, nv.camera, bg)
        if nv.alpha_mask.count() > 0:
            novel_report = reconstruction_bundle(
                out_j.color, nv.pseudo_gt, weights, mask=nv.alpha_mask, scale=nv.weight
            )
        else:
            # Nothing is covered yet; the masked term vanishes.
            novel_report = LossReport(
                total=0.0,
                terms={},
                d_color=np.zeros_like(out_j.color.pixels),
                d_depth=np.zeros(out_j.alpha.shape),
                d_alpha=np.zeros(out_j.alpha.shape),
            )
        suppression = opacity_suppression(out_j.alpha, nv.alpha_mask, nv.bg_mask)
        d_alpha = novel_report.d_alpha + weights.w_opacity * suppression.grad
        grads_j = render_backward(
            state.cloud,
            nv.camera,
            bg,
            d_color=novel_report.d_color,
            d_alpha=d_alpha,
            context=ctx_j,
        )
        grads.add(grads_j)

        total = in_report.total + novel_report.total + weights.w_opacity * suppression.value
        if not np.isfinite(total):
            if dump_path is not None:
                save_checkpoint(dump_path, state, stage=1)
                logger.error("non-finite loss at iteration %d; state dumped to %s", t, dump_path)
            raise OptimizationError(f"non-finite loss at iteration {t}")

        step_params(state, grads, schedule.step_sizes)
        state.loss_history.append(
            [
                float(t),
                total,
                in_report.total,
                novel_report.total,
                weights.w_opacity * suppression.value,
                0.0,
            ]
        )
        state.iteration += 1
    return state


def _inpaint_region_depth(
    out_depth: DepthMap, hole: np.ndarray, bg_mask: np.ndarray, cfg: FusionConfig
) -> DepthMap:
    """Depth surface for hole spawning.

    Holes are background holes by construction, so the surface is the
    harmonic extension of the surrounding *background* rendered depth,
    anchored to it in a band around the hole via the blending objective.
    Falls back to extending all rendered depth when no background surrounds
    the hole.
    """
    coverage = out_depth.valid
    source = coverage & bg_mask & ~hole
    if not source.any():
        source = coverage & ~hole
    if not source.any():
        logger.warning("inpaint depth: nothing rendered outside the hole; skipping blend")
        return DepthMap(np.where(hole, 0.0, out_depth.values))
    extended = harmonic_fill(np.where(source, out_depth.values, 0.0), ~source)

    band = ndimage.binary_dilation(hole, iterations=INPAINT_ANCHOR_BAND_PX)
    ii, jj = np.nonzero(band)
    y0, y1 = ii.min(), ii.max() + 1
    x0, x1 = jj.min(), jj.max() + 1
    anchor = band & source
    if not anchor[y0:y1, x0:x1].any():
        logger.warning("inpaint depth: no anchor around hole; using harmonic extension")
        return DepthMap(extended)
    crop_mvs = DepthMap(np.where(source, out_depth.values, 0.0)[y0:y1, x0:x1])
    crop_mono = DepthMap(extended[y0:y1, x0:x1])
    crop_mask = BinaryMask(anchor[y0:y1, x0:x1])
    fused_crop = poisson_blend(
        crop_mvs, crop_mono, crop_mask, cfg.lambda_grad, tol=cfg.solver_tol, maxiter=cfg.solver_maxiter
    )
    result = extended.copy()
    result[y0:y1, x0:x1] = fused_crop.values
    return DepthMap(result)


def inpaint_cycle(
    state: OptimState,
    novel: NovelCameraSet,
    oracle: OracleClient,
    schedule: Schedule,
    cycle_index: int,
    *,
    background=DEFAULT_BACKGROUND,
    allow_inpaint: bool = True,
    fusion_cfg: FusionConfig | None = None,
) -> int:
    """One stage-2 cycle: inpaint an alternating view subset, spawn Gaussians
    on the blended depth surface, then refresh all pseudo ground truths.

    Returns the number of spawned Gaussians. With inpainting disabled (the
    post-stop regime) or no holes anywhere, the cycle degenerates to
    repair-only.
    """
    bg = np.asarray(background, dtype=np.float64)
    cfg = fusion_cfg if fusion_cfg is not None else FusionConfig()
    parity = cycle_index % 2
    subset = [k for k in range(len(novel)) if k % 2 == parity]
    spawned = 0

    if allow_inpaint:
        # Active cycle: only the fresh subset carries the consistency term.
        for nv in novel.views:
            nv.inpainted = None
            nv.inpaint_mask = None
    # Repair-only cycles keep the last inpainted targets alive; they remain
    # the only hole supervision once inpainting stops.

    for k in subset:
        nv = novel.views[k]
        out = render(state.cloud, nv.camera, bg)
        alpha_mask, bg_mask = _novel_masks(out, schedule.opacity_mask_threshold)
        nv.alpha_mask, nv.bg_mask = alpha_mask, bg_mask
        hole = (~alpha_mask.bits) & bg_mask.bits
        if not (allow_inpaint and hole.any()):
            continue
        seed = derive_seed(state.seed, 2, cycle_index, k)
        try:
            inpainted = oracle.inpaint(out.color, BinaryMask(hole), seed)
        except OracleUnavailableError as exc:
            novel.stats["inpaint_fallbacks"] = novel.stats.get("inpaint_fallbacks", 0) + 1
            logger.warning("inpaint oracle unavailable for view %d (%s); skipping", k, exc)
            continue
        nv.inpainted = inpainted
        nv.inpaint_mask = BinaryMask(hole)
        depth = _inpaint_region_depth(out.depth, hole, bg_mask.bits, cfg)
        fragment = spawn_from_depth(
            inpainted,
            depth,
            nv.camera,
            BinaryMask(hole),
            view_index=k,
            kind=SOURCE_INPAINT,
        )
        if len(fragment):
            state.cloud = GaussianCloud.concatenate([state.cloud, fragment])
            state.grow(len(fragment))
            spawned += len(fragment)

    # Fresh pseudo ground truths for every view: freshly inpainted views are
    # repaired from their inpainted images, the rest (and every view in
    # repair-only cycles) from the post-spawn renders.
    for j, nv in enumerate(novel.views):
        out = render(state.cloud, nv.camera, bg)
        seed = derive_seed(state.seed, 3, cycle_index, j)
        source = nv.inpainted if (allow_inpaint and nv.inpainted is not None) else out.color
        nv.pseudo_gt = _repair_with_fallback(oracle, source, seed, novel.stats)
        nv.alpha_mask, nv.bg_mask = _novel_masks(out, schedule.opacity_mask_threshold)

    logger.info("cycle %d: spawned %d Gaussians across %d views", cycle_index, spawned, len(subset))
    return spawned


def run_stage2(
    state: OptimState,
    dataset: SceneDataset,
    novel: NovelCameraSet,
    oracle: OracleClient,
    schedule: Schedule,
    weights: LossWeights,
    *,
    background=DEFAULT_BACKGROUND,
    stop_at: int | None = None,
    dump_path: str | Path | None = None,
    cycle_hook=None,
    fusion_cfg: FusionConfig | None = None,
) -> OptimState:
    """Missing-region optimization with iterative inpaint-project-optimize cycles."""
    bg = np.asarray(background, dtype=np.float64)
    m = len(novel)
    end = schedule.stage2_iters if stop_at is None else min(stop_at, schedule.stage2_iters)
    while state.iteration < end:
        t = state.iteration
        if t % schedule.stage2_cycle == 0:
            cycle_index = t // schedule.stage2_cycle
            spawned = inpaint_cycle(
                state,
                novel,
                oracle,
                schedule,
                cycle_index,
                background=bg,
                allow_inpaint=t < schedule.inpaint_stop_iter,
                fusion_cfg=fusion_cfg,
            )
            if cycle_hook is not None:
                cycle_hook(state, novel, cycle_index, spawned)

        _, in_report, grads = _input_view_step(state, dataset, weights, bg)

        j = t % m
        nv = novel.views[j]
        out_j, ctx_j = render_with_context(state.cloud, nv.camera, bg)
        # Term 2 of the stage-2 loss drops the visibility mask.
        novel_report = reconstruction_bundle(
            out_j.color, nv.pseudo_gt, weights, mask=None, scale=nv.weight
        )
        d_color = novel_report.d_color
        inpaint_term = 0.0
        if nv.inpainted is not None and nv.inpaint_mask is not None and nv.inpaint_mask.count():
            t_l1 = loss_l1(out_j.color, nv.inpainted, nv.inpaint_mask)
            t_px = loss_perceptual_proxy(out_j.color, nv.inpainted, nv.inpaint_mask)
            inpaint_term = weights.w_inpaint * (t_l1.value + t_px.value)
            d_color = d_color + weights.w_inpaint * (t_l1.grad + t_px.grad)
        grads_j = render_backward(
            state.cloud, nv.camera, bg, d_color=d_color, context=ctx_j
        )
        grads.add(grads_j)

        total = in_report.total + novel_report.total + inpaint_term
        if not np.isfinite(total):
            if dump_path is not None:
                save_checkpoint(dump_path, state, stage=2)
                logger.error("non-finite loss at iteration %d; state dumped to %s", t, dump_path)
            raise OptimizationError(f"non-finite loss at iteration {t}")

        step_params(state, grads, schedule.step_sizes)
        state.loss_history.append(
            [float(t), total, in_report.total, novel_report.total, 0.0, inpaint_term]
        )
        state.iteration += 1
    return state


# --- leave-one-out pair generation ----------------------------------------


@dataclass
class LooPair:
    view: int
    iteration: int
    corrupt_path: Path
    clean_path: Path
    psnr: float


def generate_loo_pairs(
    dataset: SceneDataset,
    schedule: Schedule,
    weights: LossWeights,
    fused_depths: list[DepthMap],
    out_dir: str | Path,
    *,
    seed: int = 0,
    background=DEFAULT_BACKGROUND,
) -> tuple[list[LooPair], list[tuple[int, int, int]]]:
    """(corrupted render, clean image) pairs via the leave-one-out protocol.

    For every held-out view a fresh cloud is optimized on the remaining views
    with the plain reconstruction loss; the held-out view is reintroduced
    after the pretrain budget and the view is rendered at each snapshot
    iteration. Returns the pairs plus an audit log of (held_out, iteration,
    sampled_view) triples proving the held-out view never enters the loss
    before reintroduction.

    Raises:
        OptimizationError: fewer than three views (leave-one-out degenerates).
    """
    n = len(dataset)
    if n < 3:
        raise OptimizationError("leave-one-out needs at least 3 views")
    out_dir = Path(out_dir)
    bg = np.asarray(background, dtype=np.float64)
    pairs: list[LooPair] = []
    audit: list[tuple[int, int, int]] = []

    for held in range(n):
        subset = [i for i in range(n) if i != held]
        fragments = [
            spawn_from_depth(
                dataset.views[i].image,
                fused_depths[i],
                dataset.views[i].camera,
                BinaryMask(np.ones((dataset.views[i].camera.height, dataset.views[i].camera.width), dtype=bool)),
                view_index=i,
            )
            for i in subset
        ]
        cloud = GaussianCloud.concatenate(fragments)
        state = OptimState.new(cloud, derive_seed(seed, 100, held), schedule.loo_total_iters)
        view_dir = out_dir / f"view_{held:03d}"

        for t in range(schedule.loo_total_iters):
            active = subset if t < schedule.loo_pretrain_iters else list(range(n))
            i = active[int(state.rng.integers(0, len(active)))]
            audit.append((held, t, i))
            view = dataset.views[i]
            out, ctx = render_with_context(state.cloud, view.camera, bg)
            report = reconstruction_bundle(
                out.color, view.image, weights,
                rendered_depth=out.depth, mono_depth=view.mono_depth,
            )
            grads = render_backward(
                state.cloud, view.camera, bg,
                d_color=report.d_color, d_depth=report.d_depth, context=ctx,
            )
            step_params(state, grads, schedule.step_sizes)
            state.iteration += 1

            if (t + 1) in schedule.snapshot_iters:
                held_view = dataset.views[held]
                out_held = render(state.cloud, held_view.camera, bg)
                corrupt_path = view_dir / f"iter_{t + 1:05d}_corrupt.png"
                clean_path = view_dir / f"iter_{t + 1:05d}_clean.png"
                write_image(corrupt_path, out_held.color)
                write_image(clean_path, held_view.image)
                pairs.append(
                    LooPair(
                        view=held,
                        iteration=t + 1,
                        corrupt_path=corrupt_path,
                        clean_path=clean_path,
                        psnr=metric_psnr(out_held.color, held_view.image),
                    )
                )
    return pairs, audit


def hole_alpha_coverage(alpha: np.ndarray, hole: np.ndarray, threshold: float = 0.5) -> float:
    """Fraction of hole pixels whose accumulated opacity reaches the threshold."""
    n = int(hole.sum())
    if n == 0:
        return 1.0
    return float((alpha[hole] >= threshold).sum() / n)


# --- novel-set (de)serialization for checkpoints ---------------------------


def novel_to_arrays(novel: NovelCameraSet) -> dict[str, np.ndarray]:
    """Flatten the novel camera set (cameras, weights, caches) into arrays."""
    m = len(novel)
    cam = np.zeros((m, 19))
    weight = np.zeros(m)
    h = novel.views[0].camera.height if m else 0
    w = novel.views[0].camera.width if m else 0
    gt = np.zeros((m, h, w, 3))
    gt_flag = np.zeros(m, dtype=np.uint8)
    amask = np.zeros((m, h, w), dtype=np.uint8)
    bmask = np.zeros((m, h, w), dtype=np.uint8)
    mask_flag = np.zeros(m, dtype=np.uint8)
    inp = np.zeros((m, h, w, 3))
    imask = np.zeros((m, h, w), dtype=np.uint8)
    inp_flag = np.zeros(m, dtype=np.uint8)
    for j, nv in enumerate(novel.views):
        c = nv.camera
        cam[j] = np.concatenate(
            [
                [c.fx, c.fy, c.cx, c.cy, c.width, c.height],
                c.rotation.reshape(9),
                c.translation,
                [0.0],
            ]
        )
        weight[j] = nv.weight
        if nv.pseudo_gt is not None:
            gt[j] = nv.pseudo_gt.pixels
            gt_flag[j] = 1
        if nv.alpha_mask is not None and nv.bg_mask is not None:
            amask[j] = nv.alpha_mask.bits
            bmask[j] = nv.bg_mask.bits
            mask_flag[j] = 1
        if nv.inpainted is not None and nv.inpaint_mask is not None:
            inp[j] = nv.inpainted.pixels
            imask[j] = nv.inpaint_mask.bits
            inp_flag[j] = 1
    return {
        "novel.cam": cam,
        "novel.weight": weight,
        "novel.gt": gt,
        "novel.gt_flag": gt_flag,
        "novel.alpha_mask": amask,
        "novel.bg_mask": bmask,
        "novel.mask_flag": mask_flag,
        "novel.inpainted": inp,
        "novel.inpaint_mask": imask,
        "novel.inpaint_flag": inp_flag,
    }


def novel_from_arrays(arrays: dict[str, np.ndarray]) -> NovelCameraSet:
    cam = arrays["novel.cam"]
    views = []
    for j in range(cam.shape[0]):
        row = cam[j]
        camera = Camera(
            fx=row[0],
            fy=row[1],
            cx=row[2],
            cy=row[3],
            width=int(row[4]),
            height=int(row[5]),
            rotation=row[6:15].reshape(3, 3),
            translation=row[15:18],
        )
        nv = NovelView(camera=camera, weight=float(arrays["novel.weight"][j]))
        if arrays["novel.gt_flag"][j]:
            nv.pseudo_gt = ImageRGB(arrays["novel.gt"][j])
        if arrays["novel.mask_flag"][j]:
            nv.alpha_mask = BinaryMask(arrays["novel.alpha_mask"][j].astype(bool))
            nv.bg_mask = BinaryMask(arrays["novel.bg_mask"][j].astype(bool))
        if arrays["novel.inpaint_flag"][j]:
            nv.inpainted = ImageRGB(arrays["novel.inpainted"][j])
            nv.inpaint_mask = BinaryMask(arrays["novel.inpaint_mask"][j].astype(bool))
        views.append(nv)
    return NovelCameraSet(views=views)
