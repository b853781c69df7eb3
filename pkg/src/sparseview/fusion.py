"""Depth fusion: alignment, gradient-domain blending, sharpening, clustering.

The blending objective matches absolute depth against the MVS estimate on
high-confidence pixels and the depth gradient against the (aligned) monocular
estimate everywhere:

    min_d  sum_{p in M} (d_p - dD_p)^2  +  lambda * sum_edges ((grad d)_e - (grad dM)_e)^2

with forward-difference gradients and Neumann (replicate) boundaries. The
normal equations are symmetric positive definite whenever the data mask is
non-empty and are solved matrix-free by Jacobi-preconditioned conjugate
gradients on the five-point stencil.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import isotonic_regression
from scipy.sparse.linalg import LinearOperator, cg

from .errors import AlignmentError, FusionError
from .scene import BinaryMask, DepthMap, ImageRGB, View

MIN_ALIGNED_DEPTH = 1e-6


@dataclass
class AlignmentFunction:
    """Monotone piecewise-linear map from monocular to MVS depth values.

    Knot x-values are strictly increasing; y-values are non-decreasing, so the
    map (with linear extrapolation continuing the end segments) is monotone.
    """

    knots_x: np.ndarray
    knots_y: np.ndarray

    def __post_init__(self):
        self.knots_x = np.asarray(self.knots_x, dtype=np.float64)
        self.knots_y = np.asarray(self.knots_y, dtype=np.float64)
        if self.knots_x.size < 2:
            raise AlignmentError("alignment needs at least 2 knots")
        if not (np.diff(self.knots_x) > 0).all():
            raise AlignmentError("knot x-values must be strictly increasing")
        if (np.diff(self.knots_y) < 0).any():
            raise AlignmentError("knot y-values must be non-decreasing")

    def __call__(self, x: np.ndarray | float) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        kx, ky = self.knots_x, self.knots_y
        y = np.interp(x, kx, ky)
        slope_lo = (ky[1] - ky[0]) / (kx[1] - kx[0])
        slope_hi = (ky[-1] - ky[-2]) / (kx[-1] - kx[-2])
        y = np.where(x < kx[0], ky[0] + (x - kx[0]) * slope_lo, y)
        y = np.where(x > kx[-1], ky[-1] + (x - kx[-1]) * slope_hi, y)
        return y


@dataclass
class FusionConfig:
    """Knobs for per-view depth fusion."""

    lambda_grad: float = 10.0
    confidence_threshold: float = 0.5
    knot_count: int = 8
    sigma_spatial: float = 3.0  # <= 0 disables the bilateral step
    sigma_range: float = 0.1
    solver_tol: float = 1e-8
    solver_maxiter: int = 20000
    cluster_gap: float = 0.1

    def __post_init__(self):
        if self.lambda_grad <= 0:
            raise ValueError("lambda_grad must be positive")
        if self.solver_tol <= 0:
            raise ValueError("solver_tol must be positive")


def fit_alignment(
    mono: DepthMap, mvs: DepthMap, mask: BinaryMask, knot_count: int = 8
) -> AlignmentFunction:
    """Least-squares piecewise-linear fit from monocular to MVS depth.

    Knots sit at equal-quantile positions of the masked monocular values;
    fitted knot heights are projected onto the isotonic (non-decreasing) cone.

    Raises:
        AlignmentError: fewer than max(8 * knot_count, 64) usable pixels, or
            (near-)constant monocular input.
    """
    if knot_count < 2:
        raise AlignmentError("knot_count must be at least 2")
    usable = mask.bits & mono.valid & mvs.valid
    needed = max(knot_count * 8, 64)
    n = int(usable.sum())
    if n < needed:
        raise AlignmentError(f"alignment needs >= {needed} masked pixels, got {n}")
    x = mono.values[usable]
    y = mvs.values[usable]

    kx = np.unique(np.quantile(x, np.linspace(0.0, 1.0, knot_count)))
    if kx.size < 2:
        raise AlignmentError("monocular input is constant on the mask")

    seg = np.clip(np.searchsorted(kx, x, side="right") - 1, 0, kx.size - 2)
    t = (x - kx[seg]) / (kx[seg + 1] - kx[seg])
    design = np.zeros((x.size, kx.size))
    rows = np.arange(x.size)
    design[rows, seg] = 1.0 - t
    design[rows, seg + 1] = t
    ky, *_ = np.linalg.lstsq(design, y, rcond=None)
    ky = isotonic_regression(ky).x
    return AlignmentFunction(knots_x=kx, knots_y=np.asarray(ky))


def apply_alignment(f: AlignmentFunction, mono: DepthMap) -> DepthMap:
    """Map a monocular depth map through the fitted alignment.

    Invalid pixels stay invalid; valid outputs are clamped to at least 1e-6.
    """
    out = np.zeros_like(mono.values)
    valid = mono.valid
    out[valid] = np.maximum(f(mono.values[valid]), MIN_ALIGNED_DEPTH)
    return DepthMap(out)


def _laplacian_apply(x: np.ndarray) -> np.ndarray:
    """Gradient-operator normal map G^T G x on the forward-difference grid."""
    out = np.zeros_like(x)
    eh = x[:, 1:] - x[:, :-1]
    out[:, 1:] += eh
    out[:, :-1] -= eh
    ev = x[1:, :] - x[:-1, :]
    out[1:, :] += ev
    out[:-1, :] -= ev
    return out


def _gradient_rhs(target: np.ndarray, edge_ok_h: np.ndarray, edge_ok_v: np.ndarray) -> np.ndarray:
    """G^T g for per-edge gradient targets g taken from ``target``."""
    out = np.zeros_like(target)
    gh = (target[:, 1:] - target[:, :-1]) * edge_ok_h
    out[:, 1:] += gh
    out[:, :-1] -= gh
    gv = (target[1:, :] - target[:-1, :]) * edge_ok_v
    out[1:, :] += gv
    out[:-1, :] -= gv
    return out


def eq2_objective(
    d: np.ndarray,
    d_mvs: DepthMap,
    d_mono_aligned: DepthMap,
    mask: BinaryMask,
    lambda_grad: float,
) -> float:
    """Evaluate the blending objective at a candidate depth field."""
    data_mask = mask.bits & d_mvs.valid
    diff = d - d_mvs.values
    data = float((diff[data_mask] ** 2).sum())
    mono = d_mono_aligned.values
    mv = d_mono_aligned.valid
    eh_ok = mv[:, 1:] & mv[:, :-1]
    ev_ok = mv[1:, :] & mv[:-1, :]
    gh = (mono[:, 1:] - mono[:, :-1]) * eh_ok
    gv = (mono[1:, :] - mono[:-1, :]) * ev_ok
    grad = float((((d[:, 1:] - d[:, :-1]) - gh) ** 2).sum())
    grad += float((((d[1:, :] - d[:-1, :]) - gv) ** 2).sum())
    return data + lambda_grad * grad


def poisson_blend(
    d_mvs: DepthMap,
    d_mono_aligned: DepthMap,
    mask: BinaryMask,
    lambda_grad: float = 10.0,
    *,
    tol: float = 1e-8,
    maxiter: int = 20000,
    report: dict | None = None,
) -> DepthMap:
    """Solve the blending objective for one view.

    Gradient targets are taken from ``d_mono_aligned`` on edges whose both
    endpoints are valid and are zero elsewhere. The solve runs until
    ||Ax - b|| / ||b|| <= tol.

    Raises:
        FusionError: empty effective data mask (solution only defined up to a
            constant) or non-convergence within ``maxiter`` iterations.
    """
    if d_mvs.values.shape != d_mono_aligned.values.shape:
        raise FusionError(
            f"depth maps differ in size: {d_mvs.values.shape} vs {d_mono_aligned.values.shape}"
        )
    if mask.bits.shape != d_mvs.values.shape:
        raise FusionError("mask size does not match depth maps")
    data_mask = (mask.bits & d_mvs.valid).astype(np.float64)
    if data_mask.sum() == 0:
        raise FusionError("unconstrained system: no masked pixel carries valid MVS depth")

    shape = d_mvs.values.shape
    mono = d_mono_aligned.values
    mv = d_mono_aligned.valid
    eh_ok = mv[:, 1:] & mv[:, :-1]
    ev_ok = mv[1:, :] & mv[:-1, :]

    b = data_mask * d_mvs.values + lambda_grad * _gradient_rhs(mono, eh_ok, ev_ok)

    def apply_A(flat: np.ndarray) -> np.ndarray:
        x = flat.reshape(shape)
        out = data_mask * x + lambda_grad * _laplacian_apply(x)
        return out.ravel()

    # Jacobi preconditioner: data weight plus lambda * edge degree per pixel.
    degree = np.full(shape, 4.0)
    degree[0, :] -= 1.0
    degree[-1, :] -= 1.0
    degree[:, 0] -= 1.0
    degree[:, -1] -= 1.0
    diag = data_mask + lambda_grad * degree
    inv_diag = 1.0 / diag

    n = d_mvs.values.size
    op = LinearOperator((n, n), matvec=apply_A, dtype=np.float64)
    precond = LinearOperator((n, n), matvec=lambda r: (inv_diag.ravel() * r), dtype=np.float64)

    x0 = np.where(mv, mono, d_mvs.values).ravel()
    iterations = 0

    def count(_xk):
        nonlocal iterations
        iterations += 1

    solution, info = cg(
        op, b.ravel(), x0=x0, rtol=tol, atol=0.0, maxiter=maxiter, M=precond, callback=count
    )
    b_norm = float(np.linalg.norm(b))
    residual = float(np.linalg.norm(apply_A(solution) - b.ravel()))
    rel = residual / b_norm if b_norm > 0 else residual
    if report is not None:
        report["iterations"] = iterations
        report["residual"] = rel
    if info != 0:
        raise FusionError("blending solve did not converge", residual=rel)
    return DepthMap(solution.reshape(shape))


def bilateral_sharpen(
    depth: DepthMap,
    guide: ImageRGB,
    sigma_spatial: float = 3.0,
    sigma_range: float = 0.1,
) -> DepthMap:
    """Joint bilateral filter of depth with the RGB image as range guide.

    Kernels are renormalized over valid depth pixels only, so output validity
    matches input validity.
    """
    if (depth.height, depth.width) != (guide.height, guide.width):
        raise FusionError("depth and guide image differ in size")
    if sigma_spatial <= 0:
        return DepthMap(depth.values.copy())
    radius = max(1, int(np.ceil(3.0 * sigma_spatial)))
    h, w = depth.values.shape
    values = depth.values
    valid = depth.valid.astype(np.float64)
    rgb = guide.pixels

    accum = np.zeros((h, w))
    weight = np.zeros((h, w))
    inv_2ss = 1.0 / (2.0 * sigma_spatial**2)
    inv_2sr = 1.0 / (2.0 * sigma_range**2)
    for dy in range(-radius, radius + 1):
        ys_dst = slice(max(0, -dy), h - max(0, dy))
        ys_src = slice(max(0, dy), h - max(0, -dy))
        for dx in range(-radius, radius + 1):
            xs_dst = slice(max(0, -dx), w - max(0, dx))
            xs_src = slice(max(0, dx), w - max(0, -dx))
            ws = np.exp(-(dx * dx + dy * dy) * inv_2ss)
            diff = rgb[ys_dst, xs_dst] - rgb[ys_src, xs_src]
            wr = np.exp(-(diff * diff).sum(axis=2) * inv_2sr)
            contrib = ws * wr * valid[ys_src, xs_src]
            weight[ys_dst, xs_dst] += contrib
            accum[ys_dst, xs_dst] += contrib * values[ys_src, xs_src]

    out = np.zeros((h, w))
    ok = (depth.valid) & (weight > 0)
    out[ok] = accum[ok] / weight[ok]
    return DepthMap(out)


def background_mask(depth: DepthMap, gap_fraction: float = 0.1) -> BinaryMask:
    """Mark far-depth pixels via 1-D single-linkage clustering on disparity.

    Sorted disparities are split wherever an adjacent gap reaches
    ``gap_fraction`` of the total disparity range; the cluster with the
    smallest mean disparity (the farthest) is the background. Invalid pixels
    are never background.
    """
    valid = depth.valid
    n = int(valid.sum())
    if n < 2:
        raise FusionError(f"background clustering needs >= 2 valid pixels, got {n}")
    disparity = np.zeros_like(depth.values)
    disparity[valid] = 1.0 / depth.values[valid]
    dvals = np.sort(disparity[valid])
    span = dvals[-1] - dvals[0]
    if span == 0:
        return BinaryMask(valid.copy())
    threshold = gap_fraction * span
    gaps = np.diff(dvals)
    splits = np.nonzero(gaps >= threshold)[0]
    # Background cluster runs from the smallest disparity to the first split.
    cutoff = dvals[splits[0]] if splits.size else dvals[-1]
    return BinaryMask(valid & (disparity <= cutoff))


def fuse_view(view: View, cfg: FusionConfig, *, report: dict | None = None) -> DepthMap:
    """Full per-view fusion: align, blend, sharpen.

    When ``report`` is given it receives the blending solver's iteration count
    and final relative residual.
    """
    mask = view.mvs_confidence.threshold(cfg.confidence_threshold)
    f = fit_alignment(view.mono_depth, view.mvs_depth, mask, cfg.knot_count)
    aligned = apply_alignment(f, view.mono_depth)
    blended = poisson_blend(
        view.mvs_depth,
        aligned,
        mask,
        cfg.lambda_grad,
        tol=cfg.solver_tol,
        maxiter=cfg.solver_maxiter,
        report=report,
    )
    return bilateral_sharpen(blended, view.image, cfg.sigma_spatial, cfg.sigma_range)


def harmonic_fill(values: np.ndarray, hole: np.ndarray, *, tol: float = 1e-12) -> np.ndarray:
    """Fill ``hole`` pixels with the discrete harmonic extension of the rest.

    Solves the Laplace equation over the hole with Dirichlet boundary from
    surrounding pixels (Neumann at the image border). Non-hole pixels pass
    through untouched.
    """
    import scipy.sparse as sp

    hole = np.asarray(hole, dtype=bool)
    if not hole.any():
        return np.asarray(values, dtype=np.float64).copy()
    if hole.all():
        raise FusionError("harmonic fill needs at least one boundary pixel")
    vals = np.asarray(values, dtype=np.float64)
    h, w = vals.shape
    idx = -np.ones((h, w), dtype=np.int64)
    hi, hj = np.nonzero(hole)
    m = hi.size
    idx[hi, hj] = np.arange(m)

    rows, cols, data = [], [], []
    diag = np.zeros(m)
    b = np.zeros(m)
    boundary_sum = 0.0
    boundary_count = 0
    for dy, dx in ((0, 1), (0, -1), (1, 0), (-1, 0)):
        ni, nj = hi + dy, hj + dx
        in_grid = (ni >= 0) & (ni < h) & (nj >= 0) & (nj < w)
        diag[in_grid] += 1.0
        neighbor_hole = np.zeros(m, dtype=bool)
        neighbor_hole[in_grid] = hole[ni[in_grid], nj[in_grid]]
        inner = in_grid & neighbor_hole
        rows.extend(idx[hi[inner], hj[inner]].tolist())
        cols.extend(idx[ni[inner], nj[inner]].tolist())
        data.extend([-1.0] * int(inner.sum()))
        outer = in_grid & ~neighbor_hole
        b[outer] += vals[ni[outer], nj[outer]]
        boundary_sum += float(vals[ni[outer], nj[outer]].sum())
        boundary_count += int(outer.sum())

    A = sp.csr_matrix((data, (rows, cols)), shape=(m, m)) + sp.diags(diag)
    boundary_mean = boundary_sum / boundary_count if boundary_count else 0.0
    x0 = np.full(m, boundary_mean)
    inv_diag = 1.0 / diag
    precond = LinearOperator((m, m), matvec=lambda r: inv_diag * r, dtype=np.float64)
    x, info = cg(A, b, x0=x0, rtol=tol, atol=0.0, maxiter=10 * m + 100, M=precond)
    if info != 0:
        raise FusionError("harmonic fill solve did not converge")
    out = vals.copy()
    out[hi, hj] = x
    return out
