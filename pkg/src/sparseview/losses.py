"""Differentiable training losses and evaluation metrics.

Every loss returns its scalar value together with the per-pixel gradient
image w.r.t. the prediction, so the optimizer can feed the renderer's
backward pass. Gradients are computed through torch autograd on small
float64 tensors; inputs and outputs are plain numpy arrays.

Masked variants depend only on masked pixels: SSIM restricts itself to
windows fully inside the mask and the gradient proxy to pixel pairs whose
both endpoints are masked.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from .scene import BinaryMask, Camera, DepthMap, ImageRGB

logger = logging.getLogger(__name__)

torch.set_num_threads(1)

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
PSNR_CAP_DB = 99.0
PROXY_LEVELS = 3


@dataclass
class LossWeights:
    """Weights of the reconstruction bundle and the auxiliary terms."""

    w_l1: float = 0.8
    w_ssim: float = 0.2
    w_perceptual: float = 0.2
    w_depth_pearson: float = 0.05
    w_opacity: float = 1.0
    w_inpaint: float = 1.0

    def __post_init__(self):
        for name in ("w_l1", "w_ssim", "w_perceptual", "w_depth_pearson", "w_opacity", "w_inpaint"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


@dataclass
class LossTerm:
    """One loss evaluation: scalar value plus gradient w.r.t. the prediction."""

    value: float
    grad: np.ndarray
    skipped: bool = False


@dataclass
class LossReport:
    """Aggregated weighted loss with gradient images for the renderer."""

    total: float
    terms: dict[str, float]
    d_color: np.ndarray  # (H, W, 3)
    d_depth: np.ndarray  # (H, W)
    d_alpha: np.ndarray  # (H, W)
    flags: dict[str, bool] = field(default_factory=dict)


def _pixels(image: ImageRGB | np.ndarray) -> np.ndarray:
    return image.pixels if isinstance(image, ImageRGB) else np.asarray(image, dtype=np.float64)


def _mask_bits(mask: BinaryMask | np.ndarray | None, shape) -> np.ndarray:
    if mask is None:
        return np.ones(shape, dtype=bool)
    bits = mask.bits if isinstance(mask, BinaryMask) else np.asarray(mask, dtype=bool)
    if bits.shape != shape:
        raise ValueError(f"mask shape {bits.shape} does not match image {shape}")
    return bits


def loss_l1(
    pred: ImageRGB | np.ndarray,
    target: ImageRGB | np.ndarray,
    mask: BinaryMask | np.ndarray | None = None,
) -> LossTerm:
    """Mean absolute error over masked pixels; subgradient 0 at exact ties."""
    p = _pixels(pred)
    t = _pixels(target)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {t.shape}")
    bits = _mask_bits(mask, p.shape[:2])
    count = int(bits.sum())
    if count == 0:
        raise ValueError("empty mask")
    diff = p - t
    denom = 3.0 * count
    value = float(np.abs(diff[bits]).sum() / denom)
    grad = np.where(bits[:, :, None], np.sign(diff) / denom, 0.0)
    return LossTerm(value=value, grad=grad)


def _gaussian_kernel(window: int, sigma: float) -> torch.Tensor:
    half = (window - 1) / 2.0
    coords = torch.arange(window, dtype=torch.float64) - half
    g = torch.exp(-(coords**2) / (2 * sigma**2))
    kernel = torch.outer(g, g)
    return kernel / kernel.sum()


_SSIM_KERNEL = _gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA).reshape(1, 1, SSIM_WINDOW, SSIM_WINDOW)


def _ssim_map(p: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
    """Per-channel SSIM over valid window positions; inputs are (3, 1, H, W)."""
    k = _SSIM_KERNEL
    mu_p = F.conv2d(p, k)
    mu_t = F.conv2d(t, k)
    mu_pp = F.conv2d(p * p, k)
    mu_tt = F.conv2d(t * t, k)
    mu_pt = F.conv2d(p * t, k)
    var_p = mu_pp - mu_p * mu_p
    var_t = mu_tt - mu_t * mu_t
    cov = mu_pt - mu_p * mu_t
    num = (2 * mu_p * mu_t + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_p * mu_p + mu_t * mu_t + SSIM_C1) * (var_p + var_t + SSIM_C2)
    return num / den


def _window_interior(bits: np.ndarray) -> np.ndarray:
    """Valid-window positions whose 11x11 support lies fully inside the mask."""
    h, w = bits.shape
    oh, ow = h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1
    ok = np.ones((oh, ow), dtype=bool)
    windows = np.lib.stride_tricks.sliding_window_view(bits, (SSIM_WINDOW, SSIM_WINDOW))
    ok &= windows.all(axis=(2, 3))
    return ok


def loss_ssim(
    pred: ImageRGB | np.ndarray,
    target: ImageRGB | np.ndarray,
    mask: BinaryMask | np.ndarray | None = None,
) -> LossTerm:
    """1 - SSIM with an 11x11 Gaussian window (sigma 1.5), C1=0.01^2, C2=0.03^2.

    Raises:
        ValueError: image smaller than the window.
    """
    p_np = _pixels(pred)
    t_np = _pixels(target)
    if p_np.shape != t_np.shape:
        raise ValueError(f"shape mismatch: {p_np.shape} vs {t_np.shape}")
    h, w = p_np.shape[:2]
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ValueError(f"image {w}x{h} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    bits = _mask_bits(mask, (h, w))
    win_ok = _window_interior(bits)
    n_win = int(win_ok.sum())
    if n_win == 0:
        logger.warning("loss_ssim: no window fully inside the mask; term skipped")
        return LossTerm(value=0.0, grad=np.zeros_like(p_np), skipped=True)

    p = torch.tensor(np.moveaxis(p_np, 2, 0)[:, None], dtype=torch.float64, requires_grad=True)
    t = torch.tensor(np.moveaxis(t_np, 2, 0)[:, None], dtype=torch.float64)
    smap = _ssim_map(p, t)
    sel = torch.tensor(win_ok)[None, None]
    value = 1.0 - smap[sel.expand_as(smap)].mean()
    value.backward()
    grad = np.moveaxis(p.grad.numpy()[:, 0], 0, 2)
    return LossTerm(value=float(value.detach()), grad=grad)


def loss_perceptual_proxy(
    pred: ImageRGB | np.ndarray,
    target: ImageRGB | np.ndarray,
    mask: BinaryMask | np.ndarray | None = None,
) -> LossTerm:
    """Multi-scale (3 dyadic levels) L1 distance between image gradients.

    Invariant to constant intensity offsets; differentiable everywhere except
    exact gradient ties (subgradient 0 there).
    """
    p_np = _pixels(pred)
    t_np = _pixels(target)
    if p_np.shape != t_np.shape:
        raise ValueError(f"shape mismatch: {p_np.shape} vs {t_np.shape}")
    bits = _mask_bits(mask, p_np.shape[:2])

    p = torch.tensor(np.moveaxis(p_np, 2, 0)[None], dtype=torch.float64, requires_grad=True)
    t = torch.tensor(np.moveaxis(t_np, 2, 0)[None], dtype=torch.float64)
    m = torch.tensor(bits[None, None], dtype=torch.float64)

    total = torch.zeros((), dtype=torch.float64)
    levels = 0
    cp, ct, cm = p, t, m
    for level in range(PROXY_LEVELS):
        if level > 0:
            if cp.shape[2] < 2 or cp.shape[3] < 2:
                break
            cp = F.avg_pool2d(cp, 2)
            ct = F.avg_pool2d(ct, 2)
            cm = (F.avg_pool2d(cm, 2) > 0.999).to(torch.float64)
        if cp.shape[3] >= 2:
            ex = cm[..., :, 1:] * cm[..., :, :-1]
            gxp = cp[..., :, 1:] - cp[..., :, :-1]
            gxt = ct[..., :, 1:] - ct[..., :, :-1]
            n = ex.sum() * 3
            if n > 0:
                total = total + (torch.abs(gxp - gxt) * ex).sum() / n
        if cp.shape[2] >= 2:
            ey = cm[..., 1:, :] * cm[..., :-1, :]
            gyp = cp[..., 1:, :] - cp[..., :-1, :]
            gyt = ct[..., 1:, :] - ct[..., :-1, :]
            n = ey.sum() * 3
            if n > 0:
                total = total + (torch.abs(gyp - gyt) * ey).sum() / n
        levels += 1
    if not total.requires_grad:
        # No masked pixel pair at any level; nothing to compare.
        return LossTerm(value=0.0, grad=np.zeros_like(p_np), skipped=True)
    if levels:
        total = total / levels
    total.backward()
    grad = np.moveaxis(p.grad.numpy()[0], 0, 2)
    return LossTerm(value=float(total.detach()), grad=grad)


def loss_depth_pearson(
    rendered_depth: DepthMap | np.ndarray,
    mono_depth: DepthMap | np.ndarray,
    mask: BinaryMask | np.ndarray,
) -> LossTerm:
    """1 - Pearson correlation between rendered and reference depth.

    Invariant to positive affine transforms of either argument. Constant
    depth on either side carries no ranking signal, so the term is skipped
    with a warning flag instead of failing.

    Raises:
        ValueError: fewer than 16 masked valid pixels.
    """
    r = rendered_depth.values if isinstance(rendered_depth, DepthMap) else np.asarray(rendered_depth)
    m = mono_depth.values if isinstance(mono_depth, DepthMap) else np.asarray(mono_depth)
    if r.shape != m.shape:
        raise ValueError(f"shape mismatch: {r.shape} vs {m.shape}")
    bits = _mask_bits(mask, r.shape) & (r > 0) & (m > 0)
    n = int(bits.sum())
    if n < 16:
        raise ValueError(f"depth correlation needs >= 16 masked valid pixels, got {n}")
    rv = r[bits]
    mv = m[bits]
    if np.ptp(rv) == 0 or np.ptp(mv) == 0:
        logger.warning("loss_depth_pearson: zero variance; term skipped")
        return LossTerm(value=0.0, grad=np.zeros_like(r), skipped=True)

    x = torch.tensor(rv, dtype=torch.float64, requires_grad=True)
    y = torch.tensor(mv, dtype=torch.float64)
    xc = x - x.mean()
    yc = y - y.mean()
    denom = torch.sqrt((xc**2).sum()) * torch.sqrt((yc**2).sum())
    if float(denom.detach()) == 0.0:
        logger.warning("loss_depth_pearson: zero variance; term skipped")
        return LossTerm(value=0.0, grad=np.zeros_like(r), skipped=True)
    value = 1.0 - (xc * yc).sum() / denom
    value.backward()
    grad = np.zeros_like(r)
    grad[bits] = x.grad.numpy()
    return LossTerm(value=float(value.detach()), grad=grad)


def opacity_suppression(
    alpha: np.ndarray, visible: BinaryMask, background: BinaryMask
) -> LossTerm:
    """Mean accumulated opacity over missing background pixels.

    Support is (1 - visible) AND background; an empty support yields 0.
    """
    support = (~visible.bits) & background.bits
    n = int(support.sum())
    grad = np.zeros_like(alpha)
    if n == 0:
        return LossTerm(value=0.0, grad=grad)
    value = float(alpha[support].sum() / n)
    grad[support] = 1.0 / n
    return LossTerm(value=value, grad=grad)


def camera_distance_weight(
    novel: Camera, inputs: list[Camera], tau: float | None = None
) -> float:
    """exp(-min distance to an input camera / tau), in (0, 1].

    ``tau`` defaults to the median pairwise distance between the input
    cameras (requires >= 2 inputs when omitted).
    """
    if not inputs:
        raise ValueError("needs at least one input camera")
    centers = np.stack([c.center() for c in inputs])
    if tau is None:
        if len(inputs) < 2:
            raise ValueError("tau must be given explicitly with a single input camera")
        dists = [
            np.linalg.norm(centers[i] - centers[j])
            for i in range(len(inputs))
            for j in range(i + 1, len(inputs))
        ]
        tau = float(np.median(dists))
    if tau <= 0:
        raise ValueError("tau must be positive")
    d = float(np.linalg.norm(centers - novel.center(), axis=1).min())
    return float(np.exp(-d / tau))


_CLOSING_DISK = None


def _closing_disk(radius: int = 3) -> np.ndarray:
    global _CLOSING_DISK
    if _CLOSING_DISK is None:
        yy, xx = np.ogrid[-radius : radius + 1, -radius : radius + 1]
        _CLOSING_DISK = (yy**2 + xx**2) <= radius**2
    return _CLOSING_DISK


def visibility_mask(alpha: np.ndarray, threshold: float = 0.5) -> BinaryMask:
    """Thresholded accumulated opacity, morphologically closed (3 px disk).

    Closing treats the outside of the image as covered so the image border is
    not eaten by the erosion half.
    """
    raw = alpha >= threshold
    disk = _closing_disk()
    dilated = ndimage.binary_dilation(raw, structure=disk, border_value=0)
    closed = ndimage.binary_erosion(dilated, structure=disk, border_value=1)
    return BinaryMask(closed)


def metric_psnr(a: ImageRGB | np.ndarray, b: ImageRGB | np.ndarray) -> float:
    """PSNR in dB for unit-range images, capped at 99 dB."""
    pa = _pixels(a)
    pb = _pixels(b)
    if pa.shape != pb.shape:
        raise ValueError(f"shape mismatch: {pa.shape} vs {pb.shape}")
    mse = float(((pa - pb) ** 2).mean())
    if mse == 0.0:
        return PSNR_CAP_DB
    return float(min(10.0 * np.log10(1.0 / mse), PSNR_CAP_DB))


def metric_ssim(a: ImageRGB | np.ndarray, b: ImageRGB | np.ndarray) -> float:
    """Mean SSIM over valid 11x11 windows."""
    pa = _pixels(a)
    pb = _pixels(b)
    if pa.shape != pb.shape:
        raise ValueError(f"shape mismatch: {pa.shape} vs {pb.shape}")
    with torch.no_grad():
        p = torch.tensor(np.moveaxis(pa, 2, 0)[:, None], dtype=torch.float64)
        t = torch.tensor(np.moveaxis(pb, 2, 0)[:, None], dtype=torch.float64)
        return float(_ssim_map(p, t).mean())


def reconstruction_bundle(
    pred: ImageRGB,
    target: ImageRGB,
    weights: LossWeights,
    *,
    mask: BinaryMask | None = None,
    rendered_depth: DepthMap | None = None,
    mono_depth: DepthMap | None = None,
    scale: float = 1.0,
) -> LossReport:
    """The reconstruction loss bundle: L1 + SSIM + gradient proxy (+ depth
    correlation when a monocular reference is available), scaled by ``scale``.
    """
    h, w = pred.height, pred.width
    terms: dict[str, float] = {}
    flags: dict[str, bool] = {}
    d_color = np.zeros((h, w, 3))
    d_depth = np.zeros((h, w))
    total = 0.0

    t_l1 = loss_l1(pred, target, mask)
    terms["l1"] = t_l1.value
    total += weights.w_l1 * t_l1.value
    d_color += weights.w_l1 * t_l1.grad

    if weights.w_ssim > 0:
        t_ssim = loss_ssim(pred, target, mask)
        terms["ssim"] = t_ssim.value
        flags["ssim_skipped"] = t_ssim.skipped
        total += weights.w_ssim * t_ssim.value
        d_color += weights.w_ssim * t_ssim.grad

    if weights.w_perceptual > 0:
        t_perc = loss_perceptual_proxy(pred, target, mask)
        terms["perceptual"] = t_perc.value
        total += weights.w_perceptual * t_perc.value
        d_color += weights.w_perceptual * t_perc.grad

    if weights.w_depth_pearson > 0 and rendered_depth is not None and mono_depth is not None:
        area = mask.bits if mask is not None else np.ones((h, w), dtype=bool)
        valid = BinaryMask((rendered_depth.values > 0) & (mono_depth.values > 0) & area)
        if valid.count() >= 16:
            t_pear = loss_depth_pearson(rendered_depth, mono_depth, valid)
            terms["depth_pearson"] = t_pear.value
            flags["pearson_skipped"] = t_pear.skipped
            total += weights.w_depth_pearson * t_pear.value
            d_depth += weights.w_depth_pearson * t_pear.grad

    return LossReport(
        total=total * scale,
        terms={k: v * scale for k, v in terms.items()},
        d_color=d_color * scale,
        d_depth=d_depth * scale,
        d_alpha=np.zeros((h, w)),
        flags=flags,
    )
