"""Differentiable splatting renderer.

Forward pass: each Gaussian is projected to an image-plane 2-D Gaussian
(EWA-style perspective projection of its 3-D covariance), depth-sorted
front-to-back per pixel, and alpha-composited:

    c(p) = sum_i c_i * alpha_i * prod_{j<i} (1 - alpha_j)

with alpha_i = sigmoid(opacity_raw_i) * exp(-0.5 * d^T Sigma2d^{-1} d)
clamped to [0, 0.999]. Compositing stops once transmittance drops below 1e-4;
the background is blended with the residual transmittance. The depth output
is the alpha-normalized expected per-Gaussian camera depth; the alpha output
is the accumulated opacity.

Backward pass: analytic gradients of an arbitrary per-pixel loss (given as
upstream gradient images for color, depth, and alpha) with respect to every
Gaussian parameter. Implemented as a reverse sweep over the per-pixel
composited lists followed by the projection chain rule, all in numba kernels
so the desk-scale pipeline runs on a plain CPU.

Fixed rendering constants (shared with any conforming reference
implementation):
  * low-pass of 0.3 px^2 added to the projected covariance diagonal,
  * pixel cull at squared Mahalanobis distance 9 (the 3-sigma footprint),
  * opacity ceiling 0.999, termination transmittance 1e-4,
  * depth sorting with stable (camera depth, storage index) tie-break.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numba
import numpy as np

from .scene import (
    SOURCE_INPUT_VIEW,
    BinaryMask,
    Camera,
    DepthMap,
    GaussianCloud,
    ImageRGB,
    inverse_sigmoid,
)

logger = logging.getLogger(__name__)

LOWPASS_PX2 = 0.3
CULL_MAHALANOBIS_SQ = 9.0
ALPHA_CEILING = 0.999
TERMINATION_TRANSMITTANCE = 1e-4
DEPTH_ALPHA_FLOOR = 1e-4
MIN_Z = 1e-8


@dataclass
class RenderOutput:
    """Per-pixel rendering results."""

    color: ImageRGB
    depth: DepthMap
    alpha: np.ndarray  # (H, W) accumulated opacity in [0, 1]
    contributors: np.ndarray  # (H, W) int32 composited-Gaussian count


@dataclass
class GradientBuffer:
    """Partials of a scalar loss w.r.t. every Gaussian parameter."""

    position: np.ndarray  # (N, 3)
    opacity_raw: np.ndarray  # (N,)
    scale: np.ndarray  # (N, 3)
    rotation: np.ndarray  # (N, 4)
    color: np.ndarray  # (N, 3)

    @classmethod
    def zeros(cls, n: int) -> "GradientBuffer":
        return cls(
            position=np.zeros((n, 3)),
            opacity_raw=np.zeros(n),
            scale=np.zeros((n, 3)),
            rotation=np.zeros((n, 4)),
            color=np.zeros((n, 3)),
        )

    def add(self, other: "GradientBuffer") -> None:
        self.position += other.position
        self.opacity_raw += other.opacity_raw
        self.scale += other.scale
        self.rotation += other.rotation
        self.color += other.color

    def scaled(self, factor: float) -> "GradientBuffer":
        return GradientBuffer(
            position=self.position * factor,
            opacity_raw=self.opacity_raw * factor,
            scale=self.scale * factor,
            rotation=self.rotation * factor,
            color=self.color * factor,
        )

    def validate(self) -> None:
        for name in ("position", "opacity_raw", "scale", "rotation", "color"):
            if not np.isfinite(getattr(self, name)).all():
                raise ValueError(f"non-finite gradient in {name}")


@dataclass
class RenderContext:
    """Cached forward intermediates so backward can skip the re-render."""

    n_gauss: int
    width: int
    height: int
    valid: np.ndarray
    cam_xyz: np.ndarray  # (N, 3) camera-frame centers
    uv: np.ndarray  # (N, 2) projected means
    cov2d: np.ndarray  # (N, 3) (a, b, c) incl. low-pass
    inv2d: np.ndarray  # (N, 3) (ia, ib, ic)
    sig: np.ndarray  # (N,) activated opacity
    sorted_pid: np.ndarray
    sorted_g: np.ndarray
    sorted_alpha: np.ndarray
    pair_w: np.ndarray
    pair_T: np.ndarray
    accum_alpha: np.ndarray  # (HW,)
    depth_sum: np.ndarray  # (HW,)
    residual: np.ndarray  # (HW,)


@numba.njit(cache=True)
def _quat_to_rot(w, x, y, z, out):
    out[0, 0] = 1.0 - 2.0 * (y * y + z * z)
    out[0, 1] = 2.0 * (x * y - w * z)
    out[0, 2] = 2.0 * (x * z + w * y)
    out[1, 0] = 2.0 * (x * y + w * z)
    out[1, 1] = 1.0 - 2.0 * (x * x + z * z)
    out[1, 2] = 2.0 * (y * z - w * x)
    out[2, 0] = 2.0 * (x * z - w * y)
    out[2, 1] = 2.0 * (y * z + w * x)
    out[2, 2] = 1.0 - 2.0 * (x * x + y * y)


@numba.njit(cache=True)
def _project_gaussians(
    position, opacity_raw, scale, rotation, R_cam, t_cam, fx, fy, cx, cy
):
    """Per-Gaussian projection: camera coords, 2-D covariance, opacities."""
    n = position.shape[0]
    valid = np.zeros(n, dtype=np.bool_)
    cam_xyz = np.zeros((n, 3))
    uv = np.zeros((n, 2))
    cov2d = np.zeros((n, 3))
    inv2d = np.zeros((n, 3))
    sig = np.zeros(n)

    Rg = np.zeros((3, 3))
    M = np.zeros((3, 3))
    S3 = np.zeros((3, 3))
    V = np.zeros((3, 3))
    tmp = np.zeros((3, 3))
    for g in range(n):
        X = (
            R_cam[0, 0] * position[g, 0]
            + R_cam[0, 1] * position[g, 1]
            + R_cam[0, 2] * position[g, 2]
            + t_cam[0]
        )
        Y = (
            R_cam[1, 0] * position[g, 0]
            + R_cam[1, 1] * position[g, 1]
            + R_cam[1, 2] * position[g, 2]
            + t_cam[1]
        )
        Z = (
            R_cam[2, 0] * position[g, 0]
            + R_cam[2, 1] * position[g, 1]
            + R_cam[2, 2] * position[g, 2]
            + t_cam[2]
        )
        if Z <= MIN_Z:
            continue
        qn = np.sqrt(
            rotation[g, 0] ** 2
            + rotation[g, 1] ** 2
            + rotation[g, 2] ** 2
            + rotation[g, 3] ** 2
        )
        if qn == 0.0:
            continue
        _quat_to_rot(
            rotation[g, 0] / qn,
            rotation[g, 1] / qn,
            rotation[g, 2] / qn,
            rotation[g, 3] / qn,
            Rg,
        )
        for i in range(3):
            for j in range(3):
                M[i, j] = Rg[i, j] * scale[g, j]
        # Sigma3 = M M^T
        for i in range(3):
            for j in range(3):
                s = 0.0
                for k in range(3):
                    s += M[i, k] * M[j, k]
                S3[i, j] = s
        # V = R_cam Sigma3 R_cam^T
        for i in range(3):
            for j in range(3):
                s = 0.0
                for k in range(3):
                    s += R_cam[i, k] * S3[k, j]
                tmp[i, j] = s
        for i in range(3):
            for j in range(3):
                s = 0.0
                for k in range(3):
                    s += tmp[i, k] * R_cam[j, k]
                V[i, j] = s
        # Perspective Jacobian rows: (fx/Z, 0, -fx X/Z^2), (0, fy/Z, -fy Y/Z^2)
        j00 = fx / Z
        j02 = -fx * X / (Z * Z)
        j11 = fy / Z
        j12 = -fy * Y / (Z * Z)
        a = (
            j00 * (V[0, 0] * j00 + V[0, 2] * j02)
            + j02 * (V[2, 0] * j00 + V[2, 2] * j02)
            + LOWPASS_PX2
        )
        b = j00 * (V[0, 1] * j11 + V[0, 2] * j12) + j02 * (V[2, 1] * j11 + V[2, 2] * j12)
        c = (
            j11 * (V[1, 1] * j11 + V[1, 2] * j12)
            + j12 * (V[2, 1] * j11 + V[2, 2] * j12)
            + LOWPASS_PX2
        )
        det = a * c - b * b
        if det <= 0.0:
            continue
        valid[g] = True
        cam_xyz[g, 0] = X
        cam_xyz[g, 1] = Y
        cam_xyz[g, 2] = Z
        uv[g, 0] = fx * X / Z + cx
        uv[g, 1] = fy * Y / Z + cy
        cov2d[g, 0] = a
        cov2d[g, 1] = b
        cov2d[g, 2] = c
        inv2d[g, 0] = c / det
        inv2d[g, 1] = -b / det
        inv2d[g, 2] = a / det
        sig[g] = 1.0 / (1.0 + np.exp(-opacity_raw[g]))
    return valid, cam_xyz, uv, cov2d, inv2d, sig


@numba.njit(cache=True)
def _count_pairs(order, uv, cov2d, inv2d, width, height):
    counts = np.zeros(order.shape[0], dtype=np.int64)
    for k in range(order.shape[0]):
        g = order[k]
        u = uv[g, 0]
        v = uv[g, 1]
        c = cov2d[g, 2]
        ia = inv2d[g, 0]
        ib = inv2d[g, 1]
        ic = inv2d[g, 2]
        det_inv = ia * ic - ib * ib
        dy_max = CULL_MAHALANOBIS_SQ**0.5 * np.sqrt(c)
        y0 = max(0, int(np.ceil(v - dy_max - 0.5)))
        y1 = min(height - 1, int(np.floor(v + dy_max - 0.5)))
        total = 0
        for py in range(y0, y1 + 1):
            dy = py + 0.5 - v
            disc = CULL_MAHALANOBIS_SQ * ia - det_inv * dy * dy
            if disc <= 0.0:
                continue
            half = np.sqrt(disc) / ia
            mid = -ib * dy / ia
            x0 = max(0, int(np.ceil(u + mid - half - 0.5)))
            x1 = min(width - 1, int(np.floor(u + mid + half - 0.5)))
            if x1 >= x0:
                total += x1 - x0 + 1
        counts[k] = total
    return counts


@numba.njit(cache=True)
def _fill_pairs(order, offsets, uv, cov2d, inv2d, sig, width, height, pair_g, pair_pid, pair_alpha):
    for k in range(order.shape[0]):
        g = order[k]
        off = offsets[k]
        u = uv[g, 0]
        v = uv[g, 1]
        c = cov2d[g, 2]
        ia = inv2d[g, 0]
        ib = inv2d[g, 1]
        ic = inv2d[g, 2]
        sg = sig[g]
        det_inv = ia * ic - ib * ib
        dy_max = CULL_MAHALANOBIS_SQ**0.5 * np.sqrt(c)
        y0 = max(0, int(np.ceil(v - dy_max - 0.5)))
        y1 = min(height - 1, int(np.floor(v + dy_max - 0.5)))
        for py in range(y0, y1 + 1):
            dy = py + 0.5 - v
            disc = CULL_MAHALANOBIS_SQ * ia - det_inv * dy * dy
            if disc <= 0.0:
                continue
            half = np.sqrt(disc) / ia
            mid = -ib * dy / ia
            x0 = max(0, int(np.ceil(u + mid - half - 0.5)))
            x1 = min(width - 1, int(np.floor(u + mid + half - 0.5)))
            for px in range(x0, x1 + 1):
                dx = px + 0.5 - u
                q = ia * dx * dx + 2.0 * ib * dx * dy + ic * dy * dy
                if q > CULL_MAHALANOBIS_SQ:
                    # Corner of the scan range outside the exact ellipse.
                    alpha = 0.0
                else:
                    alpha = sg * np.exp(-0.5 * q)
                    if alpha > ALPHA_CEILING:
                        alpha = ALPHA_CEILING
                pair_g[off] = g
                pair_pid[off] = py * width + px
                pair_alpha[off] = alpha
                off += 1


@numba.njit(cache=True)
def _counting_sort_by_pid(pair_pid, n_pixels):
    n = pair_pid.shape[0]
    counts = np.zeros(n_pixels + 1, dtype=np.int64)
    for i in range(n):
        counts[pair_pid[i] + 1] += 1
    for p in range(n_pixels):
        counts[p + 1] += counts[p]
    out = np.empty(n, dtype=np.int64)
    cursor = counts[:n_pixels].copy()
    for i in range(n):
        p = pair_pid[i]
        out[cursor[p]] = i
        cursor[p] += 1
    return out


@numba.njit(cache=True)
def _composite_forward(
    sorted_pid, sorted_g, sorted_alpha, cam_z, color, background, n_pixels
):
    n = sorted_pid.shape[0]
    img = np.zeros((n_pixels, 3))
    accum = np.zeros(n_pixels)
    depth_sum = np.zeros(n_pixels)
    residual = np.ones(n_pixels)
    contributors = np.zeros(n_pixels, dtype=np.int32)
    pair_w = np.zeros(n)
    pair_T = np.zeros(n)

    i = 0
    while i < n:
        p = sorted_pid[i]
        T = 1.0
        j = i
        while j < n and sorted_pid[j] == p:
            if T >= TERMINATION_TRANSMITTANCE:
                g = sorted_g[j]
                a = sorted_alpha[j]
                w = a * T
                pair_w[j] = w
                pair_T[j] = T
                img[p, 0] += w * color[g, 0]
                img[p, 1] += w * color[g, 1]
                img[p, 2] += w * color[g, 2]
                accum[p] += w
                depth_sum[p] += w * cam_z[g]
                if w > 0.0:
                    contributors[p] += 1
                T *= 1.0 - a
            j += 1
        residual[p] = T
        i = j

    for p in range(n_pixels):
        r = residual[p]
        img[p, 0] += r * background[0]
        img[p, 1] += r * background[1]
        img[p, 2] += r * background[2]
    return img, accum, depth_sum, residual, pair_w, pair_T, contributors


@numba.njit(cache=True)
def _composite_backward(
    sorted_pid,
    sorted_g,
    sorted_alpha,
    pair_w,
    pair_T,
    accum,
    depth_sum,
    residual,
    cam_z,
    color,
    uv,
    inv2d,
    sig,
    background,
    g_img,
    g_alpha_img,
    g_depth_img,
    width,
    grad_color,
    grad_opacity,
    grad_z,
    grad_u,
    grad_v,
    grad_ia,
    grad_ib,
    grad_ic,
):
    """Reverse sweep over per-pixel segments plus the per-pair chain rule.

    Terminated pairs carry pair_T == 0 and receive no gradient.
    """
    n = sorted_pid.shape[0]
    i = 0
    while i < n:
        p = sorted_pid[i]
        j = i
        while j < n and sorted_pid[j] == p:
            j += 1
        # Per-pixel upstream pieces.
        gc0 = g_img[p, 0]
        gc1 = g_img[p, 1]
        gc2 = g_img[p, 2]
        ga = g_alpha_img[p]
        gd_hat = 0.0
        A = accum[p]
        if A > DEPTH_ALPHA_FLOOR:
            gd = g_depth_img[p]
            gd_hat = gd / A
            ga += -gd * depth_sum[p] / (A * A)
        bg_term = (
            gc0 * background[0] + gc1 * background[1] + gc2 * background[2]
        ) * residual[p]

        S = 0.0
        py = p // width
        px = p - py * width
        pxc = px + 0.5
        pyc = py + 0.5
        for k in range(j - 1, i - 1, -1):
            T = pair_T[k]
            if T <= 0.0:
                continue  # terminated: zero contribution and zero gradient
            g = sorted_g[k]
            a = sorted_alpha[k]
            w = pair_w[k]
            gamma = gc0 * color[g, 0] + gc1 * color[g, 1] + gc2 * color[g, 2] + ga
            gamma += gd_hat * cam_z[g]
            d_alpha = gamma * T - (S + bg_term) / (1.0 - a)
            S += gamma * w
            # Color and depth direct accumulations.
            grad_color[g, 0] += w * gc0
            grad_color[g, 1] += w * gc1
            grad_color[g, 2] += w * gc2
            grad_z[g] += w * gd_hat
            # alpha = min(sig * G, ceiling); clamp kills the gradient.
            sg = sig[g]
            if sg <= 0.0:
                continue
            G = a / sg
            if sg * G >= ALPHA_CEILING:
                continue
            grad_opacity[g] += d_alpha * G * sg * (1.0 - sg)
            dQ = -0.5 * d_alpha * sg * G
            dx = pxc - uv[g, 0]
            dy = pyc - uv[g, 1]
            ia = inv2d[g, 0]
            ib = inv2d[g, 1]
            ic = inv2d[g, 2]
            ddx = dQ * 2.0 * (ia * dx + ib * dy)
            ddy = dQ * 2.0 * (ib * dx + ic * dy)
            grad_u[g] -= ddx
            grad_v[g] -= ddy
            grad_ia[g] += dQ * dx * dx
            grad_ib[g] += dQ * 2.0 * dx * dy
            grad_ic[g] += dQ * dy * dy
        i = j


@numba.njit(cache=True)
def _per_gaussian_backward(
    valid,
    position,
    scale,
    rotation,
    cam_xyz,
    cov2d,
    inv2d,
    R_cam,
    fx,
    fy,
    grad_u,
    grad_v,
    grad_z,
    grad_ia,
    grad_ib,
    grad_ic,
    grad_position,
    grad_scale,
    grad_rotation,
):
    n = position.shape[0]
    Rg = np.zeros((3, 3))
    Mm = np.zeros((3, 3))
    dM = np.zeros((3, 3))
    S3 = np.zeros((3, 3))
    V = np.zeros((3, 3))
    dV = np.zeros((3, 3))
    dS3 = np.zeros((3, 3))
    gRg = np.zeros((3, 3))
    tmp = np.zeros((3, 3))
    for g in range(n):
        if not valid[g]:
            continue
        if (
            grad_u[g] == 0.0
            and grad_v[g] == 0.0
            and grad_z[g] == 0.0
            and grad_ia[g] == 0.0
            and grad_ib[g] == 0.0
            and grad_ic[g] == 0.0
        ):
            continue
        X = cam_xyz[g, 0]
        Y = cam_xyz[g, 1]
        Z = cam_xyz[g, 2]
        a = cov2d[g, 0]
        b = cov2d[g, 1]
        c = cov2d[g, 2]
        ia = inv2d[g, 0]
        ib = inv2d[g, 1]
        ic = inv2d[g, 2]

        # d/dC2 from d/dInv: dC2 = -Inv * GInv * Inv with symmetric packing.
        gi00 = grad_ia[g]
        gi01 = 0.5 * grad_ib[g]
        gi11 = grad_ic[g]
        # P = Inv * GInv
        p00 = ia * gi00 + ib * gi01
        p01 = ia * gi01 + ib * gi11
        p10 = ib * gi00 + ic * gi01
        p11 = ib * gi01 + ic * gi11
        # dC2 = -P * Inv
        dc00 = -(p00 * ia + p01 * ib)
        dc01 = -(p00 * ib + p01 * ic)
        dc11 = -(p10 * ib + p11 * ic)
        # Parameter grads for (a, b, c): b appears in both off-diagonals.
        gA = dc00
        gB = 2.0 * dc01
        gC = dc11

        # Rebuild the quaternion rotation and M = Rg diag(s).
        qw = rotation[g, 0]
        qx = rotation[g, 1]
        qy = rotation[g, 2]
        qz = rotation[g, 3]
        qn = np.sqrt(qw * qw + qx * qx + qy * qy + qz * qz)
        w = qw / qn
        x = qx / qn
        y = qy / qn
        z = qz / qn
        _quat_to_rot(w, x, y, z, Rg)
        for i in range(3):
            for jj in range(3):
                Mm[i, jj] = Rg[i, jj] * scale[g, jj]
        for i in range(3):
            for jj in range(3):
                s = 0.0
                for k in range(3):
                    s += Mm[i, k] * Mm[jj, k]
                S3[i, jj] = s
        for i in range(3):
            for jj in range(3):
                s = 0.0
                for k in range(3):
                    s += R_cam[i, k] * S3[k, jj]
                tmp[i, jj] = s
        for i in range(3):
            for jj in range(3):
                s = 0.0
                for k in range(3):
                    s += tmp[i, k] * R_cam[jj, k]
                V[i, jj] = s

        j00 = fx / Z
        j02 = -fx * X / (Z * Z)
        j11 = fy / Z
        j12 = -fy * Y / (Z * Z)

        # GM2 symmetric packing of (gA, gB, gC).
        m00 = gA
        m01 = 0.5 * gB
        m11 = gC

        # dV = J^T GM2 J for J rows (j00, 0, j02), (0, j11, j12).
        dV[0, 0] = j00 * m00 * j00
        dV[0, 1] = j00 * m01 * j11
        dV[0, 2] = j00 * (m00 * j02 + m01 * j12)
        dV[1, 0] = dV[0, 1]
        dV[1, 1] = j11 * m11 * j11
        dV[1, 2] = j11 * (m01 * j02 + m11 * j12)
        dV[2, 0] = dV[0, 2]
        dV[2, 1] = dV[1, 2]
        dV[2, 2] = (
            j02 * (m00 * j02 + m01 * j12) + j12 * (m01 * j02 + m11 * j12)
        )

        # dJ = 2 * GM2 * J * V  (2x3); only the four nonconstant J entries matter.
        # (GM2 J)[r, k] = sum_s GM2[r, s] J[s, k]
        gj0_0 = m00 * j00
        gj0_1 = m01 * j11
        gj0_2 = m00 * j02 + m01 * j12
        gj1_0 = m01 * j00
        gj1_1 = m11 * j11
        gj1_2 = m01 * j02 + m11 * j12
        dJ00 = 2.0 * (gj0_0 * V[0, 0] + gj0_1 * V[1, 0] + gj0_2 * V[2, 0])
        dJ02 = 2.0 * (gj0_0 * V[0, 2] + gj0_1 * V[1, 2] + gj0_2 * V[2, 2])
        dJ11 = 2.0 * (gj1_0 * V[0, 1] + gj1_1 * V[1, 1] + gj1_2 * V[2, 1])
        dJ12 = 2.0 * (gj1_0 * V[0, 2] + gj1_1 * V[1, 2] + gj1_2 * V[2, 2])

        # dSigma3 = R_cam^T dV R_cam
        for i in range(3):
            for jj in range(3):
                s = 0.0
                for k in range(3):
                    s += R_cam[k, i] * dV[k, jj]
                tmp[i, jj] = s
        for i in range(3):
            for jj in range(3):
                s = 0.0
                for k in range(3):
                    s += tmp[i, k] * R_cam[k, jj]
                dS3[i, jj] = s

        # dM = 2 dSigma3 M; scale and rotation grads from M = Rg diag(s).
        for i in range(3):
            for jj in range(3):
                s = 0.0
                for k in range(3):
                    s += dS3[i, k] * Mm[k, jj]
                dM[i, jj] = 2.0 * s
        for k in range(3):
            gs = 0.0
            for i in range(3):
                gs += dM[i, k] * Rg[i, k]
                gRg[i, k] = dM[i, k] * scale[g, k]
            grad_scale[g, k] += gs

        # Quaternion chain through the normalized quaternion.
        dqw = 2.0 * (
            gRg[0, 1] * (-z)
            + gRg[0, 2] * y
            + gRg[1, 0] * z
            + gRg[1, 2] * (-x)
            + gRg[2, 0] * (-y)
            + gRg[2, 1] * x
        )
        dqx = 2.0 * (
            gRg[0, 1] * y
            + gRg[0, 2] * z
            + gRg[1, 0] * y
            + gRg[1, 1] * (-2.0 * x)
            + gRg[1, 2] * (-w)
            + gRg[2, 0] * z
            + gRg[2, 1] * w
            + gRg[2, 2] * (-2.0 * x)
        )
        dqy = 2.0 * (
            gRg[0, 0] * (-2.0 * y)
            + gRg[0, 1] * x
            + gRg[0, 2] * w
            + gRg[1, 0] * x
            + gRg[1, 2] * z
            + gRg[2, 0] * (-w)
            + gRg[2, 1] * z
            + gRg[2, 2] * (-2.0 * y)
        )
        dqz = 2.0 * (
            gRg[0, 0] * (-2.0 * z)
            + gRg[0, 1] * (-w)
            + gRg[0, 2] * x
            + gRg[1, 0] * w
            + gRg[1, 1] * (-2.0 * z)
            + gRg[1, 2] * y
            + gRg[2, 0] * x
            + gRg[2, 1] * y
        )
        dot = dqw * w + dqx * x + dqy * y + dqz * z
        grad_rotation[g, 0] += (dqw - w * dot) / qn
        grad_rotation[g, 1] += (dqx - x * dot) / qn
        grad_rotation[g, 2] += (dqy - y * dot) / qn
        grad_rotation[g, 3] += (dqz - z * dot) / qn

        # Camera-frame position gradient: mean projection, J entries, depth.
        gu = grad_u[g]
        gv = grad_v[g]
        gX = gu * fx / Z
        gY = gv * fy / Z
        gZ = -gu * fx * X / (Z * Z) - gv * fy * Y / (Z * Z) + grad_z[g]
        gZ += dJ00 * (-fx / (Z * Z))
        gX += dJ02 * (-fx / (Z * Z))
        gZ += dJ02 * (2.0 * fx * X / (Z * Z * Z))
        gZ += dJ11 * (-fy / (Z * Z))
        gY += dJ12 * (-fy / (Z * Z))
        gZ += dJ12 * (2.0 * fy * Y / (Z * Z * Z))

        grad_position[g, 0] += R_cam[0, 0] * gX + R_cam[1, 0] * gY + R_cam[2, 0] * gZ
        grad_position[g, 1] += R_cam[0, 1] * gX + R_cam[1, 1] * gY + R_cam[2, 1] * gZ
        grad_position[g, 2] += R_cam[0, 2] * gX + R_cam[1, 2] * gY + R_cam[2, 2] * gZ


def _empty_output(camera: Camera, background: np.ndarray) -> RenderOutput:
    h, w = camera.height, camera.width
    img = np.tile(background.reshape(1, 1, 3), (h, w, 1))
    return RenderOutput(
        color=ImageRGB(img),
        depth=DepthMap(np.zeros((h, w))),
        alpha=np.zeros((h, w)),
        contributors=np.zeros((h, w), dtype=np.int32),
    )


def _forward(cloud: GaussianCloud, camera: Camera, background: np.ndarray):
    h, w = camera.height, camera.width
    n = len(cloud)
    valid, cam_xyz, uv, cov2d, inv2d, sig = _project_gaussians(
        cloud.position,
        cloud.opacity_raw,
        cloud.scale,
        cloud.rotation,
        camera.rotation,
        camera.translation,
        camera.fx,
        camera.fy,
        camera.cx,
        camera.cy,
    )
    vg = np.nonzero(valid)[0]
    if vg.size == 0:
        ctx = RenderContext(
            n_gauss=n,
            width=w,
            height=h,
            valid=valid,
            cam_xyz=cam_xyz,
            uv=uv,
            cov2d=cov2d,
            inv2d=inv2d,
            sig=sig,
            sorted_pid=np.empty(0, dtype=np.int64),
            sorted_g=np.empty(0, dtype=np.int64),
            sorted_alpha=np.empty(0),
            pair_w=np.empty(0),
            pair_T=np.empty(0),
            accum_alpha=np.zeros(h * w),
            depth_sum=np.zeros(h * w),
            residual=np.ones(h * w),
        )
        return _empty_output(camera, background), ctx

    # Stable front-to-back order: (camera depth, storage index).
    order = vg[np.argsort(cam_xyz[vg, 2], kind="stable")]
    counts = _count_pairs(order, uv, cov2d, inv2d, w, h)
    offsets = np.zeros(order.size, dtype=np.int64)
    np.cumsum(counts[:-1], out=offsets[1:])
    total = int(counts.sum())
    pair_g = np.empty(total, dtype=np.int64)
    pair_pid = np.empty(total, dtype=np.int64)
    pair_alpha = np.empty(total)
    _fill_pairs(order, offsets, uv, cov2d, inv2d, sig, w, h, pair_g, pair_pid, pair_alpha)

    perm = _counting_sort_by_pid(pair_pid, h * w)
    sorted_pid = pair_pid[perm]
    sorted_g = pair_g[perm]
    sorted_alpha = pair_alpha[perm]

    img, accum, depth_sum, residual, pair_w, pair_T, contributors = _composite_forward(
        sorted_pid, sorted_g, sorted_alpha, cam_xyz[:, 2].copy(), cloud.color, background, h * w
    )

    depth = np.zeros(h * w)
    sel = accum > DEPTH_ALPHA_FLOOR
    depth[sel] = depth_sum[sel] / accum[sel]

    output = RenderOutput(
        color=ImageRGB(np.clip(img, 0.0, None).reshape(h, w, 3)),
        depth=DepthMap(depth.reshape(h, w)),
        alpha=np.clip(accum, 0.0, 1.0).reshape(h, w),
        contributors=contributors.reshape(h, w),
    )
    ctx = RenderContext(
        n_gauss=n,
        width=w,
        height=h,
        valid=valid,
        cam_xyz=cam_xyz,
        uv=uv,
        cov2d=cov2d,
        inv2d=inv2d,
        sig=sig,
        sorted_pid=sorted_pid,
        sorted_g=sorted_g,
        sorted_alpha=sorted_alpha,
        pair_w=pair_w,
        pair_T=pair_T,
        accum_alpha=accum,
        depth_sum=depth_sum,
        residual=residual,
    )
    return output, ctx


def render(cloud: GaussianCloud, camera: Camera, background) -> RenderOutput:
    """Render color, expected depth, and accumulated opacity for one camera."""
    bg = np.asarray(background, dtype=np.float64).reshape(3)
    output, _ = _forward(cloud, camera, bg)
    return output


def render_with_context(
    cloud: GaussianCloud, camera: Camera, background
) -> tuple[RenderOutput, RenderContext]:
    """Render and keep forward intermediates for a cheap matching backward."""
    bg = np.asarray(background, dtype=np.float64).reshape(3)
    return _forward(cloud, camera, bg)


def render_backward(
    cloud: GaussianCloud,
    camera: Camera,
    background,
    *,
    d_color: np.ndarray | None = None,
    d_depth: np.ndarray | None = None,
    d_alpha: np.ndarray | None = None,
    context: RenderContext | None = None,
) -> GradientBuffer:
    """Analytic loss gradients w.r.t. every Gaussian parameter.

    ``d_color``/``d_depth``/``d_alpha`` are per-pixel gradients of the scalar
    loss w.r.t. the rendered color, normalized depth, and accumulated opacity.
    ``context`` may carry the intermediates of a matching forward pass
    (from :func:`render_with_context`); otherwise the forward is recomputed.
    """
    bg = np.asarray(background, dtype=np.float64).reshape(3)
    if context is None:
        _, context = _forward(cloud, camera, bg)
    n = context.n_gauss
    grads = GradientBuffer.zeros(n)
    if context.sorted_pid.size == 0:
        return grads
    h, w = context.height, context.width
    g_img = np.zeros((h * w, 3)) if d_color is None else np.asarray(d_color, dtype=np.float64).reshape(h * w, 3)
    g_alpha = np.zeros(h * w) if d_alpha is None else np.asarray(d_alpha, dtype=np.float64).reshape(h * w)
    g_depth = np.zeros(h * w) if d_depth is None else np.asarray(d_depth, dtype=np.float64).reshape(h * w)

    grad_z = np.zeros(n)
    grad_u = np.zeros(n)
    grad_v = np.zeros(n)
    grad_ia = np.zeros(n)
    grad_ib = np.zeros(n)
    grad_ic = np.zeros(n)
    _composite_backward(
        context.sorted_pid,
        context.sorted_g,
        context.sorted_alpha,
        context.pair_w,
        context.pair_T,
        context.accum_alpha,
        context.depth_sum,
        context.residual,
        context.cam_xyz[:, 2].copy(),
        cloud.color,
        context.uv,
        context.inv2d,
        context.sig,
        bg,
        g_img,
        g_alpha,
        g_depth,
        w,
        grads.color,
        grads.opacity_raw,
        grad_z,
        grad_u,
        grad_v,
        grad_ia,
        grad_ib,
        grad_ic,
    )
    _per_gaussian_backward(
        context.valid,
        cloud.position,
        cloud.scale,
        cloud.rotation,
        context.cam_xyz,
        context.cov2d,
        context.inv2d,
        camera.rotation,
        camera.fx,
        camera.fy,
        grad_u,
        grad_v,
        grad_z,
        grad_ia,
        grad_ib,
        grad_ic,
        grads.position,
        grads.scale,
        grads.rotation,
    )
    return grads


def spawn_from_depth(
    image: ImageRGB,
    depth: DepthMap,
    camera: Camera,
    region: BinaryMask,
    *,
    scale_factor: float = 1.4,
    opacity: float = 0.1,
    view_index: int = 0,
    kind: int = SOURCE_INPUT_VIEW,
) -> GaussianCloud:
    """One Gaussian per region pixel, unprojected to its depth.

    Gaussians are isotropic with identity rotation; the scale is chosen so the
    projected footprint diameter is ``scale_factor`` pixels at the spawn depth
    (scale = scale_factor * z / fx per axis). Invalid-depth pixels inside the
    region are skipped; the skip count is logged.
    """
    sel = region.bits & depth.valid
    skipped = int(region.bits.sum()) - int(sel.sum())
    if skipped:
        logger.warning(
            "spawn_from_depth: skipped %d region pixels with invalid depth (view %d)",
            skipped,
            view_index,
        )
    ii, jj = np.nonzero(sel)
    k = ii.size
    if k == 0:
        return GaussianCloud.empty()
    z = depth.values[ii, jj]
    pc = np.stack(
        [
            (jj + 0.5 - camera.cx) / camera.fx * z,
            (ii + 0.5 - camera.cy) / camera.fy * z,
            z,
        ],
        axis=1,
    )
    world = (pc - camera.translation) @ camera.rotation
    quat = np.zeros((k, 4))
    quat[:, 0] = 1.0
    return GaussianCloud(
        position=world,
        opacity_raw=np.full(k, float(inverse_sigmoid(opacity))),
        scale=np.repeat((scale_factor * z / camera.fx)[:, None], 3, axis=1),
        rotation=quat,
        color=image.pixels[ii, jj].copy(),
        source_kind=np.full(k, kind, dtype=np.int8),
        source_view=np.full(k, view_index, dtype=np.int32),
        source_pixel=(ii * camera.width + jj).astype(np.int64),
    )
