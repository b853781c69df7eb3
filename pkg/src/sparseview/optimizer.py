"""Parameter updates, optimization state, and checkpoint serialization.

Updates are adaptive first-order (Adam-style) per parameter group. Scales are
updated multiplicatively (moments accumulated in log-space) so they stay
positive; quaternions are renormalized after every update; colors are clamped
to [0, 1]; opacities are updated pre-activation. The position step size
decays exponentially over each stage.

Checkpoints are a versioned binary container (magic ``RI3D``, little-endian)
holding the cloud arrays, optimizer moments, RNG state, loss history, and any
stage caches. Serialization is byte-deterministic: two identical runs produce
identical files, and resuming from a checkpoint continues bit-exactly.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import OptimizationError
from .renderer import GradientBuffer
from .scene import GaussianCloud

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"RI3D"
CHECKPOINT_VERSION = 1

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

PARAM_GROUPS = ("position", "opacity_raw", "scale", "rotation", "color")


@dataclass
class StepSizes:
    """Per-group learning rates; the position rate decays over a stage."""

    position_init: float = 1.6e-4
    position_final: float = 1.6e-6
    opacity: float = 0.05
    scale: float = 5e-3
    rotation: float = 1e-3
    color: float = 2.5e-3

    def position_at(self, iteration: int, stage_length: int) -> float:
        if stage_length <= 1 or self.position_init <= 0:
            return self.position_init
        frac = min(max(iteration / stage_length, 0.0), 1.0)
        return float(self.position_init * (self.position_final / self.position_init) ** frac)


@dataclass
class Schedule:
    """Iteration schedule for both optimization stages and LOO pair export."""

    stage1_iters: int = 4000
    stage1_refresh: int = 400
    stage1_views: int = 8
    stage2_iters: int = 4000
    stage2_cycle: int = 200
    stage2_views: int = 10
    inpaint_stop_iter: int = 2800
    loo_pretrain_iters: int = 6000
    loo_total_iters: int = 10000
    snapshot_iters: tuple[int, ...] = (6000, 8000, 10000)
    step_sizes: StepSizes = field(default_factory=StepSizes)
    opacity_mask_threshold: float = 0.5
    preview_every: int = 500

    @property
    def inpaint_views(self) -> int:
        """K: every other stage-2 view is inpainted per cycle."""
        return (self.stage2_views + 1) // 2

    def validate(self) -> None:
        if self.stage1_iters % self.stage1_refresh != 0:
            raise ValueError("stage1_refresh must divide stage1_iters")
        if self.stage2_iters % self.stage2_cycle != 0:
            raise ValueError("stage2_cycle must divide stage2_iters")
        if self.inpaint_views > self.stage2_views:
            raise ValueError("inpaint view count exceeds stage2 views")
        if self.loo_pretrain_iters >= self.loo_total_iters:
            raise ValueError("loo_pretrain_iters must be below loo_total_iters")


def _zero_moments(cloud: GaussianCloud) -> dict[str, dict[str, np.ndarray]]:
    return {
        name: {
            "m": np.zeros_like(getattr(cloud, name)),
            "v": np.zeros_like(getattr(cloud, name)),
        }
        for name in PARAM_GROUPS
    }


@dataclass
class OptimState:
    """Single-writer optimization state; serializable and resumable bit-exactly."""

    cloud: GaussianCloud
    moments: dict[str, dict[str, np.ndarray]]
    iteration: int
    adam_step: int
    stage_length: int
    seed: int
    rng: np.random.Generator
    loss_history: list[list[float]] = field(default_factory=list)
    skipped_nonfinite: int = 0

    @classmethod
    def new(cls, cloud: GaussianCloud, seed: int, stage_length: int) -> "OptimState":
        return cls(
            cloud=cloud,
            moments=_zero_moments(cloud),
            iteration=0,
            adam_step=0,
            stage_length=stage_length,
            seed=seed,
            rng=np.random.default_rng(seed),
        )

    def grow(self, added: int) -> None:
        """Extend moment buffers with zeros for newly spawned Gaussians."""
        for name in PARAM_GROUPS:
            ref = getattr(self.cloud, name)
            for key in ("m", "v"):
                old = self.moments[name][key]
                grown = np.zeros_like(ref)
                grown[: old.shape[0]] = old
                self.moments[name][key] = grown


def step_params(state: OptimState, grads: GradientBuffer, step_sizes: StepSizes) -> OptimState:
    """One adaptive update of every parameter group, in place.

    Gaussians with any non-finite gradient entry are skipped for the step
    (with a warning); their moments still decay.
    """
    cloud = state.cloud
    n = len(cloud)
    if n == 0:
        state.adam_step += 1
        return state

    bad = ~(
        np.isfinite(grads.position).all(axis=1)
        & np.isfinite(grads.opacity_raw)
        & np.isfinite(grads.scale).all(axis=1)
        & np.isfinite(grads.rotation).all(axis=1)
        & np.isfinite(grads.color).all(axis=1)
    )
    n_bad = int(bad.sum())
    if n_bad:
        state.skipped_nonfinite += n_bad
        logger.warning("step_params: skipping %d Gaussians with non-finite gradients", n_bad)

    state.adam_step += 1
    t = state.adam_step
    bias1 = 1.0 - ADAM_BETA1**t
    bias2 = 1.0 - ADAM_BETA2**t

    def adam_delta(name: str, grad: np.ndarray, lr: float) -> np.ndarray:
        if n_bad:
            grad = grad.copy()
            grad[bad] = 0.0
        mom = state.moments[name]
        mom["m"] = ADAM_BETA1 * mom["m"] + (1.0 - ADAM_BETA1) * grad
        mom["v"] = ADAM_BETA2 * mom["v"] + (1.0 - ADAM_BETA2) * grad * grad
        m_hat = mom["m"] / bias1
        v_hat = mom["v"] / bias2
        return -lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)

    pos_lr = step_sizes.position_at(state.iteration, state.stage_length)
    cloud.position += adam_delta("position", grads.position, pos_lr)
    cloud.opacity_raw += adam_delta("opacity_raw", grads.opacity_raw, step_sizes.opacity)
    # Scales update multiplicatively (log-space moments) to stay positive.
    log_grad = grads.scale * cloud.scale
    cloud.scale *= np.exp(adam_delta("scale", log_grad, step_sizes.scale))
    cloud.rotation += adam_delta("rotation", grads.rotation, step_sizes.rotation)
    norms = np.linalg.norm(cloud.rotation, axis=1, keepdims=True)
    if (norms == 0).any():
        raise OptimizationError("quaternion collapsed to zero during update")
    off = np.abs(norms - 1.0) > 1e-12
    if off.any():
        cloud.rotation = np.where(off, cloud.rotation / norms, cloud.rotation)
    cloud.color = np.clip(cloud.color + adam_delta("color", grads.color, step_sizes.color), 0.0, 1.0)
    return state


# --- checkpoint container -------------------------------------------------


def _pack_arrays(arrays: dict[str, np.ndarray]) -> bytes:
    chunks = []
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        dtype = arr.dtype.str  # e.g. '<f8'
        header = json.dumps(
            {"name": name, "dtype": dtype, "shape": list(arr.shape)}, sort_keys=True
        ).encode()
        chunks.append(struct.pack("<I", len(header)))
        chunks.append(header)
        payload = arr.tobytes()
        chunks.append(struct.pack("<Q", len(payload)))
        chunks.append(payload)
    return b"".join(chunks)


def _unpack_arrays(blob: bytes) -> dict[str, np.ndarray]:
    arrays = {}
    off = 0
    while off < len(blob):
        (hlen,) = struct.unpack_from("<I", blob, off)
        off += 4
        header = json.loads(blob[off : off + hlen].decode())
        off += hlen
        (plen,) = struct.unpack_from("<Q", blob, off)
        off += 8
        arr = np.frombuffer(blob[off : off + plen], dtype=header["dtype"]).reshape(header["shape"])
        arrays[header["name"]] = arr.copy()
        off += plen
    return arrays


def _rng_state_to_meta(rng: np.random.Generator) -> dict:
    state = rng.bit_generator.state
    return {
        "bit_generator": state["bit_generator"],
        "state": str(state["state"]["state"]),
        "inc": str(state["state"]["inc"]),
        "has_uint32": state["has_uint32"],
        "uinteger": state["uinteger"],
    }


def _rng_from_meta(meta: dict) -> np.random.Generator:
    rng = np.random.default_rng(0)
    rng.bit_generator.state = {
        "bit_generator": meta["bit_generator"],
        "state": {"state": int(meta["state"]), "inc": int(meta["inc"])},
        "has_uint32": meta["has_uint32"],
        "uinteger": meta["uinteger"],
    }
    return rng


def state_arrays(state: OptimState) -> dict[str, np.ndarray]:
    arrays = {
        "cloud.position": state.cloud.position,
        "cloud.opacity_raw": state.cloud.opacity_raw,
        "cloud.scale": state.cloud.scale,
        "cloud.rotation": state.cloud.rotation,
        "cloud.color": state.cloud.color,
        "cloud.source_kind": state.cloud.source_kind,
        "cloud.source_view": state.cloud.source_view,
        "cloud.source_pixel": state.cloud.source_pixel,
        "loss_history": np.asarray(state.loss_history, dtype=np.float64).reshape(
            len(state.loss_history), -1
        )
        if state.loss_history
        else np.zeros((0, 6)),
    }
    for name in PARAM_GROUPS:
        arrays[f"adam.{name}.m"] = state.moments[name]["m"]
        arrays[f"adam.{name}.v"] = state.moments[name]["v"]
    return arrays


def save_checkpoint(
    path: str | Path,
    state: OptimState,
    *,
    stage: int,
    extra_arrays: dict[str, np.ndarray] | None = None,
    extra_meta: dict | None = None,
) -> None:
    """Write the versioned binary checkpoint."""
    meta = {
        "stage": stage,
        "iteration": state.iteration,
        "adam_step": state.adam_step,
        "stage_length": state.stage_length,
        "seed": state.seed,
        "skipped_nonfinite": state.skipped_nonfinite,
        "rng": _rng_state_to_meta(state.rng),
    }
    if extra_meta:
        meta["extra"] = extra_meta
    arrays = state_arrays(state)
    if extra_arrays:
        for k, v in extra_arrays.items():
            arrays[f"extra.{k}"] = v
    meta_blob = json.dumps(meta, sort_keys=True).encode()
    body = _pack_arrays(arrays)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(meta_blob)))
        f.write(meta_blob)
        f.write(body)


@dataclass
class Checkpoint:
    state: OptimState
    stage: int
    extra_arrays: dict[str, np.ndarray]
    extra_meta: dict


def load_checkpoint(path: str | Path) -> Checkpoint:
    blob = Path(path).read_bytes()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise OptimizationError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise OptimizationError(f"{path}: unsupported checkpoint version {version}")
    (mlen,) = struct.unpack_from("<I", blob, 8)
    meta = json.loads(blob[12 : 12 + mlen].decode())
    arrays = _unpack_arrays(blob[12 + mlen :])

    cloud = GaussianCloud(
        position=arrays["cloud.position"],
        opacity_raw=arrays["cloud.opacity_raw"],
        scale=arrays["cloud.scale"],
        rotation=arrays["cloud.rotation"],
        color=arrays["cloud.color"],
        source_kind=arrays["cloud.source_kind"],
        source_view=arrays["cloud.source_view"],
        source_pixel=arrays["cloud.source_pixel"],
    )
    moments = {
        name: {"m": arrays[f"adam.{name}.m"], "v": arrays[f"adam.{name}.v"]}
        for name in PARAM_GROUPS
    }
    state = OptimState(
        cloud=cloud,
        moments=moments,
        iteration=meta["iteration"],
        adam_step=meta["adam_step"],
        stage_length=meta["stage_length"],
        seed=meta["seed"],
        rng=_rng_from_meta(meta["rng"]),
        loss_history=[list(row) for row in arrays["loss_history"]],
        skipped_nonfinite=meta.get("skipped_nonfinite", 0),
    )
    extra = {k[6:]: v for k, v in arrays.items() if k.startswith("extra.")}
    return Checkpoint(state=state, stage=meta["stage"], extra_arrays=extra, extra_meta=meta.get("extra", {}))
