"""Command-line entry point.

Subcommands: fuse, init, optimize --stage {1,2}, render, eval, loo-pairs.
Global flags: --config, --seed, --oracle, --force, --out.

Exit codes: 0 ok, 1 usage/generic, 2 ingestion, 3 pipeline-order, 4
evaluation, 5 oracle.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig, load_config
from .errors import (
    DatasetError,
    EvaluationError,
    OracleError,
    PathFitError,
    PipelineOrderError,
    SparseViewError,
)
from .fusion import fuse_view
from .io import load_dataset, read_image, read_pfm, write_image, write_mask, write_pfm
from .losses import metric_psnr, metric_ssim
from .optimizer import OptimState, load_checkpoint, save_checkpoint
from .oracle import make_client
from .pipeline import (
    fit_novel_cameras,
    foreground_points_from_depth,
    generate_loo_pairs,
    init_cloud,
    novel_from_arrays,
    novel_to_arrays,
    run_stage1,
    run_stage2,
)
from .renderer import render
from .scene import BinaryMask, DepthMap, SceneDataset

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_INGESTION = 2
EXIT_PIPELINE_ORDER = 3
EXIT_EVALUATION = 4
EXIT_ORACLE = 5


class UsageError(SparseViewError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # exit 1 on usage errors, not argparse's 2
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _require_no_clobber(path: Path, force: bool) -> None:
    exists = path.exists() and (not path.is_dir() or any(path.iterdir()))
    if exists and not force:
        raise UsageError(f"refusing to overwrite {path} (use --force)")


def _resolve_config(args) -> RunConfig:
    cfg = load_config(args.config)
    if getattr(args, "dataset", None):
        cfg.dataset = args.dataset
    if args.out:
        cfg.output = args.out
    if args.seed is not None:
        cfg.seed = args.seed
    if args.oracle:
        cfg.oracle = args.oracle
    if not cfg.dataset:
        raise UsageError("no dataset given (config 'dataset' or positional argument)")
    return cfg


def _load_fused(cfg: RunConfig, dataset: SceneDataset) -> list[DepthMap]:
    fused_dir = Path(cfg.output) / "depth_fused"
    fused = []
    for i in range(len(dataset)):
        path = fused_dir / f"view_{i:03d}.pfm"
        if not path.exists():
            logger.info("fused depth missing; running fusion in memory")
            return [fuse_view(v, cfg.fusion) for v in dataset.views]
        fused.append(DepthMap(read_pfm(path)))
    return fused


def _write_loss_csv(path: Path, history: list[list[float]]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["iteration", "total", "input_rec", "novel_rec", "opacity", "inpaint"])
        for row in history:
            writer.writerow([f"{v:.17g}" for v in row])


def cmd_fuse(args) -> int:
    cfg = _resolve_config(args)
    dataset = load_dataset(cfg.dataset)
    out = Path(cfg.output)
    _require_no_clobber(out / "depth_fused", args.force)
    for i, view in enumerate(dataset.views):
        report: dict = {}
        fused = fuse_view(view, cfg.fusion, report=report)
        write_pfm(out / "depth_fused" / f"view_{i:03d}.pfm", fused.values)
        from .fusion import background_mask

        write_mask(out / "mask_bg" / f"view_{i:03d}.png", background_mask(fused, cfg.fusion.cluster_gap))
        print(
            f"view {i:03d}: iterations={report.get('iterations', 0)} "
            f"residual={report.get('residual', float('nan')):.3e}"
        )
    return EXIT_OK


def cmd_init(args) -> int:
    cfg = _resolve_config(args)
    dataset = load_dataset(cfg.dataset)
    out = Path(cfg.output)
    ckpt = out / "init.ckpt"
    _require_no_clobber(ckpt, args.force)
    fused = _load_fused(cfg, dataset)
    cloud = init_cloud(dataset, fused)
    state = OptimState.new(cloud, cfg.seed, cfg.schedule.stage1_iters)
    save_checkpoint(ckpt, state, stage=0)
    print(f"initialized {len(cloud)} Gaussians -> {ckpt}")
    return EXIT_OK


def _build_novel(cfg: RunConfig, dataset: SceneDataset, fused, count: int):
    points = foreground_points_from_depth(dataset, fused, confidence_threshold=cfg.fusion.confidence_threshold)
    return fit_novel_cameras([v.camera for v in dataset.views], points, count)


def _run_stage_chunked(run_fn, state, total_iters, preview_every, out_dir, stage, novel, make_args):
    """Run a stage in preview-sized chunks, writing periodic renders."""
    preview_dir = out_dir / "previews"
    while state.iteration < total_iters:
        stop = min(total_iters, (state.iteration // preview_every + 1) * preview_every)
        state = run_fn(stop_at=stop, **make_args)
        out = render(state.cloud, novel.views[0].camera, np.asarray(make_args["background"]))
        write_image(preview_dir / f"stage{stage}_{state.iteration:05d}.png", out.color)
    return state


def cmd_optimize(args) -> int:
    cfg = _resolve_config(args)
    dataset = load_dataset(cfg.dataset)
    out = Path(cfg.output)
    stage = args.stage
    oracle = make_client(cfg.oracle, scene_id=Path(cfg.dataset).name)
    sched = cfg.schedule
    ckpt_path = out / f"stage{stage}.ckpt"
    _require_no_clobber(ckpt_path, args.force or args.resume is not None)
    fused = _load_fused(cfg, dataset)

    if args.resume:
        loaded = load_checkpoint(args.resume)
        if loaded.stage != stage:
            raise PipelineOrderError(
                f"checkpoint {args.resume} is for stage {loaded.stage}, not {stage}"
            )
        state = loaded.state
        novel = novel_from_arrays(loaded.extra_arrays)
    elif stage == 1:
        init_path = out / "init.ckpt"
        if init_path.exists():
            cloud = load_checkpoint(init_path).state.cloud
        else:
            cloud = init_cloud(dataset, fused)
        state = OptimState.new(cloud, cfg.seed, sched.stage1_iters)
        novel = _build_novel(cfg, dataset, fused, sched.stage1_views)
    else:
        prev = out / "stage1.ckpt"
        if not prev.exists():
            raise PipelineOrderError("stage 1 checkpoint required")
        loaded = load_checkpoint(prev)
        state = loaded.state
        state.iteration = 0
        state.stage_length = sched.stage2_iters
        state.loss_history = []
        novel = _build_novel(cfg, dataset, fused, sched.stage2_views)

    common = dict(
        dataset=dataset,
        novel=novel,
        oracle=oracle,
        schedule=sched,
        weights=cfg.weights,
        background=cfg.background,
        dump_path=out / f"stage{stage}_abort.ckpt",
    )
    total = sched.stage1_iters if stage == 1 else sched.stage2_iters
    run_fn = run_stage1 if stage == 1 else run_stage2

    def chunk(stop_at, **kw):
        return run_fn(state, stop_at=stop_at, **kw)

    state = _run_stage_chunked(
        chunk, state, total, sched.preview_every, out, stage, novel, common
    )
    save_checkpoint(ckpt_path, state, stage=stage, extra_arrays=novel_to_arrays(novel))
    _write_loss_csv(out / f"loss_stage{stage}.csv", state.loss_history)
    oracle.write_journal(out / f"oracle_journal_stage{stage}.jsonl")
    print(f"stage {stage} complete at iteration {state.iteration} -> {ckpt_path}")
    return EXIT_OK


def cmd_render(args) -> int:
    cfg = _resolve_config(args)
    out = Path(args.render_out or (Path(cfg.output) / "renders"))
    _require_no_clobber(out, args.force)
    loaded = load_checkpoint(args.checkpoint)
    cloud = loaded.state.cloud

    if cfg.render_cameras:
        from .io import _load_camera  # same schema as cameras.json

        entries = json.loads(Path(cfg.render_cameras).read_text())
        cameras = [_load_camera(e, i, Path(cfg.render_cameras)) for i, e in enumerate(entries)]
    else:
        dataset = load_dataset(cfg.dataset)
        fused = _load_fused(cfg, dataset)
        novel = _build_novel(cfg, dataset, fused, cfg.render_frames)
        cameras = [nv.camera for nv in novel.views]

    for i, cam in enumerate(cameras):
        result = render(cloud, cam, cfg.background)
        write_image(out / f"render_{i:03d}.png", result.color)
        if args.depth_pfm:
            write_pfm(out / f"depth_{i:03d}.pfm", result.depth.values)
    print(f"rendered {len(cameras)} views -> {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    renders = sorted(Path(args.renders).glob("*.png"))
    truths = sorted(Path(args.truth).glob("*.png"))
    if not renders or len(renders) != len(truths):
        raise EvaluationError(
            f"mismatched image sets: {len(renders)} renders vs {len(truths)} references"
        )
    out_path = Path(args.metrics_out or "metrics.csv")
    _require_no_clobber(out_path, args.force)
    rows = []
    for r, t in zip(renders, truths):
        a = read_image(r)
        b = read_image(t)
        if (a.height, a.width) != (b.height, b.width):
            raise EvaluationError(f"size mismatch: {r.name} vs {t.name}")
        rows.append((r.stem, metric_psnr(a, b), metric_ssim(a, b)))
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["view_id", "psnr", "ssim"])
        for vid, p, s in rows:
            writer.writerow([vid, f"{p:.4f}", f"{s:.6f}"])
        writer.writerow(
            [
                "mean",
                f"{np.mean([r[1] for r in rows]):.4f}",
                f"{np.mean([r[2] for r in rows]):.6f}",
            ]
        )
    for vid, p, s in rows:
        print(f"{vid}: psnr={p:.2f} ssim={s:.4f}")
    print(f"metrics -> {out_path}")
    return EXIT_OK


def cmd_loo_pairs(args) -> int:
    cfg = _resolve_config(args)
    dataset = load_dataset(cfg.dataset)
    out = Path(cfg.output) / "loo_pairs"
    _require_no_clobber(out, args.force)
    fused = _load_fused(cfg, dataset)
    pairs, audit = generate_loo_pairs(
        dataset, cfg.schedule, cfg.weights, fused, out, seed=cfg.seed, background=cfg.background
    )
    with open(out / "audit.json", "w") as f:
        json.dump(
            {
                "pairs": [
                    {
                        "view": p.view,
                        "iteration": p.iteration,
                        "corrupt": str(p.corrupt_path),
                        "clean": str(p.clean_path),
                        "psnr": round(p.psnr, 4),
                    }
                    for p in pairs
                ],
                "audit": [list(row) for row in audit],
            },
            f,
        )
    print(f"wrote {len(pairs)} pairs -> {out}")
    return EXIT_OK


def build_parser() -> _Parser:
    parser = _Parser(prog="sparseview", description="Sparse-view 3D reconstruction toolkit")
    parser.add_argument("--config", default=None, help="TOML run config")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--oracle", default=None, help="oracle endpoint URL or stub:<repair>,<inpaint>")
    parser.add_argument("--force", action="store_true", help="allow overwriting outputs")
    parser.add_argument("--out", default=None, help="output directory")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fuse", help="fuse per-view depth maps")
    p.add_argument("dataset", nargs="?", default=None)
    p.set_defaults(fn=cmd_fuse)

    p = sub.add_parser("init", help="spawn the initial Gaussian cloud")
    p.add_argument("dataset", nargs="?", default=None)
    p.set_defaults(fn=cmd_init)

    p = sub.add_parser("optimize", help="run an optimization stage")
    p.add_argument("dataset", nargs="?", default=None)
    p.add_argument("--stage", type=int, choices=(1, 2), required=True)
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.set_defaults(fn=cmd_optimize)

    p = sub.add_parser("render", help="render a checkpoint")
    p.add_argument("dataset", nargs="?", default=None)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--render-out", default=None)
    p.add_argument("--depth-pfm", action="store_true", help="also export 32-bit depth PFMs")
    p.set_defaults(fn=cmd_render)

    p = sub.add_parser("eval", help="PSNR/SSIM metrics between two image sets")
    p.add_argument("--renders", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--metrics-out", default=None)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("loo-pairs", help="export leave-one-out training pairs")
    p.add_argument("dataset", nargs="?", default=None)
    p.set_defaults(fn=cmd_loo_pairs)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(
            level=logging.DEBUG if args.verbose else logging.INFO,
            format="%(levelname)s %(name)s: %(message)s",
        )
        return args.fn(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DatasetError as exc:
        print(f"ingestion error: {exc}", file=sys.stderr)
        return EXIT_INGESTION
    except (PipelineOrderError, PathFitError) as exc:
        print(f"pipeline error: {exc}", file=sys.stderr)
        return EXIT_PIPELINE_ORDER
    except EvaluationError as exc:
        print(f"evaluation error: {exc}", file=sys.stderr)
        return EXIT_EVALUATION
    except OracleError as exc:
        print(f"oracle error: {exc}", file=sys.stderr)
        return EXIT_ORACLE
    except SparseViewError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
