"""Pipeline: novel-camera fitting, stage loops, inpaint cycles, LOO export."""

import numpy as np
import pytest

from sparseview.errors import OptimizationError, PathFitError
from sparseview.fusion import FusionConfig, fuse_view
from sparseview.losses import LossWeights, metric_psnr
from sparseview.optimizer import (
    OptimState,
    Schedule,
    StepSizes,
    load_checkpoint,
    save_checkpoint,
)
from sparseview.oracle import ConstantFillInpaintStub, StubOracleClient
from sparseview.pipeline import (
    NovelCameraSet,
    fit_novel_cameras,
    foreground_points_from_depth,
    generate_loo_pairs,
    hole_alpha_coverage,
    init_cloud,
    inpaint_cycle,
    novel_from_arrays,
    novel_to_arrays,
    run_stage1,
    run_stage2,
)
from sparseview.renderer import render
from sparseview.scene import GaussianCloud, SceneDataset

from conftest import (
    GT_BACKGROUND,
    e2e_schedule,
    gt_view,
    make_gt_scene,
    make_synthetic_dataset,
    perturbed_start_cloud,
    ring_camera,
)


@pytest.fixture(scope="module")
def scene():
    """Shared fixture bundle: dataset, GT, fused depths, path points, start cloud."""
    gt, wall_deg = make_gt_scene()
    dataset, _ = make_synthetic_dataset()
    fused = [fuse_view(v, FusionConfig()) for v in dataset.views]
    points = foreground_points_from_depth(dataset, fused)
    start = perturbed_start_cloud(gt, wall_deg)
    return dict(gt=gt, dataset=dataset, fused=fused, points=points, start=start)


class TestFitNovelCameras:
    def test_eight_on_circle_reproduces_circle(self, scene):
        cams = [ring_camera(a, size=16) for a in np.linspace(0, 2 * np.pi, 8, endpoint=False)]
        novel = fit_novel_cameras(cams, scene["points"], 8)
        for nv in novel.views:
            center = nv.camera.center()
            assert abs(np.linalg.norm(center[:2]) - 4.0) < 1e-6
            assert abs(center[2]) < 1e-6

    def test_three_cameras_circumcircle(self, scene):
        # Oracle: closed-form circumcircle through three points.
        angles = (0.2, 1.4, 2.9)
        cams = [ring_camera(a, size=16, radius=3.0) for a in angles]
        centers = np.stack([c.center() for c in cams])

        ax, ay = centers[0, :2]
        bx, by = centers[1, :2]
        cx, cy = centers[2, :2]
        d = 2 * (ax * (by - cy) + bx * (cy - ay) + cx * (ay - by))
        ux = ((ax**2 + ay**2) * (by - cy) + (bx**2 + by**2) * (cy - ay) + (cx**2 + cy**2) * (ay - by)) / d
        uy = ((ax**2 + ay**2) * (cx - bx) + (bx**2 + by**2) * (ax - cx) + (cx**2 + cy**2) * (bx - ax)) / d
        radius = np.hypot(ax - ux, ay - uy)

        novel = fit_novel_cameras(cams, scene["points"], 5)
        for nv in novel.views:
            center = nv.camera.center()
            assert abs(np.hypot(center[0] - ux, center[1] - uy) - radius) < 1e-6

    def test_two_coincident_cameras_error(self, scene):
        cam = ring_camera(0.3, size=16)
        with pytest.raises(PathFitError, match="manual path"):
            fit_novel_cameras([cam, cam], scene["points"], 4)

    def test_collinear_centers_error(self, scene):
        from sparseview.pipeline import look_at_camera
        from sparseview.scene import Camera

        intr = ring_camera(0.0, size=16)
        cams = [
            look_at_camera(np.array([x, 0.0, 0.0]), np.array([0, 5.0, 0]), np.array([0, 0, 1.0]), intr)
            for x in (-2.0, 0.0, 2.0)
        ]
        with pytest.raises(PathFitError, match="collinear"):
            fit_novel_cameras(cams, scene["points"], 4)

    def test_weights_in_unit_interval(self, scene):
        cams = [v.camera for v in scene["dataset"].views]
        novel = fit_novel_cameras(cams, scene["points"], 6)
        for nv in novel.views:
            assert 0.0 < nv.weight <= 1.0

    def test_novel_arrays_round_trip(self, scene):
        cams = [v.camera for v in scene["dataset"].views]
        novel = fit_novel_cameras(cams, scene["points"], 4)
        back = novel_from_arrays(novel_to_arrays(novel))
        for a, b in zip(novel.views, back.views):
            assert np.allclose(a.camera.rotation, b.camera.rotation)
            assert a.weight == b.weight


class TestStage1:
    def test_zero_iterations_returns_state_unchanged(self, scene):
        sched = e2e_schedule()
        sched.stage1_iters = 0
        state = OptimState.new(scene["start"].copy(), 0, 1)
        cams = [v.camera for v in scene["dataset"].views]
        novel = fit_novel_cameras(cams, scene["points"], sched.stage1_views)
        oracle = StubOracleClient.from_names("identity", "harmonic")
        before = state.cloud.position.copy()
        out = run_stage1(state, scene["dataset"], novel, oracle, sched, LossWeights())
        assert out is state
        assert np.array_equal(state.cloud.position, before)
        assert state.iteration == 0

    def test_short_run_improves_input_views_and_logs(self, scene):
        sched = e2e_schedule()
        sched.stage1_iters = 60
        sched.stage1_refresh = 30
        state = OptimState.new(scene["start"].copy(), 0, sched.stage1_iters)
        cams = [v.camera for v in scene["dataset"].views]
        novel = fit_novel_cameras(cams, scene["points"], sched.stage1_views)
        oracle = StubOracleClient.from_names("identity", "harmonic")
        p_before = np.mean(
            [
                metric_psnr(render(state.cloud, v.camera, GT_BACKGROUND).color, v.image)
                for v in scene["dataset"].views
            ]
        )
        run_stage1(state, scene["dataset"], novel, oracle, sched, LossWeights())
        p_after = np.mean(
            [
                metric_psnr(render(state.cloud, v.camera, GT_BACKGROUND).color, v.image)
                for v in scene["dataset"].views
            ]
        )
        assert p_after > p_before + 1.0
        assert len(state.loss_history) == 60
        assert state.iteration == 60

    def test_opacity_suppression_decreases_on_missing_region(self, scene):
        # The standing fixture has a dropped wall chunk; from an opaque start
        # (visible content already covered by the visibility masks) the
        # suppression term measured at each refresh must be non-increasing.
        from conftest import make_gt_scene, perturbed_start_cloud

        gt, wall_deg = make_gt_scene()
        opaque_start = perturbed_start_cloud(gt, wall_deg, opacity_raw=2.5)
        sched = e2e_schedule()
        sched.stage1_iters = 300
        sched.stage1_refresh = 100
        state = OptimState.new(opaque_start, 0, sched.stage1_iters)
        cams = [v.camera for v in scene["dataset"].views]
        novel = fit_novel_cameras(cams, scene["points"], sched.stage1_views)
        oracle = StubOracleClient.from_names("identity", "harmonic")

        from sparseview.losses import opacity_suppression

        readings = []

        def hook(state, novel, refresh_index):
            total = 0.0
            for nv in novel.views:
                out = render(state.cloud, nv.camera, GT_BACKGROUND)
                total += opacity_suppression(out.alpha, nv.alpha_mask, nv.bg_mask).value
            readings.append(total)

        run_stage1(
            state, scene["dataset"], novel, oracle, sched, LossWeights(), refresh_hook=hook
        )
        assert len(readings) == 3
        assert all(b <= a + 1e-9 for a, b in zip(readings, readings[1:]))

    def test_nan_loss_aborts_with_dump(self, scene, tmp_path):
        sched = e2e_schedule()
        sched.stage1_iters = 10
        sched.stage1_refresh = 10
        state = OptimState.new(scene["start"].copy(), 0, sched.stage1_iters)
        state.cloud.color[0] = np.nan  # poisons the first rendered image
        cams = [v.camera for v in scene["dataset"].views]
        novel = fit_novel_cameras(cams, scene["points"], 2)
        oracle = StubOracleClient.from_names("identity", "harmonic")
        dump = tmp_path / "abort.ckpt"
        with pytest.raises(OptimizationError, match="non-finite"):
            run_stage1(
                state, scene["dataset"], novel, oracle, sched, LossWeights(), dump_path=dump
            )
        assert dump.exists()


class TestInpaintCycle:
    def _stage2_setup(self, scene, views=6):
        # Opaque start with a wide dropped wall chunk: visibility masks are
        # meaningful and the gap is too wide for neighbor tails to bridge, so
        # novel views facing it carry genuine holes.
        gt, wall_deg = make_gt_scene()
        start = perturbed_start_cloud(
            gt, wall_deg, opacity_raw=2.5, drop_deg=(250.0, 355.0)
        )
        sched = e2e_schedule()
        state = OptimState.new(start, 0, sched.stage2_iters)
        cams = [v.camera for v in scene["dataset"].views]
        novel = fit_novel_cameras(cams, scene["points"], views)
        return sched, state, novel

    def test_parity_alternation_covers_all_views(self, scene):
        sched, state, novel = self._stage2_setup(scene)
        oracle = StubOracleClient.from_names("identity", "harmonic")
        inpaint_cycle(state, novel, oracle, sched, cycle_index=0, background=GT_BACKGROUND)
        even = {k for k, nv in enumerate(novel.views) if nv.inpainted is not None}
        inpaint_cycle(state, novel, oracle, sched, cycle_index=1, background=GT_BACKGROUND)
        odd = {k for k, nv in enumerate(novel.views) if nv.inpainted is not None}
        assert even <= set(range(0, 6, 2))
        assert odd <= set(range(1, 6, 2))
        assert even | odd, "some views must be inpainted on this fixture"

    def test_no_missing_regions_is_repair_only(self, scene):
        # A fully opaque ground-truth cloud leaves no holes anywhere.
        sched, _, novel = self._stage2_setup(scene)
        state = OptimState.new(scene["gt"].copy(), 0, sched.stage2_iters)
        oracle = StubOracleClient.from_names("identity", "harmonic")
        spawned = inpaint_cycle(state, novel, oracle, sched, 0, background=GT_BACKGROUND)
        assert spawned == 0
        assert all(nv.pseudo_gt is not None for nv in novel.views)

    def test_disabled_inpaint_spawns_nothing(self, scene):
        sched, state, novel = self._stage2_setup(scene)
        oracle = StubOracleClient.from_names("identity", "harmonic")
        spawned = inpaint_cycle(
            state, novel, oracle, sched, 0, background=GT_BACKGROUND, allow_inpaint=False
        )
        assert spawned == 0
        assert all(nv.inpainted is None for nv in novel.views)

    def test_constant_fill_spawn_colors_and_depth_surface(self, scene):
        # With the gray-fill stub every spawned Gaussian is 0.5 gray and sits
        # on the anchored harmonic depth surface (dense-solve oracle).
        sched, state, novel = self._stage2_setup(scene)
        oracle = StubOracleClient(inpaint_stub=ConstantFillInpaintStub())
        before = len(state.cloud)
        spawned = inpaint_cycle(state, novel, oracle, sched, 0, background=GT_BACKGROUND)
        assert spawned > 0
        new = state.cloud
        tail = slice(before, before + spawned)
        assert np.allclose(new.color[tail], 0.5)
        assert (new.source_kind[tail] == 1).all()

        # Depth-surface oracle for the first inpainted view with a hole.
        from sparseview.pipeline import _inpaint_region_depth, _novel_masks

        check_cloud = GaussianCloud(
            position=new.position[: before],
            opacity_raw=new.opacity_raw[:before],
            scale=new.scale[:before],
            rotation=new.rotation[:before],
            color=new.color[:before],
            source_kind=new.source_kind[:before],
            source_view=new.source_view[:before],
            source_pixel=new.source_pixel[:before],
        )
        for k, nv in enumerate(novel.views):
            if nv.inpainted is None:
                continue
            out = render(check_cloud, nv.camera, GT_BACKGROUND)
            hole = nv.inpaint_mask.bits
            depth = _inpaint_region_depth(out.depth, hole, nv.bg_mask.bits, FusionConfig())
            spawned_here = (new.source_kind == 1) & (new.source_view == k)
            if not spawned_here.any():
                continue
            # Every spawned Gaussian projects back to its source pixel depth.
            cam = nv.camera
            pc = new.position[spawned_here] @ cam.rotation.T + cam.translation
            pix = new.source_pixel[spawned_here]
            ii, jj = pix // cam.width, pix % cam.width
            assert np.abs(pc[:, 2] - depth.values[ii, jj]).max() < 1e-9
            break


class TestStage2:
    def test_inpaint_stop_zero_is_repair_only(self, scene):
        sched = e2e_schedule()
        sched.stage2_iters = 40
        sched.stage2_cycle = 20
        sched.inpaint_stop_iter = 0
        state = OptimState.new(scene["start"].copy(), 0, sched.stage2_iters)
        cams = [v.camera for v in scene["dataset"].views]
        novel = fit_novel_cameras(cams, scene["points"], 4)
        oracle = StubOracleClient.from_names("identity", "harmonic")
        n_before = len(state.cloud)
        run_stage2(state, scene["dataset"], novel, oracle, sched, LossWeights())
        assert len(state.cloud) == n_before

    def test_hole_coverage_grows_across_cycles(self, scene):
        sched = e2e_schedule()
        sched.stage2_iters = 300
        sched.stage2_cycle = 100
        sched.inpaint_stop_iter = 250
        state = OptimState.new(scene["start"].copy(), 0, sched.stage2_iters)
        cams = [v.camera for v in scene["dataset"].views]
        novel = fit_novel_cameras(cams, scene["points"], sched.stage2_views)
        oracle = StubOracleClient.from_names("identity", "harmonic")
        areas = []

        def hook(state, novel, cidx, spawned):
            total = sum(
                int(((~nv.alpha_mask.bits) & nv.bg_mask.bits).sum())
                for nv in novel.views
                if nv.alpha_mask is not None
            )
            areas.append(total)

        run_stage2(
            state, scene["dataset"], novel, oracle, sched, LossWeights(), cycle_hook=hook
        )
        assert len(areas) == 3
        assert areas[0] > 0
        # Total hole area is non-increasing across cycles.
        assert all(b <= a for a, b in zip(areas, areas[1:]))


class TestDeterminismAndResume:
    def _run(self, scene, stop_at=None, resume_from=None, tmp_path=None):
        sched = e2e_schedule()
        sched.stage1_iters = 60
        sched.stage1_refresh = 20
        oracle = StubOracleClient.from_names("identity", "harmonic")
        if resume_from is None:
            state = OptimState.new(scene["start"].copy(), 7, sched.stage1_iters)
            cams = [v.camera for v in scene["dataset"].views]
            novel = fit_novel_cameras(cams, scene["points"], sched.stage1_views)
        else:
            loaded = load_checkpoint(resume_from)
            state = loaded.state
            novel = novel_from_arrays(loaded.extra_arrays)
        run_stage1(
            state, scene["dataset"], novel, oracle, sched, LossWeights(), stop_at=stop_at
        )
        return state, novel

    def test_two_runs_bitwise_identical(self, scene, tmp_path):
        s1, n1 = self._run(scene)
        s2, n2 = self._run(scene)
        pa, pb = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(pa, s1, stage=1, extra_arrays=novel_to_arrays(n1))
        save_checkpoint(pb, s2, stage=1, extra_arrays=novel_to_arrays(n2))
        assert pa.read_bytes() == pb.read_bytes()

    def test_resume_equals_straight_run_bitwise(self, scene, tmp_path):
        # Straight run to 60.
        straight, novel_s = self._run(scene)
        p_straight = tmp_path / "straight.ckpt"
        save_checkpoint(p_straight, straight, stage=1, extra_arrays=novel_to_arrays(novel_s))
        # Stop at 33 (mid-refresh-window), serialize, resume to 60.
        partial, novel_p = self._run(scene, stop_at=33)
        p_partial = tmp_path / "partial.ckpt"
        save_checkpoint(p_partial, partial, stage=1, extra_arrays=novel_to_arrays(novel_p))
        resumed, novel_r = self._run(scene, resume_from=p_partial)
        p_resumed = tmp_path / "resumed.ckpt"
        save_checkpoint(p_resumed, resumed, stage=1, extra_arrays=novel_to_arrays(novel_r))
        assert p_resumed.read_bytes() == p_straight.read_bytes()


class TestLooPairs:
    def test_counts_audit_and_psnr_trend(self, scene, tmp_path):
        sched = e2e_schedule()
        weights = LossWeights()
        pairs, audit = generate_loo_pairs(
            scene["dataset"], sched, weights, scene["fused"], tmp_path / "loo", seed=3
        )
        # 3 views x 3 snapshots.
        assert len(pairs) == 9
        for p in pairs:
            assert p.corrupt_path.exists() and p.clean_path.exists()

        # Clean images equal the originals (decoded content).
        from sparseview.io import read_image

        for p in pairs:
            clean = read_image(p.clean_path)
            orig = scene["dataset"].views[p.view].image
            quantized = np.rint(orig.pixels * 255) / 255
            assert np.abs(clean.pixels - quantized).max() <= 1e-12

        # The held-out view never contributes a loss term before reintroduction.
        for held, t, sampled in audit:
            if t < sched.loo_pretrain_iters:
                assert sampled != held

        # Corrupted-render PSNR non-decreasing across snapshots per view.
        for held in range(3):
            seq = [p.psnr for p in pairs if p.view == held]
            assert len(seq) == 3
            assert all(b >= a - 1e-9 for a, b in zip(seq, seq[1:]))

    def test_two_views_rejected(self, scene, tmp_path):
        two = SceneDataset(views=scene["dataset"].views[:2])
        with pytest.raises(OptimizationError, match="3 views"):
            generate_loo_pairs(
                two, e2e_schedule(), LossWeights(), scene["fused"][:2], tmp_path / "loo2"
            )


class TestInitCloud:
    def test_one_gaussian_per_valid_pixel(self, scene):
        cloud = init_cloud(scene["dataset"], scene["fused"])
        total_valid = sum(int(f.valid.sum()) for f in scene["fused"])
        assert len(cloud) == total_valid
        cloud.validate()

    def test_hole_coverage_helper(self):
        alpha = np.zeros((4, 4))
        alpha[0, 0] = 0.9
        hole = np.zeros((4, 4), dtype=bool)
        hole[0, :2] = True
        assert hole_alpha_coverage(alpha, hole) == 0.5
        assert hole_alpha_coverage(alpha, np.zeros((4, 4), dtype=bool)) == 1.0
