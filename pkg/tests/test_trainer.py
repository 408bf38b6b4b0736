"""Training loop: loss, optimizer, visibility-aware decay, pruning, evals."""

import json

import numpy as np
import pytest

from splat4d.core4d import GaussianCloud, _logit, _sigmoid
from splat4d.decaynet import DecayNet
from splat4d.errors import DataError, InvalidParameterError
from splat4d.io import Checkpoint, checkpoints_equal, load_checkpoint
from splat4d.metrics import dssim_with_grad
from splat4d.raster import RasterConfig
from splat4d.scenegen import Dataset, RigSpec, ScenePreset, build_dataset
from splat4d.trainer import (
    ADAM_EPS,
    AdamState,
    LossReport,
    TrainConfig,
    Trainer,
    adam_step,
    checkpoint_policy,
    effective_policy,
    evaluate_checkpoint,
    init_from_dataset,
    photometric_loss,
    train,
)
from splat4d.visibility import visible_mask


@pytest.fixture(scope="module")
def tiny_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("tinydata")
    preset = ScenePreset(tag="linear", n_objects=1, gaussians_per_object=2,
                         frames=3, n_static=4)
    rig = RigSpec(n_train_cameras=2, n_test_cameras=1, span_deg=40.0,
                  width=32, height=32)
    return build_dataset(preset, rig, root, seed=11)


def tiny_cfg(**kw):
    base = dict(iterations=4, warmup_iters=0, eval_every=100, prune_every=100,
                rng_seed=3)
    base.update(kw)
    return TrainConfig(**base)


def append_far_row(cloud, opacity=0.4):
    """Add one Gaussian far behind every rig camera, alive at all times."""
    sh = np.zeros((1,) + cloud.sh_config.coeff_shape())
    ls = [np.log(0.1)] * 3 + [np.log(10.0)]
    return GaussianCloud(
        positions=np.concatenate([cloud.positions, [[50.0, 0.0, 0.0]]]),
        temporal_centers=np.concatenate([cloud.temporal_centers, [0.5]]),
        rot_left=np.concatenate([cloud.rot_left, [[1.0, 0.0, 0.0, 0.0]]]),
        rot_right=np.concatenate([cloud.rot_right, [[1.0, 0.0, 0.0, 0.0]]]),
        log_scales=np.concatenate([cloud.log_scales, [ls]]),
        opacity_logits=np.concatenate([cloud.opacity_logits,
                                       [float(_logit(opacity))]]),
        sh_coeffs=np.concatenate([cloud.sh_coeffs, sh]),
        sh_config=cloud.sh_config,
    )


def assert_far_row_invisible(trainer):
    """Guard the geometric premise the far-row tests rest on."""
    times = sorted({rec.time for rec in trainer.dataset.frames})
    for cam in trainer.dataset.cameras.values():
        for t in times:
            vis = visible_mask(trainer.cloud, cam, t,
                               eps_t=trainer.cfg.eps_t,
                               margin=trainer.raster.view_margin)
            assert not vis[-1]


class TestPhotometricLoss:
    def test_constant_shift_l1(self):
        rng = np.random.default_rng(0)
        gt = rng.uniform(0.2, 0.8, size=(16, 16, 3))
        render = gt + 0.1
        total, l1, ds, d = photometric_loss(render, gt, lam=0.0)
        assert total == l1
        assert ds == 0.0
        assert abs(l1 - 0.1) < 1e-12
        np.testing.assert_array_equal(d, np.full(gt.shape, 1.0 / gt.size))

    def test_lambda_blend(self):
        rng = np.random.default_rng(1)
        gt = rng.uniform(0.0, 1.0, size=(24, 24, 3))
        render = np.clip(gt + rng.normal(0.0, 0.05, size=gt.shape), 0.0, 1.0)
        lam = 0.3
        total, l1, ds, d = photometric_loss(render, gt, lam)
        assert total == pytest.approx((1.0 - lam) * l1 + lam * ds, rel=1e-14)
        ds_ref, d_ds = dssim_with_grad(render, gt, data_range=1.0)
        assert ds == ds_ref
        diff_grad = np.sign(render - gt) / gt.size
        np.testing.assert_allclose(d, (1.0 - lam) * diff_grad + lam * d_ds,
                                   rtol=0.0, atol=1e-15)

    def test_lambda_zero_works_on_tiny_images(self):
        # Too small for the structural term's window; the pure L1 path must
        # still accept it.
        rng = np.random.default_rng(2)
        gt = rng.uniform(size=(5, 5, 3))
        total, l1, ds, _ = photometric_loss(gt * 0.5, gt, lam=0.0)
        assert ds == 0.0 and total == l1
        with pytest.raises(InvalidParameterError):
            photometric_loss(gt * 0.5, gt, lam=0.2)

    def test_shape_mismatch(self):
        with pytest.raises(InvalidParameterError):
            photometric_loss(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)), 0.0)


class TestAdam:
    def test_single_step_hand_value(self):
        params = {"x": np.array([0.0])}
        state = AdamState.for_params(params)
        new = adam_step(params, {"x": np.array([1.0])}, state, {"x": 0.1})
        # First step: both moment estimates bias-correct to exactly the
        # gradient, so the update is -lr * 1 / (1 + eps).
        assert new["x"][0] == pytest.approx(-0.1 / (1.0 + ADAM_EPS), rel=1e-15)
        assert state.step == 1

    def test_constant_gradient_walks_at_lr(self):
        params = {"x": np.array([0.0])}
        state = AdamState.for_params(params)
        for _ in range(3):
            params = adam_step(params, {"x": np.array([1.0])}, state, {"x": 0.1})
        assert params["x"][0] == pytest.approx(-0.3, rel=1e-10)

    def test_zero_gradient_is_bitwise_noop(self):
        p = np.array([0.25, -1.5, 3.0])
        state = AdamState.for_params({"x": p})
        new = adam_step({"x": p}, {"x": np.zeros(3)}, state, {"x": 0.5})
        np.testing.assert_array_equal(new["x"], p)

    def test_shape_mismatch(self):
        state = AdamState.for_params({"x": np.zeros(3)})
        with pytest.raises(InvalidParameterError):
            adam_step({"x": np.zeros(3)}, {"x": np.zeros(4)}, state, {"x": 0.1})

    def test_select_rows(self):
        params = {"a": np.arange(12.0).reshape(4, 3)}
        state = AdamState.for_params(params)
        adam_step(params, {"a": np.ones((4, 3))}, state, {"a": 0.1})
        keep = np.array([True, False, True, False])
        state.select_rows(keep)
        assert state.m["a"].shape == (2, 3)
        assert state.v["a"].shape == (2, 3)
        assert state.step == 1


class TestTrainConfig:
    def test_json_round_trip(self):
        cfg = TrainConfig(iterations=7, decay_variant="pow", loss_lambda=0.35)
        assert TrainConfig.from_json(cfg.to_json()) == cfg

    def test_unknown_key_rejected(self):
        with pytest.raises(InvalidParameterError, match="unknown train config"):
            TrainConfig.from_json({"iterations": 5, "bogus": 1})

    @pytest.mark.parametrize("kw", [
        {"iterations": -1},
        {"warmup_iters": -2},
        {"lr_position": 0.0},
        {"lr_decay_net": -1e-3},
        {"loss_lambda": 1.0001},
        {"beta_invisible": 0.0},
        {"beta_invisible": 1.1},
        {"prune_opacity": 1.0},
        {"prune_every": 0},
        {"eval_every": 0},
        {"decay_variant": "quadratic"},
        {"eps_t": -0.01},
        {"init_distractor_frac": -0.5},
    ])
    def test_invalid_values(self, kw):
        with pytest.raises(InvalidParameterError):
            TrainConfig(**kw)

    def test_effective_policy(self):
        cfg = TrainConfig(decay_variant="exp", warmup_iters=10)
        assert effective_policy(cfg, 0) == "none"
        assert effective_policy(cfg, 9) == "none"
        assert effective_policy(cfg, 10) == "exp"


class TestInitFromDataset:
    def test_layout_and_clipping(self, tiny_dataset):
        # Oversized noise exercises the clip back into the box.
        cfg = tiny_cfg(init_position_noise=10.0)
        rng = np.random.default_rng(5)
        cloud, mask = init_from_dataset(tiny_dataset, cfg, rng)
        n = len(tiny_dataset.gt_scene.to_cloud())
        n_extra = int(round(cfg.init_distractor_frac * n))
        assert n_extra > 0
        assert len(cloud) == n + n_extra
        assert not mask[:n].any()
        assert mask[n:].all()
        lo, hi = tiny_dataset.aabb
        assert (cloud.positions >= lo - 1e-12).all()
        assert (cloud.positions <= hi + 1e-12).all()
        np.testing.assert_allclose(cloud.opacities[:n], cfg.init_opacity,
                                   rtol=1e-12)
        np.testing.assert_allclose(cloud.opacities[n:],
                                   cfg.init_distractor_opacity, rtol=1e-12)
        t_lo, t_hi = tiny_dataset.time_range
        assert (cloud.temporal_centers[n:] >= t_lo).all()
        assert (cloud.temporal_centers[n:] <= t_hi).all()

    def test_requires_gt_scene(self, tiny_dataset):
        bare = Dataset(tiny_dataset.root, tiny_dataset.manifest, None)
        with pytest.raises(DataError, match="ground-truth"):
            init_from_dataset(bare, tiny_cfg(), np.random.default_rng(0))


class TestTrainerMechanics:
    def test_loss_report_consistency(self, tiny_dataset):
        cfg = tiny_cfg(iterations=1, loss_lambda=0.2)
        tr = Trainer(tiny_dataset, cfg)
        rep = tr.step()
        assert isinstance(rep, LossReport)
        assert rep.iteration == 0
        assert rep.total == pytest.approx(
            0.8 * rep.l1 + 0.2 * rep.dssim, rel=1e-12)
        assert rep.n_gaussians == len(tr.cloud)
        assert 0 < rep.n_visible <= rep.n_gaussians

    def test_eps_t_mismatch_rejected(self, tiny_dataset):
        with pytest.raises(InvalidParameterError, match="eps_t"):
            Trainer(tiny_dataset, tiny_cfg(eps_t=0.05),
                    raster=RasterConfig(eps_t=0.1))

    def test_is_distractor_length_checked(self, tiny_dataset):
        cloud = tiny_dataset.gt_scene.to_cloud()
        with pytest.raises(InvalidParameterError):
            Trainer(tiny_dataset, tiny_cfg(), cloud=cloud,
                    is_distractor=np.zeros(len(cloud) + 1, dtype=bool))

    def test_no_train_frames_rejected(self, tiny_dataset):
        ds = Dataset(tiny_dataset.root, tiny_dataset.manifest,
                     tiny_dataset.gt_scene)
        ds.frames = [f for f in ds.frames if f.split != "train"]
        with pytest.raises(DataError, match="training frames"):
            Trainer(ds, tiny_cfg())

    def test_invisible_decay_closed_form(self, tiny_dataset):
        cfg = tiny_cfg(iterations=5, beta_invisible=0.999, rng_seed=7)
        cloud = append_far_row(tiny_dataset.gt_scene.to_cloud(), opacity=0.4)
        tr = Trainer(tiny_dataset, cfg, cloud=cloud)
        assert_far_row_invisible(tr)
        o0 = tr.cloud.opacities[-1]
        before = {
            "positions": tr.cloud.positions[-1].copy(),
            "rot_left": tr.cloud.rot_left[-1].copy(),
            "rot_right": tr.cloud.rot_right[-1].copy(),
            "log_scales": tr.cloud.log_scales[-1].copy(),
            "sh_coeffs": tr.cloud.sh_coeffs[-1].copy(),
        }
        for _ in range(5):
            tr.step()
        assert tr.cloud.opacities[-1] == pytest.approx(o0 * 0.999**5, rel=1e-9)
        # The decay is the only thing allowed to touch an invisible Gaussian.
        np.testing.assert_array_equal(tr.cloud.positions[-1],
                                      before["positions"])
        np.testing.assert_array_equal(tr.cloud.rot_left[-1],
                                      before["rot_left"])
        np.testing.assert_array_equal(tr.cloud.rot_right[-1],
                                      before["rot_right"])
        np.testing.assert_array_equal(tr.cloud.log_scales[-1],
                                      before["log_scales"])
        np.testing.assert_array_equal(tr.cloud.sh_coeffs[-1],
                                      before["sh_coeffs"])

    def test_beta_one_leaves_invisible_rows_bit_identical(self, tiny_dataset):
        cfg = tiny_cfg(iterations=4, beta_invisible=1.0, rng_seed=7)
        cloud = append_far_row(tiny_dataset.gt_scene.to_cloud(), opacity=0.4)
        tr = Trainer(tiny_dataset, cfg, cloud=cloud)
        assert_far_row_invisible(tr)
        logit0 = tr.cloud.opacity_logits[-1]
        for _ in range(4):
            tr.step()
        assert tr.cloud.opacity_logits[-1] == logit0

    def test_beta_after_warmup_delays_decay(self, tiny_dataset):
        cloud = append_far_row(tiny_dataset.gt_scene.to_cloud(), opacity=0.4)
        cfg = tiny_cfg(iterations=3, warmup_iters=100, beta_invisible=0.9,
                       beta_after_warmup=True)
        tr = Trainer(tiny_dataset, cfg, cloud=cloud)
        logit0 = tr.cloud.opacity_logits[-1]
        for _ in range(3):
            tr.step()
        assert tr.cloud.opacity_logits[-1] == logit0
        # Default behavior decays straight through warm-up.
        tr2 = Trainer(tiny_dataset, tiny_cfg(
            iterations=3, warmup_iters=100, beta_invisible=0.9), cloud=cloud)
        for _ in range(3):
            tr2.step()
        assert tr2.cloud.opacities[-1] == pytest.approx(0.4 * 0.9**3, rel=1e-9)

    def test_warmup_freezes_decay_net(self, tiny_dataset):
        cfg = tiny_cfg(iterations=3, warmup_iters=50, decay_variant="neural")
        tr = Trainer(tiny_dataset, cfg)
        v0 = tr.net.to_vector()
        for _ in range(3):
            tr.step()
        np.testing.assert_array_equal(tr.net.to_vector(), v0)

    def test_neural_updates_net_after_warmup(self, tiny_dataset):
        cfg = tiny_cfg(iterations=2, warmup_iters=0, decay_variant="neural")
        tr = Trainer(tiny_dataset, cfg)
        v0 = tr.net.to_vector()
        tr.step()
        assert not np.array_equal(tr.net.to_vector(), v0)

    def test_commit_visible_decay_scales_opacity(self, tiny_dataset):
        # Twin trainers share every rng draw, so after one step they differ
        # only by the committed factor on the rendered rows.
        kw = dict(iterations=1, warmup_iters=0, decay_variant="constant",
                  rng_seed=9)
        plain = Trainer(tiny_dataset, tiny_cfg(**kw))
        commit = Trainer(tiny_dataset, tiny_cfg(commit_visible_decay=True, **kw))
        np.testing.assert_array_equal(plain.cloud.opacity_logits,
                                      commit.cloud.opacity_logits)
        plain.step()
        commit.step()
        times = sorted({rec.time for rec in tiny_dataset.frames})
        vis_any = np.zeros(len(plain.cloud), dtype=bool)
        for cam in tiny_dataset.cameras.values():
            for t in times:
                vis_any |= visible_mask(plain.cloud, cam, t,
                                        eps_t=plain.cfg.eps_t,
                                        margin=plain.raster.view_margin)
        changed = commit.cloud.opacities < plain.cloud.opacities - 1e-15
        assert changed.any()
        ratio = commit.cloud.opacities[changed] / plain.cloud.opacities[changed]
        np.testing.assert_allclose(ratio, 0.9, rtol=1e-12)
        assert vis_any[changed].all()

    def test_no_visibility_applies_policy_everywhere(self, tiny_dataset):
        cloud = append_far_row(tiny_dataset.gt_scene.to_cloud(), opacity=0.4)
        cfg = tiny_cfg(iterations=3, warmup_iters=0, decay_variant="constant",
                       no_visibility=True)
        tr = Trainer(tiny_dataset, cfg, cloud=cloud)
        assert_far_row_invisible(tr)
        for _ in range(3):
            tr.step()
        # The constant policy, not beta, reaches the unrendered row.
        assert tr.cloud.opacities[-1] == pytest.approx(0.4 * 0.9**3, rel=1e-9)

    def test_pruning_drops_rows_and_optimizer_state(self, tiny_dataset):
        cloud = append_far_row(tiny_dataset.gt_scene.to_cloud(), opacity=0.003)
        mask = np.zeros(len(cloud), dtype=bool)
        mask[-1] = True
        cfg = tiny_cfg(iterations=2, warmup_iters=0, prune_every=2, rng_seed=2)
        tr = Trainer(tiny_dataset, cfg, cloud=cloud, is_distractor=mask)
        assert_far_row_invisible(tr)
        n0 = len(tr.cloud)
        tr.step()
        tr.step()
        assert len(tr.cloud) == n0 - 1
        assert tr.is_distractor.shape == (n0 - 1,)
        assert tr.is_distractor.sum() == 0
        for buf in tr.adam_cloud.m.values():
            assert buf.shape[0] == n0 - 1
        s = tr.summary()
        assert s["n_distractors_init"] == 1
        assert s["n_distractors_kept"] == 0
        assert s["n_gaussians"] == n0 - 1


class TestEvaluation:
    def test_exact_scene_hits_psnr_cap(self, tiny_dataset):
        # Frames were rendered by the same pipeline and quantized once, so
        # the stored scene reproduces every byte and lands on the cap.
        for split in ("train", "test"):
            ev = evaluate_checkpoint(tiny_dataset.gt_scene, tiny_dataset,
                                     split=split)
            assert ev["split"] == split
            assert ev["psnr"] == 99.0
            assert ev["dssim1"] == 0.0
            assert all(row["psnr"] == 99.0 for row in ev["per_frame"])

    def test_unknown_split_rejected(self, tiny_dataset):
        with pytest.raises(DataError, match="no 'validation' frames"):
            evaluate_checkpoint(tiny_dataset.gt_scene, tiny_dataset,
                                split="validation")

    def test_checkpoint_policy(self, tiny_dataset):
        cloud = tiny_dataset.gt_scene.to_cloud()
        net = DecayNet(np.random.default_rng(0))
        aabb = tiny_dataset.aabb

        def ck(**echo):
            return Checkpoint.from_state(cloud, net, aabb, echo, rng_state={})

        assert checkpoint_policy(ck(decay_variant="pow",
                                    iterations_trained=600,
                                    warmup_iters=500)) == "pow"
        assert checkpoint_policy(ck(decay_variant="pow",
                                    iterations_trained=499,
                                    warmup_iters=500)) == "none"
        assert checkpoint_policy(ck()) == "none"


class TestTrainLoop:
    def test_artifacts_and_log(self, tiny_dataset, tmp_path):
        cfg = tiny_cfg(iterations=6, warmup_iters=2, eval_every=5, rng_seed=1)
        log = tmp_path / "log.jsonl"
        ck_path = tmp_path / "model.ckpt"
        res = train(tiny_dataset, cfg, ckpt_path=ck_path, log_path=log)
        assert len(res.reports) == 6
        assert [r.iteration for r in res.reports] == list(range(6))
        assert len(res.evals) == 1 and res.evals[0]["iteration"] == 5
        assert res.summary["iterations"] == 6
        assert res.checkpoint.config_echo["iterations_trained"] == 6
        assert checkpoints_equal(load_checkpoint(ck_path), res.checkpoint)
        records = [json.loads(line) for line in log.read_text().splitlines()]
        assert [r["type"] for r in records] == (
            ["iter"] * 5 + ["eval"] + ["iter"] + ["summary"])
        for r in records:
            if r["type"] == "iter":
                assert {"iteration", "total", "l1", "dssim", "psnr",
                        "n_visible", "n_gaussians"} <= set(r)

    def test_same_seed_is_byte_identical(self, tiny_dataset, tmp_path):
        cfg = tiny_cfg(iterations=5, warmup_iters=1, rng_seed=4)
        a = tmp_path / "a.ckpt"
        b = tmp_path / "b.ckpt"
        train(tiny_dataset, cfg, ckpt_path=a)
        train(tiny_dataset, cfg, ckpt_path=b)
        assert a.read_bytes() == b.read_bytes()

    def test_different_seed_diverges(self, tiny_dataset, tmp_path):
        a = tmp_path / "a.ckpt"
        b = tmp_path / "b.ckpt"
        train(tiny_dataset, tiny_cfg(iterations=3, rng_seed=1), ckpt_path=a)
        train(tiny_dataset, tiny_cfg(iterations=3, rng_seed=2), ckpt_path=b)
        assert a.read_bytes() != b.read_bytes()
