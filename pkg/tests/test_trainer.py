import csv
import json

import numpy as np
import pytest

from helpers import constant_net, tiny_arch
from octfield import distill, synth, trainer
from octfield.geometry import Aabb, Camera, generate_rays, intersect_boxes, look_at
from octfield.octree import ROOT, OctreeModel
from octfield.trainer import CheckpointError, TrainConfig, TrainingDivergedError

SMALL = dict(rays_per_batch=64, importance_samples=4, n_per_axis=4, distill_steps=5, distill_batch=64,
             arch=tiny_arch(16, 3, 16, 3, 1), render_chunk=512)


def small_config(**kw):
    return TrainConfig(**{**SMALL, **kw})


@pytest.fixture(scope="module")
def sphere_data(tmp_path_factory):
    out = tmp_path_factory.mktemp("sphere")
    return synth.make_dataset(synth.make_scene("sphere"), 2, "orbit", (12, 12), 0, out, n_test=1, steps=64)


def constant_model(sigma_raw=0.5, rgb_raw=(1.0, -0.5, 0.0)):
    model = OctreeModel(Aabb(-np.ones(3), np.ones(3)), 0)
    model.attach(ROOT, constant_net(tiny_arch(8, 2, 8), sigma_raw, rgb_raw))
    return model


def metric_rows(path):
    with open(path) as fh:
        return list(csv.reader(fh))


class TestConfig:
    def test_period_validated(self):
        with pytest.raises(ValueError):
            TrainConfig(tree_update_period=0)

    def test_weight_model_validated(self):
        with pytest.raises(ValueError):
            TrainConfig(weight_model="volumetric")

    def test_json_round_trip(self):
        cfg = small_config(lam=0.5, weight_model="tomography")
        assert TrainConfig.from_json(json.loads(json.dumps(cfg.to_json()))) == cfg

    def test_unknown_keys_rejected(self):
        with pytest.raises(ValueError, match="unknown config keys"):
            TrainConfig.from_json({"epochz": 3})


class TestEvaluate:
    def test_identical(self):
        a = np.random.default_rng(0).random((16, 16, 3))
        p, s = trainer.evaluate(a, a)
        assert p == 99.0 and s == pytest.approx(1.0)

    def test_psnr_arithmetic(self):
        a = np.zeros((12, 12, 3))
        assert trainer.evaluate(a + 0.1, a)[0] == pytest.approx(20.0)

    def test_symmetric(self):
        rng = np.random.default_rng(1)
        a, b = rng.random((16, 16, 3)), rng.random((16, 16, 3))
        assert trainer.evaluate(a, b) == pytest.approx(trainer.evaluate(b, a))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            trainer.evaluate(np.zeros((8, 8, 3)), np.zeros((8, 9, 3)))

    def test_small_images_shrink_the_window(self):
        a = np.random.default_rng(2).random((5, 6, 3))
        assert trainer.evaluate(a, a)[1] == pytest.approx(1.0)
        assert trainer.evaluate(a, 1 - a)[1] < 0.5


class TestRenderView:
    cam = Camera(look_at([2.5, 1.0, 1.2], [0, 0, 0]), 14.0, 10, 10)

    def test_all_inactive_is_black(self):
        model = constant_model()
        model.deactivate(ROOT)
        img, depth = trainer.render_view(model, self.cam, small_config())
        assert not img.any() and not depth.any()

    def test_constant_medium(self):
        model = constant_model()
        sigma = float(np.log1p(np.exp(0.5)))
        color = 1 / (1 + np.exp(-np.array([1.0, -0.5, 0.0])))
        img, _ = trainer.render_view(model, self.cam, small_config(importance_samples=256, n_per_axis=8))
        rays = generate_rays(self.cam)
        t0, t1, hit = intersect_boxes(rays.origins, rays.directions, -np.ones((1, 3)), np.ones((1, 3)))
        length = np.where(hit[:, 0], t1[:, 0] - t0[:, 0], 0.0)
        exact = -np.expm1(-sigma * length)[:, None] * color
        np.testing.assert_allclose(img.reshape(-1, 3), exact, rtol=0.01, atol=1e-12)

    def test_tomography_is_not_culled(self):
        model = constant_model(sigma_raw=30.0)  # opaque under the surface model
        cfg = small_config(weight_model="tomography", importance_samples=16)
        _, table = trainer.prepare_views(model, [self.cam], cfg, jitter=False)
        from octfield.bank import NetworkBank

        ids = np.arange(100)
        rp = trainer.render_rays(model, NetworkBank([model.networks[ROOT]]), [ROOT], table,
                                 np.broadcast_to(self.cam.origin, (100, 3)), self.cam.pixel_directions(),
                                 np.broadcast_to(self.cam.forward, (100, 3)), ids, cfg)
        assert rp.visible.all() and len(rp.visible) > 0

    def test_deterministic(self, sphere_data):
        state = trainer.init_state(sphere_data.bounds, small_config(initial_level=1, max_level=2))
        a = trainer.render_view(state.model, sphere_data.cameras[0], state.config)
        b = trainer.render_view(state.model, sphere_data.cameras[0], state.config)
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])


class TestTrain:
    def test_zero_epochs_equals_init(self, sphere_data):
        cfg = small_config(epochs=0)
        trained = trainer.train(sphere_data, cfg)
        fresh = trainer.init_state(sphere_data.bounds, cfg)
        assert trainer.checkpoint_dict(trained) == trainer.checkpoint_dict(fresh)

    def test_metrics_file_and_reproducibility(self, sphere_data, tmp_path):
        cfg = small_config(epochs=6, warmup_epochs=2, tree_update_period=3, initial_level=1, max_level=2)
        for name in ("a.csv", "b.csv"):
            trainer.train(sphere_data, cfg, metrics_path=tmp_path / name, record_wall_time=False)
        rows = metric_rows(tmp_path / "a.csv")
        assert rows[0] == trainer.METRICS_HEADER
        assert [int(r[0]) for r in rows[1:]] == list(range(1, 7))
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()

    def test_tree_updates_only_on_period(self, sphere_data):
        cfg = small_config(epochs=7, warmup_epochs=1, tree_update_period=2, initial_level=1, max_level=2)
        state = trainer.train(sphere_data, cfg)
        updates = [e["epoch"] for e in state.tree_log if e["kind"] == "tree_update"]
        assert updates == [2, 4, 6]
        assert [e["epoch"] for e in state.tree_log if e["kind"] == "initial_cull"] == [1]

    def test_divergence_keeps_last_good(self, sphere_data):
        def poison(state, row):
            if state.epoch == 1:
                net = next(iter(state.model.networks.values()))
                net.params[0] = np.nan

        with pytest.raises(TrainingDivergedError) as info:
            trainer.train(sphere_data, small_config(epochs=3, warmup_epochs=99), on_epoch=poison)
        good = info.value.checkpoint
        assert good["epoch"] == 1
        assert all(np.isfinite(n["params"]).all() for n in good["networks"][1:])

    def test_degenerate_single_leaf_fit(self):
        box = synth.Primitive("box", {"min": [-1, -1, -1], "max": [1, 1, 1]}, 60.0, (0.3, 0.6, 0.8))
        scene = synth.AnalyticScene([box])
        cam = Camera(look_at([0.0, 0.0, 2.0], [0.0, 0.0, 0.0], up=(0.0, 1.0, 0.0)), 40.0, 16, 16)
        image, alpha = synth.oracle_render(scene, cam, 64, with_alpha=True)
        assert np.ptp(image.reshape(-1, 3), axis=0).max() < 1e-9  # one color fills the frame
        data = synth.SceneDataset([cam], image[None], [], np.zeros((0, 1, 1, 3)), scene.bounds, alphas=alpha[None])
        cfg = small_config(epochs=50, initial_level=0, max_level=0, rays_per_batch=32, warmup_epochs=99,
                           tree_update_period=1000, lr=2e-3, lr_every=1000)
        losses = []
        trainer.train(data, cfg, on_epoch=lambda st, row: losses.append(float(row[2])))
        assert losses[-1] < 1e-3
        tail = np.array(losses[2:])
        # monotone up to step noise: every 5-epoch window improves on the one before
        windows = tail[: len(tail) // 5 * 5].reshape(-1, 5).mean(axis=1)
        assert np.all(np.diff(windows) < 0)


class TestCheckpoint:
    def test_save_load_save_bytes(self, sphere_data, tmp_path):
        state = trainer.train(sphere_data, small_config(epochs=2, initial_level=1, max_level=2))
        trainer.save_checkpoint(tmp_path / "a.json", state)
        again = trainer.load_checkpoint(tmp_path / "a.json")
        trainer.save_checkpoint(tmp_path / "b.json", again)
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()

    def test_resume_matches_uninterrupted(self, sphere_data, tmp_path):
        cfg1 = small_config(epochs=2, warmup_epochs=99, initial_level=1, max_level=2)
        cfg2 = small_config(epochs=3, warmup_epochs=99, initial_level=1, max_level=2)
        state = trainer.train(sphere_data, cfg1)
        trainer.save_checkpoint(tmp_path / "s.json", state)
        rows = []
        trainer.train(sphere_data, cfg2, trainer.load_checkpoint(tmp_path / "s.json"), record_wall_time=False,
                      on_epoch=lambda st, r: rows.append(r))
        straight = []
        cont = trainer.train(sphere_data, cfg2, state, record_wall_time=False, on_epoch=lambda st, r: straight.append(r))
        assert rows == straight and len(rows) == 1
        resumed = trainer.load_checkpoint(tmp_path / "s.json")
        trainer.train(sphere_data, cfg2, resumed)
        for node, net in cont.model.networks.items():
            np.testing.assert_array_equal(net.params, resumed.model.networks[node].params)

    def test_truncated_file(self, sphere_data, tmp_path):
        trainer.save_checkpoint(tmp_path / "c.json", trainer.init_state(sphere_data.bounds, small_config()))
        raw = (tmp_path / "c.json").read_bytes()
        (tmp_path / "c.json").write_bytes(raw[: len(raw) // 2])
        with pytest.raises(CheckpointError):
            trainer.load_checkpoint(tmp_path / "c.json")

    def test_version_checked(self, sphere_data, tmp_path):
        d = trainer.checkpoint_dict(trainer.init_state(sphere_data.bounds, small_config()))
        d["version"] = 99
        (tmp_path / "v.json").write_text(json.dumps(d))
        with pytest.raises(CheckpointError, match="version"):
            trainer.load_checkpoint(tmp_path / "v.json")

    def test_meta_is_kept_and_ignored(self, sphere_data, tmp_path):
        state = trainer.init_state(sphere_data.bounds, small_config())
        trainer.save_checkpoint(tmp_path / "m.json", state, meta={"data": "somewhere"})
        loaded, meta = trainer.load_checkpoint(tmp_path / "m.json", with_meta=True)
        assert meta == {"data": "somewhere"}
        assert trainer.checkpoint_dict(loaded) == trainer.checkpoint_dict(state)


class TestTreeUpdate:
    def _trained(self, data):
        cfg = small_config(epochs=3, warmup_epochs=99, initial_level=1, max_level=2, budget=16,
                           distill_steps=60, distill_batch=256)
        state = trainer.train(data, cfg)
        _, stats = trainer.train_epoch(state, data, collect_stats=True)
        return state, stats

    def test_untouched_leaves_keep_parameters(self, sphere_data):
        state, stats = self._trained(sphere_data)
        before = {n: net.params.copy() for n, net in state.model.networks.items()}
        cache = trainer.build_density_cache(state.model, state.config.n_per_axis, state.rng)
        trainer.update_tree(state, cache, *stats)
        kept = [n for n in state.model.active_leaves() if n in before]
        assert kept
        for n in kept:
            np.testing.assert_array_equal(state.model.networks[n].params, before[n])
        assert set(state.optimizers) == set(state.model.active_leaves())

    def test_split_with_distillation_is_continuous(self, sphere_data):
        state, _ = self._trained(sphere_data)
        cfg, model = state.config, state.model
        cams, refs = sphere_data.cameras, sphere_data.images

        def score():
            return np.mean([trainer.evaluate(trainer.render_view(model, c, cfg)[0], r)[0] for c, r in zip(cams, refs)])

        before = score()
        sched = distill.DistillSchedule(200, 1024)
        for node in list(model.active_leaves()):
            parent = model.networks[node]
            kids = distill.pretrain_split(parent, model.bounds(node), cfg.arch, range(8), sched)
            children, _ = model.split(node)
            for c, net in zip(children, kids):
                model.attach(c, net)
        assert abs(score() - before) < 1.0


def test_distillation_retries_halve_the_rate():
    seen, log = [], []

    def fit(schedule):
        seen.append(schedule.lr)
        if len(seen) < 3:
            raise distill.DistillationDivergedError(4, 10.0, 1.0, "test")
        return "ok"

    assert trainer._with_retries(fit, distill.DistillSchedule(lr=0.04), log) == "ok"
    assert seen == [0.04, 0.02, 0.01] and [e["lr"] for e in log] == [0.04, 0.02]


def test_distillation_gives_up_after_retries():
    def fit(schedule):
        raise distill.DistillationDivergedError(0, 9.0, 1.0, "test")

    log = []
    with pytest.raises(distill.DistillationDivergedError):
        trainer._with_retries(fit, distill.DistillSchedule(), log)
    assert len(log) == 3
