import json

import numpy as np
import pytest

from colf import trainer as tr
from colf.numerics import ShapeError, load_arrays
from colf.scene import make_scene, random_spheres, tri_sphere

TINY = dict(d=4, width=8, n_coarse=6, n_fine=4, n_freqs=2, patch=3, band=1, eval_every=0, eval_views=2,
            render_chunk=512)


@pytest.fixture(scope="module")
def scene():
    return make_scene(tri_sphere(), 7, size=16, seed=0, n_source=3, n_test=2, n_samples=64, name="tri")


@pytest.fixture(scope="module")
def other_scene():
    return make_scene(random_spheres(5), 7, size=16, seed=5, n_source=3, n_test=2, n_samples=64, name="rnd")


def cfg(**kw):
    return tr.TrainConfig(**{**TINY, **kw})


# ------------------------------------------------------------------ config
def test_config_invariants():
    c = tr.TrainConfig()
    assert (c.rays_per_iter, c.random_rays, c.reference_rays, c.neighbor_rays) == (128, 112, 16, 16)
    assert c.learning_rate == 1e-4 and c.max_offset == 7
    with pytest.raises(ValueError):
        tr.TrainConfig(random_rays=100)
    with pytest.raises(ValueError):
        tr.TrainConfig(n_coarse=0)
    with pytest.raises(ValueError):
        tr.TrainConfig.from_dict({"bogus": 1})
    assert tr.TrainConfig.from_dict(c.to_dict()) == c


def test_ablation_rows():
    assert not tr.ablation_config("baseline").use_ccvi
    assert tr.ablation_config("baseline").weights == (0.0, 0.0) or tr.ablation_config("baseline").lambda_geo == 0
    full = tr.ablation_config("full")
    assert full.use_ccvi and full.lambda_geo == 1e-4 and full.lambda_app == 2e-4
    assert tr.ablation_config("vi-geo").lambda_app == 0 and tr.ablation_config("vi-app").lambda_geo == 0
    with pytest.raises(ValueError):
        tr.ablation_config("nope")


# ------------------------------------------------------------------ batches
@pytest.mark.parametrize("seed", range(10))
def test_ray_batch_structure(scene, seed):
    c = tr.TrainConfig()
    ctx = tr.SceneContext(scene, 3)
    b = tr.sample_ray_batch(ctx, c, np.random.default_rng(seed))
    assert len(b.pixels) == 128 and len(b.ref_idx) == len(b.adj_idx) == 16
    assert b.view in ctx.targets
    assert np.array_equal(b.ref_idx, np.arange(96, 112)) and np.array_equal(b.adj_idx, np.arange(112, 128))
    off = np.abs(b.pixels[b.adj_idx] - b.pixels[b.ref_idx]).max(axis=1)
    assert np.all(off >= 1) and np.all(off <= 7)
    used = np.concatenate([b.ref_idx, b.adj_idx])
    assert len(set(used.tolist())) == 32
    assert np.all((b.pixels >= 0) & (b.pixels < 16))
    np.testing.assert_array_equal(b.colors, scene.images[b.view][b.pixels[:, 1], b.pixels[:, 0]])


def test_ray_batch_deterministic(scene):
    ctx = tr.SceneContext(scene, 3)
    a = tr.sample_ray_batch(ctx, tr.TrainConfig(), np.random.default_rng(3))
    b = tr.sample_ray_batch(ctx, tr.TrainConfig(), np.random.default_rng(3))
    assert np.array_equal(a.pixels, b.pixels) and a.view == b.view


def test_test_views_never_targets(scene):
    ctx = tr.SceneContext(scene, 3)
    assert ctx.source == [0, 1, 2] and ctx.test == [5, 6] and ctx.targets == [3, 4]
    views = {tr.sample_ray_batch(ctx, tr.TrainConfig(), np.random.default_rng(s)).view for s in range(50)}
    assert views == {3, 4}


def test_scene_frequency_uniform(scene, other_scene):
    t = tr.Trainer(cfg(batch_scenes=1), [scene, other_scene, scene])
    counts = np.zeros(3)
    for k in range(1000):
        for i in t.choose_scenes(t.iteration_rng(k)):
            counts[i] += 1
    sd = np.sqrt(1000 * (1 / 3) * (2 / 3))
    assert np.all(np.abs(counts - 1000 / 3) < 3 * sd)


def test_batch_scenes_distinct(scene, other_scene):
    t = tr.Trainer(cfg(batch_scenes=3), [scene, other_scene])
    picks = t.choose_scenes(t.iteration_rng(0))
    assert sorted(picks) == [0, 1]


# ------------------------------------------------------------------ training
def test_step_returns_finite_losses(scene):
    t = tr.Trainer(cfg(), [scene])
    s = t.train_step()
    assert all(np.isfinite(v) for v in (s.rec, s.geo, s.app, s.total, s.grad_norm))
    assert t.iteration == 1
    assert s.total == pytest.approx(s.rec + 1e-4 * s.geo + 2e-4 * s.app)


def test_baseline_freezes_fusion_and_zeroes_regularisers(scene):
    t = tr.Trainer(tr.ablation_config("baseline", cfg()), [scene])
    before = {k: v.data.copy() for k, v in t.model.named_parameters()}
    s = t.train_step()
    assert s.geo == 0 and s.app == 0
    assert not any(k.startswith("ccvi.") for k in t.optimizer.params)
    for k, v in t.model.named_parameters():
        changed = not np.array_equal(v.data, before[k])
        assert changed == (not k.startswith("ccvi.")) or not changed


def test_ablations_share_initial_weights(scene):
    a = tr.Trainer(tr.ablation_config("baseline", cfg(seed=4)), [scene]).model.state_dict()
    b = tr.Trainer(tr.ablation_config("full", cfg(seed=4)), [scene]).model.state_dict()
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_training_deterministic(scene):
    runs = []
    for _ in range(2):
        t = tr.Trainer(cfg(seed=9), [scene])
        t.train(3)
        runs.append(t.model.state_dict())
    assert all(np.array_equal(runs[0][k], runs[1][k]) for k in runs[0])


def test_loss_decreases(scene):
    t = tr.Trainer(cfg(seed=2, learning_rate=2e-3), [scene])
    hist = t.train(150)
    first = np.mean([h.rec for h in hist[:20]])
    last = np.mean([h.rec for h in hist[-20:]])
    assert last < first


def test_non_finite_loss_names_term(scene, monkeypatch):
    t = tr.Trainer(cfg(), [scene])
    real = tr.batch_losses

    def broken(*a, **k):
        rec, geo, app = real(*a, **k)
        return rec, geo * np.nan, app
    monkeypatch.setattr(tr, "batch_losses", broken)
    with pytest.raises(FloatingPointError, match="geometry"):
        t.train_step()


def test_metrics_log(scene, tmp_path):
    t = tr.Trainer(cfg(eval_every=2), [scene])
    log = tmp_path / "m.csv"
    t.train(4, log_path=log)
    lines = log.read_text().splitlines()
    assert lines[0] == ",".join(tr.METRIC_COLUMNS)
    rows = [l.split(",") for l in lines[1:]]
    assert [int(r[0]) for r in rows] == [1, 2, 3, 4]
    assert rows[0][5] == "" and float(rows[1][5]) > 0


def test_render_view_deterministic(scene):
    t = tr.Trainer(cfg(), [scene])
    ctx = t.contexts[0]
    a = tr.render_view(t.model, t.config, ctx, scene.cameras[5], chunk=100)
    b = tr.render_view(t.model, t.config, ctx, scene.cameras[5])
    for x, y in zip(a, b):
        assert np.array_equal(x, y)
    assert a[0].shape == (16, 16, 3) and a[1].shape == (16, 16)


# ------------------------------------------------------------------ checkpoints
def test_checkpoint_round_trip(scene, tmp_path):
    t = tr.Trainer(cfg(), [scene])
    t.train(2)
    p = tr.save_checkpoint(tmp_path / "a.ckpt", t)
    u = tr.load_checkpoint(p, [scene])
    assert u.iteration == 2 and u.config == t.config
    sa, sb = t.model.state_dict(), u.model.state_dict()
    assert all(np.array_equal(sa[k], sb[k]) for k in sa)
    oa, ob = t.optimizer.state_dict(), u.optimizer.state_dict()
    assert all(np.array_equal(oa[k], ob[k]) for k in oa)
    tr.save_checkpoint(tmp_path / "b.ckpt", u)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_resume_bit_identical(scene, tmp_path):
    straight = tr.Trainer(cfg(seed=3), [scene])
    straight.train(4)
    half = tr.Trainer(cfg(seed=3), [scene])
    half.train(2)
    tr.save_checkpoint(tmp_path / "h.ckpt", half)
    resumed = tr.load_checkpoint(tmp_path / "h.ckpt", [scene])
    resumed.train(2)
    a, b = straight.model.state_dict(), resumed.model.state_dict()
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_baseline_checkpoint_resumes(scene, tmp_path):
    c = tr.ablation_config("baseline", cfg(seed=3))
    straight = tr.Trainer(c, [scene])
    straight.train(3)
    half = tr.Trainer(c, [scene])
    half.train(1)
    tr.save_checkpoint(tmp_path / "h.ckpt", half)
    resumed = tr.load_checkpoint(tmp_path / "h.ckpt", [scene])
    resumed.train(2)
    a, b = straight.model.state_dict(), resumed.model.state_dict()
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_dimension_mismatch(scene, tmp_path):
    t = tr.Trainer(cfg(), [scene])
    tr.save_checkpoint(tmp_path / "a.ckpt", t)
    for key, val in (("d", 8), ("width", 16)):
        with pytest.raises(ShapeError, match=key):
            tr.load_checkpoint(tmp_path / "a.ckpt", [scene], cfg(**{key: val}))
    with pytest.raises(FileNotFoundError):
        tr.load_checkpoint(tmp_path / "missing.ckpt", [scene])


def test_fine_tune_zero_iterations(scene, other_scene, tmp_path):
    t = tr.Trainer(cfg(), [scene])
    t.train(2)
    base = tr.save_checkpoint(tmp_path / "base.ckpt", t)
    raw = base.read_bytes()
    tr.fine_tune(base, other_scene, 0, tmp_path / "ft0.ckpt")
    assert (tmp_path / "ft0.ckpt").read_bytes() == raw
    tr.fine_tune(base, other_scene, 2, tmp_path / "ft2.ckpt")
    assert base.read_bytes() == raw
    assert (tmp_path / "ft2.ckpt").read_bytes() != raw
    meta = json.loads(tr.sidecar_path(tmp_path / "ft2.ckpt").read_text())
    assert meta["iteration"] == 4
    with pytest.raises(ValueError):
        tr.fine_tune(base, other_scene, 1, base)


def test_checkpoint_parameter_names(scene, tmp_path):
    t = tr.Trainer(cfg(), [scene])
    t.train_step()
    arrays = load_arrays(tr.save_checkpoint(tmp_path / "a.ckpt", t))
    prefixes = {k.split(".")[0] for k in arrays}
    assert prefixes == {"encoder", "ccvi", "field", "optim", "meta"}
    assert any(k.startswith("field.coarse.") for k in arrays) and any(k.startswith("field.fine.") for k in arrays)
