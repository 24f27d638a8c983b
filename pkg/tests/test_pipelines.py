import numpy as np
import pytest

from noderf import autograd as ag
from noderf.pipelines import (LOG_HEADER, LossWeights, RayTable, TrainConfig, TrainingError, WarmupSchedule,
                              build_initial_latent, load_model, model_arrays, model_from_config, multi_predict,
                              prepare_multi, prepare_single, read_log, rollout_single, sample_rays, single_latents,
                              single_split, total_loss, train)
from noderf.synth import SceneSpec, generate_dataset

TINY = {
    "iterations": 6, "ray_batch": 24, "frames_per_batch": 2, "extrap_frames": 2, "probe_every": 2,
    "probe_rays": 16, "subsequences": 2,
    "warmup.initial": 3, "warmup.period": 0, "warmup.length": 0,
    "model.latent_dim": 6, "model.dyn_dim": 3, "model.enc_hidden": 6, "model.ode_hidden": 8, "model.ode_depth": 2,
    "model.dec_hidden": 8, "model.dec_depth": 2, "model.canon_dim": 2, "model.pose_code_dim": 2,
    "model.pose_enc_hidden": 8, "model.pose_enc_depth": 2, "model.pose_freqs": 3,
    "nerf.hidden": 8, "nerf.depth": 2, "nerf.pos_freqs": 2, "nerf.dir_freqs": 1,
    "render.n_coarse": 4, "render.n_fine": 4, "solver.step": 0.25,
}


def tiny_config(mode="single", **over) -> TrainConfig:
    flat = TrainConfig(mode=mode).to_flat()
    flat.update(TINY)
    flat.update(over)
    return TrainConfig.from_flat(flat)


@pytest.fixture(scope="module")
def pend():
    spec = SceneSpec("pendulum", n_frames=10, image_size=12, focal=18.0)
    return generate_dataset(spec)


@pytest.fixture(scope="module")
def hill():
    spec = SceneSpec("bifurcating-hill", n_frames=5, image_size=12, focal=18.0)
    return generate_dataset(spec, initials=[(-0.2, 0.0), (0.2, 0.0), (0.1, 0.0)], n_eval=1)


def test_warmup_schedule():
    w = WarmupSchedule(initial=10, period=20, length=5)
    on = [it for it in range(60) if w.in_warmup(it)]
    assert on == list(range(10)) + list(range(30, 35)) + list(range(50, 55))
    assert not WarmupSchedule(3, 0, 0).in_warmup(3)
    with pytest.raises(ValueError):
        WarmupSchedule(1, 4, 5)


def test_config_flat_roundtrip():
    cfg = tiny_config()
    back = TrainConfig.from_flat(cfg.to_flat())
    assert back == cfg and back.nerf.latent_dim == 6
    with pytest.raises((KeyError, ValueError)):
        TrainConfig.from_flat({**cfg.to_flat(), "model.nope": 1})
    with pytest.raises(ValueError):
        TrainConfig(mode="triple")
    with pytest.raises(ValueError):
        LossWeights(nerf=0.0)


def test_single_split_desk_layout():
    s = single_split(50, 2, 5)
    assert s["train"].tolist() == list(range(0, 45, 2))
    assert s["interp"].tolist() == list(range(1, 44, 2))
    assert s["extrap"].tolist() == list(range(45, 50))
    assert s["t_scale"] == 44.0
    with pytest.raises(ValueError):
        single_split(6, 2, 5)


def test_total_loss_weights_and_nan():
    parts = {"nerf": ag.Tensor(np.array(2.0)), "pose": ag.Tensor(np.array(3.0)), "lip": ag.Tensor(np.array(1e9))}
    assert total_loss(parts, LossWeights(pose=0.5, lip=0.0)).item() == pytest.approx(3.5)
    with pytest.raises(TrainingError):
        total_loss({"nerf": ag.Tensor(np.array(np.nan))}, LossWeights())


def test_prepare_multi_subsequences(hill):
    clips = prepare_multi(hill, tiny_config("multi"))
    assert [c.name for c in clips] == ["seq_000/0", "seq_000/1", "seq_001/0", "seq_001/1"]
    c = clips[1]
    assert c.times[0] == 0.0 and len(c.times) == 4 and c.times[1] == pytest.approx(0.25)
    np.testing.assert_array_equal(c.p0, hill.sequences[0].poses[1])
    assert np.isnan(c.velocities[-1]).all()


def test_sample_rays_dynamic_share(pend, rng):
    clip, _ = prepare_single(pend, tiny_config())
    table = RayTable(pend.cameras)
    rays, idx, target = sample_rays(rng, clip, np.array([0, 2]), 40, table, 1.0)
    assert rays.origins.shape == (40, 3) and np.bincount(idx).tolist() == [20, 20]
    W = pend.cameras[0].width
    flat = rays.pixels[:, 0] * W + rays.pixels[:, 1]
    assert np.all(np.isin(flat[:20], clip.dyn[0][0])) and np.all(np.isin(flat[20:], clip.dyn[2][0]))
    np.testing.assert_array_equal(target[:20], clip.frames[0, 0].reshape(-1, 3)[flat[:20]])


def test_motion_region_is_shared_union(hill, rng):
    clips = prepare_multi(hill, tiny_config("multi"))
    expect = set()
    for clip in clips:
        for per_cam in clip.dyn:
            expect.update(per_cam[0].tolist())
    assert all(c.motion is clips[0].motion for c in clips)
    assert set(clips[0].motion[0].tolist()) == expect
    # the union is larger than any single frame's object
    assert len(expect) > max(len(d[0]) for d in clips[0].dyn)

    table = RayTable(hill.cameras)
    rays, idx, _ = sample_rays(rng, clips[0], np.array([0]), 20, table, 1.0, motion_fraction=0.5)
    W = hill.cameras[0].width
    flat = rays.pixels[:, 0] * W + rays.pixels[:, 1]
    assert np.all(np.isin(flat[:10], clips[0].motion[0]))
    assert np.all(np.isin(flat[10:], clips[0].dyn[0][0]))


def test_motion_fraction_zero_keeps_sampling_unchanged(pend):
    clip, _ = prepare_single(pend, tiny_config())
    table = RayTable(pend.cameras)
    a = sample_rays(np.random.default_rng(3), clip, np.array([1, 3]), 30, table, 0.5)
    b = sample_rays(np.random.default_rng(3), clip, np.array([1, 3]), 30, table, 0.5, motion_fraction=0.0)
    np.testing.assert_array_equal(a[0].pixels, b[0].pixels)
    with pytest.raises(ValueError):
        tiny_config(motion_fraction=1.5)


def test_rollout_is_consistent_across_queries(pend):
    model = model_from_config(tiny_config(), 0)
    with ag.no_grad():
        z0 = ag.Tensor(np.array([0.3, -0.2, 0.1]))
        both = rollout_single(model, z0, [0.5, 1.0]).data
        rev = rollout_single(model, z0, [1.0, 0.5]).data
        one = rollout_single(model, z0, [1.0]).data
    np.testing.assert_array_equal(both[::-1], rev)
    np.testing.assert_allclose(both[1], one[0], atol=1e-14)


def _snapshot(model):
    return {k: v.copy() for k, v in model_arrays(model).items()}


def test_warmup_and_joint_phases_freeze_the_right_parameters(pend):
    cfg = tiny_config(iterations=3)
    init = _snapshot(model_from_config(cfg, 0))
    after_warm = _snapshot(train(pend, cfg, seed=0).model)
    dyn = [k for k in init if not k.startswith(("z_t0", "z_t1", "nerf"))]
    assert dyn and all(np.array_equal(init[k], after_warm[k]) for k in dyn)
    assert not np.array_equal(init["z_t0"], after_warm["z_t0"])
    joint = _snapshot(train(pend, tiny_config(iterations=6), seed=0).model)
    assert np.array_equal(after_warm["z_t0"], joint["z_t0"]) and np.array_equal(after_warm["z_t1"], joint["z_t1"])
    assert any(not np.array_equal(after_warm[k], joint[k]) for k in dyn)


def test_training_is_deterministic_and_checkpoint_roundtrips(pend, tmp_path):
    cfg = tiny_config()
    a = train(pend, cfg, seed=3, out_dir=tmp_path / "a")
    train(pend, cfg, seed=3, out_dir=tmp_path / "b")
    assert (tmp_path / "a" / "checkpoint.ckpt").read_bytes() == (tmp_path / "b" / "checkpoint.ckpt").read_bytes()
    assert (tmp_path / "a" / "metrics.csv").read_text() == (tmp_path / "b" / "metrics.csv").read_text()
    log = read_log(tmp_path / "a" / "metrics.csv")
    assert list(log[0]) == list(LOG_HEADER) and len(log) == cfg.iterations
    model, cfg2, meta = load_model(tmp_path / "a" / "checkpoint.ckpt")
    assert cfg2 == cfg and meta["seed"] == 3 and meta["split"]["train"] == [0, 2, 4, 6]
    t = [0.0, 0.5, 1.2]
    np.testing.assert_array_equal(single_latents(model, t), single_latents(a.model, t))
    c = train(pend, cfg, seed=4)
    assert not np.array_equal(model_arrays(c.model)["z_t0"], model_arrays(a.model)["z_t0"])


def test_multi_training_and_prediction(hill, tmp_path):
    res = train(hill, tiny_config("multi"), seed=0, out_dir=tmp_path)
    model = res.model
    assert res.log[-1][3] > 0.0  # pose term present in the joint phase
    out = multi_predict(model, [0.1, -0.2], [0.01, 0.0], [0.0, 0.5])
    assert out["latents"].shape == (2, 6) and out["pose"].shape == (2, 2) and out["velocity"].shape == (2, 2)
    p = np.array([[0.3, -0.42], [-0.9, 0.05]])
    np.testing.assert_allclose(model.decode_pose(model.pose_target(p)), p, atol=1e-12)
    with pytest.raises(ag.ShapeError):
        build_initial_latent(model, [0.1, 0.2, 0.3], [0.0, 0.0])
    back, _, _ = load_model(tmp_path / "checkpoint.ckpt")
    np.testing.assert_array_equal(multi_predict(back, [0.1, -0.2], [0.01, 0.0], [0.7])["latents"],
                                  multi_predict(model, [0.1, -0.2], [0.01, 0.0], [0.7])["latents"])


def test_training_errors(pend, hill):
    with pytest.raises(TrainingError):
        train(pend, tiny_config(sequence=5))
    with pytest.raises(TrainingError):
        train(pend, tiny_config(n_frames=50))
    empty = generate_dataset(SceneSpec("bifurcating-hill", n_frames=3, image_size=8, focal=12.0),
                             initials=[(0.2, 0.0)], n_eval=1)
    with pytest.raises(TrainingError):
        train(empty, tiny_config("multi"))
