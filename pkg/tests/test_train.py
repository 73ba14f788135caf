import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hetpcc.codec import CodecModel, EncodeConfig, decode, encode
from hetpcc.nn.gradcheck import grad_check
from hetpcc.nn.params import CheckpointError
from hetpcc.nn.tensor import Tensor
from hetpcc.train import (
    ShapeSpec,
    TrainingConfig,
    TrainingDiverged,
    chamfer_tensor,
    evaluate,
    generate_synthetic_cloud,
    load_checkpoint,
    log_to_csv,
    make_dataset,
    rd_loss,
    save_checkpoint,
    train,
)


def tiny_model(k=5, h=1, step=4.0, seed=0):
    return CodecModel.create(k, h, m=8, d=4, step=step, seed=seed, pa_hidden=(8,), ps_hidden=(32,))


def tiny_data(n, seed):
    return make_dataset(n, seed, bit_depth=8, size_range=(0.08, 0.12), density=1.5)


# ---------------------------------------------------------------- shapes

@settings(max_examples=20, deadline=None)
@given(st.sampled_from(["sphere", "torus", "plane", "superellipsoid"]), st.integers(0, 2**31 - 1))
def test_synthetic_clouds_are_valid_voxels(family, seed):
    cloud = generate_synthetic_cloud(ShapeSpec(family, 2000, 9, 0.3, jitter=0.5), seed)
    p = cloud.points
    assert p.min() >= 0 and p.max() < 512
    assert np.array_equal(p, np.round(p))
    assert len(np.unique(p, axis=0)) == len(p)


def test_same_seed_same_cloud():
    spec = ShapeSpec("torus", 5000, 9, 0.3, relief=1.0)
    assert generate_synthetic_cloud(spec, 7) == generate_synthetic_cloud(spec, 7)
    assert generate_synthetic_cloud(spec, 7) != generate_synthetic_cloud(spec, 8)


def test_sphere_radius():
    cloud = generate_synthetic_cloud(ShapeSpec("sphere", 20000, 9, 0.35), 0)
    r = np.linalg.norm(cloud.points - 256, axis=1)
    assert abs(r.mean() - 0.35 * 512) < 1.0
    assert r.std() < 1.0


def test_shape_spec_rejects_bad_values():
    for kw in ({"family": "cube"}, {"samples": 0}, {"size": 0.7}, {"jitter": -1.0}):
        with pytest.raises(ValueError):
            ShapeSpec(**kw)


def test_dataset_is_reproducible():
    a, b = tiny_data(3, 5), tiny_data(3, 5)
    assert all(x == y for x, y in zip(a, b))


# ------------------------------------------------------------------ loss

def test_rd_loss_examples():
    assert rd_loss(0.2, 0.0, alpha=5.0, beta=0.0) == pytest.approx(1.0)
    assert rd_loss(0.2, 3.0, alpha=5.0, beta=0.5) == pytest.approx(2.5)
    assert rd_loss(0.2, 3.0, alpha=5.0, beta=0.5, skip=True) == 0.2


def test_rd_loss_tensor_gradient():
    d = Tensor(np.asarray(0.3), requires_grad=True)
    r = Tensor(np.asarray(2.0), requires_grad=True)
    err = grad_check(lambda: rd_loss(d, r, 5.0, 0.25), [d, r], eps=1e-6)
    assert err < 1e-6


def test_chamfer_tensor_matches_brute_force(rng):
    x0 = rng.integers(0, 20, size=(60, 3)).astype(float)
    y = rng.uniform(0, 20, size=(45, 3))
    from scipy.spatial import cKDTree

    val = float(chamfer_tensor(x0, cKDTree(x0), Tensor(y)).value)
    dist = np.linalg.norm(x0[:, None] - y[None], axis=2)
    assert val == pytest.approx(max(dist.min(1).mean(), dist.min(0).mean()), rel=1e-12)


def test_chamfer_tensor_gradient(rng):
    from scipy.spatial import cKDTree

    x0 = rng.integers(0, 10, size=(30, 3)).astype(float)
    y = Tensor(rng.uniform(0, 10, size=(25, 3)), requires_grad=True)
    tree = cKDTree(x0)
    assert grad_check(lambda: chamfer_tensor(x0, tree, y), [y], eps=1e-7) < 1e-4


# -------------------------------------------------------------- config

def test_config_text_round_trip():
    cfg = TrainingConfig(beta=0.1, step=8 / 3, skip=True, epochs=3)
    back = TrainingConfig.from_text(cfg.to_text())
    assert back == cfg
    parsed = TrainingConfig.from_text("step = 8/3  # a fraction\nskip = yes\n")
    assert parsed.step == pytest.approx(8 / 3) and parsed.skip is True


def test_config_rejects_unknown_and_invalid():
    with pytest.raises(ValueError):
        TrainingConfig.from_text("learning_rate = 1\n")
    with pytest.raises(ValueError):
        TrainingConfig(lr=0.0)
    with pytest.raises(ValueError):
        TrainingConfig(beta=-1.0)


# -------------------------------------------------------------- training

@pytest.fixture(scope="module")
def spheres():
    data = make_dataset(24, 3, bit_depth=8, families=("sphere",), size_range=(0.08, 0.12), density=1.5)
    return data[:20], data[20:]


def test_training_reduces_validation_chamfer(spheres):
    train_set, val = spheres
    cfg = TrainingConfig(epochs=5, step=4.0, k=5, hierarchies=1, lr=3e-3, beta=0.2)
    model = tiny_model()
    before = evaluate(model, val, cfg)["chamfer"]
    _, rows = train(model, train_set, cfg, val=val)
    after = rows[-1]["val_chamfer"]
    assert after <= 0.7 * before
    assert rows[-1]["loss"] < rows[0]["loss"]


def test_training_is_deterministic(spheres):
    train_set, _ = spheres
    cfg = TrainingConfig(epochs=1, step=4.0, k=5, hierarchies=1, batch_size=4)
    a, rows_a = train(tiny_model(), train_set[:6], cfg)
    b, rows_b = train(tiny_model(), train_set[:6], cfg)
    assert log_to_csv(rows_a) == log_to_csv(rows_b)
    assert a.to_bytes() == b.to_bytes()


def test_beta_trades_rate_for_distortion(spheres):
    # larger beta means fewer enhancement bits
    train_set, val = spheres
    rates = []
    for beta in (0.0, 2.0, 50.0):
        cfg = TrainingConfig(epochs=2, step=4.0, k=5, hierarchies=1, lr=3e-3, beta=beta)
        model, _ = train(tiny_model(), train_set[:8], cfg)
        rates.append(evaluate(model, val, cfg)["enh_bpp"])
    assert rates[0] >= rates[1] >= rates[2]
    assert rates[0] > rates[2]


def test_skip_training_touches_only_synthesis(spheres):
    train_set, _ = spheres
    model = tiny_model()
    before = model.store.state_dict()
    train(model, train_set[:3], TrainingConfig(epochs=1, step=4.0, k=5, hierarchies=1, skip=True))
    after = model.store.state_dict()
    for name in before:
        moved = not np.array_equal(before[name], after[name])
        assert moved == name.startswith(("feature_synthesis", "point_synthesis")), name
    assert model.config["skip_trained"] is True


def test_train_checks_operating_point(spheres):
    with pytest.raises(ValueError):
        train(tiny_model(k=5), spheres[0][:1], TrainingConfig(epochs=1, k=10, hierarchies=1))
    with pytest.raises(ValueError):
        train(tiny_model(step=4.0), spheres[0][:1], TrainingConfig(epochs=1, k=5, hierarchies=1, step=2.0))


def test_divergence_restores_last_good_state(spheres):
    train_set, _ = spheres
    model = tiny_model()
    cfg = TrainingConfig(epochs=1, step=4.0, k=5, hierarchies=1)
    model, _ = train(model, train_set[:2], cfg)
    good = model.store.state_dict()
    model.store["point_synthesis.0.w"].value[0, 0] = np.nan
    with pytest.raises(TrainingDiverged) as info:
        train(model, train_set[:2], cfg)
    # the NaN was there before training began, so the restore target is the poisoned state
    assert info.value.log == []
    restored = info.value.model.store.state_dict()
    assert set(restored) == set(good)


# ------------------------------------------------------------ checkpoints

def test_checkpoint_round_trip(tmp_path, spheres):
    model, _ = train(tiny_model(), spheres[0][:2], TrainingConfig(epochs=1, step=4.0, k=5, hierarchies=1))
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path)
    back = load_checkpoint(path, expect={"k": 5, "hierarchies": 1})
    assert back.to_bytes() == model.to_bytes()
    cloud = spheres[1][0]
    c1 = encode(cloud, model, EncodeConfig(4.0, 5, 1))
    c2 = encode(cloud, back, EncodeConfig(4.0, 5, 1))
    assert c1 == c2
    assert decode(c1, model, "full") == decode(c2, back, "full")
    with pytest.raises(CheckpointError):
        load_checkpoint(path, expect={"k": 10})


def test_skip_trained_checkpoint_decodes_skip_containers(tmp_path, spheres):
    cfg = TrainingConfig(epochs=1, step=4.0, k=5, hierarchies=1, skip=True)
    model, _ = train(tiny_model(), spheres[0][:2], cfg)
    save_checkpoint(model, tmp_path / "s.ckpt")
    back = load_checkpoint(tmp_path / "s.ckpt")
    assert back.config["skip_trained"] is True
    cont = encode(spheres[1][0], None, EncodeConfig(4.0, 5, 1, skip=True))
    rec = decode(cont, back, "skip")
    assert len(rec) == 5 * len(decode(cont, None, "base_only"))
