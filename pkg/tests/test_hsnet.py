import math
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest

from hsct import hsnet
from hsct.dataio import load_tensor, make_rng
from hsct.hsnet import TrainConfig
from hsct.phantom import PhantomSpec, gen_cellular
from hsct.tomo import inscribed_circle

CFG = TrainConfig(patch=16, n_train_patches=12, n_test_patches=6, batch=4, epochs=3, lr=1e-3, seed=4, overlap=4)


@pytest.fixture(scope="module")
def slices():
    gts = [gen_cellular(PhantomSpec(size=48, seed=s, feature_radius=2), make_rng(s)) for s in range(4)]
    rng = np.random.default_rng(0)
    inputs = [np.clip(g.data + 0.3 * rng.standard_normal(g.shape), -1, 2) for g in gts]
    return inputs, gts


@pytest.fixture(scope="module")
def dataset(slices):
    return hsnet.make_dataset(*slices, CFG)


@pytest.fixture(scope="module")
def model(dataset):
    return hsnet.train_model(dataset, CFG)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(patch=15)
    with pytest.raises(ValueError):
        TrainConfig(patch=8)
    with pytest.raises(ValueError):
        TrainConfig(sigmas=(1, 2, 4))


def test_dataset_on_disk(slices, tmp_path):
    cfg = TrainConfig(patch=16, n_train_patches=4, n_test_patches=2, seed=1, overlap=4)
    ds = hsnet.make_dataset(*slices, cfg, out_dir=tmp_path)
    train_dirs = sorted((tmp_path / "train").iterdir())
    assert len(train_dirs) == 4 and len(list((tmp_path / "test").iterdir())) == 2
    for d in train_dirs:
        names = sorted(p.name for p in d.iterdir())
        assert len([n for n in names if n.startswith("band_")]) == 9
        assert len([n for n in names if n.startswith("target_")]) == 3
        assert "band_dim_s2.hsct" in names
    dims, _ = load_tensor(train_dirs[0] / "target_s0.hsct")
    assert dims == [16, 16]
    back = hsnet.load_dataset(tmp_path)
    assert np.array_equal(back.bands, ds.bands) and np.array_equal(back.targets, ds.targets)
    assert np.array_equal(back.coords, ds.coords)


def test_dataset_deterministic_and_binary(slices, dataset):
    again = hsnet.make_dataset(*slices, CFG)
    assert np.array_equal(again.coords, dataset.coords)
    assert set(np.unique(dataset.targets)) <= {0, 1}
    # held-out patches come from slices never used for training
    train_slices = set(dataset.coords[dataset.train, 0])
    test_slices = set(dataset.coords[dataset.test, 0])
    assert not train_slices & test_slices


def test_dataset_rejects_small_images():
    with pytest.raises(ValueError):
        hsnet.make_dataset([np.zeros((12, 12))], [np.zeros((12, 12))], CFG)
    with pytest.raises(ValueError):
        hsnet.make_dataset([np.zeros((32, 32))], [np.zeros((32, 40))], CFG)


def test_shapes():
    x = np.zeros((2, 3, 16, 16), dtype=np.float32)
    assert hsnet.stage1_net(3).forward(x).shape == (2, 2, 16, 16)
    assert hsnet.stage2_net(4).forward(np.zeros((2, 4, 16, 16), np.float32)).shape == (2, 2, 16, 16)


def test_initial_loss_near_ln2(dataset):
    net = hsnet.stage1_net(3, seed=hsnet.derive_seed(0, 1, 0))
    x = dataset.stage1_input("full", 0, dataset.train)
    loss = hsnet.eval_loss(net, x, dataset.targets[dataset.train, 0])
    assert abs(loss - math.log(2)) < 0.15


def test_training_reduces_loss(model):
    for key, tlog in model.logs.items():
        assert tlog.epoch_loss[-1] < tlog.initial_loss, key


def test_stage1_scales_are_independent(dataset):
    seq = [hsnet.param_digest(hsnet.train_stage1(dataset, s, CFG)[0]) for s in (2, 0, 1)]
    with ThreadPoolExecutor(3) as pool:
        par = list(pool.map(lambda s: hsnet.param_digest(hsnet.train_stage1(dataset, s, CFG)[0]), (2, 0, 1)))
    assert seq == par
    assert len(set(seq)) == 3


def test_stage2_keeps_stage1_frozen(dataset):
    m = hsnet.HSModel("full", CFG.sigmas, CFG.patch,
                      [hsnet.train_stage1(dataset, s, CFG)[0] for s in range(3)], None)
    before = [hsnet.param_digest(n) for n in m.stage1]
    net, _, tlog = hsnet.train_stage2(dataset, m, CFG)
    assert [hsnet.param_digest(n) for n in m.stage1] == before
    assert tlog.epoch_loss[-1] < tlog.initial_loss


def test_maps_are_probabilities(model, dataset):
    maps = model.maps(dataset.bands[dataset.test])
    assert maps.shape == (6, 3, 16, 16)
    assert maps.min() >= 0 and maps.max() <= 1
    assert np.array_equal(maps, model.maps(dataset.bands[dataset.test]))


def test_checkpoint_round_trip(model, tmp_path):
    hsnet.save_model(model, tmp_path)
    back = hsnet.load_model(tmp_path)
    assert back.mode == model.mode and back.sigmas == model.sigmas
    for a, b in zip(list(hsnet._net_entries(model)), list(hsnet._net_entries(back))):
        assert a[0] == b[0] and hsnet.param_digest(a[1]) == hsnet.param_digest(b[1])
    for key, st in model.adam.items():
        assert back.adam[key].t == st.t
        assert all(np.array_equal(back.adam[key].m[k], st.m[k]) for k in st.m)
        assert all(np.array_equal(back.adam[key].v[k], st.v[k]) for k in st.v)
    assert back.logs["stage2"].epoch_loss == model.logs["stage2"].epoch_loss


@pytest.mark.parametrize("mode", ["spectral-only", "intensity-only"])
def test_ablation_layouts(dataset, mode, tmp_path):
    cfg = TrainConfig(patch=16, n_train_patches=12, n_test_patches=6, batch=4, epochs=1, seed=4, overlap=4)
    m = hsnet.train_model(dataset, cfg, mode)
    if mode == "intensity-only":
        assert len(m.stage1) == 1 and m.stage2 is None
    else:
        assert len(m.stage1) == 3 and m.stage1[0].layers[0].layer.in_c == 1
    hsnet.save_model(m, tmp_path)
    back = hsnet.load_model(tmp_path)
    x = dataset.bands[:2]
    assert np.array_equal(back.predict(x), m.predict(x))


def test_stitch_constant_tiles_have_no_seams():
    starts, before, after = hsnet.tile_origins(50, 16, 4)
    size = before + 50 + after
    tiles = np.full((len(starts) ** 2, 16, 16), 0.37)
    out = hsnet.stitch(tiles, starts, starts, (size, size), 16, 4)
    assert np.all(out == pytest.approx(0.37, abs=1e-15))
    assert np.abs(np.diff(out, axis=0)).max() < 1e-15


def test_tile_origins_cover_the_image():
    for length in (16, 30, 48, 64, 100):
        for off in (0, 5, 8):
            starts, before, after = hsnet.tile_origins(length, 16, 4, off)
            assert starts[0] == 0 and starts[-1] + 16 == before + length + after
            assert before >= 4 and after >= 4


def test_infer_shape_range_and_determinism(model, slices):
    img = slices[0][0]
    out = hsnet.infer(model, img, overlap=4)
    assert out.shape == img.shape
    assert out.data.min() >= 0 and out.data.max() <= 1
    assert np.array_equal(out.data, hsnet.infer(model, img, overlap=4).data)


def test_infer_circle_mask(model, slices):
    img = slices[0][0]
    plain = hsnet.infer(model, img, overlap=4).data
    masked = hsnet.infer(model, img, overlap=4, circle=True).data
    inside = inscribed_circle(img.shape[0])
    assert np.array_equal(masked[inside], plain[inside]) and not masked[~inside].any()
    with pytest.raises(ValueError):
        hsnet.infer(model, np.zeros((20, 24)), overlap=4, circle=True)


def test_infer_labels_threshold_the_blend(model, slices):
    img = slices[0][0]
    prob = hsnet.infer(model, img, overlap=4).data
    lab = hsnet.infer(model, img, overlap=4, labels=True).data
    assert set(np.unique(lab)) <= {0.0, 1.0}
    assert np.array_equal(lab == 1, prob >= 0.5)


def test_infer_small_image_single_tile(model):
    out = hsnet.infer(model, np.random.default_rng(0).random((10, 12)), overlap=4)
    assert out.shape == (10, 12)


def test_transfer_same_acquisition_matches_infer(model, slices):
    inputs, gts = slices
    res = hsnet.transfer_apply(model, inputs[:1], gts[:1], CFG, overlap=4)
    assert np.array_equal(res.outputs[0].data, hsnet.infer(model, inputs[0], overlap=4).data)
    with pytest.raises(ValueError):
        hsnet.transfer_apply(model, inputs[:1], gts[:1], TrainConfig(patch=32))
