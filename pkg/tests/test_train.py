import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dilsearch import checkpoint
from dilsearch.convert import convert_to_dilated
from dilsearch.data import Dataset, GenConfig, SegSample, gen_blobs
from dilsearch.errors import DataError, NumericError
from dilsearch.network import Parameters, RunMode, build_network, forward_segmentation, init_params
from dilsearch.tensor import Tensor
from dilsearch.train import (
    TrainConfig,
    confusion_matrix,
    evaluate,
    iou_from_confusion,
    mean_iou,
    poly_lr,
    random_crop,
    recompute_bn_stats,
    sample_batch,
    train,
)


@pytest.fixture(scope="module")
def spec():
    return convert_to_dilated(build_network("light_v2", 2))


@pytest.fixture(scope="module")
def blobs():
    return gen_blobs(GenConfig(height=32, width=32, count=12, seed=2))


# ------------------------------------------------------------------ poly LR

def test_poly_lr_values():
    cfg = TrainConfig(total_steps=1000)
    assert poly_lr(0, cfg) == 0.001
    assert poly_lr(1000, cfg) == 0.0
    assert poly_lr(500, cfg) == pytest.approx(5.359e-4, abs=1e-7)
    lrs = [poly_lr(s, cfg) for s in range(1001)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def test_poly_lr_rejects_out_of_range():
    with pytest.raises(ValueError):
        poly_lr(1001, TrainConfig(total_steps=1000))


# ------------------------------------------------------------------ config

def test_config_defaults_and_crop_alignment():
    cfg = TrainConfig()
    assert (cfg.base_lr, cfg.batch_size, cfg.crop_size) == (1e-3, 32, 800)
    desk = TrainConfig.desk()
    assert (desk.batch_size, desk.crop_size, desk.total_steps) == (8, 96, 2000)
    with pytest.raises(ValueError, match="multiple of the output stride"):
        TrainConfig(crop_size=799).validate()
    TrainConfig(crop_size=799, pad_unaligned_crop=True).validate()
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0).validate()
    assert TrainConfig.from_dict(desk.to_dict()) == desk


def test_unaligned_crop_is_padded_with_ignore(blobs):
    cfg = TrainConfig(batch_size=2, crop_size=15, pad_unaligned_crop=True)
    imgs, masks = sample_batch(blobs, cfg, np.random.default_rng(0))
    assert imgs.shape == (2, 3, 16, 16) and masks.shape == (2, 16, 16)
    assert np.all(masks[:, 15, :] == 255) and np.all(imgs[:, :, :, 15] == 0)


# ------------------------------------------------------------------ cropping

def test_crop_identity_alignment_and_determinism(blobs):
    s = blobs[0]
    same = random_crop(s, 32, np.random.default_rng(0))
    np.testing.assert_array_equal(same.image, s.image)
    rng = np.random.default_rng(5)
    c = random_crop(s, 8, rng)
    rng = np.random.default_rng(5)
    dy, dx = int(rng.integers(0, 25)), int(rng.integers(0, 25))
    np.testing.assert_array_equal(c.mask, s.mask[dy : dy + 8, dx : dx + 8])
    np.testing.assert_array_equal(c.image, s.image[:, dy : dy + 8, dx : dx + 8])
    again = random_crop(s, 8, np.random.default_rng(5))
    np.testing.assert_array_equal(again.image, c.image)


def test_crop_larger_than_image_rejected(blobs):
    with pytest.raises(DataError, match="smaller than crop"):
        random_crop(blobs[0], 40, np.random.default_rng(0))


# ------------------------------------------------------------------ IoU

def test_iou_examples():
    t = np.array([0, 0, 1, 1])
    assert mean_iou(t, t, 2) == 1.0
    assert mean_iou(np.array([0, 1, 1, 1]), t, 2) == pytest.approx(0.5833, abs=1e-4)
    iou, _ = iou_from_confusion(confusion_matrix(np.array([1, 1, 0, 0]), t, 2))
    assert iou[1] == 0.0


def test_iou_excludes_absent_classes_and_rejects_empty():
    t = np.array([0, 0, 1])
    assert mean_iou(t, t, 4) == 1.0
    with pytest.raises(ValueError):
        mean_iou(np.array([0]), np.array([255]), 2)


def brute_iou(pred, target, c):
    ious = []
    for k in range(c):
        p = {i for i, v in enumerate(pred) if v == k}
        g = {i for i, v in enumerate(target) if v == k}
        if p | g:
            ious.append(len(p & g) / len(p | g))
    return sum(ious) / len(ious)


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 5), st.integers(1, 40), st.integers(0, 2**32 - 1))
def test_iou_matches_set_oracle(c, n, seed):
    rng = np.random.default_rng(seed)
    pred, target = rng.integers(0, c, n), rng.integers(0, c, n)
    assert mean_iou(pred, target, c) == pytest.approx(brute_iou(pred.tolist(), target.tolist(), c), abs=1e-12)


# ------------------------------------------------------------------ BN recompute

def test_recompute_on_identical_images(spec):
    s = gen_blobs(GenConfig(height=32, width=32, count=1, seed=0))[0]
    ds = Dataset([s] * 3, 2)
    params = init_params(spec, 0, np.float64)
    recompute_bn_stats(spec, params, ds, passes=1)
    from dilsearch.tensor import conv2d

    stem = conv2d(Tensor(s.image[None].astype(np.float64)), params["stem.conv.weight"], stride=2, padding=3).data
    np.testing.assert_allclose(params.buffers["stem.bn.running_mean"], stem.mean(axis=(0, 2, 3)), rtol=1e-12)
    np.testing.assert_allclose(params.buffers["stem.bn.running_var"], stem.var(axis=(0, 2, 3)), rtol=1e-10)


def test_recompute_is_idempotent_and_keeps_weights(spec, blobs):
    params = init_params(spec, 1)
    weights = {k: v.data.copy() for k, v in params.tensors.items()}
    recompute_bn_stats(spec, params, blobs, batch_size=4)
    first = {k: v.copy() for k, v in params.buffers.items()}
    recompute_bn_stats(spec, params, blobs, batch_size=4)
    for k, v in params.buffers.items():
        assert np.abs(v - first[k]).max() < 1e-6, k
    for k, v in params.tensors.items():
        np.testing.assert_array_equal(v.data, weights[k])


def test_recompute_rejects_empty(spec):
    with pytest.raises(ValueError):
        recompute_bn_stats(spec, init_params(spec), Dataset([], 2))


def infer_train_gap(spec, params, ds):
    imgs, _ = ds.stack()
    x = Tensor(imgs.astype(np.float32))
    infer = forward_segmentation(spec, params, x).data
    scratch = params.copy()
    train_out = forward_segmentation(spec, scratch, x, RunMode(training=True, momentum=0.0)).data
    return float(np.abs(infer - train_out).mean())


@pytest.mark.parametrize("batch_size", [4, 32])
def test_recompute_restores_infer_train_agreement(blobs, batch_size):
    base = build_network("light_v2", 2)
    params = init_params(base, 4)
    recompute_bn_stats(base, params, blobs)
    conv = convert_to_dilated(base)
    stale = infer_train_gap(conv, params, blobs)
    recompute_bn_stats(conv, params, blobs, batch_size=batch_size)
    fresh = infer_train_gap(conv, params, blobs)
    assert fresh < 1e-3 < stale


def test_chunked_passes_settle_layers_in_order(spec, blobs):
    exact = init_params(spec, 6)
    recompute_bn_stats(spec, exact, blobs, batch_size=32)
    partial = init_params(spec, 6)
    recompute_bn_stats(spec, partial, blobs, passes=1, batch_size=4)
    key = "stem.bn.running_var"
    np.testing.assert_allclose(partial.buffers[key], exact.buffers[key], rtol=1e-5)


# ------------------------------------------------------------------ training loop

def test_initial_loss_near_log_c(spec, blobs):
    _, rec = train(spec, blobs, TrainConfig(batch_size=2, crop_size=32, total_steps=1), recompute=False)
    assert abs(rec[0].loss - math.log(2)) < 0.2 * math.log(2)


def test_training_is_bit_reproducible(spec, blobs, tmp_path):
    cfg = TrainConfig(batch_size=2, crop_size=16, total_steps=5, seed=9)
    train(spec, blobs, cfg, log_path=tmp_path / "a.csv", checkpoint_path=tmp_path / "a.ckpt")
    train(spec, blobs, cfg, log_path=tmp_path / "b.csv", checkpoint_path=tmp_path / "b.ckpt")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    rows = list(csv.reader(open(tmp_path / "a.csv")))
    assert rows[0] == ["step", "lr", "tau", "loss"] and len(rows) == 6
    a, meta = checkpoint.load(tmp_path / "a.ckpt")
    b, _ = checkpoint.load(tmp_path / "b.ckpt")
    assert a.keys() == b.keys() and all(a[k].tobytes() == b[k].tobytes() for k in a)
    assert meta["train"]["seed"] == 9 and meta["spec"]["converted"]


def test_class_relabel_symmetry(spec, blobs):
    swapped = Dataset([SegSample(s.image, 1 - s.mask, s.id) for s in blobs], 2)
    p = init_params(spec, 5, np.float64)
    q = p.copy()
    q["head.weight"].data = q["head.weight"].data[::-1].copy()
    q["head.bias"].data = q["head.bias"].data[::-1].copy()
    cfg = TrainConfig(batch_size=2, crop_size=16, total_steps=6, seed=1)
    _, ra = train(spec, blobs, cfg, params=p, recompute=False, dtype=np.float64)
    _, rb = train(spec, swapped, cfg, params=q, recompute=False, dtype=np.float64)
    np.testing.assert_allclose([r.loss for r in ra], [r.loss for r in rb], rtol=1e-10)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_aborts_with_step(spec, blobs):
    bad = Dataset([SegSample(np.full_like(s.image, np.nan), s.mask, s.id) for s in blobs], 2)
    with pytest.raises(NumericError, match="step 0"):
        train(spec, bad, TrainConfig(batch_size=2, crop_size=16, total_steps=3), recompute=False)


def test_train_rejects_class_mismatch(blobs):
    spec4 = convert_to_dilated(build_network("light_v2", 4))
    with pytest.raises(ValueError, match="classes"):
        train(spec4, blobs, TrainConfig(batch_size=2, crop_size=16, total_steps=1))


# ------------------------------------------------------------------ evaluation

def test_constant_background_predictor(spec, blobs):
    params = init_params(spec, 0)
    params["head.weight"].data[:] = 0
    params["head.bias"].data[:] = np.array([5.0, -5.0], dtype=np.float32)
    rep = evaluate(spec, params, blobs)
    assert rep["per_class_iou"][1] == 0.0
    assert rep["pixel_counts"]["predicted"][1] == 0
    assert rep == evaluate(spec, params, blobs)


def test_report_fields(spec, blobs):
    rep = evaluate(spec, init_params(spec, 0), blobs)
    cm = np.array(rep["confusion_matrix"])
    assert cm.sum() == 12 * 32 * 32
    assert rep["mean_iou"] == pytest.approx(np.nanmean([v for v in rep["per_class_iou"] if v is not None]))


# ------------------------------------------------------------------ checkpoint container

def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    arrays = {
        "a": rng.standard_normal((3, 4)).astype(np.float32),
        "b": rng.standard_normal(5),
        "c": rng.integers(-9, 9, (2, 2, 2)),
        "scalar": np.float64(1.5),
    }
    checkpoint.save(tmp_path / "x.ckpt", arrays, {"note": "hi"})
    back, meta = checkpoint.load(tmp_path / "x.ckpt")
    assert meta == {"note": "hi"}
    for k, v in arrays.items():
        v = np.asarray(v)
        assert back[k].dtype == v.dtype and back[k].shape == v.shape and back[k].tobytes() == v.tobytes()


def test_checkpoint_rejects_garbage(tmp_path):
    (tmp_path / "bad").write_bytes(b"not a checkpoint at all")
    with pytest.raises(ValueError, match="magic"):
        checkpoint.load(tmp_path / "bad")
    checkpoint.save(tmp_path / "t.ckpt", {"a": np.ones(10)})
    raw = (tmp_path / "t.ckpt").read_bytes()
    (tmp_path / "t.ckpt").write_bytes(raw[:-8])
    with pytest.raises(ValueError, match="truncated"):
        checkpoint.load(tmp_path / "t.ckpt")


def test_parameters_survive_checkpoint(spec, tmp_path):
    params = init_params(spec, 3)
    checkpoint.save(tmp_path / "p.ckpt", params.arrays())
    back = Parameters.from_arrays(checkpoint.load(tmp_path / "p.ckpt")[0])
    assert back.tensors.keys() == params.tensors.keys() and back.buffers.keys() == params.buffers.keys()
