import os

import numpy as np
import pytest
from hypothesis import given, strategies as st

from psrpn.anchors import generate_anchors
from psrpn.assign import IGNORE, SamplerConfig
from psrpn.data import Dataset, GtInstance, ImageRecord, synth_shapes
from psrpn.heads import HeadConfig
from psrpn.model import ModelConfig, ProposalNet
from psrpn.pyramid import PyramidConfig
from psrpn.tensor import Tensor
from psrpn.train import (SGD, TrainerConfig, TrainingDiverged, load_checkpoint, lr_at,
                         prepare_targets, read_loss_csv, read_manifest, save_checkpoint, train,
                         write_loss_csv)


def tiny_model(variant="baseline", ps=True, seed=0):
    cfg = ModelConfig(PyramidConfig(channels=8, widths=(8, 8, 16, 16)),
                      HeadConfig(variant=variant, k=2, position_sensitive=ps, gcn_mid=4, gcn_kernel=5,
                                 lk_width=4, lk_kernel=5, in_channels=8))
    return ProposalNet(cfg, seed=seed)


def params_of(model):
    return {n: p.data.copy() for n, p in model.named_parameters()}


# ------------------------------------------------------------ schedule


def test_lr_schedule_hits_decimal_values():
    assert lr_at(0) == 0.1
    assert lr_at(10) == 0.01
    assert lr_at(40) == 1e-5
    seq = [lr_at(e) for e in range(60)]
    assert all(a > b for a, b in zip(seq, seq[1:]))
    with pytest.raises(ValueError):
        lr_at(-1)


# ------------------------------------------------------------ optimiser


def scalar_sgd(p, grads, lr, m=0.9, wd=1e-4):
    """Elementwise reference: buf = m*buf + g + wd*p; p -= lr*buf."""
    p = [float(v) for v in p]
    buf = [0.0] * len(p)
    for g in grads:
        for i in range(len(p)):
            buf[i] = m * buf[i] + (float(g[i]) + wd * p[i])
            p[i] = p[i] - lr * buf[i]
    return np.array(p)


@given(st.integers(0, 2**31 - 1), st.integers(1, 4), st.floats(1e-3, 0.5))
def test_sgd_matches_scalar_update(seed, n_steps, lr):
    rng = np.random.default_rng(seed)
    w = Tensor(rng.standard_normal(6), requires_grad=True, dtype=np.float64)
    gamma = Tensor(rng.standard_normal(3), requires_grad=True, dtype=np.float64)
    w0, g0 = w.data.copy(), gamma.data.copy()
    opt = SGD([("conv.weight", w), ("bn.gamma", gamma)], momentum=0.9, weight_decay=1e-4)
    gw = rng.standard_normal((n_steps, 6))
    gg = rng.standard_normal((n_steps, 3))
    for k in range(n_steps):
        w.grad, gamma.grad = gw[k].copy(), gg[k].copy()
        opt.step(lr)
    np.testing.assert_allclose(w.data, scalar_sgd(w0, gw, lr), rtol=0, atol=1e-12)
    # batch-norm scale/shift carry no weight decay
    np.testing.assert_allclose(gamma.data, scalar_sgd(g0, gg, lr, wd=0.0), rtol=0, atol=1e-12)


def test_sgd_keeps_float32():
    w = Tensor(np.ones(4, np.float32), requires_grad=True)
    w.grad = np.full(4, 0.5, np.float32)
    SGD([("weight", w)]).step(0.1)
    assert w.data.dtype == np.float32


# ------------------------------------------------------------ training loop


@pytest.fixture(scope="module")
def small_set():
    return synth_shapes(8, seed=3, size=64)


def one_box_set(box):
    img = np.random.default_rng(0).uniform(0.3, 0.4, (1, 3, 64, 64)).astype(np.float32)
    x0, y0, x1, y1 = box
    img[0, :, y0:y1, x0:x1] = 0.9
    rec = ImageRecord(0, 64, 64, "one")
    return Dataset(img, [(rec, [GtInstance(np.array(box, dtype=np.float64))])])


def random_box(rng):
    w, h = rng.integers(12, 60, 2)
    x0, y0 = rng.integers(0, 64 - w + 1), rng.integers(0, 64 - h + 1)
    return [int(x0), int(y0), int(x0 + w), int(y0 + h)]


def test_zero_learning_rate_leaves_parameters_bit_identical(small_set):
    model = tiny_model()
    before = params_of(model)
    train(model, small_set, SamplerConfig(64, 4), TrainerConfig(lr0=0.0, seed=1), epochs=1)
    after = params_of(model)
    for name in before:
        assert before[name].tobytes() == after[name].tobytes(), name


@pytest.mark.parametrize("trial", range(3))
def test_overfits_a_single_box(trial):
    box = random_box(np.random.default_rng([0, trial]))
    model = tiny_model(seed=trial)
    # constant rate: 50 one-image epochs would otherwise decay the rate 10^5 fold
    res = train(model, one_box_set(box), SamplerConfig(256, 1), TrainerConfig(lr_decay=0.0, seed=trial),
                epochs=50)
    first, last = res.step_losses[0], res.step_losses[-1]
    assert len(res.step_losses) == 50
    assert last <= 0.1 * first, (box, first, last)


def test_same_seed_same_curve_different_seed_differs(small_set):
    runs = []
    for seed in (5, 5, 6):
        model = tiny_model(seed=0)
        res = train(model, small_set, SamplerConfig(64, 4), TrainerConfig(seed=seed), epochs=2)
        runs.append((res.step_losses, params_of(model)))
    assert runs[0][0] == runs[1][0]
    for name in runs[0][1]:
        assert runs[0][1][name].tobytes() == runs[1][1][name].tobytes()
    assert runs[0][0] != runs[2][0]


def test_grid_model_trains(small_set):
    model = tiny_model(variant="gcn-s", ps=False)
    res = train(model, small_set, SamplerConfig(64, 4), TrainerConfig(seed=0), epochs=1)
    assert np.isfinite(res.step_losses).all()


def test_divergence_reports_epoch_and_step(small_set):
    model = tiny_model()
    _, p = list(model.named_parameters())[-1]
    p.data[...] = np.nan
    with pytest.raises(TrainingDiverged) as info:
        train(model, small_set, SamplerConfig(64, 4), TrainerConfig(seed=0), epochs=1)
    assert info.value.epoch == 0 and info.value.step == 0


def test_batch_larger_than_dataset_is_rejected(small_set):
    with pytest.raises(ValueError):
        train(tiny_model(), small_set, SamplerConfig(64, 16), TrainerConfig(), epochs=1)


# ------------------------------------------------------------ targets


def test_targets_ignore_crowd_and_border_anchors():
    hw = (64, 64)
    anchors = generate_anchors(hw, (4, 8, 16, 32, 64), "grid3")
    crowd = np.array([0.0, 0.0, 32.0, 32.0])
    ann = {"boxes": np.array([[36.0, 36.0, 60.0, 60.0], crowd]), "crowd": np.array([False, True]),
           "ignore": np.array([False, False])}
    (tg,) = prepare_targets(anchors, [ann], hw)
    b = anchors.boxes
    crossing = (b[:, 0] < 0) | (b[:, 1] < 0) | (b[:, 2] > 64) | (b[:, 3] > 64)
    assert crossing.any()
    assert (tg.assignment.labels[crossing] == IGNORE).all()
    # nothing is matched to the crowd region
    assert (tg.assignment.matched[tg.assignment.positives] == 0).all()
    assert len(tg.pos_targets) == len(tg.assignment.positives) > 0


# ------------------------------------------------------------ telemetry and checkpoints


def test_loss_csv_round_trip(tmp_path):
    rows = [{"epoch": 1, "lr": 0.1, "total": 0.123456789012345, "reg": 0.01, "pos_cls": 0.02,
             "neg_cls": 0.03, "steps": 4, "seconds": 1.5}]
    path = tmp_path / "loss.csv"
    write_loss_csv(path, rows, "abcd")
    assert path.read_text().startswith("# config_hash=abcd\n")
    back = read_loss_csv(path)
    assert back[0]["total"] == rows[0]["total"]


def tree_bytes(root):
    out = {}
    for base, _, files in os.walk(root):
        for f in files:
            full = os.path.join(base, f)
            out[os.path.relpath(full, root)] = open(full, "rb").read()
    return out


def test_checkpoint_save_load_save_is_byte_identical(tmp_path, small_set):
    model = tiny_model(variant="gcn-ns")
    res = train(model, small_set, SamplerConfig(64, 4), TrainerConfig(seed=0), epochs=1)
    meta = {"config_hash": "0123456789abcdef", "epochs": 1}
    save_checkpoint(tmp_path / "a", model, res.optimizer, meta)

    fresh = tiny_model(variant="gcn-ns", seed=99)
    opt = SGD(fresh.named_parameters())
    assert load_checkpoint(tmp_path / "a", fresh, opt) == meta
    save_checkpoint(tmp_path / "b", fresh, opt, meta)
    a, b = tree_bytes(tmp_path / "a"), tree_bytes(tmp_path / "b")
    assert a.keys() == b.keys() and a == b

    kinds = {e["kind"] for e in read_manifest(tmp_path / "a")["tensors"]}
    assert kinds == {"param", "buffer", "momentum"}
    fresh.eval()
    x = small_set.images[:2]
    for (r1, c1), (r2, c2) in zip(model(x), fresh(x)):
        assert np.array_equal(r1.data, r2.data) and np.array_equal(c1.data, c2.data)
