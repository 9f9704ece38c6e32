import numpy as np
import pytest

from psrpn import tensor as T
from psrpn.heads import (NAIVE_DELTA, PS_DELTA, SMOOTHER_DELTA, PUBLISHED_PARAMS, VARIANTS, HeadConfig, RPNHead,
                         head_param_table, table_identities)
from psrpn.layers import CBR, BatchNorm2d, Conv2d, SeparableGCN
from psrpn.pyramid import (PyramidConfig, build_backbone, check_chaining, count_params, pyramid_records,
                           records_from_dict, records_to_dict, resnet50_records)
from psrpn.tensor import ShapeError, Tensor

SMALL = PyramidConfig(channels=8, widths=(4, 6, 8, 10))


def small_backbone(cfg=SMALL, seed=0):
    return build_backbone(cfg, 3, np.random.default_rng(seed))


def test_encoder_strides_and_widths(rng):
    enc, _ = small_backbone()
    feats = enc(Tensor(rng.standard_normal((2, 3, 64, 128)).astype(np.float32)))
    for f, s, w in zip(feats, (4, 8, 16, 32), SMALL.widths):
        assert f.shape == (2, w, 64 // s, 128 // s)


def test_decoder_levels_share_width(rng):
    enc, dec = small_backbone()
    outs = dec(enc(Tensor(rng.standard_normal((1, 3, 128, 128)).astype(np.float32))))
    assert [o.shape[1] for o in outs] == [8] * 5
    assert [o.shape[2] for o in outs] == [32, 16, 8, 4, 2]


def test_removing_d6_leaves_other_levels_unchanged(rng):
    x = Tensor(rng.standard_normal((1, 3, 64, 64)).astype(np.float32))
    enc, dec = small_backbone()
    enc2, dec2 = small_backbone(PyramidConfig(channels=8, widths=(4, 6, 8, 10), use_d6=False))
    with_d6 = dec(enc(x))
    without = dec2(enc2(x))
    assert len(without) == 4
    for a, b in zip(with_d6[:4], without):
        assert a.data.tobytes() == b.data.tobytes()


def test_input_must_be_multiple_of_max_stride():
    from psrpn.model import ModelConfig, ProposalNet

    net = ProposalNet(ModelConfig(SMALL, HeadConfig(in_channels=8)))
    with pytest.raises(ShapeError):
        net(np.zeros((1, 3, 96, 64), np.float32))


def test_resnet50_graph_total():
    recs = resnet50_records()
    check_chaining(recs)
    assert count_params(recs).total == 23_508_032


def test_records_round_trip():
    recs = pyramid_records(PyramidConfig(encoder="resnet50-graph"))
    assert records_from_dict(records_to_dict(recs)) == recs


def test_check_chaining_detects_mismatch():
    from psrpn.layers import LayerRecord

    with pytest.raises(ShapeError):
        check_chaining([LayerRecord("conv", 3, 3, 4, 8, "a"), LayerRecord("bn", 1, 1, 6, 6, "b")])


@pytest.mark.parametrize("variant", VARIANTS)
@pytest.mark.parametrize("ps", [True, False])
def test_head_shapes_and_level_sharing(variant, ps, rng):
    cfg = HeadConfig(variant=variant, position_sensitive=ps, k=3, gcn_mid=2, gcn_kernel=5, lk_width=2,
                     lk_kernel=5, in_channels=6)
    head = RPNHead(cfg, rng)
    levels = [Tensor(rng.standard_normal((2, 6, s, s)).astype(np.float32)) for s in (8, 4, 2)]
    outs = head(levels)
    for (reg, cls), x in zip(outs, levels):
        assert reg.shape == (2, cfg.reg_channels) + x.shape[2:]
        assert cls.shape == (2, cfg.cls_channels) + x.shape[2:]
    head.eval()
    # one set of weights: a level evaluated alone matches its slot in the multi-level call
    alone = head(levels[1])
    again = head(levels)[1]
    np.testing.assert_allclose(alone[0].data, again[0].data, rtol=1e-6)


def test_shared_smoother_is_one_object():
    s = RPNHead(HeadConfig(variant="gcn-s", in_channels=4, gcn_mid=2))
    ns = RPNHead(HeadConfig(variant="gcn-ns", in_channels=4, gcn_mid=2))
    assert s.smoother_reg is s.smoother_cls
    assert ns.smoother_reg is not ns.smoother_cls
    # the shared smoother appears once among the parameters
    names = [n for n, _ in s.named_parameters()]
    assert len(names) == len(set(names))
    assert not any(n.startswith("smoother_cls") for n in names)


def test_head_channel_mismatch():
    head = RPNHead(HeadConfig(in_channels=4))
    with pytest.raises(ShapeError):
        head(Tensor(np.zeros((1, 5, 4, 4), np.float32)))


def test_param_identities_exact():
    rows = head_param_table()
    for name, ours, want in table_identities(rows):
        assert ours == want, name
    by = {(r["variant"], r["ps"]): r for r in rows}
    for v in ("baseline", "naive"):
        for ps in (True, False):
            assert by[(v, ps)]["params"] == PUBLISHED_PARAMS[(v, ps)]
    assert by[("naive", False)]["params"] - by[("baseline", False)]["params"] == NAIVE_DELTA
    assert by[("gcn-ns", True)]["params"] - by[("gcn-s", True)]["params"] == SMOOTHER_DELTA
    assert by[("baseline", True)]["params"] - by[("baseline", False)]["params"] == PS_DELTA


def test_arch_records_match_live_parameters():
    head = RPNHead(HeadConfig(variant="lk-ns", in_channels=8, lk_width=3, lk_kernel=5))
    assert count_params(head.arch_records()).total == head.n_params()


def test_state_dict_round_trip(rng):
    a = CBR(3, 4, 3, rng=rng)
    b = CBR(3, 4, 3, rng=np.random.default_rng(99))
    b.load_state_dict(a.state_dict())
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb and pa.data.tobytes() == pb.data.tobytes()


def test_load_state_dict_rejects_mismatch():
    a = Conv2d(3, 4, 3)
    with pytest.raises(KeyError):
        a.load_state_dict({})
    with pytest.raises(ShapeError):
        a.load_state_dict({"weight": np.zeros((1, 1, 1, 1))})


def test_joint_bn_equals_bn_of_concatenation(rng):
    bn = BatchNorm2d(2)
    xs = [rng.standard_normal((2, 2, 4, 4)), rng.standard_normal((2, 2, 2, 2)) + 3]
    ys = bn.call_levels([Tensor(x) for x in xs])
    flat = np.concatenate([x.reshape(2, 2, -1) for x in xs], axis=2)
    mu = flat.mean(axis=(0, 2))
    sd = np.sqrt(flat.var(axis=(0, 2)) + 1e-5)
    for x, y in zip(xs, ys):
        np.testing.assert_allclose(y.data, (x - mu[None, :, None, None]) / sd[None, :, None, None], atol=1e-5)


def test_gcn_rejects_even_kernel():
    with pytest.raises(ShapeError):
        SeparableGCN(4, 2, 4, kernel=4)


def test_gcn_keeps_spatial_size(rng):
    g = SeparableGCN(3, 2, 5, kernel=7, rng=rng)
    assert g(Tensor(rng.standard_normal((1, 3, 6, 9)).astype(np.float32))).shape == (1, 5, 6, 9)
