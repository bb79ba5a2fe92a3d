import numpy as np
import pytest

from eamnet import ConfigurationError, GradTape, Tensor, ValidationError, backward
from eamnet.eam import EamConfig, ablation_swap_pool, attach_branches, build_eam, strip_branches
from eamnet.layers import ConvSpec, softmax_xent
from eamnet.model import Model, build_backbone, default_blocks, make_variant
from eamnet.pooling import PoolSpec
from oracles import rel_error


def backbone(channels=(8, 16, 32), size=28, classes=4):
    return build_backbone(default_blocks(1, channels), classes, (1, size, size))


class TestRatio:
    @pytest.mark.parametrize("base,expected", [(256, 16), (2048, 128), (1024, 64), (32, 2), (31, 1)])
    def test_default_ratio(self, base, expected):
        assert EamConfig().resolve_final_filters(base) == expected

    def test_zero_filters_is_error(self):
        with pytest.raises(ConfigurationError, match="min_one_filter"):
            EamConfig().resolve_final_filters(8)

    def test_min_one_filter_clamps(self):
        assert EamConfig(min_one_filter=True).resolve_final_filters(8) == 1

    def test_explicit_final_filters(self):
        assert EamConfig(final_filters=5).resolve_final_filters(256) == 5

    @pytest.mark.parametrize("kw", [dict(ratio_denominator=0), dict(final_filters=0), dict(pool=PoolSpec("average", 5, 2))])
    def test_rejects(self, kw):
        with pytest.raises(ConfigurationError):
            EamConfig(**kw)


class TestBranch:
    def test_layer_order(self):
        br = build_eam(64, 256)
        assert br.layers == ["maxmin_pool", "conv", "conv", "conv", "gap"]
        assert br.out_channels == 16
        assert br.final.kernel == (3, 3)

    def test_no_interior(self):
        br = build_eam(64, 256, EamConfig(interior_convs=()))
        assert br.interior == ()
        assert br.layers == ["maxmin_pool", "conv", "gap"]
        assert br.final.in_channels == 64

    def test_interior_channel_mismatch(self):
        cfg = EamConfig(interior_convs=(ConvSpec(32, 16),))
        with pytest.raises(ConfigurationError):
            build_eam(64, 256, cfg)

    def test_nonpositive_channels(self):
        with pytest.raises(ValidationError):
            build_eam(0, 256)

    def test_config_round_trip(self):
        cfg = EamConfig(attach_point="block_1", interior_convs=(ConvSpec(8, 4),), final_filters=3)
        assert EamConfig.from_dict(cfg.to_dict()) == cfg


class TestTopology:
    def test_concat_width_for_256_base(self):
        g = make_variant(backbone((8, 16, 256)), "eam")
        assert g.node("eam1.final").conv.out_channels == 16
        assert g.shapes()["concat"] == (272, 1, 1)
        assert g.node("head").units == (272, 4)

    def test_eam2_branches(self):
        g = make_variant(backbone(), "eam2")
        first, second = g.branches
        assert (first.attach, second.attach) == ("block_1", "block_2")
        assert first.interior == ()
        assert len(second.interior) == 2
        assert g.shapes()["concat"] == (32 + 2 + 2, 1, 1)

    def test_unknown_attach_point_lists_taps(self):
        with pytest.raises(ConfigurationError, match="block_1"):
            attach_branches(backbone(), [EamConfig(attach_point="block_9")])
        with pytest.raises(ConfigurationError):
            attach_branches(backbone(), [EamConfig(attach_point=-7)])

    def test_pool_larger_than_tap(self):
        # block_3 of a 28x28 input is 3x3, too small for a 5x5 window
        with pytest.raises(ConfigurationError, match="eam1"):
            attach_branches(backbone(), [EamConfig(attach_point=-1)])

    def test_eam2_needs_three_blocks(self):
        with pytest.raises(ConfigurationError, match="third-last"):
            make_variant(backbone((8, 32)), "eam2")

    def test_eam_needs_two_blocks(self):
        with pytest.raises(ConfigurationError):
            make_variant(build_backbone(default_blocks(1, (32,)), 4, (1, 14, 14)), "eam")

    def test_single_block_backbone_runs(self):
        g = build_backbone(default_blocks(1, (4,)), 3, (1, 8, 8))
        out = Model(g).forward(np.zeros((2, 1, 8, 8))).logits
        assert out.shape == (2, 3)

    def test_strip_restores_backbone(self):
        base = backbone()
        assert strip_branches(make_variant(base, "eam2")) == base
        assert attach_branches(base, []) is base

    def test_double_attach_rejected(self):
        with pytest.raises(ConfigurationError):
            attach_branches(make_variant(backbone(), "eam"), [EamConfig()])

    def test_graph_round_trip(self):
        g = make_variant(backbone(), "eam2")
        assert type(g).from_dict(g.to_dict()) == g


class TestAblation:
    def test_swap_preserves_everything_but_pool(self):
        cfg = EamConfig()
        swapped = ablation_swap_pool(cfg)
        assert swapped.pool == PoolSpec("max", (5, 5), 2, 0)
        assert swapped.interior_convs == cfg.interior_convs

    def test_swap_requires_maxmin(self):
        with pytest.raises(ConfigurationError):
            ablation_swap_pool(EamConfig(pool=PoolSpec("max", 5, 2)))

    def test_parameter_counts_equal(self):
        a = make_variant(backbone(), "eam2")
        b = make_variant(backbone(), "eam2_maxpool_ablation")
        assert a.parameter_count() == b.parameter_count()
        assert {k: v.shape for k, v in a.parameters().items()} == {k: v.shape for k, v in b.parameters().items()}
        assert [br.pool.kind for br in b.branches] == ["max", "max"]


def zero_branches(model):
    for name in model.params:
        if name.startswith("eam"):
            model.params[name] = np.zeros_like(model.params[name])


@pytest.mark.parametrize("variant", ["eam", "eam2"])
def test_zeroed_branches_reproduce_backbone_features(rng, variant):
    base = backbone()
    plain = Model(base, seed=3)
    aug = Model(make_variant(base, variant), seed=3)
    zero_branches(aug)
    x = rng.normal(size=(3, 1, 28, 28))
    f_plain = plain.features(x)
    f_aug = aug.features(x)
    np.testing.assert_array_equal(f_aug[:, : f_plain.shape[1]], f_plain)
    assert np.all(f_aug[:, f_plain.shape[1] :] == 0)


def test_full_graph_gradient_on_sampled_coordinates():
    rng = np.random.default_rng(7)
    g = make_variant(backbone((4, 6, 32), size=20), "eam2")
    model = Model(g, seed=1)
    x = rng.normal(size=(2, 1, 20, 20))
    y = np.array([1, 3])
    names = model.trainable_names()
    with GradTape() as tape:
        fp = model.forward(x, track=names)
        _, loss = softmax_xent(fp.logits, y)
    backward(loss, tape)
    grads = {n: t.grad for n, t in fp.params.items()}

    def loss_at(name, idx, value):
        old = model.params[name][idx]
        model.params[name][idx] = value
        _, l = softmax_xent(model.forward(x).logits, y)
        model.params[name][idx] = old
        return l.item()

    h = 1e-5
    picks = [n for n in names if n.startswith("eam")] + [n for n in names if not n.startswith("eam")]
    checked = 0
    for k in range(20):
        name = picks[k % len(picks)] if k < 10 else picks[int(rng.integers(len(picks)))]
        idx = tuple(int(rng.integers(s)) for s in model.params[name].shape)
        v = model.params[name][idx]
        num = (loss_at(name, idx, v + h) - loss_at(name, idx, v - h)) / (2 * h)
        ana = grads[name][idx]
        if abs(num) < 1e-9 and abs(ana) < 1e-9:
            checked += 1
            continue
        assert rel_error(ana, num) < 1e-4, (name, idx, ana, num)
        checked += 1
    assert checked == 20


def test_input_gradient_through_branches():
    rng = np.random.default_rng(11)
    model = Model(make_variant(backbone((4, 6, 32), size=20), "eam"), seed=2)
    x0 = rng.normal(size=(1, 1, 20, 20))
    x = Tensor(x0, requires_grad=True)
    with GradTape() as tape:
        score = model.forward(x).logits.sum()
    backward(score, tape)
    h = 1e-5
    for _ in range(10):
        idx = (0, 0, int(rng.integers(20)), int(rng.integers(20)))
        xp, xm = x0.copy(), x0.copy()
        xp[idx] += h
        xm[idx] -= h
        num = (model.forward(xp).logits.data.sum() - model.forward(xm).logits.data.sum()) / (2 * h)
        if abs(num) < 1e-9 and abs(x.grad[idx]) < 1e-9:
            continue
        assert rel_error(x.grad[idx], num) < 1e-4
