"""Network assembly, loss and the momentum optimiser."""
import math

import numpy as np
import pytest

from sgacnet import functional as F
from sgacnet.config import TOY_MODEL
from sgacnet.cost import count_params
from sgacnet.errors import ConfigError, DataError, DimensionError
from sgacnet.gradcheck import finite_diff
from sgacnet.model import AFM_VARIANTS, SGD, ModelConfig, build, ce_loss, predict, recalibrate_bn, train_step
from sgacnet.nn import Parameter
from sgacnet.tensor import Tape, Tensor, no_grad


@pytest.fixture(scope="module")
def toy():
    model, _ = build(TOY_MODEL.with_(input_size=(64, 64), n_classes=2))
    return model.eval()


def inputs(rng, n=1, h=64, w=64, dtype=np.float32):
    return (rng.standard_normal((n, 3, h, w)).astype(dtype), rng.standard_normal((n, 1, h, w)).astype(dtype))


class TestModelConfig:
    @pytest.mark.parametrize("field,value", [
        ("backbone", "R50"), ("context", "ASPP"), ("decoder", "FPN"), ("upsample", "cubic"),
        ("n_classes", 1), ("input_size", (48, 64)), ("aux_loss_weight", -0.1), ("depth_input_channels", 0),
        ("base_width", 6), ("ndm_blocks", 0), ("ld_dilations", (2, 1)),
    ])
    def test_invalid_field_named(self, field, value):
        with pytest.raises(ConfigError) as err:
            ModelConfig(**{field: value})
        assert err.value.field == field

    @pytest.mark.parametrize("name", list(AFM_VARIANTS))
    def test_named_afm_variants(self, name):
        assert ModelConfig(afm=name).afm == AFM_VARIANTS[name]

    def test_bad_afm(self):
        with pytest.raises(ConfigError):
            ModelConfig(afm=("SE", "CBAM"))

    def test_dict_round_trip(self):
        cfg = ModelConfig(backbone="R34-NBt1D", afm="2xSPGE", n_classes=13)
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg

    def test_unknown_dict_key(self):
        with pytest.raises(ConfigError):
            ModelConfig.from_dict({"width": 3})

    def test_build_rejects_non_config(self):
        with pytest.raises(ConfigError):
            build({"backbone": "R18-NBt1D"})


class TestForward:
    def test_shapes(self, toy, rng):
        out = toy(*inputs(rng))
        assert out.logits.shape == (1, 2, 64, 64)
        assert [a.shape[2:] for a in out.aux_logits] == [(4, 4), (8, 8), (16, 16)]
        assert all(a.shape[1] == 2 for a in out.aux_logits)

    @pytest.mark.parametrize("hw", [(64, 96), (96, 64), (128, 128)])
    def test_any_multiple_of_32(self, toy, rng, hw):
        assert toy(*inputs(rng, 1, *hw)).logits.shape == (1, 2, *hw)

    def test_zero_depth_is_finite(self, toy, rng):
        rgb, depth = inputs(rng)
        assert np.all(np.isfinite(toy(rgb, np.zeros_like(depth)).logits.data))

    def test_eval_bit_determinism(self, toy, rng):
        rgb, depth = inputs(rng, 2)
        np.testing.assert_array_equal(toy(rgb, depth).logits.data, toy(rgb, depth).logits.data)

    def test_seeded_build_is_reproducible(self):
        a, _ = build(TOY_MODEL.with_(seed=5))
        b, _ = build(TOY_MODEL.with_(seed=5))
        c, _ = build(TOY_MODEL.with_(seed=6))
        pa, pb, pc = (m.param_store() for m in (a, b, c))
        assert all(np.array_equal(x.data, y.data) for (_, x), (_, y) in zip(pa.items(), pb.items()))
        assert not all(np.array_equal(x.data, y.data) for (_, x), (_, y) in zip(pa.items(), pc.items()))

    @pytest.mark.parametrize("rgb_shape,depth_shape,axis", [
        ((1, 3, 64, 64), (1, 1, 64, 32), "w"),
        ((1, 3, 64, 64), (2, 1, 64, 64), "n"),
        ((1, 3, 64, 64), (1, 3, 64, 64), "c"),
        ((1, 3, 48, 64), (1, 1, 48, 64), "h"),
    ])
    def test_dimension_errors(self, toy, rgb_shape, depth_shape, axis):
        with pytest.raises(DimensionError) as err:
            toy(np.zeros(rgb_shape, np.float32), np.zeros(depth_shape, np.float32))
        assert err.value.axis == axis

    def test_diagnostics(self, toy, rng):
        out = toy(*inputs(rng), diagnostics=True)
        assert len(out.diagnostics["gates"]) == 4
        assert [a.shape[1] for a in out.diagnostics["affinity"]] == [1, 4, 9, 36]

    @pytest.mark.parametrize("axis,low,high", [
        ("decoder", "LD", "NDM"), ("backbone", "R18-NBt1D", "R34-NBt1D"),
    ])
    def test_parameter_monotonicity(self, axis, low, high):
        base = TOY_MODEL.with_(base_width=16)
        a = count_params(build(base.with_(**{axis: low}))[0]).params_total
        b = count_params(build(base.with_(**{axis: high}))[0]).params_total
        assert a < b


class TestLoss:
    def test_uniform_two_class_is_ln2(self):
        loss = ce_loss(Tensor(np.zeros((1, 2, 1, 1))), np.zeros((1, 1, 1), np.int64))
        assert abs(loss.main - math.log(2)) < 1e-9

    def test_all_ignored(self):
        loss = ce_loss(Tensor(np.ones((1, 3, 2, 2))), np.full((1, 2, 2), 255))
        assert loss.total == 0 and loss.empty_support

    def test_out_of_range_label(self):
        labels = np.zeros((1, 2, 2), np.int64)
        labels[0, 1, 0] = 3
        with pytest.raises(DataError, match=r"\(0, 1, 0\)|0, 1, 0"):
            ce_loss(Tensor(np.zeros((1, 3, 2, 2))), labels)

    def test_gradient_is_softmax_minus_onehot(self, rng):
        logits = rng.standard_normal((2, 3, 2, 2))
        labels = rng.integers(0, 3, (2, 2, 2))
        labels[1, 1, 1] = 255
        x = Tensor(logits.copy(), requires_grad=True)
        with Tape() as tape:
            loss, count = F.softmax_cross_entropy(x, labels)
        g = tape.backward(loss)[x]
        q = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
        onehot = np.zeros_like(q)
        valid = labels != 255
        for n, i, j in zip(*np.nonzero(valid)):
            onehot[n, labels[n, i, j], i, j] = 1
        expected = (q - onehot) * valid[:, None] / count
        np.testing.assert_allclose(g, expected, atol=1e-12)
        (num,) = finite_diff(lambda: float(F.softmax_cross_entropy(Tensor(logits), labels)[0].data), [logits])
        np.testing.assert_allclose(num, expected, atol=1e-6)

    def test_point_mass_gives_zero(self):
        logits = np.full((1, 3, 1, 2), -1e3)
        logits[0, 1, 0, 0] = logits[0, 2, 0, 1] = 1e3
        loss = ce_loss(Tensor(logits), np.array([[[1, 2]]]))
        assert loss.total == 0.0

    def test_total_combines_aux(self, toy, rng):
        rgb, depth = inputs(rng)
        labels = rng.integers(0, 2, (1, 64, 64))
        loss = ce_loss(toy(rgb, depth), labels, aux_weight=0.5)
        assert len(loss.aux) == 3
        assert loss.total == pytest.approx(loss.main + 0.5 * sum(loss.aux), rel=1e-6)
        assert loss.main >= 0 and all(a >= 0 for a in loss.aux)


class TestSGD:
    def test_momentum_recurrence(self):
        a, lr, m, p0 = 2.0, 0.1, 0.9, 1.5
        p = Parameter(np.array([p0]))
        opt = SGD([p], lr=lr, momentum=m)
        # closed form: [p, v] evolves under the linear map [[1 - lr*a, -lr*m], [a, m]]
        state = np.array([p0, 0.0])
        step = np.array([[1 - lr * a, -lr * m], [a, m]])
        for _ in range(5):
            opt.step({p: a * p.data})
            state = step @ state
            assert p.data[0] == pytest.approx(state[0], rel=1e-12)
            assert opt.velocity[id(p)][0] == pytest.approx(state[1], rel=1e-12)

    def test_weight_decay(self):
        p = Parameter(np.array([2.0]))
        SGD([p], lr=0.5, momentum=0.0, weight_decay=0.1).step({p: np.array([0.0])})
        assert p.data[0] == pytest.approx(2.0 - 0.5 * 0.2)

    def test_missing_gradient_skipped(self):
        p = Parameter(np.array([1.0]))
        SGD([p], lr=1.0).step({})
        assert p.data[0] == 1.0


class TestTrainStep:
    @pytest.fixture
    def batch(self, rng):
        rgb, depth = inputs(rng, 2, 32, 32)
        return rgb, depth, rng.integers(0, 4, (2, 32, 32))

    def test_lr_zero_leaves_parameters(self, batch):
        model, store = build(TOY_MODEL)
        before = {k: p.data.copy() for k, p in store.items()}
        loss = train_step(model, batch, SGD(model.parameters(), lr=0.0))
        assert all(np.array_equal(before[k], p.data) for k, p in store.items())
        model2, _ = build(TOY_MODEL)
        model2.train()
        with no_grad():
            ref = ce_loss(model2(Tensor(batch[0]), Tensor(batch[1])), batch[2])
        assert loss.total == pytest.approx(ref.total, rel=1e-6)

    def test_loss_decreases(self, batch):
        model, store = build(TOY_MODEL)
        opt = SGD(model.parameters(), lr=0.01, momentum=0.9)
        losses = [train_step(model, batch, opt).total for _ in range(50)]
        assert losses[-1] < losses[0]
        assert np.mean(losses[-10:]) < np.mean(losses[:10])

    def test_predict_shape_and_range(self, batch):
        model, _ = build(TOY_MODEL)
        pred = predict(model, batch[0], batch[1])
        assert pred.shape == (2, 32, 32) and pred.min() >= 0 and pred.max() < 4

    def test_recalibrate_bn_uses_data_statistics(self, batch):
        model, _ = build(TOY_MODEL)
        recalibrate_bn(model, batch[0], batch[1])
        stem_bn = model.encoder_rgb.stem.bn
        with no_grad():
            pre = model.encoder_rgb.stem.conv(Tensor(batch[0])).data
        np.testing.assert_allclose(stem_bn._buffers["running_mean"], pre.mean(axis=(0, 2, 3)), rtol=1e-4,
                                   atol=1e-6)
        assert not model.training
        assert stem_bn.momentum == 0.1
