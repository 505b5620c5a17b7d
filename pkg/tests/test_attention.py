"""Attention gates and the dual-branch fusion module."""
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sgacnet.attention import (AttentionFusion, AttentionKind, SEGate, SPAGate, SPGEGate,
                               effective_reduction, make_gate)
from sgacnet.errors import DimensionError, InvalidSpecError
from sgacnet.tensor import Tensor

from oracles import adaptive_pool_loops, se_gates_scalar, sigmoid, spge_gates_scalar


def zero_head(gate):
    for p in gate.head.parameters():
        p.data[...] = 0


def spa_oracle(x, gate):
    """pool -> kernel-sized depthwise conv -> concat -> FC -> ReLU -> FC -> sigmoid, one sample."""
    c = x.shape[0]
    desc = []
    for b, conv in zip(gate.bins, gate.resize):
        pooled = adaptive_pool_loops(x[None], b, b)[0]
        w, bias = conv.weight.data, conv.bias.data
        desc.extend(float((w[k, 0] * pooled[k]).sum() + bias[k]) for k in range(c))
    fc1, fc2 = gate.head.fc1, gate.head.fc2
    hidden = np.maximum(fc1.weight.data @ np.array(desc) + fc1.bias.data, 0)
    return np.array([sigmoid(v) for v in fc2.weight.data @ hidden + fc2.bias.data])


def perturb(gate, rng, scale=0.3):
    gate.astype(np.float64)
    for p in gate.parameters():
        p.data[...] = scale * rng.standard_normal(p.shape)
    return gate


class TestAttentionKind:
    @pytest.mark.parametrize("text,kind", [("se", AttentionKind.SE), ("spa-147", AttentionKind.SPA147),
                                           ("SPGE", AttentionKind.SPGE)])
    def test_parse(self, text, kind):
        assert AttentionKind.parse(text) is kind

    def test_parse_unknown(self):
        with pytest.raises(InvalidSpecError):
            AttentionKind.parse("CBAM")

    @pytest.mark.parametrize("c,expected", [(64, 16), (32, 8), (8, 2), (4, 1), (6, 1), (512, 16)])
    def test_effective_reduction_keeps_four_hidden(self, c, expected):
        assert effective_reduction(c, 16) == expected


class TestSEGate:
    def test_zero_weights_halve(self, rng):
        gate = SEGate(8, 2, rng=rng)
        zero_head(gate)
        x = rng.standard_normal((2, 8, 4, 4))
        res = gate(Tensor(x))
        np.testing.assert_array_equal(res.gates.data, 0.5)
        np.testing.assert_allclose(res.gated.data, x / 2)

    def test_spatial_permutation_invariance(self, rng):
        gate = perturb(SEGate(8, 2), rng)
        x = rng.standard_normal((1, 8, 4, 4))
        perm = rng.permutation(16)
        xp = x.reshape(1, 8, 16)[..., perm].reshape(x.shape)
        np.testing.assert_allclose(gate(Tensor(xp)).gates.data, gate(Tensor(x)).gates.data, atol=1e-14)

    def test_matches_scalar_oracle(self, rng):
        gate = perturb(SEGate(8, 2), rng)
        x = rng.standard_normal((1, 8, 4, 4))
        h = gate.head
        expected = se_gates_scalar(x[0], h.fc1.weight.data, h.fc1.bias.data, h.fc2.weight.data, h.fc2.bias.data)
        np.testing.assert_allclose(gate(Tensor(x)).gates.data.ravel(), expected, atol=1e-12)

    def test_monotone_in_channel_logit(self, rng):
        gate = perturb(SEGate(8, 2), rng)
        x = Tensor(rng.standard_normal((1, 8, 3, 3)))
        prev = gate(x).gates.data.ravel()
        for _ in range(5):
            gate.head.fc2.bias.data[3] += 0.5
            cur = gate(x).gates.data.ravel()
            assert cur[3] >= prev[3]
            np.testing.assert_array_equal(np.delete(cur, 3), np.delete(prev, 3))
            prev = cur

    def test_indivisible_reduction(self):
        with pytest.raises(InvalidSpecError):
            SEGate(8, 3)


class TestSPAGate:
    def test_constant_input_zero_head(self):
        gate = SPAGate(4, (7, 4, 1), 1)
        zero_head(gate)
        x = np.full((1, 4, 8, 8), 2.5)
        for b in gate.bins:
            pooled = adaptive_pool_loops(x, b, b)
            np.testing.assert_allclose(pooled, 2.5)
        res = gate(Tensor(x))
        np.testing.assert_array_equal(res.gates.data, 0.5)

    def test_single_bin_collapses_to_gap(self, rng):
        gate = SPAGate(4, (1,), 1, rng=rng)
        gate.resize[0].weight.data[...] = 1
        gate.resize[0].bias.data[...] = 0
        x = rng.standard_normal((2, 4, 5, 5))
        np.testing.assert_allclose(gate.descriptor(Tensor(x)).data, x.mean(axis=(2, 3)), rtol=1e-6)

    def test_single_bin_matches_se(self, rng):
        spa = perturb(SPAGate(8, (1,), 2), rng)
        spa.resize[0].weight.data[...] = 1
        spa.resize[0].bias.data[...] = 0
        se = SEGate(8, 2).astype(np.float64)
        for (_, a), (_, b) in zip(se.head.named_parameters(), spa.head.named_parameters()):
            a.data[...] = b.data
        x = Tensor(rng.standard_normal((1, 8, 4, 4)))
        np.testing.assert_allclose(spa(x).gates.data, se(x).gates.data, atol=1e-14)

    def test_matches_composition_oracle(self, rng):
        gate = perturb(SPAGate(4, (7, 4, 1), 1), rng)
        x = rng.standard_normal((1, 4, 8, 8))
        np.testing.assert_allclose(gate(Tensor(x)).gates.data.ravel(), spa_oracle(x[0], gate), atol=1e-12)

    def test_bin_preserving_permutation(self, rng):
        gate = perturb(SPAGate(4, (4, 2, 1), 1), rng)
        x = rng.standard_normal((1, 4, 8, 8))
        xp = x.copy()
        # swap the two rows and the two columns inside every 2x2 cell of the finest grid
        xp = xp[:, :, [1, 0, 3, 2, 5, 4, 7, 6]][..., [1, 0, 3, 2, 5, 4, 7, 6]]
        np.testing.assert_allclose(gate(Tensor(xp)).gates.data, gate(Tensor(x)).gates.data, atol=1e-14)

    def test_maps_smaller_than_largest_bin(self, rng):
        res = SPAGate(4, (7, 4, 1), 1, rng=rng)(Tensor(rng.standard_normal((1, 4, 3, 3))))
        assert res.gated.shape == (1, 4, 3, 3)

    @pytest.mark.parametrize("bins", [(), (1, 4, 7), (4, 4, 1), (3, 0)])
    def test_invalid_bins(self, bins):
        with pytest.raises(InvalidSpecError):
            SPAGate(4, bins, 1)


class TestSPGEGate:
    def test_constant_input_degenerate_variance(self):
        gate = SPGEGate(4, 2)
        x = np.full((1, 4, 3, 3), 1.7)
        res = gate(Tensor(x))
        np.testing.assert_allclose(res.gates.data, 0.5)
        np.testing.assert_allclose(res.gated.data, x / 2)

    def test_constant_input_follows_shift(self):
        gate = SPGEGate(4, 2)
        gate.bias.data[...] = np.array([1.0, -2.0]).reshape(1, 2, 1, 1)
        res = gate(Tensor(np.ones((1, 4, 3, 3))))
        np.testing.assert_allclose(res.gates.data[0, :, 0, 0], [sigmoid(1.0), sigmoid(-2.0)], rtol=1e-6)

    def test_matches_scalar_oracle(self, rng):
        gate = SPGEGate(4, 2).astype(np.float64)
        gate.weight.data[...] = np.array([0.7, 1.3]).reshape(1, 2, 1, 1)
        gate.bias.data[...] = np.array([-0.2, 0.4]).reshape(1, 2, 1, 1)
        x = rng.standard_normal((1, 4, 3, 3))
        expected = spge_gates_scalar(x[0], 2, [0.7, 1.3], [-0.2, 0.4])
        res = gate(Tensor(x))
        np.testing.assert_allclose(res.gates.data[0], expected, atol=1e-12)
        np.testing.assert_allclose(res.gated.data[0], x[0] * np.repeat(expected, 2, axis=0), atol=1e-12)

    def test_indivisible_groups(self):
        with pytest.raises(InvalidSpecError):
            SPGEGate(6, 4)


@pytest.mark.parametrize("kind", list(AttentionKind))
@given(seed=st.integers(0, 2**16), scale=st.floats(0.1, 5.0))
def test_gate_range_and_shape(kind, seed, scale):
    r = np.random.default_rng(seed)
    gate = make_gate(kind, 8, reduction=2, groups=2, bins=(4, 2, 1), rng=r)
    x = Tensor(scale * r.standard_normal((2, 8, 5, 5)))
    res = gate(x)
    assert res.gated.shape == x.shape
    assert np.all((res.gates.data > 0) & (res.gates.data < 1))


class TestAttentionFusion:
    @pytest.fixture
    def pair(self, rng):
        return rng.standard_normal((2, 8, 8, 8)), rng.standard_normal((2, 8, 8, 8))

    def test_zero_depth_gives_gated_rgb(self, rng, pair):
        afm = AttentionFusion(8, "SPA147", "SE", rng=rng, reduction=2)
        rgb, _ = pair
        fused = afm(Tensor(rgb), Tensor(np.zeros_like(rgb)))
        np.testing.assert_allclose(fused.data, afm.gate_rgb(Tensor(rgb)).gated.data)

    def test_zero_se_heads_average(self, rng, pair):
        afm = AttentionFusion(8, "SE", "SE", rng=rng, reduction=2)
        zero_head(afm.gate_rgb)
        zero_head(afm.gate_depth)
        rgb, depth = pair
        np.testing.assert_allclose(afm(Tensor(rgb), Tensor(depth)).data, (rgb + depth) / 2)

    def test_sum_of_independent_gates(self, rng, pair):
        afm = AttentionFusion(8, "SE", "SPA147", rng=rng, reduction=2, bins=(7, 4, 1))
        rgb, depth = pair
        expected = afm.gate_rgb(Tensor(rgb)).gated.data + afm.gate_depth(Tensor(depth)).gated.data
        np.testing.assert_allclose(afm(Tensor(rgb), Tensor(depth)).data, expected)

    def test_swap_symmetry(self, rng, pair):
        a = AttentionFusion(8, "SPA147", "SE", rng=rng, reduction=2)
        b = AttentionFusion(8, "SE", "SPA147", reduction=2)
        b.gate_rgb, b.gate_depth = a.gate_depth, a.gate_rgb
        rgb, depth = pair
        np.testing.assert_allclose(a(Tensor(rgb), Tensor(depth)).data, b(Tensor(depth), Tensor(rgb)).data)

    def test_diagnostics_collected(self, rng, pair):
        afm = AttentionFusion(8, "SPGE", "SE", rng=rng, reduction=2, groups=4)
        diag = []
        afm(Tensor(pair[0]), Tensor(pair[1]), diagnostics=diag)
        assert diag[0]["rgb_gates"].shape == (2, 4, 8, 8)
        assert diag[0]["depth_gates"].shape == (2, 8, 1, 1)

    @pytest.mark.parametrize("shape,axis", [((2, 8, 8, 7), "w"), ((2, 8, 4, 8), "h"), ((1, 8, 8, 8), "n")])
    def test_shape_mismatch(self, rng, shape, axis):
        afm = AttentionFusion(8, "SE", "SE", rng=rng, reduction=2)
        with pytest.raises(DimensionError) as err:
            afm(Tensor(np.zeros((2, 8, 8, 8))), Tensor(np.zeros(shape)))
        assert err.value.axis == axis
