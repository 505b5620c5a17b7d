"""Adaptive pyramid context and the pooling-pyramid baseline."""
import numpy as np
import pytest

from sgacnet.context import AdaptivePyramidContext, ApcConfig, PyramidPooling
from sgacnet.cost import count_params
from sgacnet.errors import DimensionError, InvalidSpecError
from sgacnet.tensor import Tensor

from oracles import adaptive_pool_loops, sigmoid


def randomize(module, rng, scale=0.4):
    module.astype(np.float64).eval()
    for _, p in module.named_parameters():
        p.data[...] = scale * rng.standard_normal(p.shape)
    return module


def apc_context_oracle(x, apc):
    """Per-pixel context summed over scales, element by element, for one sample (c, h, w)."""
    c, h, w = x.shape
    gap = x.mean(axis=(1, 2))
    total = np.zeros((apc.inner, h, w))
    for k, s in enumerate(apc.bins):
        pooled = adaptive_pool_loops(x[None], s, s)[0].reshape(c, s * s)
        wl, bl = apc.local[k].weight.data[:, :, 0, 0], apc.local[k].bias.data
        wa, ba = apc.affinity[k].weight.data[:, :, 0, 0], apc.affinity[k].bias.data
        wg = apc.guide[k].weight.data[:, :, 0, 0]
        for i in range(h):
            for j in range(w):
                for r in range(s * s):
                    logit = sum(wa[r, q] * x[q, i, j] + wg[r, q] * gap[q] for q in range(c)) + ba[r]
                    alpha = sigmoid(logit)
                    for o in range(apc.inner):
                        z = max(0.0, sum(wl[o, q] * pooled[q, r] for q in range(c)) + bl[o])
                        total[o, i, j] += alpha * z
    return total


def fuse_eval(module, feats):
    """1x1 conv -> eval BN -> ReLU from the fuse block's raw arrays."""
    conv, bn = module.fuse.conv, module.fuse.bn
    y = np.einsum("oc,nchw->nohw", conv.weight.data[:, :, 0, 0], feats)
    rm, rv = bn._buffers["running_mean"], bn._buffers["running_var"]
    y = (y - rm[None, :, None, None]) / np.sqrt(rv[None, :, None, None] + bn.eps)
    return np.maximum(y * bn.gamma.data[None, :, None, None] + bn.beta.data[None, :, None, None], 0)


class TestApcConfig:
    @pytest.mark.parametrize("bins", [(), (2, 1), (1, 1, 2), (0, 1)])
    def test_invalid_bins(self, bins):
        with pytest.raises(InvalidSpecError):
            ApcConfig(bins).validate()

    def test_invalid_inner(self):
        with pytest.raises(InvalidSpecError):
            AdaptivePyramidContext(8, ApcConfig(inner=0))

    def test_defaults(self):
        apc = AdaptivePyramidContext(16)
        assert apc.bins == (1, 2, 3, 6)
        assert apc.inner == 4


class TestAdaptivePyramidContext:
    def test_shape_contract(self, rng):
        apc = AdaptivePyramidContext(16, ApcConfig((1, 2, 3, 6)), rng)
        assert apc(Tensor(rng.standard_normal((1, 16, 12, 12)))).shape == (1, 16, 12, 12)

    def test_out_channels(self, rng):
        apc = AdaptivePyramidContext(8, ApcConfig((1, 2), 2, 5), rng)
        assert apc(Tensor(rng.standard_normal((2, 8, 6, 6)))).shape == (2, 5, 6, 6)

    def test_affinity_range(self, rng):
        apc = AdaptivePyramidContext(16, rng=rng)
        diag = []
        apc(Tensor(rng.standard_normal((1, 16, 12, 12))), diagnostics=diag)
        assert [a.shape[1] for a in diag] == [1, 4, 9, 36]
        assert all(np.all((a.data > 0) & (a.data < 1)) for a in diag)

    def test_saturated_single_bin_is_gap_broadcast(self, rng):
        apc = randomize(AdaptivePyramidContext(4, ApcConfig((1,), 3), rng), rng)
        apc.affinity[0].bias.data[...] = 50.0
        x = rng.standard_normal((2, 4, 5, 5))
        wl, bl = apc.local[0].weight.data[:, :, 0, 0], apc.local[0].bias.data
        expected = np.maximum(x.mean(axis=(2, 3)) @ wl.T + bl, 0)[:, :, None, None]
        np.testing.assert_allclose(apc.context(Tensor(x)).data, np.broadcast_to(expected, (2, 3, 5, 5)),
                                   atol=1e-12)

    def test_matches_scalar_oracle(self, rng):
        apc = randomize(AdaptivePyramidContext(2, ApcConfig((1, 2), 2), rng), rng)
        bn = apc.fuse.bn
        bn._buffers["running_mean"][...] = rng.standard_normal(2)
        bn._buffers["running_var"][...] = 0.5 + rng.random(2)
        x = rng.standard_normal((1, 2, 4, 4))
        ctx = apc_context_oracle(x[0], apc)
        np.testing.assert_allclose(apc.context(Tensor(x)).data[0], ctx, atol=1e-12)
        expected = fuse_eval(apc, np.concatenate([x, ctx[None]], axis=1))
        np.testing.assert_allclose(apc(Tensor(x)).data, expected, atol=1e-12)

    def test_equivariant_to_in_cell_permutation(self, rng):
        apc = randomize(AdaptivePyramidContext(4, ApcConfig((1, 2, 3, 6)), rng), rng)
        x = rng.standard_normal((1, 4, 12, 12))
        # reversing rows and columns inside each aligned 2x2 cell keeps every bin's pooled map
        idx = np.arange(12).reshape(6, 2)[:, ::-1].ravel()
        permuted = x[:, :, idx][..., idx]
        for s in apc.bins:
            np.testing.assert_allclose(adaptive_pool_loops(permuted, s, s), adaptive_pool_loops(x, s, s),
                                       atol=1e-14)
        out = apc(Tensor(x)).data
        np.testing.assert_allclose(apc(Tensor(permuted)).data, out[:, :, idx][..., idx], atol=1e-12)

    def test_parameter_accounting(self):
        c, inner, c_out, bins = 16, 4, 16, (1, 2, 3, 6)
        symbolic = sum((c * inner + inner) + (c * s * s + s * s) + c * s * s for s in bins)
        symbolic += (c + inner) * c_out + 2 * c_out
        assert count_params(AdaptivePyramidContext(c, ApcConfig(bins, inner, c_out))).params_total == symbolic

    def test_bins_exceeding_map(self, rng):
        out = AdaptivePyramidContext(8, rng=rng)(Tensor(rng.standard_normal((1, 8, 2, 3))))
        assert out.shape == (1, 8, 2, 3)

    def test_channel_mismatch(self, rng):
        with pytest.raises(DimensionError):
            AdaptivePyramidContext(8, rng=rng)(Tensor(np.zeros((1, 4, 6, 6))))


class TestPyramidPooling:
    def test_shape(self, rng):
        assert PyramidPooling(16, 8, rng=rng)(Tensor(rng.standard_normal((2, 16, 12, 10)))).shape == (2, 8, 12, 10)

    def test_parameter_accounting(self):
        c, c_out, bins = 16, 16, (1, 2, 3, 6)
        red = c // len(bins)
        symbolic = len(bins) * (c * red + red) + (c + red * len(bins)) * c_out + 2 * c_out
        assert count_params(PyramidPooling(c, c_out, bins)).params_total == symbolic

    def test_matches_composition(self, rng):
        ppm = randomize(PyramidPooling(4, 3, (1, 2), rng), rng)
        x = rng.standard_normal((1, 4, 4, 6))
        feats = [x]
        for s, conv in zip(ppm.bins, ppm.branches):
            pooled = adaptive_pool_loops(x, s, s)
            z = np.maximum(np.einsum("oc,nchw->nohw", conv.weight.data[:, :, 0, 0], pooled)
                           + conv.bias.data[None, :, None, None], 0)
            rows = np.arange(4) * s // 4
            cols = np.arange(6) * s // 6
            feats.append(z[:, :, rows][..., cols])
        expected = fuse_eval(ppm, np.concatenate(feats, axis=1))
        np.testing.assert_allclose(ppm(Tensor(x)).data, expected, atol=1e-12)

    def test_invalid_bins(self):
        with pytest.raises(InvalidSpecError):
            PyramidPooling(8, bins=(1, 0))
