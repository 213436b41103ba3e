import numpy as np
import pytest

from services.ants import (
    AntsConfig,
    AntsParams,
    ConvLayer,
    GtCorrespondence,
    TrainingPair,
    ants_forward,
    ants_gradient,
    ants_init,
    build_input,
    conv3d_backward,
    conv3d_forward,
    gradcheck,
    load_params,
    plant_gts,
    save_params,
    sparse_flow_loss,
    train,
)
from services.benchmark import SpaceTimeKeypoint
from services.feature_pipeline import FeaturePyramid, stack_correlations
from services.stmatch import VideoDims
from services.tensor_core import GridShape
from tests.conftest import make_pyramid, unit_cells
from utils.errors import ConfigError, ShapeError, TrainingDivergedError


def naive_conv(x, kernel, bias):
    c_out = kernel.shape[0]
    _, T, H, W = x.shape
    padded = np.pad(x, ((0, 0), (1, 1), (1, 1), (1, 1)))
    out = np.zeros((c_out, T, H, W))
    for o in range(c_out):
        for t in range(T):
            for h in range(H):
                for w in range(W):
                    out[o, t, h, w] = np.sum(padded[:, t:t + 3, h:h + 3, w:w + 3] * kernel[o]) + bias[o]
    return out


def random_problem(seed, grid=GridShape(2, 2, 2), channels=2, hidden=2, dtype=np.float64):
    rng = np.random.default_rng(seed)
    pyr_s = make_pyramid(rng, grid, (channels,), dtype=dtype)
    pyr_t = make_pyramid(rng, grid, (channels,), dtype=dtype)
    corr = stack_correlations(pyr_s, pyr_t)
    config = AntsConfig.for_pyramids(pyr_s, pyr_t, n_layers=2, hidden_channels=hidden)
    params = ants_init(config, seed, dtype=dtype)
    positions = rng.uniform(0, 1, size=(4, 3)) * (np.array(grid.as_tuple()) - 1)
    gts = [GtCorrespondence(tuple(p), tuple(d)) for p, d in zip(positions, rng.uniform(-1, 1, size=(4, 3)))]
    return corr, pyr_s, pyr_t, config, params, gts


def planted_pair(seed):
    """Target = source with its cells permuted; GT at every source cell"""
    rng = np.random.default_rng(seed)
    grid = GridShape(2, 2, 2)
    src = unit_cells(rng, 8, grid).astype(np.float32)
    perm = rng.permutation(grid.cells)
    flat = src.reshape(8, -1)
    tgt = np.empty_like(flat)
    tgt[:, perm] = flat
    pyr_s = FeaturePyramid(grid, [src], [0])
    pyr_t = FeaturePyramid(grid, [tgt.reshape(src.shape)], [0])
    coords = grid.coords()
    gts = [GtCorrespondence(tuple(coords[s]), tuple(coords[perm[s]] - coords[s])) for s in range(grid.cells)]
    return TrainingPair(stack_correlations(pyr_s, pyr_t), pyr_s, pyr_t, gts)


class TestInit:
    def test_layer_shapes(self, rng, grid222):
        pyr_s = make_pyramid(rng, grid222, (3, 5))
        pyr_t = make_pyramid(rng, grid222, (3, 5))
        config = AntsConfig.for_pyramids(pyr_s, pyr_t, n_layers=2, hidden_channels=8)
        assert config.in_channels == 2 * 8 + 8 + 8
        params = ants_init(config, seed=0)
        assert params.layers[0].kernel.shape == (8, config.in_channels, 3, 3, 3)
        assert params.layers[1].kernel.shape == (8, 8, 3, 3, 3)
        assert params.layers[0].bias.shape == (8,)
        assert params.dtype == np.float32

    def test_deterministic_per_seed_and_bounded(self, grid222):
        config = AntsConfig(grid222, n_layers=3, hidden_channels=4, m=1, src_channels=(2,), tgt_channels=(2,))
        a, b, c = ants_init(config, 3), ants_init(config, 3), ants_init(config, 4)
        for la, lb in zip(a.layers, b.layers):
            assert np.array_equal(la.kernel, lb.kernel)
        assert not np.array_equal(a.layers[0].kernel, c.layers[0].kernel)
        for layer in a.layers:
            bound = np.sqrt(1.0 / (layer.kernel.shape[1] * 27))
            assert np.abs(layer.kernel).max() <= bound * (1 + 1e-6)
            assert np.all(layer.bias == 0)

    def test_zero_init(self, grid222):
        config = AntsConfig(grid222, m=1, src_channels=(2,), tgt_channels=(2,))
        assert all(np.all(a == 0) for a in ants_init(config, 0, zero=True).arrays())

    def test_config_validation(self, grid222):
        with pytest.raises(ConfigError):
            AntsConfig(grid222, n_layers=0)


class TestConv:
    def test_forward_matches_naive(self, rng):
        x = rng.standard_normal((3, 2, 3, 4))
        kernel = rng.standard_normal((5, 3, 3, 3, 3))
        bias = rng.standard_normal(5)
        np.testing.assert_allclose(conv3d_forward(x, kernel, bias), naive_conv(x, kernel, bias), atol=1e-10)

    def test_backward_is_adjoint_of_forward(self, rng):
        x = rng.standard_normal((3, 2, 3, 4))
        kernel = rng.standard_normal((5, 3, 3, 3, 3))
        g = rng.standard_normal((5, 2, 3, 4))
        zero = np.zeros(5)
        d_x, d_k, d_b = conv3d_backward(x, kernel, g)
        # conv is linear in x and in kernel: <conv(x), g> = <x, d_x> = <kernel, d_k>
        lhs = np.sum(conv3d_forward(x, kernel, zero) * g)
        assert np.sum(x * d_x) == pytest.approx(lhs, rel=1e-10)
        assert np.sum(kernel * d_k) == pytest.approx(lhs, rel=1e-10)
        np.testing.assert_allclose(d_b, g.sum(axis=(1, 2, 3)))

    def test_channel_mismatch(self, rng):
        with pytest.raises(ShapeError):
            conv3d_forward(np.zeros((2, 2, 2, 2)), np.zeros((1, 3, 3, 3, 3)), np.zeros(1))


class TestForwardAndLoss:
    def test_input_layout(self, rng, grid222):
        pyr_s = make_pyramid(rng, grid222, (3,))
        pyr_t = make_pyramid(rng, grid222, (2,))
        corr = stack_correlations(make_pyramid(rng, grid222, (3,)), make_pyramid(rng, grid222, (3,)))
        x = build_input(corr, pyr_s, pyr_t)
        assert x.shape == (8 + 3 + 2, 2, 2, 2)
        s, q = grid222.linear_index(1, 0, 1), 6
        assert x[q, 1, 0, 1] == corr.scores[0, s, q]
        assert np.array_equal(x[8:11], pyr_s.layers[0])

    def test_forward_shape_and_zero_params(self, rng, grid222):
        corr, pyr_s, pyr_t, config, _, _ = random_problem(0)
        mv = ants_forward(corr, pyr_s, pyr_t, ants_init(config, 0, zero=True, dtype=np.float64))
        assert mv.scores.shape == (8, 8)
        assert np.all(mv.scores == 0)

    def test_hidden_channel_permutation_leaves_output_unchanged(self):
        corr, pyr_s, pyr_t, config, params, _ = random_problem(5, hidden=4)
        perm = np.array([2, 0, 3, 1])
        first, last = params.layers
        permuted = AntsParams([
            ConvLayer(first.kernel[perm], first.bias[perm]),
            ConvLayer(last.kernel[:, perm], last.bias),
        ])
        a = ants_forward(corr, pyr_s, pyr_t, params).scores
        b = ants_forward(corr, pyr_s, pyr_t, permuted).scores
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_stationary_point_has_zero_gradient(self):
        corr, pyr_s, pyr_t, config, _, _ = random_problem(1)
        params = ants_init(config, 0, zero=True, dtype=np.float64)
        coords = GridShape(2, 2, 2).coords()
        # uniform weights send every cell to the centroid
        gts = [GtCorrespondence(tuple(c), tuple(0.5 - c)) for c in coords[[0, 3, 6]]]
        loss, grads = ants_gradient(corr, pyr_s, pyr_t, params, gts, temperature=0.5)
        assert loss < 1e-20
        assert grads.norm() < 1e-8

    def test_loss_requires_gts(self):
        corr, pyr_s, pyr_t, _, params, _ = random_problem(2)
        with pytest.raises(ValueError):
            sparse_flow_loss(ants_forward(corr, pyr_s, pyr_t, params), [])


class TestGradcheck:
    def test_twenty_seeds_in_double_precision(self):
        for seed in range(20):
            corr, pyr_s, pyr_t, _, params, gts = random_problem(seed)
            assert gradcheck(corr, pyr_s, pyr_t, params, gts, temperature=1.0, eps=1e-5) < 1e-4

    def test_deeper_network(self):
        corr, pyr_s, pyr_t, _, _, gts = random_problem(7)
        config = AntsConfig.for_pyramids(pyr_s, pyr_t, n_layers=3, hidden_channels=2)
        params = ants_init(config, 7, dtype=np.float64)
        assert gradcheck(corr, pyr_s, pyr_t, params, gts, temperature=1.0) < 1e-4


class TestTraining:
    def test_overfitting_one_pair_drops_loss(self):
        for seed in range(2):
            pair = planted_pair(seed)
            config = AntsConfig.for_pyramids(pair.pyr_s, pair.pyr_t, n_layers=2, hidden_channels=8)
            result = train([pair], config, lr=0.05, steps=200, seed=0, temperature=0.1)
            assert len(result.losses) == 200
            assert result.losses[-1] < result.losses[0] / 5

    def test_deterministic(self):
        pair = planted_pair(1)
        config = AntsConfig.for_pyramids(pair.pyr_s, pair.pyr_t, n_layers=2, hidden_channels=4)
        a = train([pair], config, lr=0.05, steps=5, seed=3, temperature=0.1)
        b = train([pair], config, lr=0.05, steps=5, seed=3, temperature=0.1)
        assert a.losses == b.losses

    def test_zero_learning_rate_keeps_params(self):
        pair = planted_pair(2)
        config = AntsConfig.for_pyramids(pair.pyr_s, pair.pyr_t, n_layers=2, hidden_channels=4)
        init = ants_init(config, 9)
        result = train([pair], config, lr=0.0, steps=3, seed=9, temperature=0.1, init=init)
        for p, q in zip(result.params.arrays(), init.arrays()):
            assert np.array_equal(p, q)

    def test_divergence_is_reported(self):
        pair = planted_pair(3)
        config = AntsConfig.for_pyramids(pair.pyr_s, pair.pyr_t, n_layers=2, hidden_channels=4)
        with np.errstate(all='ignore'), pytest.raises(TrainingDivergedError):
            train([pair], config, lr=1e30, steps=20, seed=0, temperature=0.1)


def test_params_round_trip(tmp_path, grid222):
    config = AntsConfig(grid222, n_layers=2, hidden_channels=3, m=1, src_channels=(2,), tgt_channels=(4,))
    params = ants_init(config, 11)
    save_params(str(tmp_path / 'p'), params, config, seed=11)
    loaded, loaded_config, seed = load_params(str(tmp_path / 'p'))
    assert seed == 11
    assert loaded_config == config
    for a, b in zip(params.arrays(), loaded.arrays()):
        assert np.array_equal(a, b)


def test_plant_gts_in_grid_units():
    dims, grid = VideoDims(16, 64, 64), GridShape(4, 4, 4)
    src = SpaceTimeKeypoint(x=21.0, y=0.0, t=5, type_id=0)
    tgt = SpaceTimeKeypoint(x=63.0, y=42.0, t=0, type_id=0)
    (gt,) = plant_gts([(src, tgt)], dims, dims, grid)
    assert gt.position == (1.0, 0.0, 1.0)
    assert gt.displacement == (-1.0, 2.0, 2.0)
