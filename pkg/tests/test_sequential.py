import json
from functools import lru_cache

import numpy as np
import pytest
from scipy.stats import special_ortho_group

from services.benchmark import SpaceTimeKeypoint
from services.feature_pipeline import FeaturePyramid
from services.sequential import (
    Alignment,
    EmbeddingSequence,
    dtw_align,
    dtw_path,
    frame_embeddings,
    nn_align,
    sequential_transfer,
    write_alignment,
)
from services.stmatch import VideoDims
from services.tensor_core import GridShape
from tests.conftest import make_pyramid
from utils.errors import KeypointError, ShapeError


def brute_force_dtw(cost):
    """Cheapest monotone path cost by exhaustive recursion over all step choices"""
    r, c = cost.shape

    @lru_cache(maxsize=None)
    def best_from(i, j):
        if (i, j) == (r - 1, c - 1):
            return cost[i, j]
        options = []
        if i + 1 < r:
            options.append(best_from(i + 1, j))
        if j + 1 < c:
            options.append(best_from(i, j + 1))
        if i + 1 < r and j + 1 < c:
            options.append(best_from(i + 1, j + 1))
        return cost[i, j] + min(options)

    return best_from(0, 0)


def seq(rows):
    return EmbeddingSequence(np.asarray(rows, dtype=np.float64))


class TestEmbeddings:
    def test_mean_then_normalize(self):
        layer = np.zeros((2, 2, 1, 2))
        layer[0, 0] = 1.0
        layer[:, 1, 0, 0] = (3.0, 4.0)
        layer[:, 1, 0, 1] = (3.0, 4.0)
        emb = frame_embeddings(FeaturePyramid(GridShape(2, 1, 2), [layer], [0]), 0)
        np.testing.assert_allclose(emb.values, [[1.0, 0.0], [0.6, 0.8]])

    def test_zero_frame_stays_zero(self):
        layer = np.zeros((3, 2, 2, 2))
        layer[:, 1] = 1.0
        emb = frame_embeddings(FeaturePyramid(GridShape(2, 2, 2), [layer], [0]), 0)
        assert np.all(emb.values[0] == 0)

    def test_layer_pick_checked(self, rng):
        with pytest.raises(ShapeError):
            frame_embeddings(make_pyramid(rng, GridShape(2, 2, 2), (3,)), 1)

    def test_sequence_validation(self):
        with pytest.raises(ShapeError):
            seq(np.zeros((0, 3)))
        with pytest.raises(ShapeError):
            seq([[np.nan]])


class TestNearestNeighbour:
    def test_identity_and_reverse(self, rng):
        e = rng.standard_normal((5, 4))
        assert list(nn_align(seq(e), seq(e)).indices) == [0, 1, 2, 3, 4]
        assert list(nn_align(seq(e), seq(e[::-1])).indices) == [4, 3, 2, 1, 0]

    def test_ties_go_to_lowest_index(self):
        alignment = nn_align(seq([[1.0, 0.0]]), seq([[0.0, 1.0], [1.0, 0.0], [1.0, 0.0]]))
        assert list(alignment.indices) == [1]
        assert not alignment.monotone

    def test_dim_mismatch(self):
        with pytest.raises(ShapeError):
            nn_align(seq([[1.0]]), seq([[1.0, 0.0]]))


class TestDtw:
    def test_hand_example(self):
        path, total, _ = dtw_path(seq([[0.0], [1.0]]), seq([[0.0], [0.0], [1.0]]))
        assert total == 0.0
        assert path == [(0, 0), (0, 1), (1, 2)]
        alignment, _ = dtw_align(seq([[0.0], [1.0]]), seq([[0.0], [0.0], [1.0]]))
        assert list(alignment.indices) == [0, 2]
        assert alignment.monotone

    def test_identical_sequences_follow_diagonal(self, rng):
        e = rng.standard_normal((6, 3))
        path, total, _ = dtw_path(seq(e), seq(e))
        assert path == [(i, i) for i in range(6)]
        assert total == 0.0

    def test_matches_exhaustive_search(self, rng):
        for _ in range(1000):
            r, c = (int(n) for n in rng.integers(1, 7, size=2))
            es, et = seq(rng.standard_normal((r, 2))), seq(rng.standard_normal((c, 2)))
            path, total, cost = dtw_path(es, et)
            assert total == pytest.approx(brute_force_dtw(cost), rel=1e-12, abs=1e-12)

            assert path[0] == (0, 0) and path[-1] == (r - 1, c - 1)
            steps = {(b[0] - a[0], b[1] - a[1]) for a, b in zip(path, path[1:])}
            assert steps <= {(1, 0), (0, 1), (1, 1)}
            assert sum(cost[i, j] for i, j in path) == pytest.approx(total, rel=1e-12, abs=1e-12)

            alignment, _ = dtw_align(es, et)
            assert len(alignment.indices) == r
            assert np.all(np.diff(alignment.indices) >= 0)

    def test_cost_is_symmetric(self, rng):
        for _ in range(50):
            es, et = seq(rng.standard_normal((4, 3))), seq(rng.standard_normal((6, 3)))
            assert dtw_align(es, et)[1] == pytest.approx(dtw_align(et, es)[1], rel=1e-12)

    def test_rotation_invariant(self, rng):
        es, et = rng.standard_normal((5, 4)), rng.standard_normal((7, 4))
        q = special_ortho_group.rvs(4, random_state=7)
        plain, plain_cost = dtw_align(seq(es), seq(et))
        rotated, rotated_cost = dtw_align(seq(es @ q), seq(et @ q))
        assert rotated_cost == pytest.approx(plain_cost, rel=1e-9)
        assert list(rotated.indices) == list(plain.indices)


class TestAlignment:
    def test_validation(self):
        with pytest.raises(ShapeError):
            Alignment([0, 3], n_target=3)
        with pytest.raises(ShapeError):
            Alignment([2, 1], n_target=3, monotone=True)
        assert list(Alignment([2, 1], n_target=3).indices) == [2, 1]

    def test_write(self, tmp_path):
        write_alignment(str(tmp_path / 'a.json'), Alignment([0, 0, 2], n_target=3, monotone=True), total_cost=1.5)
        doc = json.loads((tmp_path / 'a.json').read_text())
        assert doc == {'alignment': [0, 0, 2], 'monotone': True, 'total_cost': 1.5}
        write_alignment(str(tmp_path / 'b.json'), Alignment([1], n_target=2))
        assert json.loads((tmp_path / 'b.json').read_text())['total_cost'] is None


class TestSequentialTransfer:
    def test_identity(self, rng):
        grid = GridShape(4, 3, 3)
        pyr = make_pyramid(rng, grid, (8,))
        dims = VideoDims(7, 21, 21)
        kps = [SpaceTimeKeypoint(x=10.0, y=20.0, t=2, type_id=0), SpaceTimeKeypoint(x=0.0, y=10.0, t=6, type_id=1)]
        moved = sequential_transfer(Alignment(np.arange(4), 4, monotone=True), pyr, pyr, kps, dims, dims)
        assert [(kp.x, kp.y, kp.t, kp.type_id) for kp in moved] == [(10.0, 20.0, 2, 0), (0.0, 10.0, 6, 1)]

    def test_time_shift(self, rng):
        grid = GridShape(4, 3, 3)
        src = make_pyramid(rng, grid, (8,))
        # target frame (f + 2) % 4 shows source frame f with its cells shuffled: cell c lands on perms[f][c]
        perms = [rng.permutation(9) for _ in range(4)]
        layer = np.zeros_like(src.layers[0])
        for f, perm in enumerate(perms):
            shuffled = np.zeros((8, 9), dtype=layer.dtype)
            shuffled[:, perm] = src.layers[0][:, f].reshape(8, 9)
            layer[:, (f + 2) % 4] = shuffled.reshape(8, 3, 3)
        tgt = FeaturePyramid(grid, [layer], [0])
        dims = VideoDims(4, 3, 3)
        alignment = Alignment((np.arange(4) + 2) % 4, 4)

        kps = [SpaceTimeKeypoint(x=float(w), y=float(h), t=f, type_id=5)
               for f in range(4) for h in range(3) for w in range(3)]
        moved = sequential_transfer(alignment, src, tgt, kps, dims, dims)
        for kp, out in zip(kps, moved):
            h, w = divmod(int(perms[kp.t][int(kp.y) * 3 + int(kp.x)]), 3)
            assert (out.x, out.y, out.t) == (float(w), float(h), (kp.t + 2) % 4)

    def test_rejects_bad_inputs(self, rng):
        grid = GridShape(4, 3, 3)
        pyr = make_pyramid(rng, grid, (4,))
        dims = VideoDims(7, 21, 21)
        with pytest.raises(KeypointError):
            sequential_transfer(Alignment(np.arange(4), 4), pyr, pyr, [SpaceTimeKeypoint(1.0, 1.0, 7, 0)], dims, dims)
        with pytest.raises(ShapeError):
            sequential_transfer(Alignment(np.arange(3), 4), pyr, pyr, [], dims, dims)
