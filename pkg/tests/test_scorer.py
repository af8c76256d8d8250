import math
from collections import deque

import numpy as np
import pytest

from superad.coreset import build_memory_bank
from superad.errors import ValidationError
from superad.features import CategoryConfig
from superad.scorer import (
    AnomalyMap,
    fill_holes,
    fuse_maps,
    layer_anomaly_map,
    read_anomaly_map,
    score_image,
    smooth,
    upsample,
    write_anomaly_map,
)

from conftest import make_features, make_grid


def nn_map_oracle(patches, bank):
    """Double-loop cosine-distance oracle."""
    out = []
    for p in patches:
        norm = math.sqrt(sum(v * v for v in p))
        if norm == 0:
            out.append(2.0)
            continue
        best = -1.0
        for row in bank:
            sim = sum((v / norm) * r for v, r in zip(p, row))
            best = max(best, sim)
        out.append(1.0 - best)
    return out


class TestLayerAnomalyMap:
    def test_self_match_is_zero(self, rng):
        values = rng.normal(size=(3, 3, 5)).astype(np.float32)
        grid = make_grid(6, values)
        flat = values.reshape(-1, 5).astype(np.float64)
        bank = (flat / np.linalg.norm(flat, axis=1, keepdims=True)).astype(np.float32)
        scores = layer_anomaly_map(grid, bank)
        assert scores.max() <= 1e-6

    def test_orthogonal_patch_scores_one(self):
        values = np.zeros((1, 2, 3), dtype=np.float32)
        values[0, 0] = [1, 0, 0]
        values[0, 1] = [0, 1, 0]
        bank = np.array([[0.0, 0.0, 1.0]], dtype=np.float32)
        scores = layer_anomaly_map(make_grid(6, values), bank)
        assert scores[0, 0] == pytest.approx(1.0, abs=1e-7)
        assert scores[0, 1] == pytest.approx(1.0, abs=1e-7)

    def test_zero_patch_scores_two(self):
        values = np.zeros((1, 1, 3), dtype=np.float32)
        bank = np.array([[1.0, 0.0, 0.0]], dtype=np.float32)
        assert layer_anomaly_map(make_grid(6, values), bank)[0, 0] == 2.0

    def test_matches_bruteforce_oracle(self, rng):
        for _ in range(30):
            gh, gw = int(rng.integers(1, 4)), int(rng.integers(1, 4))
            dim = int(rng.integers(1, 7))
            n_bank = int(rng.integers(1, 9))
            values = rng.normal(size=(gh, gw, dim)).astype(np.float32)
            bank = rng.normal(size=(n_bank, dim))
            bank /= np.linalg.norm(bank, axis=1, keepdims=True)
            bank = bank.astype(np.float32)
            got = layer_anomaly_map(make_grid(6, values), bank)
            expect = nn_map_oracle(
                values.reshape(-1, dim).astype(np.float64).tolist(),
                bank.astype(np.float64).tolist(),
            )
            assert np.abs(got.ravel() - np.array(expect)).max() <= 1e-7

    def test_bank_growth_monotone(self, rng):
        values = rng.normal(size=(4, 4, 6)).astype(np.float32)
        grid = make_grid(6, values)
        bank = rng.normal(size=(10, 6))
        bank /= np.linalg.norm(bank, axis=1, keepdims=True)
        extra = rng.normal(size=(5, 6))
        extra /= np.linalg.norm(extra, axis=1, keepdims=True)
        small = layer_anomaly_map(grid, bank.astype(np.float32))
        big = layer_anomaly_map(grid, np.vstack([bank, extra]).astype(np.float32))
        assert (big <= small + 1e-12).all()

    def test_dim_mismatch(self, rng):
        grid = make_grid(6, rng.normal(size=(2, 2, 4)))
        with pytest.raises(ValidationError):
            layer_anomaly_map(grid, np.ones((3, 5), dtype=np.float32))

    def test_empty_bank(self, rng):
        grid = make_grid(6, rng.normal(size=(2, 2, 4)))
        with pytest.raises(ValidationError):
            layer_anomaly_map(grid, np.zeros((0, 4), dtype=np.float32))


class TestFuseMaps:
    def test_single_map_identity(self, rng):
        m = rng.random((3, 3))
        assert np.array_equal(fuse_maps([m]), m)

    def test_zero_and_one(self):
        fused = fuse_maps([np.zeros((2, 2)), np.ones((2, 2))])
        assert np.array_equal(fused, np.full((2, 2), 0.5))

    def test_four_random_maps(self, rng):
        maps = [rng.random((4, 5)) for _ in range(4)]
        fused = fuse_maps(maps)
        expect = (maps[0] + maps[1] + maps[2] + maps[3]) / 4.0
        assert np.abs(fused - expect).max() <= 1e-7
        assert fused.min() >= min(m.min() for m in maps)
        assert fused.max() <= max(m.max() for m in maps)

    def test_dim_mismatch(self, rng):
        with pytest.raises(ValidationError):
            fuse_maps([rng.random((2, 2)), rng.random((2, 3))])


class TestUpsample:
    def test_constant_grid(self):
        out = upsample(np.full((2, 3), 0.7), (28, 42))
        assert np.allclose(out, 0.7)

    def test_hand_computed_1x2(self):
        # centers at 0.5 and 2.5 for block size 2; pixels 0..3
        out = upsample(np.array([[0.0, 1.0]]), (1, 4))
        assert np.allclose(out, [[0.0, 0.25, 0.75, 1.0]])

    def test_argmax_stays_in_block(self, rng):
        # block centers land on pixels only for odd block sizes; there the
        # peak value survives interpolation exactly and cannot migrate
        for _ in range(50):
            gh, gw = int(rng.integers(1, 6)), int(rng.integers(1, 6))
            grid = rng.random((gh, gw))
            patch = int(rng.choice([3, 7, 15]))
            out = upsample(grid, (gh * patch, gw * patch))
            gy, gx = np.unravel_index(np.argmax(grid), grid.shape)
            fy, fx = np.unravel_index(np.argmax(out), out.shape)
            assert gy * patch <= fy < (gy + 1) * patch
            assert gx * patch <= fx < (gx + 1) * patch
            assert out.min() >= grid.min() - 1e-12
            assert out.max() <= grid.max() + 1e-12

    def test_even_blocks_keep_peak_near_argmax(self, rng):
        # with even block sizes the peak sits next to the block center; it can
        # only move to a block whose cell nearly ties the maximum
        for _ in range(50):
            grid = rng.random((4, 4))
            out = upsample(grid, (56, 56))
            fy, fx = np.unravel_index(np.argmax(out), out.shape)
            assert grid[fy // 14, fx // 14] >= grid.max() - 0.5 / 14 * np.ptp(grid)

    def test_target_smaller_than_grid_rejected(self):
        with pytest.raises(ValueError):
            upsample(np.zeros((4, 4)), (2, 8))


class TestSmooth:
    def test_sigma_zero_identity(self, rng):
        m = rng.random((5, 7))
        assert np.array_equal(smooth(m, 0.0), m)

    def test_impulse_symmetric_peak(self):
        m = np.zeros((9, 9))
        m[4, 4] = 1.0
        out = smooth(m, 1.0)
        assert np.unravel_index(np.argmax(out), out.shape) == (4, 4)
        assert np.allclose(out, out[::-1, :]) and np.allclose(out, out[:, ::-1])

    def test_constant_unchanged(self):
        m = np.full((6, 6), 3.25)
        assert np.abs(smooth(m, 2.0) - m).max() <= 1e-9

    def test_mass_preserved(self, rng):
        m = rng.random((20, 20))
        out = smooth(m, 1.5)
        assert abs(out.mean() - m.mean()) <= 1e-3


def fill_holes_oracle(mask):
    """Border flood fill over false cells, 4-connected, plain BFS."""
    m = [list(row) for row in np.asarray(mask, dtype=bool)]
    h, w = len(m), len(m[0])
    reach = [[False] * w for _ in range(h)]
    queue = deque()
    for y in range(h):
        for x in range(w):
            if (y in (0, h - 1) or x in (0, w - 1)) and not m[y][x]:
                reach[y][x] = True
                queue.append((y, x))
    while queue:
        y, x = queue.popleft()
        for dy, dx in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            ny, nx = y + dy, x + dx
            if 0 <= ny < h and 0 <= nx < w and not m[ny][nx] and not reach[ny][nx]:
                reach[ny][nx] = True
                queue.append((ny, nx))
    return np.array([[m[y][x] or not reach[y][x] for x in range(w)] for y in range(h)])


class TestFillHoles:
    def test_ring_interior_filled(self):
        grid = np.zeros((5, 5), dtype=bool)
        grid[1:4, 1:4] = True
        grid[2, 2] = False
        out = fill_holes(grid)
        assert out[2, 2]
        assert not out[0].any() and not out[-1].any()

    def test_all_false_unchanged(self):
        assert not fill_holes(np.zeros((4, 4), dtype=bool)).any()

    def test_border_region_unchanged(self):
        grid = np.ones((4, 4), dtype=bool)
        grid[0, 1] = False  # false region touching border stays false
        assert not fill_holes(grid)[0, 1]

    def test_matches_bfs_oracle(self, rng):
        for _ in range(100):
            grid = rng.random((int(rng.integers(1, 12)), int(rng.integers(1, 12)))) < 0.55
            assert np.array_equal(fill_holes(grid), fill_holes_oracle(grid))

    def test_idempotent_and_extensive(self, rng):
        for _ in range(50):
            grid = rng.random((10, 10)) < 0.5
            filled = fill_holes(grid)
            assert (filled | grid).sum() == filled.sum()
            assert np.array_equal(fill_holes(filled), filled)


class TestScoreImage:
    def _setup(self, rng, smoothing_sigma=0.0):
        config = CategoryConfig(
            category="rice", layer_indices=(6, 12), mask_layer=6, k_refs=2,
            smoothing_sigma=smoothing_sigma,
        )
        refs = [
            make_features(image_id=f"r/{i}", grid=(3, 3), dim=6, layers=(6, 12), rng=rng)
            for i in range(2)
        ]
        bank = build_memory_bank(refs, None, config)
        return config, refs, bank

    def test_reference_self_match(self, rng):
        config, refs, bank = self._setup(rng)
        result = score_image(refs[0], bank, config)
        assert result.full_res.shape == refs[0].original_size
        assert result.full_res.max() <= 1e-5
        assert result.image_score == result.full_res.max()

    def test_orthogonal_patch_blob_localized(self, rng):
        config, refs, bank = self._setup(rng)
        # craft a test image: copy of ref 0 with one patch replaced by a
        # vector orthogonal to every stored row (via least squares residual)
        values = {i: refs[0].layer(i).values.copy() for i in (6, 12)}
        for layer_index in (6, 12):
            rows = np.vstack([r.layer(layer_index).flat() for r in refs]).astype(np.float64)
            candidate = rng.normal(size=6)
            coeffs, *_ = np.linalg.lstsq(rows.T @ rows, rows.T @ (rows @ candidate), rcond=None)
            residual = candidate - np.linalg.lstsq(rows, rows @ candidate, rcond=None)[0]
            if np.linalg.norm(residual) < 1e-9:
                residual = np.linalg.svd(rows)[2][-1]
            values[layer_index][1, 1] = residual.astype(np.float32)
        test = make_features(
            image_id="t/0", grid=(3, 3), dim=6, layers=(6, 12), layer_values=values, rng=rng
        )
        result = score_image(test, bank, config)
        fy, fx = np.unravel_index(np.argmax(result.full_res), result.full_res.shape)
        assert 14 <= fy < 28 and 14 <= fx < 28  # inside the replaced patch block

    def test_deterministic(self, rng):
        config, refs, bank = self._setup(rng, smoothing_sigma=1.0)
        a = score_image(refs[1], bank, config)
        b = score_image(refs[1], bank, config)
        assert a.full_res.tobytes() == b.full_res.tobytes()
        assert a.image_score == b.image_score

    def test_config_hash_mismatch_rejected(self, rng):
        config, refs, bank = self._setup(rng)
        other = CategoryConfig(
            category="rice", layer_indices=(6, 12), mask_layer=6, k_refs=2, tau=0.5
        )
        with pytest.raises(ValidationError):
            score_image(refs[0], bank, other)

    def test_layer_set_mismatch_rejected(self, rng):
        config, refs, bank = self._setup(rng)
        test = make_features(image_id="t/0", grid=(3, 3), dim=6, layers=(6,), rng=rng)
        with pytest.raises(ValidationError):
            score_image(test, bank, config)

    def test_debug_keeps_grid_maps(self, rng):
        config, refs, bank = self._setup(rng)
        result = score_image(refs[0], bank, config, debug=True)
        assert set(result.grid_maps) == {6, 12}
        assert result.grid_maps[6].shape == (3, 3)


class TestAnomalyMapIO:
    def test_round_trip(self, tmp_path, rng):
        values = rng.random((5, 7)).astype(np.float32)
        path = tmp_path / "m.anom"
        write_anomaly_map(values, path)
        back = read_anomaly_map(path)
        assert back.dtype == np.float32
        assert np.array_equal(back, values)
        assert path.stat().st_size == 8 + 4 * 35
