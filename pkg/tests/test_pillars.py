import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from coopercept.config import PAPER, TINY, VoxelConfig
from coopercept.pillars import PillarFeatureNet, pillarize, scatter_dense, scatter_to_pseudo_image
from coopercept.tensor_core import default_dtype

SMALL = VoxelConfig(x_range=(-4.0, 4.0), y_range=(-2.0, 2.0), z_range=(-1.0, 3.0),
                    max_points_per_pillar=4, max_pillars=6)


def random_cloud(rng, n, cfg=TINY.voxel, margin=1.0):
    return np.stack([rng.uniform(cfg.x_range[0] - margin, cfg.x_range[1] + margin, n),
                     rng.uniform(cfg.y_range[0] - margin, cfg.y_range[1] + margin, n),
                     rng.uniform(-1.5, 3.5, n)], axis=1).astype(np.float32)


def loop_pillarize(cloud, cfg):
    """Dict-of-lists reference for clouds where no pillar overflows."""
    cells = {}
    for x, y, z in np.asarray(cloud, np.float64):
        if not (cfg.x_range[0] <= x < cfg.x_range[1] and cfg.y_range[0] <= y < cfg.y_range[1]
                and cfg.z_range[0] <= z < cfg.z_range[1]):
            continue
        key = (int(math.floor((y - cfg.y_range[0]) / cfg.voxel_xy)), int(math.floor((x - cfg.x_range[0]) / cfg.voxel_xy)))
        cells.setdefault(key, []).append((x, y, z))
    out = {}
    for (r, c), pts in cells.items():
        pts = np.array(pts)
        mean = pts.mean(axis=0)
        xc = cfg.x_range[0] + (c + 0.5) * cfg.voxel_xy
        yc = cfg.y_range[0] + (r + 0.5) * cfg.voxel_xy
        rows = [np.r_[p, p - mean, p[0] - xc, p[1] - yc] for p in pts]
        out[(r, c)] = sorted(map(tuple, rows))
    return out


class TestPillarize:
    def test_paper_column_index(self):
        b = pillarize(np.array([[0.2, 0.2, 0.0]]), PAPER.voxel)
        assert b.coords.tolist() == [[96, 352]]

    def test_paper_grid(self):
        assert (PAPER.voxel.grid_h, PAPER.voxel.grid_w) == (192, 704)

    def test_empty(self):
        b = pillarize(np.zeros((0, 3)), TINY.voxel)
        assert b.n_pillars == 0 and b.features.shape == (0, 32, 8)
        s = scatter_to_pseudo_image(np.zeros((0, 8)), b.coords, TINY.voxel)
        assert s.n_active == 0

    def test_single_point(self):
        b = pillarize(np.array([[1.1, -2.3, 0.7]]), TINY.voxel)
        f = b.features[0, 0]
        np.testing.assert_allclose(f[:3], [1.1, -2.3, 0.7], atol=1e-6)
        np.testing.assert_array_equal(f[3:6], 0.0)
        # cell centre of x=1.1 is 1.0, of y=-2.3 is -2.2
        np.testing.assert_allclose(f[6:8], [0.1, -0.1], atol=1e-6)
        assert b.mask.sum() == 1

    def test_out_of_range_dropped(self):
        b = pillarize(np.array([[100.0, 0, 0], [0, 0, 5.0], [0, 0, -3.0], [9.6, 0, 0]]), TINY.voxel)
        assert b.n_pillars == 0

    def test_matches_loop_reference(self):
        rng = np.random.default_rng(3)
        cfg = VoxelConfig(x_range=(-4.0, 4.0), y_range=(-2.0, 2.0), z_range=(-1.0, 3.0),
                          max_points_per_pillar=64, max_pillars=10000)
        cloud = random_cloud(rng, 400, cfg)
        b = pillarize(cloud, cfg)
        ref = loop_pillarize(cloud, cfg)
        assert sorted(ref) == [tuple(c) for c in b.coords.tolist()]
        for i, (r, c) in enumerate(b.coords.tolist()):
            got = sorted(map(tuple, b.features[i][b.mask[i]].astype(np.float64)))
            np.testing.assert_allclose(np.array(got), np.array(ref[(r, c)]), atol=1e-5)

    def test_capacity_limits(self):
        rng = np.random.default_rng(0)
        cloud = random_cloud(rng, 2000, SMALL, margin=0)
        b = pillarize(cloud, SMALL)
        assert b.n_pillars == SMALL.max_pillars
        assert b.mask.sum(axis=1).max() == SMALL.max_points_per_pillar
        # kept pillars are the most populated ones
        pts = cloud[(cloud[:, 2] >= -1) & (cloud[:, 2] < 3)].astype(np.float64)
        row = np.floor((pts[:, 1] + 2) / 0.4).astype(int)
        col = np.floor((pts[:, 0] + 4) / 0.4).astype(int)
        lin, counts = np.unique(row * SMALL.grid_w + col, return_counts=True)
        kept = set((b.coords[:, 0] * SMALL.grid_w + b.coords[:, 1]).tolist())
        kept_counts = [n for l, n in zip(lin, counts) if l in kept]
        dropped_counts = [n for l, n in zip(lin, counts) if l not in kept]
        assert min(kept_counts) >= max(dropped_counts)

    def test_coords_unique_sorted(self):
        b = pillarize(random_cloud(np.random.default_rng(1), 3000), TINY.voxel)
        lin = b.coords[:, 0] * b.grid_w + b.coords[:, 1]
        assert np.all(np.diff(lin) > 0)
        assert b.n_pillars <= TINY.voxel.max_pillars

    def test_active_cells_contain_source_points(self):
        cloud = random_cloud(np.random.default_rng(2), 3000)
        cfg = TINY.voxel
        b = pillarize(cloud, cfg)
        for i, (r, c) in enumerate(b.coords):
            pts = b.features[i][b.mask[i]][:, :3]
            assert len(pts) >= 1
            assert np.all(pts[:, 0] >= cfg.x_range[0] + c * cfg.voxel_xy - 1e-5)
            assert np.all(pts[:, 0] <= cfg.x_range[0] + (c + 1) * cfg.voxel_xy + 1e-5)
            assert np.all(pts[:, 1] >= cfg.y_range[0] + r * cfg.voxel_xy - 1e-5)
            assert np.all(pts[:, 1] <= cfg.y_range[0] + (r + 1) * cfg.voxel_xy + 1e-5)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10 ** 6))
    def test_permutation_invariance(self, seed):
        rng = np.random.default_rng(seed)
        cloud = random_cloud(rng, 600, SMALL, margin=0.5)
        a = pillarize(cloud, SMALL)
        b = pillarize(cloud[rng.permutation(len(cloud))], SMALL)
        np.testing.assert_array_equal(a.features, b.features)
        np.testing.assert_array_equal(a.coords, b.coords)
        np.testing.assert_array_equal(a.mask, b.mask)


def pfn_loop_oracle(batch, pfn):
    w = pfn.linear.weight.data.astype(np.float64)
    g, beta = pfn.norm.gamma.data.astype(np.float64), pfn.norm.beta.data.astype(np.float64)
    mu, var = pfn.norm.stats.mean.astype(np.float64), pfn.norm.stats.var.astype(np.float64)
    out = np.zeros((batch.n_pillars, w.shape[0]))
    for i in range(batch.n_pillars):
        best = None
        for j in range(batch.mask.shape[1]):
            if not batch.mask[i, j]:
                continue
            e = w @ batch.features[i, j].astype(np.float64)
            e = np.maximum((e - mu) / np.sqrt(var + pfn.norm.eps) * g + beta, 0)
            best = e if best is None else np.maximum(best, e)
        out[i] = best
    return out


class TestPfn:
    def make(self, seed=0, c=8):
        with default_dtype(np.float64):
            pfn = PillarFeatureNet(c).initialize(seed)
        rng = np.random.default_rng(seed)
        pfn.norm.gamma.data[:] = rng.uniform(0.5, 1.5, c)
        pfn.norm.beta.data[:] = rng.normal(0, 0.3, c)
        pfn.norm.stats.mean[:] = rng.normal(0, 0.3, c)
        pfn.norm.stats.var[:] = rng.uniform(0.5, 2.0, c)
        return pfn.eval()

    def test_matches_loop_oracle(self):
        pfn = self.make()
        for seed in range(5):
            b = pillarize(random_cloud(np.random.default_rng(seed), 800), TINY.voxel)
            np.testing.assert_allclose(pfn(b).data, pfn_loop_oracle(b, pfn), atol=1e-6)

    def test_one_point_and_duplicate(self):
        pfn = self.make(1)
        one = pillarize(np.array([[1.1, 2.3, 0.5]]), TINY.voxel)
        dup = pillarize(np.array([[1.1, 2.3, 0.5]] * 2), TINY.voxel)
        np.testing.assert_array_equal(pfn(one).data, pfn(dup).data)
        np.testing.assert_allclose(pfn(one).data, pfn_loop_oracle(one, pfn), atol=1e-12)

    def test_training_mode_shapes_and_grad(self):
        pfn = PillarFeatureNet(8).initialize(0)
        b = pillarize(random_cloud(np.random.default_rng(0), 500), TINY.voxel)
        out = pfn(b)
        assert out.shape == (b.n_pillars, 8)
        (out * out).sum().backward()
        assert np.abs(pfn.linear.weight.grad).sum() > 0

    def test_paper_channels(self):
        assert PillarFeatureNet(PAPER.stage_channels[0]).out_channels == 32


class TestScatter:
    def test_single_site(self):
        s = scatter_to_pseudo_image(np.ones((1, 4)), np.array([[0, 0]]), TINY.voxel)
        assert s.n_active == 1 and s.sites.tolist() == [[0, 0]]

    def test_duplicates_rejected(self):
        with pytest.raises(ValueError, match="duplicate"):
            scatter_to_pseudo_image(np.ones((2, 4)), np.array([[1, 1], [1, 1]]), TINY.voxel)

    def test_paper_pseudo_image_shape(self):
        b = pillarize(random_cloud(np.random.default_rng(0), 2000, PAPER.voxel, margin=0), PAPER.voxel)
        pfn = PillarFeatureNet(32).initialize(0).eval()
        dense, mask = scatter_dense(pfn(b), b.coords, PAPER.voxel.grid_h, PAPER.voxel.grid_w)
        assert dense.shape == (1, 32, 192, 704)
        assert mask.sum() == b.n_pillars

    def test_dense_and_sparse_agree(self):
        b = pillarize(random_cloud(np.random.default_rng(4), 1500), TINY.voxel)
        feats = PillarFeatureNet(8).initialize(0).eval()(b)
        s = scatter_to_pseudo_image(feats, b.coords, TINY.voxel)
        dense, mask = scatter_dense(feats, b.coords, 48, 48)
        np.testing.assert_array_equal(dense.data[0][:, mask].T, s.values)
        np.testing.assert_array_equal(mask, s.mask())
