import numpy as np
import pytest

from tetshape.tetgrid import NONE, build_hierarchy
from tetshape.tensorops import (
    FeatureTensor,
    GradCheckReport,
    InstanceNorm,
    LeakyReLU,
    Linear,
    TetConv,
    TetPool,
    TetUpsample,
    gradcheck_layer,
    instance_norm,
    leaky_relu,
    run_standard_gradchecks,
    tet_conv,
    tet_pool,
    tet_upsample,
)


def dense_conv_oracle(x, W, b, grid):
    """Dense matrix assembled from the adjacency table."""
    K, c_in = x.shape
    c_out = W.shape[1]
    A = np.zeros((K * c_out, K * c_in))
    for k in range(K):
        A[k * c_out:(k + 1) * c_out, k * c_in:(k + 1) * c_in] += W[0]
        for s in range(4):
            j = grid.neighbors[k, s]
            if j != NONE:
                A[k * c_out:(k + 1) * c_out, j * c_in:(j + 1) * c_in] += W[s + 1]
    return (A @ x.ravel()).reshape(K, c_out) + b


class TestTetConv:
    def test_identity_kernel(self, hier_m2_n2, rng):
        grid = hier_m2_n2.finest
        x = FeatureTensor(2, rng.standard_normal((grid.num_tets, 3)))
        W = np.zeros((5, 3, 3))
        W[0] = np.eye(3)
        out = tet_conv(x, W, np.zeros(3), grid)
        assert np.array_equal(out.data, x.data)

    def test_constant_preserved_on_interior(self, hier_m2_n2):
        grid = hier_m2_n2.finest
        c = 2.25
        x = FeatureTensor(2, np.full((grid.num_tets, 2), c))
        W = np.stack([np.eye(2) / 5.0] * 5)
        out = tet_conv(x, W, np.zeros(2), grid)
        interior = ~(grid.neighbors == NONE).any(axis=1)
        assert np.abs(out.data[interior] - c).max() <= 1e-12

    def test_matches_dense_oracle(self, hier_m2_n2, rng):
        grid = hier_m2_n2.finest
        layer = TetConv(grid, 3, 2, rng)
        x = FeatureTensor(2, rng.standard_normal((grid.num_tets, 3)))
        out = layer.forward(x)
        oracle = dense_conv_oracle(x.data, layer.W, layer.b, grid)
        assert np.abs(out.data - oracle).max() <= 1e-12

    def test_linearity(self, hier_m2_n2, rng):
        grid = hier_m2_n2.finest
        layer = TetConv(grid, 3, 4, rng)
        layer.b[:] = 0.0
        x = rng.standard_normal((grid.num_tets, 3))
        y = rng.standard_normal((grid.num_tets, 3))
        a, b = 1.7, -0.3
        combined = layer.forward(FeatureTensor(2, a * x + b * y)).data
        separate = a * layer.forward(FeatureTensor(2, x)).data \
            + b * layer.forward(FeatureTensor(2, y)).data
        assert np.abs(combined - separate).max() <= 1e-12

    def test_receptive_field_locality(self, hier_m2_n2, rng):
        grid = hier_m2_n2.finest
        layer = TetConv(grid, 2, 2, rng)
        x = rng.standard_normal((grid.num_tets, 2))
        base = layer.forward(FeatureTensor(2, x)).data
        k = 10
        ball = {k} | {int(j) for j in grid.neighbors[k] if j != NONE}
        outside = next(j for j in range(grid.num_tets) if j not in ball)
        x2 = x.copy()
        x2[outside] += 5.0
        out2 = layer.forward(FeatureTensor(2, x2)).data
        assert np.array_equal(out2[k], base[k])
        assert not np.array_equal(out2[outside], base[outside])

    def test_gradcheck(self, hier_m2_n2, rng):
        grid = hier_m2_n2.finest
        layer = TetConv(grid, 3, 2, rng)
        x = FeatureTensor(2, rng.standard_normal((grid.num_tets, 3)))
        report = gradcheck_layer(layer, x, tolerance=1e-6)
        assert report.all_passed, str(report)

    def test_shape_mismatch(self, hier_m2_n2, rng):
        layer = TetConv(hier_m2_n2.finest, 3, 2, rng)
        with pytest.raises(ValueError, match="features"):
            layer.forward(FeatureTensor(2, np.zeros((5, 3))))

    def test_nan_rejected(self, hier_m2_n2, rng):
        grid = hier_m2_n2.finest
        layer = TetConv(grid, 2, 2, rng)
        x = np.zeros((grid.num_tets, 2))
        x[0, 0] = np.nan
        with pytest.raises(ValueError, match="NaN"):
            layer.forward(FeatureTensor(2, x))


class TestTetPool:
    def test_children_1_to_8(self, hier_m1_n2):
        x = np.zeros((48, 1))
        cmap = hier_m1_n2.child_map(1)
        x[cmap[0], 0] = np.arange(1, 9)
        avg = tet_pool(FeatureTensor(2, x), hier_m1_n2, "avg")
        mx = tet_pool(FeatureTensor(2, x), hier_m1_n2, "max")
        assert avg.data[0, 0] == pytest.approx(4.5)
        assert mx.data[0, 0] == 8.0

    @pytest.mark.parametrize("mode", ["avg", "max"])
    def test_constant_preserved(self, hier_m2_n2, mode):
        K = hier_m2_n2.finest.num_tets
        out = tet_pool(FeatureTensor(2, np.full((K, 3), -1.25)), hier_m2_n2, mode)
        assert np.abs(out.data + 1.25).max() == 0.0
        assert out.level == 1

    @pytest.mark.parametrize("mode", ["avg", "max"])
    def test_matches_loop_oracle(self, hier_m2_n2, rng, mode):
        h = hier_m2_n2
        x = rng.standard_normal((h.finest.num_tets, 3))
        out = tet_pool(FeatureTensor(2, x), h, mode).data
        cmap = h.child_map(1)
        for parent in range(len(cmap)):
            kids = x[cmap[parent]]
            ref = kids.mean(axis=0) if mode == "avg" else kids.max(axis=0)
            assert np.abs(out[parent] - ref).max() <= 1e-12

    def test_max_tie_routes_to_first(self, hier_m1_n2):
        x = np.zeros((48, 1))
        layer = TetPool(hier_m1_n2, 2, "max")
        layer.forward(FeatureTensor(2, x))
        g = layer.backward(np.ones((6, 1)))
        cmap = hier_m1_n2.child_map(1)
        # ties: all children equal; gradient goes to the lowest child index
        for parent in range(6):
            kids = np.sort(cmap[parent])
            assert g[kids[0], 0] == 1.0
            assert g[kids[1:], 0].sum() == 0.0

    def test_level1_rejected(self, hier_m1_n2):
        with pytest.raises(ValueError):
            TetPool(hier_m1_n2, 1, "avg")

    @pytest.mark.parametrize("mode", ["avg", "max"])
    def test_gradcheck(self, hier_m1_n2, rng, mode):
        layer = TetPool(hier_m1_n2, 2, mode)
        x = FeatureTensor(2, rng.standard_normal((48, 2)))
        report = gradcheck_layer(layer, x, tolerance=1e-6)
        assert report.all_passed, str(report)


class TestTetUpsample:
    def test_constant_partition_of_unity(self, hier_m2_n2):
        K1 = hier_m2_n2.grid(1).num_tets
        out = tet_upsample(FeatureTensor(1, np.full((K1, 2), 3.5)), hier_m2_n2)
        assert np.abs(out.data - 3.5).max() <= 1e-12
        assert out.level == 2

    def test_isolated_parent_children_copy(self):
        # single-tet base grid: the parent has only sentinel neighbors
        from tetshape.tetgrid import GridHierarchy, TetGrid, subdivide

        g = TetGrid(1, np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]]),
                    np.array([[0, 1, 2, 3]]))
        fine, cmap = subdivide(g)
        pmap = np.zeros(8, dtype=np.int64)
        h = GridHierarchy([g, fine], [cmap], [pmap])
        x = np.array([[2.0, -1.0]])
        out = tet_upsample(FeatureTensor(1, x), h)
        assert np.abs(out.data - x[0]).max() <= 1e-12

    def test_matches_sparse_oracle(self, hier_m2_n2, rng):
        h = hier_m2_n2
        coarse, fine = h.grid(1), h.grid(2)
        x = rng.standard_normal((coarse.num_tets, 2))
        out = tet_upsample(FeatureTensor(1, x), h).data
        parent = h.parent_map(2)
        for child in rng.choice(fine.num_tets, size=40, replace=False):
            p = parent[child]
            sources = [p] + [int(j) for j in coarse.neighbors[p] if j != NONE]
            w = np.array([
                1.0 / max(np.linalg.norm(coarse.centroids[s] - fine.centroids[child]), 1e-12)
                for s in sources
            ])
            w /= w.sum()
            ref = (w[:, None] * x[sources]).sum(axis=0)
            assert np.abs(out[child] - ref).max() <= 1e-12

    def test_exclude_parent_variant(self, hier_m2_n2, rng):
        h = hier_m2_n2
        x = rng.standard_normal((h.grid(1).num_tets, 1))
        with_p = tet_upsample(FeatureTensor(1, x), h, include_parent=True).data
        without_p = tet_upsample(FeatureTensor(1, x), h, include_parent=False).data
        assert not np.allclose(with_p, without_p)

    def test_finest_level_rejected(self, hier_m2_n2, rng):
        x = FeatureTensor(2, rng.standard_normal((hier_m2_n2.finest.num_tets, 1)))
        with pytest.raises(ValueError):
            TetUpsample(hier_m2_n2, 3)

    def test_upsample_then_avg_pool_on_isolated_parent(self):
        from tetshape.tetgrid import GridHierarchy, TetGrid, subdivide

        g = TetGrid(1, np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]]),
                    np.array([[0, 1, 2, 3]]))
        fine, cmap = subdivide(g)
        h = GridHierarchy([g, fine], [cmap], [np.zeros(8, dtype=np.int64)])
        x = FeatureTensor(1, np.array([[0.7, -2.0, 3.0]]))
        up = tet_upsample(x, h)
        back = tet_pool(up, h, "avg")
        assert np.abs(back.data - x.data).max() <= 1e-12

    def test_gradcheck(self, hier_m1_n2, rng):
        layer = TetUpsample(hier_m1_n2, 2)
        x = FeatureTensor(1, rng.standard_normal((6, 2)))
        report = gradcheck_layer(layer, x, tolerance=1e-6)
        assert report.all_passed, str(report)


class TestInstanceNorm:
    def test_constant_channel_gives_shift(self):
        layer = InstanceNorm(2)
        layer.gain[:] = [2.0, 3.0]
        layer.shift[:] = [0.5, -0.5]
        out = layer.forward(FeatureTensor(1, np.full((10, 2), 7.0)))
        # constant channel has zero variance: output is the shift
        assert np.abs(out.data - [0.5, -0.5]).max() <= 1e-9

    def test_standardizes(self, rng):
        x = rng.standard_normal((500, 3)) * 4.0 + 2.0
        out = instance_norm(FeatureTensor(1, x), np.ones(3), np.zeros(3))
        assert np.abs(out.data.mean(axis=0)).max() <= 1e-9
        assert np.abs(out.data.var(axis=0) - 1.0).max() <= 1e-3

    def test_gradcheck(self, rng):
        layer = InstanceNorm(3)
        layer.gain[:] = rng.standard_normal(3)
        x = FeatureTensor(1, rng.standard_normal((40, 3)))
        report = gradcheck_layer(layer, x, tolerance=1e-5)
        assert report.all_passed, str(report)


class TestLeakyReLU:
    def test_values(self):
        out = leaky_relu(FeatureTensor(1, np.array([[1.0, -2.0]])), 0.2)
        assert out.data[0, 0] == 1.0
        assert out.data[0, 1] == pytest.approx(-0.4)

    def test_gradcheck_away_from_kink(self, rng):
        # unit projection keeps every per-entry gradient O(1), so the
        # finite-difference rounding floor stays below 1e-8
        x = rng.standard_normal((3, 2))
        x = np.where(np.abs(x) < 0.05, x + 0.1, x)
        layer = LeakyReLU(0.2)
        R = np.ones_like(x)
        layer.forward(FeatureTensor(1, x))
        analytic = layer.backward(R)
        h = 1e-5
        for idx in np.ndindex(*x.shape):
            orig = x[idx]
            x[idx] = orig + h
            lp = float((layer.forward(FeatureTensor(1, x)).data * R).sum())
            x[idx] = orig - h
            lm = float((layer.forward(FeatureTensor(1, x)).data * R).sum())
            x[idx] = orig
            numeric = (lp - lm) / (2 * h)
            rel = abs(analytic[idx] - numeric) / max(abs(analytic[idx]), abs(numeric))
            assert rel <= 1e-8


class TestLinear:
    def test_identity(self, rng):
        layer = Linear(4, 4, rng)
        layer.W = np.eye(4)
        layer.b[:] = 0.0
        x = rng.standard_normal(4)
        assert np.abs(layer.forward(x) - x).max() == 0.0

    def test_zero_weights_give_bias(self, rng):
        layer = Linear(3, 2, rng)
        layer.W[:] = 0.0
        layer.b[:] = [1.5, -2.0]
        assert np.array_equal(layer.forward(np.ones(3)), [1.5, -2.0])

    def test_shape_mismatch(self, rng):
        with pytest.raises(ValueError):
            Linear(3, 2, rng).forward(np.ones(4))

    def test_gradcheck(self, rng):
        layer = Linear(5, 3, rng)
        report = gradcheck_layer(layer, rng.standard_normal(5), tolerance=1e-6)
        assert report.all_passed, str(report)


class TestGradcheckHarness:
    def test_standard_suite_passes(self, hier_m1_n2):
        report = run_standard_gradchecks(hier_m1_n2, tolerance=1e-4, seed=0)
        assert report.all_passed, str(report)

    def test_detects_sign_flip(self, hier_m1_n2, rng):
        grid = hier_m1_n2.finest
        layer = TetConv(grid, 2, 2, rng)
        original = layer.backward

        def wrong_backward(grad_out, accumulate=True):
            return -original(grad_out, accumulate)

        layer.backward = wrong_backward
        x = FeatureTensor(2, rng.standard_normal((grid.num_tets, 2)))
        report = gradcheck_layer(layer, x, tolerance=1e-4)
        assert not report.all_passed

    def test_deterministic_under_seed(self, hier_m1_n2):
        a = run_standard_gradchecks(hier_m1_n2, tolerance=1e-4, seed=5)
        b = run_standard_gradchecks(hier_m1_n2, tolerance=1e-4, seed=5)
        assert [r.max_rel_error for r in a.results] == [r.max_rel_error for r in b.results]
