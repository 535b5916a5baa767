import numpy as np
import pytest

from texturestat.qco import qco1d, quantize_encode, quantization_levels
from texturestat.tem import (TemParams, build_level_graph, init_tem_params,
                             reassign, reconstruct_levels,
                             reference_hist_equalize, tem_forward)
from texturestat.tensor import (LinearLayer, ShapeError, Tensor, init_linear,
                                init_mlp, matmul)

from conftest import onehot_encoding


@pytest.fixture
def params(rng):
    return init_tem_params(rng, 2, mlp_hidden=3, mlp_out=4, proj_dim=2, out_channels=3)


class TestReferenceHistEqualize:
    def test_uniform_counts(self):
        np.testing.assert_allclose(reference_hist_equalize([1, 1, 1, 1], 4),
                                   [0.75, 1.5, 2.25, 3.0])

    def test_all_mass_first(self):
        np.testing.assert_allclose(reference_hist_equalize([4, 0, 0, 0], 4),
                                   [3.0, 3.0, 3.0, 3.0])

    def test_nondecreasing_and_bounded(self, rng):
        for _ in range(30):
            f = rng.uniform(0, 10, size=16)
            out = reference_hist_equalize(f, 16)
            assert (np.diff(out) >= 0).all()
            assert out.min() >= 0.0 and out.max() <= 15.0 + 1e-12

    def test_all_zero_errors(self):
        with pytest.raises(ValueError):
            reference_hist_equalize(np.zeros(4), 4)

    def test_negative_errors(self):
        with pytest.raises(ValueError):
            reference_hist_equalize([1.0, -1.0], 2)

    def test_accepts_tensor(self):
        out = reference_hist_equalize(Tensor([2.0, 2.0]), 2)
        np.testing.assert_allclose(out, [0.5, 1.0])


class TestBuildLevelGraph:
    def test_zero_projection_gives_uniform(self, rng):
        params = init_tem_params(rng, 2, mlp_hidden=3, mlp_out=4,
                                 proj_dim=2, out_channels=3)
        params.phi1.weight.data[:] = 0.0
        params.phi1.bias.data[:] = 0.0
        d = Tensor(rng.normal(size=(6, 5)))
        x = build_level_graph(d, params)
        np.testing.assert_allclose(x.data, np.full((5, 5), 0.2), atol=1e-12)

    def test_hand_two_by_two(self):
        phi1 = LinearLayer(Tensor([[1.0, 0.0]]), Tensor([0.0]))
        phi2 = LinearLayer(Tensor([[0.0, 1.0]]), Tensor([0.0]))
        phi3 = LinearLayer(Tensor(np.eye(2)), Tensor(np.zeros(2)))
        mlp = init_mlp(np.random.default_rng(0), 2, 2, 2)
        params = TemParams(phi1, phi2, phi3, mlp)
        d = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))
        # keys = [1, 2], queries = [3, 4]; M = outer(keys, queries)
        m = np.array([[3.0, 4.0], [6.0, 8.0]])
        e = np.exp(m - m.max(axis=0))
        expected = e / e.sum(axis=0)
        np.testing.assert_allclose(build_level_graph(d, params).data, expected, rtol=1e-12)

    def test_columns_sum_to_one(self, rng, params):
        for _ in range(20):
            d = Tensor(rng.normal(size=(6, 4)) * 3)
            x = build_level_graph(d, params)
            np.testing.assert_allclose(x.data.sum(axis=0), 1.0, atol=1e-9)


class TestReconstructLevels:
    def test_identity_graph(self, rng, params):
        d = Tensor(rng.normal(size=(6, 4)))
        out = reconstruct_levels(d, Tensor(np.eye(4)), params)
        phi3d = matmul(params.phi3.weight, d).data + params.phi3.bias.data[:, None]
        np.testing.assert_allclose(out.data, phi3d, rtol=1e-12)

    def test_uniform_graph_averages(self, rng, params):
        d = Tensor(rng.normal(size=(6, 4)))
        out = reconstruct_levels(d, Tensor(np.full((4, 4), 0.25)), params)
        phi3d = matmul(params.phi3.weight, d).data + params.phi3.bias.data[:, None]
        col_mean = phi3d.mean(axis=1, keepdims=True)
        np.testing.assert_allclose(out.data, np.tile(col_mean, (1, 4)), rtol=1e-10)

    def test_matmul_oracle(self, rng, params):
        d = rng.normal(size=(6, 4))
        x = rng.uniform(0, 1, size=(4, 4))
        out = reconstruct_levels(Tensor(d), Tensor(x), params)
        phi3d = params.phi3.weight.data @ d + params.phi3.bias.data[:, None]
        np.testing.assert_allclose(out.data, phi3d @ x, rtol=1e-12)


class TestReassign:
    def test_onehot_selects_column(self, rng):
        l_prime = Tensor(rng.normal(size=(3, 4)))
        e = Tensor(onehot_encoding([2, 0, 3, 1, 2, 0], 4))
        out = reassign(l_prime, e, 2, 3)
        flat = out.data.reshape(3, 6)
        for i, k in enumerate([2, 0, 3, 1, 2, 0]):
            np.testing.assert_array_equal(flat[:, i], l_prime.data[:, k])

    def test_zero_column_zero_feature(self, rng):
        l_prime = Tensor(rng.normal(size=(3, 4)))
        e = onehot_encoding([1, 1, 1, 1], 4)
        e[:, 2] = 0.0
        out = reassign(l_prime, Tensor(e), 2, 2)
        assert np.array_equal(out.data.reshape(3, 4)[:, 2], np.zeros(3))

    def test_matmul_oracle(self, rng):
        l_prime = rng.normal(size=(3, 4))
        e = rng.uniform(0, 1, size=(4, 6))
        out = reassign(Tensor(l_prime), Tensor(e), 2, 3)
        np.testing.assert_allclose(out.data, (l_prime @ e).reshape(3, 2, 3), rtol=1e-12)

    def test_size_mismatch(self, rng):
        with pytest.raises(ShapeError):
            reassign(Tensor(rng.normal(size=(3, 4))),
                     Tensor(rng.uniform(size=(4, 6))), 2, 2)


class TestTemForward:
    def test_shapes_and_finite(self, rng, params):
        for _ in range(50):
            a = Tensor(rng.normal(size=(2, 3, 4)))
            out = tem_forward(a, 3, params)
            assert out.shape == (3, 3, 4)
            assert np.isfinite(out.data).all()

    def test_constant_input_constant_output(self, rng, params):
        out = tem_forward(Tensor(np.full((2, 4, 4), 0.9)), 3, params)
        flat = out.data.reshape(3, -1)
        np.testing.assert_allclose(flat, np.broadcast_to(flat[:, :1], flat.shape),
                                   atol=1e-9)

    def test_spatial_equivariance(self, rng, params):
        a = rng.normal(size=(2, 3, 4))
        perm = rng.permutation(12)
        a_perm = a.reshape(2, 12)[:, perm].reshape(2, 3, 4)
        out = tem_forward(Tensor(a), 3, params).data.reshape(3, 12)
        out_perm = tem_forward(Tensor(a_perm), 3, params).data.reshape(3, 12)
        np.testing.assert_allclose(out[:, perm], out_perm, atol=1e-9)

    def test_graph_off_is_direct_assignment(self, rng, params):
        a = Tensor(rng.normal(size=(2, 3, 4)))
        out = tem_forward(a, 3, params, use_graph=False)
        q = qco1d(a, 3, params.qco_mlp)
        phi3d = params.phi3.weight.data @ q.statfeat.data + params.phi3.bias.data[:, None]
        np.testing.assert_allclose(out.data, (phi3d @ q.encoding.data).reshape(3, 3, 4),
                                   rtol=1e-10, atol=1e-12)

    def test_graph_changes_output(self, rng, params):
        a = Tensor(rng.normal(size=(2, 3, 4)))
        on = tem_forward(a, 3, params, use_graph=True)
        off = tem_forward(a, 3, params, use_graph=False)
        assert not np.allclose(on.data, off.data)

    def test_identity_graph_onehot_reduces_to_lookup(self, rng, params):
        # with the graph pinned to identity and a one-hot encoding, every
        # pixel must receive exactly its level's column of the projected stats
        d = Tensor(rng.normal(size=(6, 4)))
        l_prime = reconstruct_levels(d, Tensor(np.eye(4)), params)
        idx = [0, 3, 1, 2, 2, 0]
        out = reassign(l_prime, Tensor(onehot_encoding(idx, 4)), 2, 3)
        phi3d = params.phi3.weight.data @ d.data + params.phi3.bias.data[:, None]
        flat = out.data.reshape(3, 6)
        for i, k in enumerate(idx):
            np.testing.assert_array_equal(flat[:, i], phi3d[:, k])


class TestTemParams:
    def test_projection_width_validation(self, rng):
        phi1 = init_linear(rng, 6, 2)
        phi2 = init_linear(rng, 6, 3)
        phi3 = init_linear(rng, 6, 4)
        with pytest.raises(ShapeError):
            TemParams(phi1, phi2, phi3, init_mlp(rng, 2, 3, 4))
