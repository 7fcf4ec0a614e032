import numpy as np
import pytest

from boelab import autodiff as ad
from boelab.autodiff import RowMask, Tape
from boelab.exceptions import ContractError, NumericError, ShapeError
from boelab.model import Denoiser, DenoiserConfig


def grads_of(fn, *arrays, dtype=np.float64):
    tape = Tape(dtype)
    leaves = [tape.leaf(a) for a in arrays]
    root = fn(*leaves)
    g = ad.backward(root)
    return root, [g.get(x) for x in leaves]


class TestRecord:
    def test_matmul_shape(self):
        out = ad.matmul(np.ones((2, 3), np.float32), np.ones((3, 4), np.float32))
        assert out.shape == (2, 4)

    def test_softmax_of_equal_logits_is_uniform(self):
        out = ad.softmax_rows(np.zeros((1, 2), np.float32))
        np.testing.assert_array_equal(out.data, [[0.5, 0.5]])

    def test_log_softmax_sum_gradient_by_hand(self):
        # d/dz log(softmax(z)_0) = onehot(0) - softmax(z)
        z = np.array([[0.3, -0.2]])
        pick = np.array([[1.0, 0.0]])
        _, (g,) = grads_of(lambda x: ad.sum(ad.mul(ad.log(ad.softmax_rows(x)), pick)), z)
        p = np.exp(z) / np.exp(z).sum()
        np.testing.assert_allclose(g, np.array([[1.0, 0.0]]) - p, rtol=1e-12)

    def test_shape_error_names_op_and_shapes(self):
        with pytest.raises(ShapeError, match=r"matmul.*\(2, 3\).*\(2, 3\)"):
            ad.matmul(np.ones((2, 3), np.float32), np.ones((2, 3), np.float32))

    def test_unknown_op_rejected(self):
        with pytest.raises(ContractError):
            ad.record("no_such_op", (np.ones(2, np.float32),))

    def test_inputs_on_different_tapes_rejected(self):
        a, b = Tape().leaf(np.ones((2, 2))), Tape().leaf(np.ones((2, 2)))
        with pytest.raises(ContractError):
            ad.add(a, b)

    def test_float32_by_default(self):
        assert Tape().leaf(np.ones(3)).data.dtype == np.float32


class TestBackward:
    def test_square_at_three(self):
        _, (g,) = grads_of(lambda x: ad.sum(ad.mul(x, x)), np.array([3.0]))
        assert g[0] == 6.0

    def test_layer_norm_weighted_sum_matches_differences(self):
        # sum(layer_norm(x)) is identically 0, so a fixed weighting is used
        rng = np.random.default_rng(0)
        w = rng.normal(size=(3, 5))
        err = ad.grad_check(lambda tp, x: ad.sum(ad.mul(ad.layer_norm_rows(x), w.astype(tp.dtype))),
                            rng.normal(size=(3, 5)), eps=1e-3, dtype=np.float64)
        assert err < 1e-4

    def test_unrelated_root_gives_no_gradient(self):
        tape = Tape()
        x = tape.leaf(np.ones(3))
        y = tape.leaf(np.ones(3))
        g = ad.backward(ad.sum(ad.mul(y, y)))
        assert x not in g

    def test_non_scalar_root_rejected(self):
        tape = Tape()
        x = tape.leaf(np.ones((2, 2)))
        with pytest.raises(ContractError):
            ad.backward(ad.mul(x, x))

    def test_constants_receive_no_gradient(self):
        tape = Tape()
        x = tape.leaf(np.ones(3))
        c = ad.Tensor(np.full(3, 2.0, np.float32))
        g = ad.backward(ad.sum(ad.mul(x, c)))
        assert c not in g
        np.testing.assert_array_equal(g[x], [2.0, 2.0, 2.0])

    def test_each_node_visited_once(self):
        tape = Tape()
        x = tape.leaf(np.ones((2, 2)))
        y = ad.mul(x, x)
        root = ad.sum(ad.add(y, y))
        ad.backward(root)
        assert tape.last_backward.nodes == len(tape)

    def test_backward_visits_bounded_by_forward(self):
        rng = np.random.default_rng(1)
        tape = Tape()
        x = tape.leaf(rng.normal(size=(4, 6)))
        w = tape.leaf(rng.normal(size=(6, 6)))
        h = ad.relu(ad.matmul(ad.layer_norm_rows(x), w))
        root = ad.sum(ad.log_softmax_rows(h))
        ad.backward(root)
        assert tape.last_backward.rows <= 2 * tape.forward_rows


class TestRowDetach:
    def setup_method(self):
        rng = np.random.default_rng(2)
        self.x = rng.normal(size=(2, 3))
        self.w = rng.normal(size=(3, 3))

    def run(self, mask):
        tape = Tape(np.float64)
        x = tape.leaf(self.x)
        y = ad.matmul(x, self.w)
        if mask is not None:
            y = ad.row_detach(y, mask)
        root = ad.sum(ad.mul(y, y))
        return root, ad.backward(root).get(x)

    def test_forward_unchanged(self):
        y = ad.matmul(Tape().leaf(self.x), self.w.astype(np.float32))
        z = ad.row_detach(y, RowMask([1], 2))
        assert np.array_equal(y.data, z.data)

    def test_all_rows_equals_dense(self):
        _, dense = self.run(None)
        _, full = self.run(RowMask.all(2))
        assert np.array_equal(dense, full)

    def test_empty_mask_silences_everything(self):
        _, g = self.run(RowMask([], 2))
        assert g is None or not np.any(g)

    def test_single_row(self):
        _, dense = self.run(None)
        _, g = self.run(RowMask([0], 2))
        np.testing.assert_array_equal(g[0], dense[0])
        np.testing.assert_array_equal(g[1], 0.0)

    def test_out_of_range_rejected(self):
        with pytest.raises(ContractError):
            RowMask([2], 2)


class TestAttention:
    def test_rows_sum_of_values_when_uniform(self):
        # identical keys give uniform weights, so each output row is the mean of v
        q = np.zeros((3, 4), np.float32)
        v = np.arange(12, dtype=np.float32).reshape(3, 4)
        out = ad.attention(q, q, v, heads=2)
        np.testing.assert_allclose(out.data, np.tile(v.mean(axis=0), (3, 1)), rtol=1e-6)

    def test_bias_blocks_positions(self):
        q = np.zeros((2, 2), np.float32)
        v = np.array([[1.0, 0.0], [0.0, 1.0]], np.float32)
        bias = np.array([[0.0, -1e9], [-1e9, 0.0]], np.float32)
        np.testing.assert_allclose(ad.attention(q, q, v, bias=bias).data, v)

    def test_heads_must_divide_width(self):
        a = np.zeros((2, 3), np.float32)
        with pytest.raises(ContractError):
            ad.attention(a, a, a, heads=2)

    @pytest.mark.parametrize("rows", [None, [1], [0, 2]])
    def test_sparse_query_gradient(self, rows):
        rng = np.random.default_rng(4)
        q = rng.normal(size=(4, 4))
        w = rng.normal(size=(4, 4))

        def fn(tp, x):
            z = ad.attention(x, ad.matmul(x, w.astype(tp.dtype)), x, heads=2)
            if rows is not None:
                z = ad.row_select(z, np.array(rows))
            return ad.sum(ad.mul(z, z))

        assert ad.grad_check(fn, q, eps=1e-5, dtype=np.float64) < 1e-6


class TestGradCheck:
    def test_quadratic_form_is_exact(self):
        a = np.array([[2.0, 0.5], [0.5, 1.0]])
        err = ad.grad_check(lambda tp, x: ad.sum(ad.mul(ad.matmul(x, a.astype(tp.dtype)), x)),
                            np.array([[0.3, -0.7]]), dtype=np.float64)
        assert err < 1e-6

    def test_denoiser_readout(self):
        model = Denoiser.initialize(DenoiserConfig(8, 16, d_model=16, n_layers=1, n_heads=2, d_hidden=32), 5)
        tokens = np.array([16, 3, 16, 16, 7, 16, 1, 16])
        rows = np.flatnonzero(tokens == 16)
        err = ad.grad_check(lambda tp, x: model.readout(tp, x, rows), model.embed(tokens), eps=1e-5,
                            dtype=np.float64)
        assert err < 1e-3

    @pytest.mark.parametrize("eps", [0.0, -1e-3, float("nan")])
    def test_bad_eps_rejected(self, eps):
        with pytest.raises(ContractError):
            ad.grad_check(lambda tp, x: ad.sum(x), np.ones(2), eps=eps)

    def test_non_finite_point_rejected(self):
        with pytest.raises(NumericError):
            ad.grad_check(lambda tp, x: ad.sum(x), np.array([1.0, np.inf]))

    def test_relu_kink_is_stepped_around(self):
        # 1e-4 sits inside the default step, so the difference would straddle the kink
        x = np.array([[1e-4, -0.5, 0.8]])
        rep = ad.grad_check(lambda tp, v: ad.sum(ad.relu(v)), x, eps=1e-3, dtype=np.float64, report=True)
        assert rep.max_error < 1e-6
        assert rep.shrunk == 1
