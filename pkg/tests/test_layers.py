import numpy as np
import numpy.testing as npt
import pytest

from gmlp import layers as L
from gmlp import tensor as T
from gmlp.errors import ConfigError, ShapeError
from gmlp.layers import BatchNormState, GroupFcParams, RoutingParams
from gmlp.tensor import Tensor


def routing_from_assignment(assignment, d, scale=1e6, temperature=1.0, k=None, m=None):
    """RoutingParams whose rows are saturated one-hots at the given feature indices."""
    assignment = np.asarray(assignment)
    km = assignment.size
    if k is None:
        k, m = 1, km
    psi = np.zeros((km, d))
    psi[np.arange(km), assignment] = scale
    return RoutingParams(Tensor(psi, requires_grad=True), temperature, k, m, d)


class TestGroupSelect:
    def test_hard_gather(self):
        r = routing_from_assignment([2, 0], d=3, k=1, m=2)
        x = Tensor([[1.0, 2.0, 3.0]])
        out = L.group_select_forward(None, x, r, mode="hard")
        npt.assert_array_equal(out.data, [[[3.0, 1.0]]])

    def test_relaxed_saturated_matches_hard(self):
        rng = np.random.default_rng(0)
        r = routing_from_assignment([2, 0, 1, 1], d=3, k=2, m=2)
        x = Tensor(rng.normal(size=(5, 3)))
        relaxed = L.group_select_forward(None, x, r, mode="relaxed")
        hard = L.group_select_forward(None, x, r, mode="hard")
        npt.assert_allclose(relaxed.data, hard.data, atol=1e-9)

    def test_relaxed_uniform_mixes_to_mean(self):
        r = RoutingParams(Tensor(np.zeros((2, 3))), 1.0, 1, 2, 3)
        out = L.group_select_forward(None, Tensor([[3.0, 6.0, 9.0]]), r, mode="relaxed")
        npt.assert_allclose(out.data, [[[6.0, 6.0]]])

    def test_dimension_mismatch(self):
        r = RoutingParams(Tensor(np.zeros((2, 3))), 1.0, 1, 2, 3)
        with pytest.raises(ShapeError):
            L.group_select_forward(None, Tensor([[1.0, 2.0]]), r)

    def test_temperature_annealing_converges_to_hard(self):
        rng = np.random.default_rng(1)
        psi = rng.normal(size=(6, 5))
        # enforce unique row maxima with a clear margin
        psi[np.arange(6), psi.argmax(axis=1)] += 3.0
        x = Tensor(rng.normal(size=(4, 5)))
        r = RoutingParams(Tensor(psi), 1.0, 3, 2, 5)
        hard = L.group_select_forward(None, x, r, mode="hard").data
        gaps = []
        for tau in (1.0, 0.1, 0.01, 0.001):
            r.temperature = tau
            relaxed = L.group_select_forward(None, x, r, mode="relaxed").data
            gaps.append(np.abs(relaxed - hard).max())
        assert all(a >= b for a, b in zip(gaps, gaps[1:]))
        assert gaps[-1] < 1e-6

    def test_feature_reuse_across_groups(self):
        # one feature may appear in multiple groups
        r = routing_from_assignment([1, 1, 1, 0], d=4, k=2, m=2)
        assert list(L.hard_assignment(r)) == [1, 1, 1, 0]

    def test_tie_breaks_to_lowest_index(self):
        r = RoutingParams(Tensor(np.array([[3.0, 3.0]])), 1.0, 1, 1, 2)
        assert L.hard_assignment(r)[0] == 0


class TestGroupFc:
    def _params(self, k, m, rng=None):
        if rng is None:
            w = np.tile(np.eye(m), (k, 1, 1))
            b = np.zeros((k, m))
        else:
            w = rng.normal(size=(k, m, m))
            b = rng.normal(size=(k, m))
        return GroupFcParams(Tensor(w, requires_grad=True), Tensor(b, requires_grad=True))

    def test_identity_weights(self):
        rng = np.random.default_rng(2)
        z = Tensor(rng.normal(size=(3, 4, 2)))
        out = L.group_fc_forward(None, z, self._params(4, 2))
        npt.assert_allclose(out.data, z.data)

    def test_zeroed_group_is_local(self):
        rng = np.random.default_rng(3)
        p = self._params(2, 2, rng)
        p.weights.data[0] = 0.0
        p.biases.data[0] = 0.0
        z = Tensor(rng.normal(size=(3, 2, 2)))
        out = L.group_fc_forward(None, z, p)
        npt.assert_array_equal(out.data[:, 0], np.zeros((3, 2)))
        assert np.abs(out.data[:, 1]).min() > 0

    def test_group_count_mismatch(self):
        with pytest.raises(ShapeError):
            L.group_fc_forward(None, Tensor(np.zeros((1, 3, 2))), self._params(4, 2))

    def test_gradient_locality(self):
        # loss reading only group 1 gets zero gradient blocks for group 0
        rng = np.random.default_rng(4)
        p = self._params(2, 3, rng)
        z = Tensor(rng.normal(size=(5, 2, 3)), requires_grad=True)
        tape = T.Tape()
        out = L.group_fc_forward(tape, z, p)
        mask = np.zeros((5, 2, 3))
        mask[:, 1, :] = rng.normal(size=(5, 3))
        tape.backward(T.tsum(tape, T.mul(tape, out, Tensor(mask))))
        npt.assert_array_equal(p.weights.grad[0], np.zeros((3, 3)))
        npt.assert_array_equal(p.biases.grad[0], np.zeros(3))
        npt.assert_array_equal(z.grad[:, 0], np.zeros((5, 3)))
        assert np.abs(p.weights.grad[1]).max() > 0

    def test_parameter_count(self):
        p = self._params(7, 3)
        assert p.weights.size + p.biases.size == 7 * (3 * 3 + 3)


class TestGroupPool:
    def test_max_example(self):
        z = Tensor([[[1.0, 4.0], [3.0, 2.0]]])
        npt.assert_array_equal(L.group_pool_forward(None, z, "max").data, [[[3.0, 4.0]]])

    def test_mean_example(self):
        z = Tensor([[[1.0, 4.0], [3.0, 2.0]]])
        npt.assert_array_equal(L.group_pool_forward(None, z, "mean").data, [[[2.0, 3.0]]])

    def test_linear_selection_matrix(self):
        # weight [I | 0] returns the first group untouched
        m = 2
        w = np.zeros((1, m, 2 * m))
        w[0, :, :m] = np.eye(m)
        z = Tensor([[[1.0, 4.0], [3.0, 2.0]]])
        out = L.group_pool_forward(None, z, "linear", params=Tensor(w))
        npt.assert_array_equal(out.data, [[[1.0, 4.0]]])

    def test_linear_requires_params(self):
        with pytest.raises(ConfigError):
            L.group_pool_forward(None, Tensor(np.zeros((1, 2, 2))), "linear")

    def test_indivisible_group_count(self):
        with pytest.raises(ShapeError):
            L.group_pool_forward(None, Tensor(np.zeros((1, 3, 2))), "max", branching=2)

    def test_branching_four_strata(self):
        # output group i merges input groups {i, i+2, i+4, i+6} for k'=8, b=4
        z = np.zeros((1, 8, 1))
        z[0, :, 0] = np.arange(8.0)
        out = L.group_pool_forward(None, Tensor(z), "max", branching=4)
        npt.assert_array_equal(out.data[0, :, 0], [6.0, 7.0])

    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            L.group_pool_forward(None, Tensor(np.zeros((1, 2, 2))), "median")


class TestBatchNorm:
    def test_two_point_standardization(self):
        st = BatchNormState.create(1)
        out = L.batchnorm_forward(None, Tensor([[1.0], [3.0]]), st, training=True)
        npt.assert_allclose(out.data, [[-1.0], [1.0]], atol=1e-3)

    def test_zero_gamma_gives_beta(self):
        st = BatchNormState.create(3)
        st.gamma.data[:] = 0.0
        st.beta.data[:] = 2.5
        rng = np.random.default_rng(5)
        out = L.batchnorm_forward(None, Tensor(rng.normal(size=(4, 3))), st, training=True)
        npt.assert_allclose(out.data, np.full((4, 3), 2.5))

    def test_eval_ignores_batch_composition(self):
        st = BatchNormState.create(2)
        rng = np.random.default_rng(6)
        L.batchnorm_forward(None, Tensor(rng.normal(size=(16, 2))), st, training=True)
        a = rng.normal(size=(4, 2))
        out_alone = L.batchnorm_forward(None, Tensor(a[:1]), st, training=False).data
        out_batched = L.batchnorm_forward(None, Tensor(a), st, training=False).data
        npt.assert_array_equal(out_alone[0], out_batched[0])

    def test_training_needs_two_rows(self):
        st = BatchNormState.create(2)
        with pytest.raises(Exception):
            L.batchnorm_forward(None, Tensor(np.zeros((1, 2))), st, training=True)

    def test_running_moments_update(self):
        st = BatchNormState.create(1)
        x = Tensor(np.array([[0.0], [4.0]]))
        L.batchnorm_forward(None, x, st, training=True)
        npt.assert_allclose(st.running_mean, [0.2])  # 0.9*0 + 0.1*2
        npt.assert_allclose(st.running_var, [1.3])  # 0.9*1 + 0.1*4


class TestDropout:
    def test_rate_zero_identity(self):
        x = Tensor(np.arange(6.0).reshape(2, 3))
        out = L.dropout_forward(None, x, 0.0, True, np.random.default_rng(0))
        npt.assert_array_equal(out.data, x.data)

    def test_eval_identity(self):
        x = Tensor(np.arange(6.0).reshape(2, 3))
        out = L.dropout_forward(None, x, 0.9, False, np.random.default_rng(0))
        assert out is x

    def test_kept_fraction_monte_carlo(self):
        rng = np.random.default_rng(7)
        x = Tensor(np.ones(100_000))
        out = L.dropout_forward(None, x, 0.3, True, rng)
        kept = np.count_nonzero(out.data) / x.size
        assert abs(kept - 0.700) < 0.01
        # survivors carry the inverse scale
        npt.assert_allclose(out.data[out.data != 0], 1.0 / 0.7)


class TestConcat:
    def test_flatten_order(self):
        z = Tensor([[[1.0, 2.0], [3.0, 4.0]]])
        npt.assert_array_equal(L.concat_groups(None, z).data, [[1.0, 2.0, 3.0, 4.0]])

    def test_round_trip(self):
        rng = np.random.default_rng(8)
        z = Tensor(rng.normal(size=(3, 4, 2)))
        flat = L.concat_groups(None, z)
        npt.assert_array_equal(flat.data.reshape(3, 4, 2), z.data)

    def test_batch_rows_preserved(self):
        z = Tensor(np.arange(12.0).reshape(3, 2, 2))
        out = L.concat_groups(None, z)
        assert out.shape == (3, 4)
        npt.assert_array_equal(out.data[1], z.data[1].reshape(-1))
