"""Tests for coupling layers, splines, and the conditional flow stack."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowinfer import autodiff as ad
from flowinfer.autodiff import RngState, Tape, Tensor, backward, grad_check
from flowinfer.flow import (
    AffineCouplingLayer,
    ConditionalFlow,
    SplineCouplingLayer,
    latent_logprob,
    sample_posterior,
)
from flowinfer.nets import ParameterStore

from numutil import logabsdets, numeric_jacobians


def small_flow(dim=4, cond_dim=3, n_affine=1, n_spline=1, hidden=(8,),
               perturb=0.0, seed=0, permute=True):
    store = ParameterStore()
    flow = ConditionalFlow(store, dim, cond_dim, n_affine=n_affine,
                           n_spline=n_spline, hidden=hidden, dropout=0.0,
                           init_seed=seed, perm_seed=seed, permute=permute)
    if perturb:
        flat = store.flatten()
        flat = flat + perturb * RngState(seed + 100).normal(flat.shape)
        store.load_flat(flat)
    return store, flow


class TestIdentityInitialization:
    def test_affine_layer_starts_as_exact_identity(self):
        store = ParameterStore()
        layer = AffineCouplingLayer(store, "l", 6, 4, (16,), RngState(0))
        x = Tensor(RngState(1).normal((7, 6)))
        cond = Tensor(RngState(2).normal((7, 4)))
        z, ld = layer.forward(x, cond)
        assert np.array_equal(z.data, x.data)
        assert np.array_equal(ld.data, np.zeros(7))

    def test_spline_layer_starts_near_identity(self):
        store = ParameterStore()
        layer = SplineCouplingLayer(store, "l", 6, 4, (16,), RngState(0))
        x = Tensor(RngState(1).normal((7, 6)))
        cond = Tensor(RngState(2).normal((7, 4)))
        z, ld = layer.forward(x, cond)
        np.testing.assert_allclose(z.data, x.data, atol=1e-12)
        np.testing.assert_allclose(ld.data, np.zeros(7), atol=1e-12)

    def test_unpermuted_stack_is_identity(self):
        _, flow = small_flow(n_affine=2, n_spline=2, permute=False)
        x = Tensor(RngState(3).normal((5, 4)))
        cond = Tensor(RngState(4).normal((5, 3)))
        z, ld = flow.forward(x, cond)
        np.testing.assert_allclose(z.data, x.data, atol=1e-12)
        np.testing.assert_allclose(ld.data, 0.0, atol=1e-12)


class TestInvertibility:
    @pytest.mark.parametrize("dim", [1, 2, 5, 8])
    def test_roundtrip_random_weights(self, dim):
        _, flow = small_flow(dim=dim, n_affine=2, n_spline=2, perturb=0.3,
                             seed=dim)
        x = Tensor(RngState(7).normal((50, dim)))
        cond = Tensor(RngState(8).normal((50, 3)))
        z, ld_f = flow.forward(x, cond)
        back, ld_i = flow.inverse(z, cond)
        np.testing.assert_allclose(back.data, x.data, atol=1e-10)
        np.testing.assert_allclose(ld_i.data, -ld_f.data, atol=1e-10)

    def test_spline_roundtrip_inside_and_outside_box(self):
        store = ParameterStore()
        layer = SplineCouplingLayer(store, "l", 4, 2, (16,), RngState(0))
        flat = store.flatten()
        store.load_flat(flat + 0.5 * RngState(5).normal(flat.shape))
        n = 10_000
        x = Tensor(RngState(6).uniform((n, 4), low=-5.0, high=5.0))
        cond = Tensor(np.tile(RngState(9).normal((1, 2)), (n, 1)))
        z, _ = layer.forward(x, cond)
        back, _ = layer.inverse(z, cond)
        assert np.max(np.abs(back.data - x.data)) < 1e-8

    @pytest.mark.parametrize("kind", ["affine", "spline"])
    def test_single_layer_roundtrip_dim_32(self, kind):
        store = ParameterStore()
        cls = AffineCouplingLayer if kind == "affine" else SplineCouplingLayer
        layer = cls(store, "l", 32, 5, (32,), RngState(11))
        flat = store.flatten()
        store.load_flat(flat + 0.3 * RngState(12).normal(flat.shape))
        x = Tensor(RngState(13).normal((40, 32)))
        cond = Tensor(RngState(14).normal((40, 5)))
        z, _ = layer.forward(x, cond)
        back, _ = layer.inverse(z, cond)
        assert np.max(np.abs(back.data - x.data)) < 1e-9

    def test_identity_outside_box_is_bitwise(self):
        store = ParameterStore()
        layer = SplineCouplingLayer(store, "l", 4, 2, (16,), RngState(0))
        flat = store.flatten()
        store.load_flat(flat + 0.5 * RngState(5).normal(flat.shape))
        x = RngState(10).uniform((20, 4), low=3.5, high=9.0)
        x[::2] *= -1.0
        xt = Tensor(x)
        cond = Tensor(RngState(11).normal((20, 2)))
        z, ld = layer.forward(xt, cond)
        # second half is outside [-3, 3] everywhere, so it passes through
        assert np.array_equal(z.data[:, 2:], x[:, 2:])
        assert np.array_equal(ld.data, np.zeros(20))


class TestJacobians:
    def test_logdet_matches_numeric_jacobian(self):
        dim = 4
        _, flow = small_flow(dim=dim, n_affine=2, n_spline=2, perturb=0.3)
        P = 10
        X = RngState(12).normal((P, dim))
        cond_rows = RngState(13).normal((P, 3))

        def fn(stacked):
            reps = stacked.shape[0] // P
            cond = Tensor(np.tile(cond_rows, (reps, 1)))
            z, _ = flow.forward(Tensor(stacked), cond)
            return z.data

        J = numeric_jacobians(fn, X, h=1e-5)
        _, ld = flow.forward(Tensor(X), Tensor(cond_rows))
        # FD rows within h of a spline knot are only O(h) accurate (C^1 there)
        np.testing.assert_allclose(ld.data, logabsdets(J), atol=1e-5)

    def test_affine_logdet_is_sum_of_scales(self):
        # for a single affine layer the numeric check has a closed form
        store = ParameterStore()
        layer = AffineCouplingLayer(store, "l", 4, 2, (8,), RngState(3))
        flat = store.flatten()
        store.load_flat(flat + 0.4 * RngState(4).normal(flat.shape))
        X = RngState(5).normal((6, 4))
        cond = RngState(6).normal((6, 2))

        def fn(stacked):
            reps = stacked.shape[0] // 6
            z, _ = layer.forward(Tensor(stacked), Tensor(np.tile(cond, (reps, 1))))
            return z.data

        J = numeric_jacobians(fn, X, h=1e-5)
        _, ld = layer.forward(Tensor(X), Tensor(cond))
        np.testing.assert_allclose(ld.data, logabsdets(J), atol=1e-6)


class TestCouplingStructure:
    def test_first_block_output_is_affine_in_first_block_input(self):
        # with the second block and conditioner fixed, the first output block
        # is elementwise affine in the first input block: difference quotients
        # between any two inputs agree and equal the (positive) scale factor
        store = ParameterStore()
        layer = AffineCouplingLayer(store, "l", 6, 4, (16,), RngState(0))
        flat = store.flatten()
        store.load_flat(flat + 0.5 * RngState(5).normal(flat.shape))
        rng = RngState(6)
        x2 = rng.normal((9, 3))
        cond = Tensor(rng.normal((9, 4)))
        a, b, c = (rng.normal((9, 3)) for _ in range(3))

        def first_block(x1):
            z, _ = layer.forward(Tensor(np.concatenate([x1, x2], axis=1)), cond)
            return z.data[:, :3]

        ratio_ab = (first_block(a) - first_block(b)) / (a - b)
        ratio_ac = (first_block(a) - first_block(c)) / (a - c)
        np.testing.assert_allclose(ratio_ab, ratio_ac, rtol=1e-9)
        assert np.all(ratio_ab > 0.0)


class TestSplineStructure:
    def setup_method(self):
        self.store = ParameterStore()
        self.layer = SplineCouplingLayer(self.store, "l", 2, 2, (16,),
                                         RngState(0), bins=8)
        flat = self.store.flatten()
        self.store.load_flat(flat + 0.7 * RngState(20).normal(flat.shape))

    def _params_for(self, cond_row):
        first = Tensor(np.zeros((1, 1)))
        cond = Tensor(cond_row.reshape(1, 2))
        return self.layer._spline_params(first, cond)

    def test_strictly_monotone_on_dense_grid(self):
        n = 4001
        grid = np.linspace(-3.0, 3.0, n)
        x = np.column_stack([np.zeros(n), grid])
        cond = np.tile(RngState(21).normal((1, 2)), (n, 1))
        z, _ = self.layer.forward(Tensor(x), Tensor(cond))
        diffs = np.diff(z.data[:, 1])
        assert np.all(diffs > 0), "spline output must increase with its input"

    def test_value_and_derivative_continuous_at_knots(self):
        xk, widths, zk, heights, slopes = self._params_for(RngState(22).normal((2,)))
        K = self.layer.bins
        get = lambda t, j: float(t.data[0, 0, j])
        worst_v = worst_d = 0.0
        for j in range(1, K):
            # approach knot j from the left (xi=1 in bin j-1) and right (xi=0 in bin j)
            for side, b, xi in (("left", j - 1, 1.0), ("right", j, 0.0)):
                phi = get(heights, b) / get(widths, b)
                v, ldv = SplineCouplingLayer._evaluate(
                    Tensor(np.full((1, 1), xi)),
                    Tensor(np.full((1, 1), get(zk, b))),
                    Tensor(np.full((1, 1), get(heights, b))),
                    Tensor(np.full((1, 1), phi)),
                    Tensor(np.full((1, 1), get(slopes, b))),
                    Tensor(np.full((1, 1), get(slopes, b + 1))))
                if side == "left":
                    v_left, d_left = v.item(), np.exp(ldv.item())
                else:
                    worst_v = max(worst_v, abs(v.item() - v_left))
                    worst_d = max(worst_d, abs(np.exp(ldv.item()) - d_left))
        assert worst_v < 1e-8
        assert worst_d < 1e-8

    def test_derivative_matches_central_differences(self):
        # dim 2 keeps the transformed block scalar, so the layer's logdet is
        # the pointwise log-derivative; compare it to a central difference at
        # points away from the knots (the map is only C^1 there)
        n = 200
        x1 = RngState(26).normal((n, 1))
        cond = Tensor(RngState(27).normal((n, 2)))
        x2 = RngState(28).uniform((n, 1), low=-2.9, high=2.9)
        xk, _, _, _, _ = self.layer._spline_params(Tensor(x1), cond)
        near_knot = np.min(np.abs(x2 - xk.data[:, 0, :]), axis=1) < 1e-3
        keep = ~near_knot
        assert keep.sum() > 150

        def fwd(second):
            z, ld = self.layer.forward(
                Tensor(np.concatenate([x1, second], axis=1)), cond)
            return z.data[:, 1], ld.data

        h = 1e-5
        _, ld = fwd(x2)
        up, _ = fwd(x2 + h)
        down, _ = fwd(x2 - h)
        fd = (up - down) / (2.0 * h)
        assert np.max(np.abs(np.exp(ld[keep]) - fd[keep])) < 1e-6

    def test_bin_widths_respect_absolute_minimum(self):
        # drive one width logit to a huge value; the rest must still get
        # their guaranteed minimum and the total must equal the box span
        bias = self.store["l.cond.out.b"].data.copy()
        bias[0] = 50.0
        self.store.load_flat(np.concatenate(
            [self.store[n].data.ravel() if n != "l.cond.out.b" else bias
             for n in self.store]))
        _, widths, _, heights, _ = self._params_for(RngState(29).normal((2,)))
        for t in (widths, heights):
            assert np.min(t.data) >= self.layer.min_bin * (1.0 - 1e-12)
            np.testing.assert_allclose(t.data.sum(), 6.0, atol=1e-12)
        assert np.min(widths.data) < 2.0 * self.layer.min_bin

    def test_boundary_derivative_is_one(self):
        xk, widths, zk, heights, slopes = self._params_for(RngState(23).normal((2,)))
        assert slopes.data[0, 0, 0] == 1.0
        assert slopes.data[0, 0, -1] == 1.0

    def test_knots_span_the_box(self):
        xk, _, zk, _, _ = self._params_for(RngState(24).normal((2,)))
        assert xk.data[0, 0, 0] == -3.0
        np.testing.assert_allclose(xk.data[0, 0, -1], 3.0, atol=1e-12)
        np.testing.assert_allclose(zk.data[0, 0, -1], 3.0, atol=1e-12)

    def test_inverse_maps_knots_to_knots(self):
        cond_row = RngState(25).normal((2,))
        xk, _, zk, _, _ = self._params_for(cond_row)
        K = self.layer.bins
        for j in range(K + 1):
            z_val = zk.data[0, 0, j]
            z = Tensor(np.array([[0.0, z_val]]))
            cond = Tensor(cond_row.reshape(1, 2))
            x, _ = self.layer.inverse(z, cond)
            assert abs(x.data[0, 1] - xk.data[0, 0, j]) < 1e-10


class TestGradients:
    def test_loss_gradient_through_full_stack(self):
        store, flow = small_flow(dim=4, cond_dim=3, hidden=(8,), perturb=0.2)
        theta = Tensor(RngState(30).normal((6, 4)))
        cond = Tensor(RngState(31).normal((6, 3)))

        def f():
            z, ld = flow.forward(theta, cond)
            half_sq = ad.mul(ad.reduce_sum(ad.mul(z, z), axis=-1), Tensor(0.5))
            return ad.reduce_mean(ad.sub(half_sq, ld))

        assert grad_check(f, store, h=1e-5) < 1e-6


class TestLatentDensity:
    def test_matches_closed_form_gaussian(self):
        from scipy import stats
        z = RngState(40).normal((20, 5))
        got = latent_logprob(Tensor(z)).data
        want = stats.multivariate_normal(np.zeros(5), np.eye(5)).logpdf(z)
        np.testing.assert_allclose(got, want, atol=1e-12)


class TestSampling:
    def test_identity_flow_gives_standard_normal(self):
        _, flow = small_flow(dim=3, n_affine=1, n_spline=1, permute=True)
        draws = sample_posterior(flow, np.zeros(3), 20_000, RngState(50))
        assert np.abs(draws.mean(axis=0)).max() < 0.05
        assert np.abs(draws.std(axis=0) - 1.0).max() < 0.05

    def test_sampling_is_deterministic_given_stream(self):
        _, flow = small_flow(dim=3, perturb=0.2)
        cond = RngState(51).normal((3,))
        a = sample_posterior(flow, cond, 100, RngState(52))
        b = sample_posterior(flow, cond, 100, RngState(52))
        assert np.array_equal(a, b)


class TestSerialization:
    def test_descriptor_roundtrip_reproduces_outputs(self):
        store, flow = small_flow(dim=5, n_affine=2, n_spline=2, perturb=0.3)
        desc = flow.descriptor()
        store2 = ParameterStore()
        flow2 = ConditionalFlow.from_descriptor(store2, desc)
        store2.load_flat(store.flatten())
        x = Tensor(RngState(60).normal((8, 5)))
        cond = Tensor(RngState(61).normal((8, 3)))
        z1, ld1 = flow.forward(x, cond)
        z2, ld2 = flow2.forward(x, cond)
        assert np.array_equal(z1.data, z2.data)
        assert np.array_equal(ld1.data, ld2.data)

    def test_permutations_deterministic_given_seed(self):
        _, f1 = small_flow(seed=9)
        _, f2 = small_flow(seed=9)
        for p, q in zip(f1.perms, f2.perms):
            assert np.array_equal(p, q)


class TestProperties:
    @given(st.integers(0, 2 ** 16), st.sampled_from([2, 3, 6]))
    @settings(max_examples=15, deadline=None)
    def test_roundtrip_property(self, seed, dim):
        _, flow = small_flow(dim=dim, n_affine=1, n_spline=1, perturb=0.25,
                             seed=seed % 97)
        x = Tensor(RngState(seed).normal((12, dim)))
        cond = Tensor(RngState(seed + 1).normal((12, 3)))
        z, _ = flow.forward(x, cond)
        back, _ = flow.inverse(z, cond)
        assert np.max(np.abs(back.data - x.data)) < 1e-8
