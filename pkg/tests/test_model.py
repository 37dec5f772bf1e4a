import math

import numpy as np

from consjl.jl import ProjectionMatrix
from consjl.model import (
    ControlVector,
    FlockState,
    ModelParams,
    Moments,
    bilinear_form,
    bilinear_form_pairwise,
    consensus_margin,
    gamma_functional,
    gamma_squared,
    kernel_a,
    kernel_derivative,
    lipschitz_constant,
    margin_of,
    moments,
    perp_decompose,
)

from .base import TestBase  # type: ignore


class TestModelParams(TestBase):
    def test_defaults(self):
        params = ModelParams(N=9, d=100)
        self.assertEqual(params.K, 1.0)
        self.assertEqual(params.sigma, 1.0)
        self.assertEqual(params.a0, 1.0)

    def test_a0(self):
        params = ModelParams(N=3, d=2, K=2.0, sigma=2.0, beta=1.0)
        self.assertAlmostEqual(params.a0, 0.5)

    def test_invalid(self):
        for kwargs in (
            dict(N=1, d=3),
            dict(N=3, d=0),
            dict(N=3, d=3, K=0.0),
            dict(N=3, d=3, sigma=-1.0),
            dict(N=3, d=3, beta=-0.1),
            dict(N=3, d=3, theta=0.0),
            dict(N=3, d=3, tau=0.0),
        ):
            with self.assertRaises(ValueError, msg=str(kwargs)):
                ModelParams(**kwargs)

    def test_zero_beta_allowed(self):
        params = ModelParams(N=2, d=1, beta=0.0)
        self.assertEqual(kernel_a(5.0, params), 1.0)


class TestFlockState(TestBase):
    def test_arrays_are_read_only(self):
        state = FlockState(np.ones((3, 2)), np.zeros((3, 2)))
        with self.assertRaises(ValueError):
            state.x[0, 0] = 2.0
        self.assertEqual(state.n_agents, 3)
        self.assertEqual(state.dim, 2)
        np.testing.assert_array_equal(state.vbar_drift, np.zeros(2))

    def test_caller_array_is_copied(self):
        x = np.ones((2, 2))
        state = FlockState(x, x)
        x[0, 0] = 5.0
        self.assertEqual(state.x[0, 0], 1.0)

    def test_shape_checks(self):
        with self.assertRaises(ValueError):
            FlockState(np.ones((3, 2)), np.ones((3, 3)))
        with self.assertRaises(ValueError):
            FlockState(np.ones(3), np.ones(3))
        with self.assertRaises(ValueError):
            FlockState(np.ones((3, 2)), np.ones((3, 2)), vbar_drift=np.zeros(3))
        with self.assertRaises(ValueError):
            FlockState(np.ones((3, 2)), np.ones((3, 2)), t=-1.0)

    def test_mean_velocity(self):
        v = np.array([[1.0, 0.0], [3.0, 2.0]])
        state = FlockState(np.zeros((2, 2)), v, vbar_drift=np.array([0.5, 0.5]))
        np.testing.assert_allclose(state.mean_velocity(), [2.0, 1.0])
        np.testing.assert_allclose(
            state.mean_velocity(reconstructed_from=np.array([1.0, 1.0])), [1.5, 1.5]
        )

    def test_project_identity(self):
        rng = np.random.default_rng(3)
        state = FlockState(rng.normal(size=(4, 5)), rng.normal(size=(4, 5)), t=1.5)
        twin = state.project(ProjectionMatrix.identity(5))
        self.assertTrue(twin.same_as(state))

    def test_project_shape(self):
        state = FlockState(np.ones((4, 5)), np.ones((4, 5)))
        M = ProjectionMatrix(np.eye(5)[:2], "scaled_projection")
        twin = state.project(M)
        self.assertEqual(twin.dim, 2)
        np.testing.assert_array_equal(twin.vbar_drift, np.zeros(2))


class TestControlVector(TestBase):
    def test_norms(self):
        u = ControlVector(np.array([[3.0, 4.0], [0.0, 0.0], [0.0, 1.0]]))
        self.assertAlmostEqual(u.magnitude, 6.0)
        self.assertEqual(u.nonzero_count, 2)
        self.assertFalse(u.is_zero)

    def test_zeros(self):
        u = ControlVector.zeros(4, 3)
        self.assertTrue(u.is_zero)
        self.assertEqual(u.magnitude, 0.0)
        self.assertIsNone(u.active_index)


class TestKernel(TestBase):
    params = ModelParams(N=9, d=100, beta=0.6)

    def test_value(self):
        self.assertAlmostEqual(kernel_a(0.0, self.params), 1.0)
        self.assertAlmostEqual(kernel_a(1.0, self.params), 2.0**-0.6)

    def test_negative_distance(self):
        with self.assertRaises(ValueError):
            kernel_a(-1.0, self.params)

    def test_array(self):
        values = kernel_a(np.array([0.0, 1.0, 2.0]), self.params)
        self.assertEqual(values.shape, (3,))
        self.assertTrue(np.all(np.diff(values) < 0))

    def test_derivative_matches_finite_difference(self):
        h = 1e-6
        for r in (0.1, 0.5, 1.0, 3.0):
            fd = (kernel_a(r + h, self.params) - kernel_a(r - h, self.params)) / (2 * h)
            self.assertAlmostEqual(kernel_derivative(r, self.params), fd, places=7)

    def test_lipschitz_constant_is_grid_max(self):
        for beta in (0.3, 0.6, 1.0, 2.5):
            params = ModelParams(N=3, d=2, K=1.5, sigma=0.7, beta=beta)
            grid = np.linspace(0.0, 10.0, 200001)
            expected = np.max(np.abs(kernel_derivative(grid, params)))
            self.assertRelClose(lipschitz_constant(params), expected, 1e-6)

    def test_lipschitz_constant_beta_zero(self):
        self.assertEqual(lipschitz_constant(ModelParams(N=3, d=2, beta=0.0)), 0.0)

    def test_nonincreasing_on_dense_grid(self):
        grid = np.linspace(0.0, 100.0, 100001)
        for beta in (0.0, 0.3, 0.6, 2.5):
            params = ModelParams(N=3, d=2, K=2.0, sigma=0.5, beta=beta)
            self.assertTrue(np.all(np.diff(kernel_a(grid, params)) <= 0.0), msg=beta)

    def test_lipschitz_on_random_triples(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            K, sigma, beta = rng.uniform((0.5, 0.2, 0.0), (2.0, 2.0, 3.0))
            params = ModelParams(
                N=3, d=2, K=float(K), sigma=float(sigma), beta=float(beta)
            )
            r, s = rng.uniform(0.0, 5.0, size=2)
            gap = abs(kernel_a(r, params) - kernel_a(s, params))
            self.assertLessEqual(gap, lipschitz_constant(params) * abs(r - s) + 1e-14)


class TestMoments(TestBase):
    def test_pairwise_agrees(self):
        rng = np.random.default_rng(11)
        for n, dim in ((2, 1), (5, 3), (9, 40)):
            u = rng.normal(size=(n, dim)) * 3.0 + 7.0
            w = rng.normal(size=(n, dim))
            self.assertRelClose(bilinear_form(u, u), bilinear_form_pairwise(u, u), 1e-10)
            cross = bilinear_form(u, w)
            self.assertTrue(
                np.isclose(cross, bilinear_form_pairwise(u, w), rtol=1e-10, atol=1e-12)
            )

    def test_perp_components_sum_to_zero(self):
        rng = np.random.default_rng(2)
        mean, perp = perp_decompose(rng.normal(size=(6, 4)))
        self.assertEqual(mean.shape, (4,))
        np.testing.assert_allclose(perp.sum(axis=0), 0.0, atol=1e-12)

    def test_consensus_has_zero_velocity_spread(self):
        v = np.tile([1.0, -2.0, 3.0], (5, 1))
        x = np.arange(15.0).reshape(5, 3)
        m = moments(FlockState(x, v))
        self.assertEqual(m.V, 0.0)
        self.assertGreater(m.X, 0.0)

    def test_two_agents(self):
        # X = |x1 - x2|^2 / 4 for N = 2
        state = FlockState(np.array([[0.0, 0.0], [2.0, 0.0]]), np.zeros((2, 2)))
        self.assertAlmostEqual(moments(state).X, 1.0)


class TestGamma(TestBase):
    def test_closed_form_beta_one(self):
        # int_{s0}^inf ds / (1 + s^2) = pi/2 - atan(s0)
        params = ModelParams(N=4, d=2, beta=1.0)
        for X0 in (0.0, 0.01, 1.0, 25.0, 1e4):
            s0 = math.sqrt(2 * params.N * X0)
            expected = (math.pi / 2 - math.atan(s0)) / math.sqrt(2 * params.N)
            self.assertRelClose(gamma_functional(X0, params), expected, 1e-9)

    def test_quad_matches_beta(self):
        for beta in (0.55, 0.6, 0.65, 0.8, 1.5, 3.0):
            params = ModelParams(N=9, d=100, K=1.3, sigma=0.8, beta=beta)
            for X0 in (0.0, 0.1, 1.0, 50.0, 1e6):
                self.assertRelClose(
                    gamma_functional(X0, params, "quad"),
                    gamma_functional(X0, params, "beta"),
                    1e-8,
                )

    def test_decreasing(self):
        params = ModelParams(N=9, d=100)
        values = [gamma_functional(X0, params) for X0 in (0.0, 0.5, 2.0, 10.0, 100.0)]
        self.assertTrue(all(a > b for a, b in zip(values, values[1:])))

    def test_nondecreasing_in_K(self):
        for beta in (0.6, 1.0, 2.0):
            for X0 in (0.0, 1.0, 50.0):
                values = [
                    gamma_functional(X0, ModelParams(N=5, d=2, K=K, beta=beta))
                    for K in (0.1, 0.5, 1.0, 2.0, 10.0)
                ]
                self.assertTrue(all(a <= b for a, b in zip(values, values[1:])))
                self.assertRelClose(values[-1], 100.0 * values[0], 1e-8)

    def test_divergent_below_half(self):
        for beta in (0.0, 0.3, 0.5):
            params = ModelParams(N=5, d=2, beta=beta)
            self.assertEqual(gamma_functional(10.0, params), math.inf)
            self.assertEqual(gamma_squared(10.0, params), math.inf)
            self.assertEqual(margin_of(Moments(10.0, 100.0), params), -math.inf)

    def test_invalid(self):
        params = ModelParams(N=5, d=2)
        with self.assertRaises(ValueError):
            gamma_functional(-1.0, params)
        with self.assertRaises(ValueError):
            gamma_functional(1.0, params, method="trapezoid")

    def test_margin(self):
        params = ModelParams(N=3, d=2, beta=1.0)
        state = FlockState(np.zeros((3, 2)), np.eye(3, 2))
        m = moments(state)
        expected = m.V - gamma_functional(0.0, params) ** 2
        self.assertAlmostEqual(consensus_margin(state, params), expected)
