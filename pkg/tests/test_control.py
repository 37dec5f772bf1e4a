import unittest
from unittest.mock import patch

import numpy as np
from scipy import stats

from consjl.analysis import compute_constants
from consjl.configs import PRESETS, generate_config, preset_params, seeds_near_margin
from consjl.control import (
    ADMISSIBLE_STRIDE,
    DRMode,
    MeanSource,
    Strategy,
    StrategyKind,
    admissible_projection,
    budget_ok,
    control_random,
    control_sp,
    control_uniform,
    first_half_time,
    is_sparse,
    run_dr,
    run_strategy,
    select_max_perp_index,
)
from consjl.jl import JLFamily, ProjectionMatrix, generate
from consjl.model import FlockState, ModelParams, consensus_margin, moments
from consjl.seeding import STREAM_CONTROL, rng_for

from .base import SLOW, TestBase  # type: ignore


def outlier():
    params = preset_params("outlier")
    return params, generate_config("outlier", params)


class TestSelection(TestBase):
    def test_tie_takes_smallest_index(self):
        v = np.array([[0.0, 0.0], [1.0, 0.0], [-1.0, 0.0]])
        pick = select_max_perp_index(v)
        self.assertEqual(pick.index, 1)
        self.assertAlmostEqual(pick.norm, 1.0)
        self.assertFalse(pick.degenerate)

    def test_degenerate(self):
        pick = select_max_perp_index(np.ones((4, 3)))
        self.assertEqual(pick.index, 0)
        self.assertTrue(pick.degenerate)

    def test_bad_shape(self):
        with self.assertRaises(ValueError):
            select_max_perp_index(np.ones(3))

    def test_shift_and_scale_invariant(self):
        rng = np.random.default_rng(8)
        for _ in range(10):
            v = rng.normal(size=(7, 5))
            pick = select_max_perp_index(v)
            shifted = select_max_perp_index(v + rng.normal(size=5) * 10.0)
            scaled = select_max_perp_index(3.7 * v)
            self.assertEqual(shifted.index, pick.index)
            self.assertEqual(scaled.index, pick.index)
            self.assertRelClose(scaled.norm, 3.7 * pick.norm, 1e-12)


class TestControls(TestBase):
    params = ModelParams(N=4, d=3, theta=2.0)

    def state(self, seed: int = 0) -> FlockState:
        rng = np.random.default_rng(seed)
        return FlockState(rng.normal(size=(4, 3)), rng.normal(size=(4, 3)))

    def test_sp(self):
        state = self.state()
        u = control_sp(state, self.params)
        index = select_max_perp_index(state.v).index
        self.assertEqual(u.active_index, index)
        self.assertAlmostEqual(u.magnitude, 2.0)
        self.assertEqual(u.nonzero_count, 1)
        perp = state.v[index] - state.v.mean(axis=0)
        np.testing.assert_allclose(u.entries[index], -2.0 * perp / np.linalg.norm(perp))

    def test_sp_at_consensus(self):
        state = FlockState(np.zeros((4, 3)), np.ones((4, 3)))
        u = control_sp(state, self.params)
        self.assertTrue(u.is_zero)
        self.assertIsNone(u.active_index)

    def test_uniform(self):
        state = self.state(1)
        u = control_uniform(state, self.params)
        np.testing.assert_allclose(np.linalg.norm(u.entries, axis=1), 0.5)
        self.assertAlmostEqual(u.magnitude, 2.0)
        self.assertIsNone(u.active_index)

    def test_uniform_skips_agents_at_mean(self):
        v = np.zeros((4, 3))
        v[0, 0], v[1, 0] = 1.0, -1.0
        u = control_uniform(FlockState(np.zeros((4, 3)), v), self.params)
        self.assertEqual(u.nonzero_count, 2)
        self.assertTrue(budget_ok(u, self.params))

    def test_random_is_seeded(self):
        state = self.state(2)
        u = control_random(state, self.params, rng_for(5, STREAM_CONTROL))
        again = control_random(state, self.params, rng_for(5, STREAM_CONTROL))
        self.assertEqual(u.active_index, again.active_index)
        self.assertTrue(is_sparse(u))
        self.assertAlmostEqual(u.magnitude, 2.0)

    def test_random_is_uniform(self):
        state = self.state(3)
        rng = rng_for(11, STREAM_CONTROL)
        picks = [
            control_random(state, self.params, rng).active_index for _ in range(10_000)
        ]
        counts = np.bincount(picks, minlength=state.n_agents)
        self.assertEqual(counts.sum(), 10_000)
        self.assertGreater(stats.chisquare(counts).pvalue, 1e-3)


class TestStrategy(TestBase):
    def test_of(self):
        self.assertIs(Strategy.of("SP").kind, StrategyKind.SP)
        self.assertIs(Strategy.of(StrategyKind.R).kind, StrategyKind.R)
        self.assertEqual(Strategy.of("u").label, "u")
        with self.assertRaises(ValueError):
            Strategy.of("dr")
        with self.assertRaises(ValueError):
            Strategy.of("pid")

    def test_dr(self):
        M = ProjectionMatrix.identity(3)
        strategy = Strategy.dr(M, "theoretical", 0.5, "reconstructed")
        self.assertIs(strategy.mode, DRMode.THEORETICAL)
        self.assertIs(strategy.mean_source, MeanSource.RECONSTRUCTED)
        with self.assertRaises(ValueError):
            Strategy(StrategyKind.DR)
        with self.assertRaises(ValueError):
            Strategy.dr(M, delta=-1.0)

    def test_dr_control_needs_coupled_run(self):
        state = FlockState(np.zeros((2, 3)), np.eye(2, 3))
        strategy = Strategy.dr(ProjectionMatrix.identity(3))
        with self.assertRaises(ValueError):
            strategy.control(state, ModelParams(N=2, d=3), rng_for(0, STREAM_CONTROL))

    def test_none_is_zero(self):
        state = FlockState(np.zeros((2, 3)), np.eye(2, 3))
        u = Strategy.of("none").control(
            state, ModelParams(N=2, d=3), rng_for(0, STREAM_CONTROL)
        )
        self.assertTrue(u.is_zero)


class TestRunStrategy(TestBase):
    def test_identity_dr_matches_sp(self):
        for name in PRESETS:
            params = preset_params(name)
            initial = generate_config(name, params, seed=1)
            horizon = 300 * params.tau
            sp = run_strategy(initial, Strategy.of("sp"), horizon, params, seed=0)
            dr = run_strategy(
                initial,
                Strategy.dr(ProjectionMatrix.identity(params.d)),
                horizon,
                params,
                seed=0,
            )
            self.assertEqual(sp.index_sequence(), dr.index_sequence(), msg=name)
            self.assertTrue(
                sp.trajectory.final_state.same_as(dr.trajectory.final_state), msg=name
            )

    def test_rows_and_summary(self):
        params, initial = outlier()
        record = run_strategy(initial, Strategy.of("sp"), 0.05, params, seed=3)
        rows = record.rows()
        self.assertEqual(len(rows), 6)
        first = select_max_perp_index(initial.v).index
        self.assertEqual(rows[0]["control_index"], first + 1)
        self.assertIsNone(rows[-1]["control_index"])
        self.assertFalse(rows[-1]["active"])
        self.assertIsNone(rows[0]["W"])
        self.assertAlmostEqual(rows[0]["margin"], rows[0]["V"] - rows[0]["gamma_sq"])

        summary = record.summary()
        self.assertEqual(summary["strategy"], "sp")
        self.assertEqual(summary["seed"], 3)
        self.assertIsNone(summary["T0"])
        self.assertFalse(summary["reached"])
        self.assertLess(summary["final_margin"], summary["initial_margin"])
        self.assertNotIn("k", summary)

    def test_dr_summary(self):
        params, initial = outlier()
        M = generate("bernoulli", 20, params.d, seed=4)
        record = run_strategy(initial, Strategy.dr(M), 0.1, params, seed=4)
        summary = record.summary()
        self.assertEqual(summary["k"], 20)
        self.assertEqual(summary["family"], "bernoulli")
        self.assertEqual(summary["matrix_seed"], 4)
        self.assertEqual(summary["mode"], "experimental")
        self.assertTrue(summary["curve_guarantee"])
        rows = record.rows()
        self.assertIsNotNone(rows[0]["W"])
        self.assertIsNotNone(rows[0]["Y"])
        for sample in record.trajectory.samples:
            self.assertLessEqual(sample.magnitude, params.theta + 1e-12)
            self.assertLessEqual(sample.nonzero, 1)

    def test_uncontrolled_keeps_mean(self):
        params, initial = outlier()
        record = run_strategy(initial, Strategy.of("none"), 1.0, params, seed=0)
        final = record.trajectory.final_state
        np.testing.assert_allclose(
            final.v.mean(axis=0), initial.v.mean(axis=0), atol=1e-10
        )

    def test_switch_off_and_half_time(self):
        params, initial = outlier()
        record = run_strategy(initial, Strategy.of("sp"), 40.0, params, seed=0)
        self.assertTrue(record.reached)
        self.assertIsNotNone(record.T0_5)
        self.assertLess(record.T0_5, record.T0)
        self.assertEqual(first_half_time(record.trajectory), record.T0_5)
        self.assertLessEqual(record.final_margin, 0.0)

    def test_half_time_at_start(self):
        params = ModelParams(N=3, d=2, beta=0.5)
        state = FlockState(np.eye(3, 2), np.eye(3, 2))
        record = run_strategy(state, Strategy.of("sp"), 0.1, params, seed=0)
        self.assertEqual(record.T0, 0.0)
        self.assertEqual(record.T0_5, 0.0)


class TestRunDR(TestBase):
    def test_identity_switch_matches_switch_off(self):
        params, initial = outlier()
        M = ProjectionMatrix.identity(params.d)
        run = run_dr(initial, M, params, "experimental", 0, horizon=40.0)
        self.assertIsNotNone(run.T0)
        self.assertEqual(run.TS, run.T0)

    def test_low_system_is_steered_until_threshold(self):
        params, initial = outlier()
        M = generate("scaled_projection", 30, params.d, seed=2)
        run = run_dr(initial, M, params, "experimental", 2, horizon=0.2)
        self.assertTrue(all(run.low.active[:-1]))
        self.assertEqual(run.low.dim, 30)
        self.assertEqual(run.high.index_sequence[:-1], run.low.index_sequence[:-1])

    def test_explicit_threshold_hands_over_to_random(self):
        params, initial = outlier()
        M = generate("bernoulli", 20, params.d, seed=1)
        run = run_dr(initial, M, params, "theoretical", 1, horizon=0.2, Delta=1e6)
        self.assertEqual(run.TS, 0.0)
        self.assertFalse(any(run.low.active))
        self.assertTrue(all(run.high.active[:-1]))
        expected = rng_for(1, STREAM_CONTROL).integers(params.N)
        self.assertEqual(run.high.index_sequence[0], int(expected))

    def test_theoretical_threshold_from_datum(self):
        params, initial = outlier()
        M = ProjectionMatrix.identity(params.d)
        run = run_dr(initial, M, params, "theoretical", 0, horizon=0.1)
        m = moments(initial)
        consts = compute_constants(m.X, m.V, m.V, m.X, params)
        self.assertAlmostEqual(run.Delta, consts.Delta)
        self.assertIsNone(run.TS)

    def test_theoretical_needs_finite_threshold(self):
        params = ModelParams(N=3, d=4, beta=0.5)
        rng = np.random.default_rng(0)
        state = FlockState(rng.normal(size=(3, 4)), rng.normal(size=(3, 4)))
        M = ProjectionMatrix.identity(4)
        with self.assertRaises(ValueError):
            run_dr(state, M, params, "theoretical", 0, horizon=1.0)

    def test_reconstructed_mean(self):
        params, initial = outlier()
        M = generate("bernoulli", 20, params.d, seed=8)
        observed = run_dr(initial, M, params, "experimental", 8, horizon=1.0)
        rebuilt = run_dr(
            initial,
            M,
            params,
            "experimental",
            8,
            horizon=1.0,
            mean_source="reconstructed",
        )
        self.assertEqual(observed.high.index_sequence, rebuilt.high.index_sequence)
        np.testing.assert_allclose(
            observed.high.final_state.v, rebuilt.high.final_state.v, atol=1e-8
        )

    def test_dimension_mismatch(self):
        params, initial = outlier()
        M = ProjectionMatrix.identity(50)
        with self.assertRaises(ValueError):
            run_dr(initial, M, params, "experimental", 0, horizon=0.1)


class TestAdmissibleProjection(TestBase):
    def test_first_qualifying_candidate(self):
        params, initial = outlier()
        target = consensus_margin(initial, params)
        for seed in (0, 3):
            M = admissible_projection(initial, "bernoulli", 20, params, seed)
            draws, rest = divmod(M.seed - seed, ADMISSIBLE_STRIDE)
            self.assertEqual(rest, 0)
            self.assertGreaterEqual(consensus_margin(initial.project(M), params), target)
            for j in range(draws):
                earlier = initial.project(
                    generate("bernoulli", 20, params.d, seed + j * ADMISSIBLE_STRIDE)
                )
                self.assertLess(consensus_margin(earlier, params), target)

    def test_identity_is_accepted_at_once(self):
        params, initial = outlier()
        M = admissible_projection(initial, "identity", params.d, params, 7)
        self.assertEqual(M.seed, 7)
        self.assertEqual(M.family, JLFamily.IDENTITY)

    def test_no_candidate(self):
        params, initial = outlier()
        with self.assertRaises(ValueError):
            admissible_projection(initial, "bernoulli", 20, params, 0, attempts=0)
        # a twin collapsed to one coordinate of a flock at rest along it
        v = np.zeros((params.N, params.d))
        v[:, 1:] = initial.v[:, 1:]
        flat = FlockState(initial.x, v)
        with patch("consjl.control.generate") as draw:
            axis = ProjectionMatrix(np.eye(1, params.d), JLFamily.GAUSSIAN, 0)
            draw.return_value = axis
            with self.assertRaisesRegex(ValueError, "in 3 draws"):
                admissible_projection(flat, "gaussian", 1, params, 0, attempts=3)
            self.assertEqual(draw.call_count, 3)


@unittest.skipUnless(SLOW, "set CONSJL_SLOW_TESTS=1 to reproduce the reference tables")
class TestReferenceTables(TestBase):
    def record(self, name: str, strategy: str, seed: int = 0, config_seed: int = 0):
        params = preset_params(name)
        initial = generate_config(name, params, seed=config_seed)
        horizon = PRESETS[name]["horizon"]
        return run_strategy(initial, Strategy.of(strategy), horizon, params, seed)

    def test_outlier(self):
        sp = self.record("outlier", "sp")
        self.assertRelClose(sp.T0, 27.78, 0.02)
        self.assertRelClose(sp.T0_5, 5.44, 0.05)
        u = self.record("outlier", "u")
        self.assertRelClose(u.T0, 87.21, 0.02)
        self.assertRelClose(u.T0_5, 22.96, 0.05)

    def test_outlier_uncontrolled(self):
        params, initial = outlier()
        record = run_strategy(initial, Strategy.of("none"), 100.0, params, seed=0)
        self.assertRelClose(record.trajectory.samples[0].margin, 1031.3, 0.001)
        self.assertRelClose(record.final_margin, 946.2, 0.01)

    def test_geometric(self):
        self.assertRelClose(self.record("geometric", "sp").T0, 23.45, 0.02)
        self.assertRelClose(self.record("geometric", "u").T0, 38.02, 0.02)

    def test_uniform(self):
        self.assertRelClose(self.record("uniform", "sp").T0, 28.95, 0.02)
        self.assertRelClose(self.record("uniform", "u").T0, 29.95, 0.02)

    def test_random_strategy(self):
        times = [self.record("outlier", "r", seed=s).T0 for s in range(10)]
        self.assertNotIn(None, times)
        self.assertRelClose(float(np.mean(times)), 88.3, 0.15)

    def test_dr_k55(self):
        # matrices whose twin starts at least as far from consensus as the flock
        params, initial = outlier()
        times = []
        for seed in range(10):
            M = admissible_projection(initial, "bernoulli", 55, params, seed)
            record = run_strategy(initial, Strategy.dr(M), 150.0, params, seed)
            times.append(record.T0)
        self.assertNotIn(None, times)
        self.assertRelClose(float(np.mean(times)), 28.2, 0.10)

    def test_random_configurations(self):
        # cauchy draws screened to the reference initial margin 464.03
        cauchy = seeds_near_margin("cauchy", preset_params("cauchy"), 464.03, 0.10, 5)
        for name, seeds, target, rtol in (
            ("cauchy", cauchy, 33.45, 0.15),
            ("gaussian", range(5), 82.65, 0.10),
        ):
            times = [self.record(name, "sp", config_seed=s).T0 for s in seeds]
            self.assertNotIn(None, times, msg=name)
            self.assertRelClose(float(np.mean(times)), target, rtol, msg=name)
