import numpy as np
import pytest

from dualfilter.adapted import prefixes
from dualfilter.fixedpoint import (
    apply_N_adapted,
    apply_N_path,
    bde_solve,
    fixed_point_residual,
    iterate,
    kl_divergence_bar,
    scalar_feedback,
)
from dualfilter.hmm import scalar_obs
from dualfilter.oracle import filter_process, forward_filter, path_probability, sample_path

from conftest import make_model, random_model, uninformative_model


class TestScalarFeedback:
    def test_constant_function_gives_zero(self, rng, reference_model):
        model = reference_model
        nu = rng.dirichlet(np.ones(model.d))
        c = scalar_obs(model, 1)
        assert abs(scalar_feedback(model, np.full(model.d, 2.0), nu, c)) <= 1e-14

    def test_degenerate_branch(self):
        # a token emitted surely by every state drives nu(c) to 1
        model = make_model([0.5, 0.5], np.eye(2), [[0.0, 1.0], [0.0, 1.0]], 1)
        c = scalar_obs(model, 1)
        np.testing.assert_array_equal(c, [1.0, 1.0])
        assert scalar_feedback(model, np.array([1.0, -2.0]), np.array([0.3, 0.7]), c) == 0.0

    def test_against_independent_transcription(self, rng):
        model = random_model(rng, 3, 1, 1)
        f = rng.standard_normal(3)
        nu = rng.dirichlet(np.ones(3))
        c = scalar_obs(model, 1)
        nc = sum(nu[x] * c[x] for x in range(3))
        expect = -sum(nu[x] * (model.A[x] @ f) * (c[x] - nc) for x in range(3)) / (1 - nc**2)
        assert abs(scalar_feedback(model, f, nu, c) - expect) <= 1e-14


class TestBdeSolve:
    def test_constant_terminal_rides_through(self, rng, reference_model):
        model = reference_model
        rho = np.stack([rng.dirichlet(np.ones(model.d)) for _ in range(model.T)])
        y0, controls = bde_solve(model, rho, (1, 0, 1), model.T, np.full(model.d, 3.0))
        np.testing.assert_allclose(controls, 0.0, atol=1e-13)
        np.testing.assert_allclose(y0, 3.0, atol=1e-12)

    def test_single_step_closed_form(self, rng, reference_model):
        model = reference_model
        rho = np.stack([rng.dirichlet(np.ones(model.d)) for _ in range(model.T)])
        f = rng.standard_normal(model.d)
        z = (1, 0, 1)
        y0, controls = bde_solve(model, rho, z, 1, f)
        c1 = scalar_obs(model, z[0])
        u0 = scalar_feedback(model, f, model.mu, c1)
        assert controls.shape == (1,)
        assert controls[0] == u0
        np.testing.assert_allclose(y0, model.A @ f + c1 * u0, atol=1e-14)

    def test_reference_replay(self, rng, reference_model):
        # replay the recursion with bare loops and compare every control
        model = reference_model
        rho = np.stack([rng.dirichlet(np.ones(model.d)) for _ in range(model.T)])
        z = (1, 1, 0)
        f = np.array([1.0, 0.0])
        y0, controls = bde_solve(model, rho, z, model.T, f)
        y = f.copy()
        expect = np.zeros(model.T)
        for s in range(model.T - 1, -1, -1):
            c = 2.0 * model.C[:, z[s]] - 1.0
            nu = model.mu if s == 0 else rho[s - 1]
            nc = nu @ c
            u = 0.0 if abs(1 - nc**2) <= 1e-12 else -(nu @ ((model.A @ y) * (c - nc))) / (1 - nc**2)
            y = model.A @ y + c * u
            expect[s] = u
        np.testing.assert_allclose(controls, expect, atol=1e-14)
        np.testing.assert_allclose(y0, y, atol=1e-14)

    def test_time_bounds(self, rng, reference_model):
        model = reference_model
        rho = np.full((model.T, model.d), 0.5)
        with pytest.raises(ValueError, match="time"):
            bde_solve(model, rho, (1, 0, 1), 0, np.zeros(model.d))


class TestApplyNPath:
    def test_uninformative_gives_chain_marginals(self, rng):
        model = uninformative_model(rng, 3, 1, 3)
        z = (1, 0, 1)
        rho = np.stack([rng.dirichlet(np.ones(3)) for _ in range(3)])
        out, flags = apply_N_path(model, rho, z)
        for t in range(1, 4):
            marginal = model.mu @ np.linalg.matrix_power(model.A, t)
            np.testing.assert_allclose(out[t - 1], marginal, atol=1e-12)
        assert flags.all()

    @pytest.mark.parametrize("m", [1, 2])
    def test_filter_is_fixed_point(self, rng, m):
        # binary alphabet is the headline claim; wider alphabets are checked as
        # an exploratory finding and happen to hold as well
        for _ in range(10):
            d, T = int(rng.integers(2, 6)), int(rng.integers(1, 6))
            model = random_model(rng, d, m, T)
            z = sample_path(model, rng)
            pis = forward_filter(model, z)
            out, flags = apply_N_path(model, pis, z)
            assert np.max(np.abs(out - pis)) <= 1e-10
            assert flags.all()

    def test_mass_preserved(self, rng, reference_model):
        model = reference_model
        z = (0, 1, 1)
        rho = np.stack([rng.dirichlet(np.ones(model.d)) for _ in range(model.T)])
        out, _ = apply_N_path(model, rho, z)
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)

    def test_causality_in_future_tokens(self, rng, reference_model):
        model = reference_model
        rho = np.stack([rng.dirichlet(np.ones(model.d)) for _ in range(model.T)])
        out_a, _ = apply_N_path(model, rho, (1, 0, 0))
        out_b, _ = apply_N_path(model, rho, (1, 1, 1))
        assert np.array_equal(out_a[0], out_b[0])

    def test_shape_mismatch_rejected(self, reference_model):
        with pytest.raises(ValueError, match="shape"):
            apply_N_path(reference_model, np.zeros((2, 2)), (1, 0, 1))


class TestApplyNAdapted:
    @pytest.mark.parametrize("m", [1, 2])
    def test_filter_is_fixed_point(self, rng, m):
        for _ in range(5):
            d, T = int(rng.integers(2, 5)), int(rng.integers(1, 5))
            model = random_model(rng, d, m, T)
            pi = filter_process(model)
            out, flags = apply_N_adapted(model, pi)
            for t in range(1, T + 1):
                for w in prefixes(m, t):
                    assert np.max(np.abs(np.asarray(out.at(w)) - np.asarray(pi.at(w)))) <= 1e-10
                    assert flags[w]

    def test_mass_is_one_on_every_prefix(self, rng, reference_model):
        model = reference_model
        rho = filter_process(model)
        out, _ = apply_N_adapted(model, rho)
        for w, v in out.tree.items():
            assert abs(np.asarray(v).sum() - 1.0) <= 1e-12

    def test_uninformative_gives_deterministic_marginals(self, rng):
        model = uninformative_model(rng, 2, 1, 3)
        pi = filter_process(model)
        out, _ = apply_N_adapted(model, pi)
        for t in range(1, 4):
            marginal = model.mu @ np.linalg.matrix_power(model.A, t)
            for w in prefixes(1, t):
                np.testing.assert_allclose(np.asarray(out.at(w)), marginal, atol=1e-12)

    def test_nonidentity_basis_assembles_same_measure(self, rng, reference_model):
        model = reference_model
        pi = filter_process(model)
        basis = np.array([[1.0, 1.0], [0.0, 1.0]])
        out_id, _ = apply_N_adapted(model, pi)
        out_b, _ = apply_N_adapted(model, pi, basis=basis)
        for w in out_id.tree:
            np.testing.assert_allclose(
                np.asarray(out_b.at(w)), np.asarray(out_id.at(w)), atol=1e-10
            )


class TestFixedPointResidual:
    def test_filter_residual_tiny(self, reference_model):
        model = reference_model
        z = (1, 1, 0)
        pis = forward_filter(model, z)
        assert fixed_point_residual(model, pis, z, mode="path") <= 1e-10
        assert fixed_point_residual(model, filter_process(model), mode="adapted") <= 1e-10

    def test_perturbed_filter_has_positive_residual(self, reference_model):
        model = reference_model
        z = (1, 1, 0)
        pis = forward_filter(model, z)
        bumped = pis.copy()
        bumped[1, 0] += 0.1
        bumped[1, 1] -= 0.1
        assert fixed_point_residual(model, bumped, z, mode="path") > 1e-3

    def test_constant_map_image_is_fixed(self, rng):
        # with a single step the map ignores rho entirely, so its image is fixed
        model = uninformative_model(rng, 2, 1, 1)
        z = (1,)
        rho = np.array([[0.9, 0.1]])
        out, _ = apply_N_path(model, rho, z)
        assert fixed_point_residual(model, out, z, mode="path") <= 1e-14

    def test_unknown_mode(self, reference_model):
        with pytest.raises(ValueError, match="mode"):
            fixed_point_residual(reference_model, None, None, mode="bogus")


class TestIterate:
    def test_filter_start_stays_put(self, reference_model):
        model = reference_model
        z = (1, 0, 1)
        trace = iterate(model, z, rho0=forward_filter(model, z), K=5)
        assert np.max(trace.residuals) <= 1e-10
        assert np.max(trace.kl_per_iter) <= 1e-12
        assert trace.in_domain.all()

    def test_uninformative_converges_in_one_step(self, rng):
        model = uninformative_model(rng, 3, 1, 3)
        z = (0, 1, 1)
        trace = iterate(model, z, K=4)
        assert trace.residuals[1] <= 1e-12
        assert np.max(trace.kl_per_iter) <= 1e-12

    def test_exploratory_run_emits_full_trace(self, rng, reference_model):
        model = reference_model
        z = (1, 1, 0)
        trace = iterate(model, z, K=20)
        assert trace.iterates.shape == (21, model.T, model.d)
        assert trace.residuals.shape == (20,)
        assert trace.kl_per_iter.shape == (20,)
        assert trace.in_domain.shape == (20, model.T)
        # iterates are kept inside the simplex, projected or not
        assert trace.iterates.min() >= -1e-10
        np.testing.assert_allclose(trace.iterates.sum(axis=2), 1.0, atol=1e-10)
        # no convergence asserted; the final distance to the filter is informational
        pis = forward_filter(model, z)
        assert np.isfinite(np.max(np.abs(trace.iterates[-1] - pis)))

    def test_zero_iterations_rejected(self, reference_model):
        with pytest.raises(ValueError, match="K"):
            iterate(reference_model, (1, 0, 1), K=0)

    def test_impossible_path_under_zero_convention(self):
        model = make_model([1.0, 0.0], np.eye(2), [[0.0, 1.0], [1.0, 0.0]], 2)
        trace = iterate(model, (0, 0), K=3, zero_convention=True)
        assert np.all(np.isfinite(trace.residuals))
        assert np.all(np.isfinite(trace.kl_per_iter))


class TestKlDivergenceBar:
    def test_identical_inputs(self, rng):
        p = np.stack([rng.dirichlet(np.ones(3)) for _ in range(4)], axis=1)
        assert kl_divergence_bar(p, p) == 0.0

    def test_two_point_closed_form(self):
        p = np.array([[1.0], [0.0]])
        q = np.array([[0.5], [0.5]])
        assert abs(kl_divergence_bar(p, q) - np.log(2.0)) <= 1e-12

    def test_support_violation_is_infinite(self):
        p = np.array([[0.5], [0.5]])
        q = np.array([[1.0], [0.0]])
        assert kl_divergence_bar(p, q) == float("inf")

    def test_nonnegative_on_random_tables(self, rng):
        for _ in range(50):
            T = int(rng.integers(1, 5))
            p = np.stack([rng.dirichlet(np.ones(4)) for _ in range(T)], axis=1)
            q = np.stack([rng.dirichlet(np.ones(4)) for _ in range(T)], axis=1)
            assert kl_divergence_bar(p, q) >= 0.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shapes"):
            kl_divergence_bar(np.ones((2, 1)), np.ones((3, 1)))
