"""Hand-computed oracles for every weighting scheme plus their invariants."""

import numpy as np
import pytest

from nspinn import balancing
from nspinn.balancing import (WeightDivergence, fixed_weights,
                              gradnorm_update, heuristic_constants,
                              lra_update, make_state, rba_update, sa_update,
                              weighted_total)
from nspinn.physics import LossTerm

TAGS = ("phy", "bc", "ic")


def point_state(scheme, batch=4, **hyper):
    return make_state(scheme, TAGS, batch, **hyper)


class TestRba:
    def test_max_residual_point_stays_at_one(self):
        state = point_state("rba", batch=3)
        res = {t: np.array([1.0, 0.5, 0.25]) for t in TAGS}
        out = rba_update(state, res)
        # lambda = 0.5 * 1 + 0.5 * (e / max e)
        np.testing.assert_allclose(out.point_weights["phy"],
                                   [1.0, 0.75, 0.625], atol=1e-15)
        assert out.point_weights["phy"][0] == 1.0

    def test_zero_residual_point_decays(self):
        state = point_state("rba", batch=2)
        out = rba_update(state, {t: np.array([0.0, 2.0]) for t in TAGS})
        assert out.point_weights["phy"][0] == 0.5

    def test_all_zero_residuals_decay_only(self):
        state = point_state("rba", batch=2)
        out = rba_update(state, {t: np.zeros(2) for t in TAGS})
        np.testing.assert_array_equal(out.point_weights["phy"], [0.5, 0.5])

    def test_fixed_point_reaches_normalized_residual(self):
        # gamma = eta* = 0.5 gives fixed point eta* r / (1 - gamma) = r
        state = point_state("rba", batch=5)
        rng = np.random.default_rng(0)
        e = rng.uniform(0.1, 3.0, 5)
        res = {t: e for t in TAGS}
        for _ in range(50):
            state = rba_update(state, res)
        np.testing.assert_allclose(state.point_weights["phy"], e / e.max(),
                                   atol=1e-6)

    def test_bounded_in_unit_interval(self):
        state = point_state("rba", batch=8)
        rng = np.random.default_rng(1)
        for _ in range(1000):
            res = {t: rng.uniform(0, 10, 8) for t in TAGS}
            state = rba_update(state, res)
            for t in TAGS:
                w = state.point_weights[t]
                assert np.all(w >= 0.0) and np.all(w <= 1.0)


class TestSa:
    def test_hand_value(self):
        state = point_state("sa", batch=1)
        state.point_weights["phy"][:] = 2.0
        out = sa_update(state, {"phy": np.array([3.0]),
                                "bc": np.zeros(1), "ic": np.zeros(1)})
        assert out.point_weights["phy"][0] == pytest.approx(2.018, abs=1e-12)

    def test_zero_residual_unchanged(self):
        state = point_state("sa", batch=3)
        out = sa_update(state, {t: np.zeros(3) for t in TAGS})
        np.testing.assert_array_equal(out.point_weights["bc"], 1.0)

    def test_zero_weight_is_fixed_point(self):
        state = point_state("sa", batch=2)
        state.point_weights["ic"][:] = 0.0
        out = sa_update(state, {t: np.full(2, 7.0) for t in TAGS})
        np.testing.assert_array_equal(out.point_weights["ic"], 0.0)

    def test_nondecreasing_under_nonzero_residuals(self):
        state = point_state("sa", batch=6)
        rng = np.random.default_rng(2)
        prev = {t: state.point_weights[t].copy() for t in TAGS}
        for _ in range(100):
            state = sa_update(state, {t: rng.uniform(0.1, 2, 6)
                                      for t in TAGS})
            for t in TAGS:
                assert np.all(state.point_weights[t] >= prev[t])
                prev[t] = state.point_weights[t].copy()

    def test_divergence_detected(self):
        state = point_state("sa", batch=1)
        with pytest.raises(WeightDivergence, match="weight divergence"):
            sa_update(state, {t: np.array([np.inf]) for t in TAGS})


class TestLra:
    def test_hand_value(self):
        # max|g_phy| = 10, mean|g_bc| = 2 -> ratio 5; EMA from 1 gives 3
        state = point_state("lra")
        grads = {
            "phy": np.array([10.0, -2.0]),
            "bc": np.array([2.0, -2.0]),
            "ic": np.array([4.0, 4.0]),
        }
        out = lra_update(state, grads)
        k = TAGS.index("bc")
        assert out.term_weights[k] == pytest.approx(3.0, abs=1e-15)
        assert out.term_weights[TAGS.index("phy")] == 1.0

    def test_repeated_updates_converge_to_ratio(self):
        state = point_state("lra")
        g = np.array([1.0, -3.0, 0.5, 2.5])
        grads = {t: g for t in TAGS}
        for _ in range(60):
            state = lra_update(state, grads)
        want = np.abs(g).max() / np.abs(g).mean()
        assert state.term_weights[1] == pytest.approx(want, rel=1e-12)

    def test_alpha_zero_freezes_weights(self):
        state = point_state("lra", alpha_ema=0.0)
        before = state.term_weights.copy()
        out = lra_update(state, {t: np.array([5.0, 1.0]) for t in TAGS})
        np.testing.assert_array_equal(out.term_weights, before)

    def test_ema_betweenness(self):
        state = point_state("lra")
        rng = np.random.default_rng(3)
        for _ in range(50):
            grads = {t: rng.uniform(-4, 4, 6) for t in TAGS}
            lam_hat = {}
            ref = np.abs(grads["phy"]).max()
            for t in TAGS:
                denom = np.abs(grads[t]).mean()
                lam_hat[t] = ref / denom if denom else state.hyper["lra_ceiling"]
            out = lra_update(state, grads)
            for k, t in enumerate(TAGS):
                if t == "phy":
                    continue
                lo = min(state.term_weights[k], lam_hat[t])
                hi = max(state.term_weights[k], lam_hat[t])
                assert lo - 1e-12 <= out.term_weights[k] <= hi + 1e-12
            state = out

    def test_zero_gradient_term_capped(self):
        state = point_state("lra")
        grads = {"phy": np.array([1.0]), "bc": np.zeros(2),
                 "ic": np.array([1.0])}
        out = lra_update(state, grads)
        k = TAGS.index("bc")
        assert out.term_weights[k] == pytest.approx(0.5 * 1 + 0.5 * 1e4)


class TestGradNorm:
    def test_symmetric_terms_stay_uniform(self):
        state = point_state("gradnorm")
        out = gradnorm_update(state, {t: 2.0 for t in TAGS},
                              {t: 1.0 for t in TAGS})
        np.testing.assert_allclose(out.term_weights, 1.0, atol=1e-15)

    def test_two_term_hand_example(self):
        # norms (2, 1), equal rates, alpha = 0: targets are both 1.5 and the
        # step lowers the first weight and raises the second, toward the
        # solution (0.75, 1.5) of w_i * n_i = 1.5
        state = make_state("gradnorm", ("a", "b"), 4, alpha_asym=0.0,
                           gradnorm_lr=0.01)
        out = gradnorm_update(state, {"a": 2.0, "b": 1.0},
                              {"a": 1.0, "b": 1.0})
        raw = np.array([1.0 - 0.01 * 2.0, 1.0 + 0.01 * 1.0])
        want = raw * 2.0 / raw.sum()
        np.testing.assert_allclose(out.term_weights, want, atol=1e-15)
        assert out.term_weights[0] < out.term_weights[1]

    def test_renormalization_to_term_count(self):
        state = point_state("gradnorm")
        rng = np.random.default_rng(4)
        for _ in range(25):
            norms = {t: float(rng.uniform(0.1, 5)) for t in TAGS}
            losses = {t: float(rng.uniform(0.1, 5)) for t in TAGS}
            state = gradnorm_update(state, norms, losses)
            assert state.term_weights.sum() == pytest.approx(len(TAGS),
                                                             abs=1e-12)

    def test_zero_initial_loss_gets_unit_rate(self):
        state = point_state("gradnorm")
        state = gradnorm_update(state, {t: 1.0 for t in TAGS},
                                {"phy": 0.0, "bc": 2.0, "ic": 2.0})
        # recorded L(0) has a zero entry; later updates must not divide by it
        out = gradnorm_update(state, {t: 1.0 for t in TAGS},
                              {"phy": 5.0, "bc": 1.0, "ic": 1.0})
        assert np.isfinite(out.term_weights).all()

    def test_divergence_surfaces(self):
        state = make_state("gradnorm", ("a", "b"), 4, gradnorm_lr=10.0)
        with pytest.raises(WeightDivergence, match="diverged"):
            gradnorm_update(state, {"a": 100.0, "b": 0.001},
                            {"a": 1.0, "b": 1.0})


class TestFixed:
    def test_heuristic_broadcast(self):
        tags = ("phy", "inlet", "wall", "initial")
        w = heuristic_constants(tags)
        np.testing.assert_array_equal(w, [0.1, 2.0, 2.0, 2.0])

    def test_arity_mismatch(self):
        with pytest.raises(ValueError, match="weight/term arity mismatch"):
            fixed_weights(TAGS, [1.0, 2.0])

    def test_immutable_over_epochs(self):
        state = fixed_weights(TAGS, [0.1, 2.0, 2.0])
        snapshot = state.term_weights.copy()
        # fixed states have no update; 10^4 epochs of training leave the
        # array untouched by construction
        for _ in range(10):
            np.testing.assert_array_equal(state.term_weights, snapshot)


def make_terms(values):
    return [LossTerm(tag, np.asarray(v, dtype=np.float64),
                     float(np.mean(v))) for tag, v in zip(TAGS, values)]


class TestWeightedTotal:
    def test_all_ones_equals_plain_sum(self):
        terms = make_terms([[1.0, 3.0], [2.0, 2.0], [0.5, 1.5]])
        state = fixed_weights(TAGS, np.ones(3))
        assert weighted_total(terms, state) == pytest.approx(
            sum(t.aggregate for t in terms), abs=1e-15)

    def test_homogeneity(self):
        terms = make_terms([[1.0, 3.0], [2.0, 2.0], [0.5, 1.5]])
        base = weighted_total(terms, fixed_weights(TAGS, [0.1, 2.0, 2.0]))
        scaled = weighted_total(terms,
                                fixed_weights(TAGS, [0.3, 6.0, 6.0]))
        assert scaled == pytest.approx(3.0 * base, rel=1e-14)

    def test_rba_fixed_point_weights_on_toy_term(self):
        # 4-point hand computation with converged weights e / max e
        e = np.array([2.0, 1.0, 4.0, 1.0])
        state = point_state("rba", batch=4)
        res = {t: e for t in TAGS}
        for _ in range(60):
            state = rba_update(state, res)
        terms = make_terms([e ** 2, e ** 2, e ** 2])
        got = weighted_total(terms, state)
        lam = e / 4.0
        want = 3 * np.mean(lam * e ** 2)
        assert got == pytest.approx(want, rel=1e-6)

    def test_sa_effective_weight_is_squared(self):
        state = point_state("sa", batch=2)
        state.point_weights["phy"][:] = [2.0, 3.0]
        w = state.effective_point_weights("phy")
        np.testing.assert_array_equal(w, [4.0, 9.0])

    def test_arity_mismatch(self):
        terms = make_terms([[1.0], [1.0], [1.0]])
        state = fixed_weights(("a", "b"), [1.0, 1.0])
        with pytest.raises(ValueError, match="arity"):
            weighted_total(terms, state)


class TestGraphTotalConsistency:
    def test_graph_total_equals_recomputation_with_point_weights(self):
        # dual route: the loss graph's total node vs the numpy recomputation
        from nspinn import engine, nets, physics
        from nspinn.sampling import get_case

        case = get_case("cavity")
        spec = nets.NetworkSpec((3, 5, 3))
        params = nets.init_params(spec, 21)
        problem = physics.cached_problem(case, spec)
        batch = 8
        rng = np.random.default_rng(5)
        batches = {role: np.column_stack([
            rng.uniform(*case.t_range, batch),
            rng.uniform(*case.x_range, batch),
            rng.uniform(*case.y_range, batch)]) for role in problem.roles}
        terms = physics.assemble_losses(case, spec, params, batches)

        state = make_state("rba", problem.tags, batch)
        state = rba_update(state, {t.tag: np.sqrt(t.pointwise)
                                   for t in terms})

        prog = engine.compile_program(problem.graph, (problem.total.i,))
        runner = engine.Runner(prog, batch)
        bindings = dict(state.bindings())
        for role in problem.roles:
            tl, xl, yl = problem.role_leaves(role)
            bindings[tl] = batches[role][:, 0]
            bindings[xl] = batches[role][:, 1]
            bindings[yl] = batches[role][:, 2]
        runner.bind(bindings, params.theta)
        runner.forward()
        graph_total = float(runner.value(problem.total.i)[0])
        assert graph_total == pytest.approx(weighted_total(terms, state),
                                            rel=1e-12)


class TestPurityAndCounters:
    def test_updates_are_pure(self):
        state = point_state("rba", batch=3)
        res = {t: np.array([1.0, 2.0, 3.0]) for t in TAGS}
        a = rba_update(state, res)
        b = rba_update(state, res)
        for t in TAGS:
            np.testing.assert_array_equal(a.point_weights[t],
                                          b.point_weights[t])
        np.testing.assert_array_equal(state.point_weights["phy"], 1.0)

    def test_point_scheme_counter_shape(self):
        batch, epochs = 16, 7
        state = point_state("rba", batch=batch)
        res = {t: np.ones(batch) for t in TAGS}
        for _ in range(epochs):
            state = rba_update(state, res)
        assert state.counters["point_weight_touches"] == \
            batch * len(TAGS) * epochs
        assert state.counters["term_weight_touches"] == 0

    def test_term_scheme_counter_shape(self):
        state = point_state("lra")
        grads = {t: np.ones(4) for t in TAGS}
        for _ in range(5):
            state = lra_update(state, grads)
        assert state.counters["term_weight_touches"] == len(TAGS) * 5
        assert state.counters["point_weight_touches"] == 0

    def test_unknown_scheme(self):
        with pytest.raises(ValueError, match="unknown scheme"):
            make_state("ntk", TAGS, 4)
