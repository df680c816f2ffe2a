import math

import numpy as np
import pytest

from coheat.errors import ConfigError, DataError, NumericalError
from coheat.model import init_params
from coheat.objective import (
    Gradients,
    TrainBatch,
    align_loss,
    analytic_gradients,
    au_loss,
    batch_loss_only,
    batch_objective,
    bpr_loss,
    builtin_instance,
    finite_diff_check,
    finite_diff_gradients,
    l2_term,
    normalize_rows,
    run_gradcheck,
    total_loss,
    uniform_loss,
)

from oracles import loop_align, loop_uniform_term

EMPTY = np.zeros((0, 3))


class TestNormalizeRows:
    def test_three_four_five(self):
        out = normalize_rows(np.array([[3.0, 4.0]]))
        assert np.allclose(out, [[0.6, 0.8]], atol=1e-15)

    def test_unit_row_unchanged(self):
        row = np.array([[0.0, 1.0, 0.0]])
        assert np.allclose(normalize_rows(row), row, atol=1e-15)

    def test_all_norms_one(self, rng):
        out = normalize_rows(rng.normal(size=(10, 8)))
        assert np.max(np.abs(np.linalg.norm(out, axis=1) - 1.0)) < 1e-12

    def test_zero_row_names_id(self):
        rows = np.array([[1.0, 0.0], [0.0, 0.0]])
        with pytest.raises(NumericalError, match="7"):
            normalize_rows(rows, ids=np.array([3, 7]))


class TestAlignLoss:
    def test_identical_views_zero(self, rng):
        x = normalize_rows(rng.normal(size=(6, 4)))
        assert align_loss(x, x, x, x) == 0.0

    def test_single_orthogonal_user(self):
        hu = np.array([[1.0, 0.0]])
        au = np.array([[0.0, 1.0]])
        assert align_loss(hu, au, np.zeros((0, 2)), np.zeros((0, 2))) == 2.0

    def test_scalar_loop_oracle(self, rng):
        hu = normalize_rows(rng.normal(size=(7, 5)))
        au = normalize_rows(rng.normal(size=(7, 5)))
        hb = normalize_rows(rng.normal(size=(4, 5)))
        ab = normalize_rows(rng.normal(size=(4, 5)))
        got = align_loss(hu, au, hb, ab)
        want = loop_align(hu.tolist(), au.tolist(), hb.tolist(), ab.tolist())
        assert abs(got - want) < 1e-12
        assert got >= 0.0


class TestUniformLoss:
    def test_identical_pair_zero_term(self):
        x = normalize_rows(np.array([[1.0, 0.0], [1.0, 0.0]]))
        with pytest.warns(UserWarning):
            # bundle families empty -> two skipped terms warn
            val = uniform_loss(x, x, np.zeros((0, 2)), np.zeros((0, 2)))
        assert val == 0.0

    def test_orthogonal_pair_closed_form(self):
        x = np.array([[1.0, 0.0], [0.0, 1.0]])
        with pytest.warns(UserWarning):
            val = uniform_loss(x, np.zeros((0, 2)), np.zeros((0, 2)), np.zeros((0, 2)))
        assert val == pytest.approx(-4.0, abs=1e-12)

    def test_double_loop_oracle_batch16(self, rng):
        hu = normalize_rows(rng.normal(size=(16, 6)))
        au = normalize_rows(rng.normal(size=(16, 6)))
        hb = normalize_rows(rng.normal(size=(16, 6)))
        ab = normalize_rows(rng.normal(size=(16, 6)))
        got = uniform_loss(hu, au, hb, ab)
        want = sum(loop_uniform_term(x.tolist()) for x in (hu, au, hb, ab))
        assert abs(got - want) < 1e-10
        assert got <= 0.0  # each term is log of a mean of values in (0, 1]

    def test_small_family_warns_and_contributes_zero(self, rng):
        x = normalize_rows(rng.normal(size=(5, 3)))
        one = normalize_rows(rng.normal(size=(1, 3)))
        with pytest.warns(UserWarning, match="fewer than 2"):
            val = uniform_loss(x, x, one, one)
        assert val == pytest.approx(2 * loop_uniform_term(x.tolist()), abs=1e-10)


class TestAuAndBpr:
    def test_au_sum(self):
        assert au_loss(0.0, 0.0) == 0.0
        assert au_loss(2.0, -4.0) == -2.0

    def test_bpr_equal_scores(self):
        assert bpr_loss(np.array([1.7]), np.array([1.7])) == pytest.approx(math.log(2), abs=1e-15)

    def test_bpr_unit_margin(self):
        got = bpr_loss(np.array([1.0]), np.array([0.0]))
        assert got == pytest.approx(math.log(1 + math.exp(-1)), abs=1e-15)
        assert got == pytest.approx(0.31326168751822286, abs=1e-12)

    def test_bpr_large_margin_stable(self):
        val = bpr_loss(np.array([50.0]), np.array([0.0]))
        assert 0.0 < val < 1e-20
        assert np.isfinite(bpr_loss(np.array([700.0]), np.array([0.0])))
        assert np.isfinite(bpr_loss(np.array([0.0]), np.array([700.0])))

    def test_bpr_convexity_bound(self, rng):
        # softplus(x) + softplus(-x) >= 2 ln 2, equality iff x == 0
        for x in rng.normal(scale=3.0, size=50):
            lhs = bpr_loss(np.array([x]), np.array([0.0])) + bpr_loss(np.array([0.0]), np.array([x]))
            assert lhs >= 2 * math.log(2) - 1e-15
        assert bpr_loss(np.array([0.0]), np.array([0.0])) * 2 == pytest.approx(2 * math.log(2), abs=1e-15)

    def test_bpr_rejects_nonfinite(self):
        with pytest.raises(NumericalError):
            bpr_loss(np.array([np.nan]), np.array([0.0]))


class TestTotalLoss:
    def test_zero_weights_reduce_to_bpr(self, rng):
        params = init_params(3, 2, 4, 4, rng)
        lb = total_loss(0.42, 1.0, -2.0, 0.0, 0.0, params)
        assert lb.total == 0.42

    def test_zero_params_zero_l2(self):
        params = init_params(2, 2, 2, 3, np.random.default_rng(0))
        for t in params.tables():
            t[:] = 0.0
        assert l2_term(params, "squared") == 0.0
        assert l2_term(params, "norm") == 0.0

    def test_scalar_recomputation(self, rng):
        params = init_params(3, 2, 4, 4, rng)
        bpr, al, un, l1, l2w = 0.3, 1.2, -3.4, 0.7, 0.01
        lb = total_loss(bpr, al, un, l1, l2w, params)
        sq = sum(float(x) ** 2 for t in params.tables() for x in t.reshape(-1))
        expected = bpr + l1 * (al + un) + l2w * 0.5 * sq
        assert abs(lb.total - expected) < 1e-12
        assert lb.au == al + un
        assert abs(lb.total - (lb.bpr + l1 * lb.au + l2w * lb.l2)) < 1e-12

    def test_norm_form(self, rng):
        params = init_params(3, 2, 4, 4, rng)
        sq = sum(float(np.sum(t * t)) for t in params.tables())
        assert l2_term(params, "norm") == pytest.approx(math.sqrt(sq), abs=1e-12)

    def test_negative_weights_rejected(self, rng):
        params = init_params(2, 2, 2, 2, rng)
        with pytest.raises(ConfigError):
            total_loss(0.1, 0.0, 0.0, -1.0, 0.0, params)


class TestTrainBatch:
    def test_unique_lists(self):
        batch = TrainBatch(
            users=np.array([0, 0, 1]), pos=np.array([2, 3, 2]), neg=np.array([4, 4, 5])
        )
        assert batch.unique_users.tolist() == [0, 1]
        assert batch.unique_bundles.tolist() == [2, 3, 4, 5]

    def test_shape_mismatch(self):
        with pytest.raises(DataError):
            TrainBatch(users=np.array([0]), pos=np.array([1, 2]), neg=np.array([3]))


class TestAnalyticGradients:
    def test_gradient_locality_k0(self, rng):
        inst = builtin_instance(seed=3)
        batch = inst["batch"]
        grads = analytic_gradients(
            inst["params"], inst["ub_graph"], inst["ui_graph"], inst["pooling"],
            batch, inst["curriculum"], inst["popularity"],
            lambda1=0.5, lambda2=0.0, K=0,
        )
        touched_users = set(batch.unique_users.tolist())
        for u in range(inst["params"].ub_user.shape[0]):
            if u not in touched_users:
                assert np.all(grads.ub_user[u] == 0.0)
                assert np.all(grads.ui_user[u] == 0.0)
        touched_bundles = set(batch.unique_bundles.tolist())
        for b in range(inst["params"].ub_bundle.shape[0]):
            if b not in touched_bundles:
                assert np.all(grads.ub_bundle[b] == 0.0)

    def test_lambda1_doubling_doubles_au_contribution(self):
        inst = builtin_instance(seed=1)
        args = (
            inst["params"], inst["ub_graph"], inst["ui_graph"], inst["pooling"],
            inst["batch"], inst["curriculum"], inst["popularity"],
        )
        g0 = analytic_gradients(*args, lambda1=0.0, lambda2=0.0, K=2)
        g1 = analytic_gradients(*args, lambda1=0.5, lambda2=0.0, K=2)
        g2 = analytic_gradients(*args, lambda1=1.0, lambda2=0.0, K=2)
        for (_, a), (_, b), (_, c) in zip(g0.named_tables(), g1.named_tables(), g2.named_tables()):
            assert np.max(np.abs((c - a) - 2.0 * (b - a))) < 1e-12
        l0 = batch_loss_only(*args, lambda1=0.0, lambda2=0.0, K=2)
        l1 = batch_loss_only(*args, lambda1=0.5, lambda2=0.0, K=2)
        l2 = batch_loss_only(*args, lambda1=1.0, lambda2=0.0, K=2)
        assert (l2.total - l0.total) == pytest.approx(2 * (l1.total - l0.total), abs=1e-12)

    def test_breakdown_and_grads_consistent(self):
        inst = builtin_instance(seed=2)
        lb, grads = batch_objective(
            inst["params"], inst["ub_graph"], inst["ui_graph"], inst["pooling"],
            inst["batch"], inst["curriculum"], inst["popularity"],
            inst["lambda1"], inst["lambda2"], inst["K"],
        )
        assert np.isfinite(lb.total)
        for _, t in grads.named_tables():
            assert np.isfinite(t).all()

    @pytest.mark.parametrize("seed", [0, 5])
    def test_matches_finite_differences(self, seed):
        report = run_gradcheck(seed=seed)
        assert report["max_rel_err"] < 1e-4

    def test_norm_l2_form_gradient(self):
        inst = builtin_instance(seed=4)
        args = (
            inst["params"], inst["ub_graph"], inst["ui_graph"], inst["pooling"],
            inst["batch"], inst["curriculum"], inst["popularity"],
        )
        report = finite_diff_check(*args, lambda1=0.2, lambda2=1e-3, K=1, l2_form="norm")
        assert report["max_rel_err"] < 1e-4


class TestFiniteDifferences:
    def test_quadratic_toy_is_exact(self, rng):
        params = init_params(2, 2, 2, 3, rng)
        coeffs = [rng.normal(size=t.shape) for t in params.tables()]

        def quad(p):
            return sum(float(np.sum(c * t * t)) for c, t in zip(coeffs, p.tables()))

        num = finite_diff_gradients(quad, params, step=1e-5)
        for c, (name, g), t in zip(coeffs, num.named_tables(), params.tables()):
            exact = 2.0 * c * t
            scale = np.maximum(np.abs(exact), 1.0)
            assert np.max(np.abs(g - exact) / scale) < 1e-9, name

    def test_zero_step_rejected(self, rng):
        params = init_params(2, 2, 2, 2, rng)
        with pytest.raises(ConfigError):
            finite_diff_gradients(lambda p: 0.0, params, step=0.0)

    def test_report_shape(self):
        report = run_gradcheck(seed=0)
        assert set(report["tables"]) == {"ub_user", "ub_bundle", "ui_user", "ui_item"}
        assert report["dims"] == {"users": 5, "bundles": 4, "items": 6, "d": 8, "K": 2}
        for entry in report["tables"].values():
            assert set(entry) == {"max_rel_err", "mean_rel_err", "checked_coords"}
