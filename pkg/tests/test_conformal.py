import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from netuq.conformal import (
    BootstrapPlan,
    CalibrationError,
    EscpConfig,
    EscpPredictor,
    PredictionInterval,
    ResidualSet,
    _query_rng,
    _run_ensemble,
    build_residual_features,
    default_neighborhood_size,
    empirical_quantile,
    enbpi_interval,
    escp_interval,
    escp_intervals,
    fit_split_cp,
    loo_residual_field,
    qrf_calibrate,
    split_cp,
)
from netuq.evalharness import SyntheticSpec, generate
from netuq.geodata import train_test_split
from netuq.kernel import StbkrParams
from .test_geodata import brute_knn, make_dataset
from .test_kernel import brute_stbkr


def split_cp_oracle(values, alpha):
    """Sort-and-pick oracle for the augmented order statistic."""
    augmented = sorted(list(values) + [math.inf])
    rank = math.ceil((1 - alpha) * (len(values) + 1))
    return augmented[rank - 1]


class TestPredictionInterval:
    def test_validates_ordering(self):
        with pytest.raises(ValueError):
            PredictionInterval(center=1.0, lower=2.0, upper=3.0, alpha=0.2)
        with pytest.raises(ValueError):
            PredictionInterval(center=0.0, lower=0.0, upper=1.0, alpha=1.5)

    def test_infinite_upper_allowed(self):
        iv = PredictionInterval(center=0.0, lower=-math.inf, upper=math.inf, alpha=0.2)
        assert iv.width == math.inf
        assert iv.covers(1e300)

    def test_closed_interval_boundary(self):
        iv = PredictionInterval(center=0.5, lower=0.0, upper=1.0, alpha=0.2)
        assert iv.covers(0.0) and iv.covers(1.0)
        assert not iv.covers(1.0000001)


class TestResidualSet:
    def test_rejects_negative(self):
        with pytest.raises(ValueError):
            ResidualSet(np.array([0.5, -0.1]))

    def test_immutable(self):
        rs = ResidualSet(np.array([1.0, 2.0]))
        with pytest.raises(ValueError):
            rs.values[0] = 3.0


class TestSplitCp:
    def test_nine_residuals(self):
        rs = ResidualSet(np.arange(1.0, 10.0))
        iv = split_cp(rs, alpha=0.2, yhat=100.0)
        # rank ceil(0.8 * 10) = 8 -> eighth smallest
        assert iv.lower == 92.0 and iv.upper == 108.0 and iv.center == 100.0

    def test_zero_residuals(self):
        rs = ResidualSet(np.zeros(20))
        iv = split_cp(rs, alpha=0.2, yhat=5.0)
        assert iv.width == 0.0 and iv.covers(5.0)

    def test_small_sample_is_unbounded(self):
        rs = ResidualSet(np.array([1.0, 2.0, 3.0]))
        iv = split_cp(rs, alpha=0.05, yhat=0.0)
        # rank ceil(0.95 * 4) = 4 > 3 -> the appended infinity
        assert iv.upper == math.inf and iv.lower == -math.inf

    def test_empty_errors(self):
        with pytest.raises(ValueError):
            split_cp(ResidualSet(np.empty(0)), 0.2, 0.0)

    def test_spec_index_example(self):
        assert math.ceil(0.8 * 100) == 80  # n=99, alpha=0.2

    @settings(max_examples=200, deadline=None)
    @given(
        n=st.integers(1, 120),
        alpha=st.floats(0.01, 0.99),
        seed=st.integers(0, 10_000),
    )
    def test_matches_sort_and_pick_oracle(self, n, alpha, seed):
        rng = np.random.default_rng(seed)
        values = rng.exponential(5.0, n)
        iv = split_cp(ResidualSet(values), alpha, yhat=0.0)
        omega = split_cp_oracle(values, alpha)
        assert iv.upper == omega and iv.lower == -omega


class TestFitSplitCp:
    def _train(self, n=200, noise=5.0, seed=0):
        ds = generate(SyntheticSpec(n=n, field_kind="smooth", noise_base=noise, seed=seed))
        return ds

    def test_constant_field_zero_width(self):
        rng = np.random.default_rng(0)
        ds = make_dataset(rng.uniform(0, 10, 80), rng.uniform(0, 10, 80), np.full(80, 5.0))
        model, residuals = fit_split_cp(ds, StbkrParams(c=0.5, k=3), seed=1)
        assert np.all(residuals.values == 0.0)
        iv = split_cp(residuals, 0.2, 5.0)
        assert iv.width == 0.0

    def test_residual_count(self):
        ds = self._train(n=201)
        for frac in (0.3, 0.5, 0.62):
            _, residuals = fit_split_cp(ds, StbkrParams(c=0.5, k=3),
                                        holdout_frac=frac, seed=2)
            assert len(residuals) == int(round(frac * len(ds)))

    def test_deterministic(self):
        ds = self._train()
        _, r1 = fit_split_cp(ds, StbkrParams(c=0.5, k=3), seed=7)
        _, r2 = fit_split_cp(ds, StbkrParams(c=0.5, k=3), seed=7)
        np.testing.assert_array_equal(r1.values, r2.values)

    def test_infeasible_split(self):
        ds = self._train(n=60)
        with pytest.raises(ValueError):
            fit_split_cp(ds, StbkrParams(c=0.5, k=40), holdout_frac=0.5)


def tiny_fixture(seed=0, n=10):
    rng = np.random.default_rng(seed)
    xy = rng.uniform(0, 4, size=(n, 2))
    scores = rng.normal(20, 6, n)
    return make_dataset(xy[:, 0], xy[:, 1], scores)


class TestEscpInterval:
    def test_constant_field_degenerate(self):
        rng = np.random.default_rng(1)
        ds = make_dataset(rng.uniform(0, 5, 40), rng.uniform(0, 5, 40), np.full(40, 7.5))
        params = StbkrParams(c=0.5, k=2)
        for mode in ("empirical", "qrf"):
            cfg = EscpConfig(K=10, B=8, s=6, quantile_mode=mode, seed=3)
            iv = escp_interval(ds, (2.0, 2.0), cfg, params)
            assert iv.center == 7.5
            assert iv.width == 0.0

    def test_manual_trace_of_algorithm(self):
        # B=2, K=3, s=1: every bootstrap model is a single point whose
        # prediction is that point's score everywhere, so the whole
        # algorithm can be executed by hand
        ds = tiny_fixture(seed=5)
        params = StbkrParams(c=0.5, k=1)
        q = (0.31, 0.27)
        cfg = EscpConfig(K=3, B=2, s=1, alpha=0.2, quantile_mode="empirical",
                         point_predictor="full_neighborhood", seed=2)
        iv = escp_interval(ds, q, cfg, params)

        # step 1: neighborhood by brute-force 3-NN
        nbr, _ = brute_knn(ds.xy, q, 3)
        y_nbr = ds.score[nbr]
        # step 2: the bootstrap plan from the shared seed derivation
        rng = _query_rng(2, np.asarray(q))
        sets = rng.integers(0, 3, size=(2, 1))
        assert sets[0, 0] != sets[1, 0]  # fixture chosen to give two distinct models
        # steps 3-4: leave-one-out means and residuals
        residuals = []
        for i in range(3):
            excl = [b for b in range(2) if sets[b, 0] != i]
            if not excl:
                continue
            loo = np.mean([y_nbr[sets[b, 0]] for b in excl])
            residuals.append(abs(loo - y_nbr[i]))
        # step 5: empirical (1 - alpha) quantile
        omega = sorted(residuals)[math.ceil(0.8 * len(residuals)) - 1]
        # step 6: center from the no-resampling neighborhood fit
        center = brute_stbkr(ds.xy[nbr], y_nbr, q, c=0.5, k=1)

        assert iv.center == pytest.approx(center, rel=1e-12)
        assert iv.upper == pytest.approx(center + omega, rel=1e-12)
        assert iv.lower == pytest.approx(center - omega, rel=1e-12)

    def test_symmetric_about_center(self):
        ds = tiny_fixture(seed=6, n=30)
        cfg = EscpConfig(K=8, B=10, s=6, quantile_mode="empirical", seed=1)
        iv = escp_interval(ds, (1.0, 1.0), cfg, StbkrParams(c=0.5, k=2))
        assert iv.upper - iv.center == iv.center - iv.lower

    def test_deterministic(self):
        ds = tiny_fixture(seed=7, n=30)
        cfg = EscpConfig(K=8, B=10, s=6, quantile_mode="empirical", seed=9)
        a = escp_interval(ds, (1.5, 2.0), cfg, StbkrParams(c=0.5, k=2))
        b = escp_interval(ds, (1.5, 2.0), cfg, StbkrParams(c=0.5, k=2))
        assert a == b

    def test_defaults_match_experiment_protocol(self):
        cfg = EscpConfig(K=100)
        assert cfg.alpha == 0.2 and cfg.B == 50 and cfg.s == 100

    def test_validation_errors(self):
        ds = tiny_fixture(seed=8, n=12)
        params = StbkrParams(c=0.5, k=2)
        with pytest.raises(ValueError):
            escp_interval(ds, (0.0, 0.0), EscpConfig(K=20, B=5, s=5, seed=0), params)
        with pytest.raises(ValueError):
            escp_interval(ds, (0.0, 0.0), EscpConfig(K=5, B=5, s=5, seed=0),
                          StbkrParams(c=0.5, k=8))
        with pytest.raises(ValueError):
            escp_interval(ds, (0.0, 0.0), EscpConfig(K=5, B=5, s=2, seed=0),
                          StbkrParams(c=0.5, k=3))

    def test_all_neighbors_exhausted_raises(self):
        ds = tiny_fixture(seed=9, n=8)
        cfg = EscpConfig(K=2, B=2, s=4, quantile_mode="empirical", seed=0)
        with pytest.raises(CalibrationError, match="B"):
            escp_interval(ds, (0.05, 0.05), cfg, StbkrParams(c=0.5, k=1))

    def test_skip_rule_is_rare(self):
        # with s = K = 100 and B = 50, a neighbor landing in every
        # bootstrap set is essentially impossible
        ds = generate(SyntheticSpec(n=400, field_kind="smooth", noise_base=2.0, seed=4))
        cfg = EscpConfig(K=100, B=50, s=100, quantile_mode="empirical", seed=5)
        params = StbkrParams(c=0.2, k=5)
        skipped = total = 0
        for q in ds.xy[:5]:
            state = _run_ensemble(ds, q, cfg, params)
            skipped += int((~state.usable).sum())
            total += cfg.K
        assert skipped / total < 0.01

    def test_batch_equals_scalar_calls(self):
        ds = tiny_fixture(seed=10, n=40)
        params = StbkrParams(c=0.5, k=2)
        qs = np.array([[1.0, 1.0], [2.0, 3.0], [0.5, 3.5]])
        out = escp_intervals(ds, qs, EscpConfig(K=10, B=8, s=6, seed=4), params,
                             modes=("empirical", "qrf"))
        for mode in ("empirical", "qrf"):
            cfg = EscpConfig(K=10, B=8, s=6, quantile_mode=mode, seed=4)
            for i, q in enumerate(qs):
                assert out[mode][i] == escp_interval(ds, q, cfg, params)

    def test_predictor_class_equals_function(self):
        ds = tiny_fixture(seed=11, n=40)
        params = StbkrParams(c=0.5, k=2)
        cfg = EscpConfig(K=10, B=8, s=6, quantile_mode="qrf", seed=4)
        pred = EscpPredictor(ds, cfg, params)
        for q in ((1.0, 1.0), (3.0, 0.5)):
            assert pred.interval(q) == escp_interval(ds, q, cfg, params)

    def test_ensemble_mean_center(self):
        ds = tiny_fixture(seed=12, n=30)
        params = StbkrParams(c=0.5, k=2)
        cfg = EscpConfig(K=8, B=10, s=6, quantile_mode="empirical",
                         point_predictor="ensemble_mean", seed=2)
        iv, state = escp_interval(ds, (1.0, 2.0), cfg, params, return_details=True)
        assert iv.center == pytest.approx(state.preds_at_q.mean(), rel=1e-15)


class TestEnbpi:
    def test_constant_field(self):
        rng = np.random.default_rng(2)
        ds = make_dataset(rng.uniform(0, 5, 30), rng.uniform(0, 5, 30), np.full(30, 3.0))
        iv = enbpi_interval(ds, (2.0, 2.0), alpha=0.2, B=5, s=8,
                            params=StbkrParams(c=0.5, k=2), seed=1)
        assert iv.center == 3.0 and iv.width == 0.0

    def test_structural_reduction_to_escp(self):
        ds = tiny_fixture(seed=13, n=25)
        params = StbkrParams(c=0.5, k=2)
        q = (1.2, 2.4)
        cfg = EscpConfig(K=25, alpha=0.2, B=12, s=10, quantile_mode="empirical",
                         point_predictor="ensemble_mean", seed=21)
        assert enbpi_interval(ds, q, alpha=0.2, B=12, s=10, params=params,
                              seed=21) == escp_interval(ds, q, cfg, params)

    def test_requires_params(self):
        ds = tiny_fixture(seed=14, n=25)
        with pytest.raises(ValueError):
            enbpi_interval(ds, (0.0, 0.0), params=None)


class TestBuildResidualFeatures:
    def test_passthrough(self):
        x, y = build_residual_features([0.1, 0.2, 0.3], 0.15, expected_k=3)
        assert x.tolist() == [0.1, 0.2, 0.3] and y == 0.15

    def test_order_is_semantic(self):
        a, _ = build_residual_features([0.1, 0.2, 0.3], 0.0)
        b, _ = build_residual_features([0.3, 0.2, 0.1], 0.0)
        assert a.tolist() != b.tolist()

    def test_all_zero(self):
        x, y = build_residual_features(np.zeros(4), 0.0)
        assert not x.any() and y == 0.0

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            build_residual_features([0.1, 0.2], 0.0, expected_k=3)


class TestLooResidualField:
    def test_matches_brute_force(self):
        rng = np.random.default_rng(3)
        n, k, c = 25, 3, 0.4
        xy = rng.uniform(0, 5, size=(n, 2))
        y = rng.normal(10, 4, n)
        ds = make_dataset(xy[:, 0], xy[:, 1], y)
        field = loo_residual_field(ds, StbkrParams(c=c, k=k))
        for i in range(n):
            others = [j for j in range(n) if j != i]
            d = np.sqrt(((xy[others] - xy[i]) ** 2).sum(axis=1))
            rk = np.sort(d)[k - 1]
            h = c * rk ** 2
            w = np.exp(-0.5 * (d / h) ** 2)
            pred = (w @ y[others]) / w.sum()
            assert field[i] == pytest.approx(abs(pred - y[i]), rel=1e-9)

    def test_constant_field_zero(self):
        rng = np.random.default_rng(4)
        ds = make_dataset(rng.uniform(0, 5, 30), rng.uniform(0, 5, 30), np.full(30, 2.0))
        field = loo_residual_field(ds, StbkrParams(c=0.5, k=3))
        assert np.allclose(field, 0.0)


class TestQrfCalibrate:
    def test_zero_residuals_give_zero_omega(self):
        rng = np.random.default_rng(5)
        ds = make_dataset(rng.uniform(0, 5, 60), rng.uniform(0, 5, 60), np.full(60, 9.0))
        cfg = EscpConfig(K=10, B=8, s=8, quantile_mode="qrf", seed=2)
        omega = qrf_calibrate(ds, (2.0, 2.0), cfg, StbkrParams(c=0.5, k=2))
        assert omega == 0.0

    def test_matches_escp_interval_half_width(self):
        ds = tiny_fixture(seed=15, n=50)
        params = StbkrParams(c=0.5, k=2)
        cfg = EscpConfig(K=12, B=10, s=8, quantile_mode="qrf", seed=6)
        q = (1.0, 3.0)
        omega = qrf_calibrate(ds, q, cfg, params)
        iv = escp_interval(ds, q, cfg, params)
        assert omega == pytest.approx(iv.width / 2.0, rel=1e-12)

    def test_homoscedastic_tracks_empirical_quantile(self):
        # i.i.d. residuals everywhere: the conditional quantile should sit
        # close to the marginal one, on average over seeds
        diffs, emps = [], []
        params = StbkrParams(c=0.5, k=5)
        for seed in range(20):
            ds = generate(SyntheticSpec(n=600, field_kind="smooth", noise_base=6.0,
                                        seed=100 + seed))
            cfg = EscpConfig(K=80, B=30, s=80, quantile_mode="qrf", seed=seed)
            q = ds.xy[::200][:3]
            for row in q:
                state = _run_ensemble(ds, row, cfg, params)
                emp = empirical_quantile(state.residuals[state.usable], 0.8)
                qrf = qrf_calibrate(ds, row, cfg, params)
                diffs.append(abs(qrf - emp))
                emps.append(emp)
        assert np.mean(diffs) < 0.15 * np.mean(emps)

    def test_heteroscedastic_sides_differ(self):
        params = StbkrParams(c=0.3, k=5)
        highs, lows = [], []
        for seed in range(3):
            ds = generate(SyntheticSpec(n=700, field_kind="heteroscedastic",
                                        noise_base=4.0, noise_ratio=4.0, seed=seed))
            cfg = EscpConfig(K=60, B=25, s=50, quantile_mode="qrf", seed=seed)
            low_q = ds.xy[ds.lon < 0.2][:4]
            high_q = ds.xy[ds.lon > 0.8][:4]
            lows += [qrf_calibrate(ds, q, cfg, params) for q in low_q]
            highs += [qrf_calibrate(ds, q, cfg, params) for q in high_q]
        assert np.mean(highs) > np.mean(lows)

    def test_radius_validation(self):
        ds = tiny_fixture(seed=16, n=30)
        cfg = EscpConfig(K=8, B=5, s=5, quantile_mode="qrf", seed=0)
        with pytest.raises(ValueError):
            qrf_calibrate(ds, (0.0, 0.0), cfg, StbkrParams(c=0.5, k=2),
                          training_radius=5)
        with pytest.raises(ValueError):
            qrf_calibrate(ds, (0.0, 0.0), cfg, StbkrParams(c=0.5, k=2),
                          training_radius=100)


class TestBootstrapPlan:
    def test_shapes_and_membership(self):
        plan = BootstrapPlan.draw(np.random.default_rng(0), B=6, s=9, K=11)
        assert plan.index_sets.shape == (6, 9)
        assert plan.membership.shape == (6, 11)
        for b in range(6):
            present = set(plan.index_sets[b].tolist())
            assert {i for i in range(11) if plan.membership[b, i]} == present

    def test_query_rng_quantization(self):
        a = _query_rng(5, np.array([1.0, 2.0])).integers(0, 1000, 8)
        b = _query_rng(5, np.array([1.0 + 1e-12, 2.0 - 1e-12])).integers(0, 1000, 8)
        np.testing.assert_array_equal(a, b)

    def test_distinct_queries_differ(self):
        a = _query_rng(5, np.array([1.0, 2.0])).integers(0, 1000, 8)
        b = _query_rng(5, np.array([1.1, 2.0])).integers(0, 1000, 8)
        assert not np.array_equal(a, b)


def test_default_neighborhood_size():
    assert default_neighborhood_size(10_000) == 500
    assert default_neighborhood_size(2_000) == 200
    assert default_neighborhood_size(15) == 2


@settings(max_examples=40, deadline=None)
@given(
    n=st.integers(1, 60),
    alpha=st.floats(0.01, 0.99),
    scale=st.floats(0.1, 100.0),
    seed=st.integers(0, 1000),
)
def test_empirical_quantile_is_order_statistic(n, alpha, scale, seed):
    rng = np.random.default_rng(seed)
    values = rng.exponential(scale, n)
    tau = 1.0 - alpha
    got = empirical_quantile(values, tau)
    v = np.sort(values)
    idx = min(max(math.ceil(tau * n - 1e-12), 1), n)
    assert got == v[idx - 1]
