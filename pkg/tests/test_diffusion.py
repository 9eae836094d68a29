import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pwshortcut.acoustics import ImagingGrid, RfFrame, TransducerGeometry, build_operator, forward
from pwshortcut.denoiser import GaussianPriorDenoiser
from pwshortcut.diffusion import (
    DataConsistencyConfig,
    RunLog,
    ShortcutConfig,
    consistency_gradient,
    count_denoiser_calls,
    data_consistency,
    forward_diffuse,
    heun_step,
    karras_schedule,
    residual_norm,
    sample_full,
    sample_shortcut,
    shortcut_sigmas,
    truncated_schedule,
)

# sigma_25 of the (N=50, 0.002, 80, rho=7) schedule, evaluated with mpmath at 50 digits
KARRAS_SIGMA_25 = 2.29432272224320819886792475584


def constant(c):
    return lambda x, sigma: np.full_like(np.asarray(x, dtype=float), c)


def gaussian_flow(x0, mu, s, sigma0, sigma):
    """Exact probability-flow trajectory under a Gaussian prior."""
    return mu + (x0 - mu) * np.sqrt((s**2 + sigma**2) / (s**2 + sigma0**2))


class TestSchedule:
    def test_endpoints_default(self):
        sig = karras_schedule(50, 0.002, 80.0).sigmas
        assert sig[0] == 80.0
        assert sig[49] == 0.002
        assert sig[-1] == 0.0
        assert len(sig) == 51

    def test_linear_spacing_at_rho_one(self):
        assert np.allclose(karras_schedule(3, 1.0, 4.0, rho=1.0).sigmas, [4.0, 2.5, 1.0, 0.0], rtol=0, atol=1e-15)

    def test_extended_precision_oracle(self):
        sig = karras_schedule(50, 0.002, 80.0, 7.0).sigmas
        assert sig[25] == pytest.approx(KARRAS_SIGMA_25, rel=1e-13)

    def test_single_step(self):
        assert np.array_equal(karras_schedule(1, 0.002, 80.0).sigmas, [80.0, 0.0])

    @settings(max_examples=50, deadline=None)
    @given(
        n=st.integers(2, 200),
        smin=st.floats(1e-4, 1.0),
        ratio=st.floats(1.01, 1e4),
        rho=st.floats(0.5, 10.0),
    )
    def test_monotone_with_exact_endpoints(self, n, smin, ratio, rho):
        smax = smin * ratio
        sig = karras_schedule(n, smin, smax, rho).sigmas
        assert sig[0] == smax and sig[n - 1] == smin and sig[n] == 0.0
        assert np.all(np.diff(sig) < 0)

    @pytest.mark.parametrize("args", [(0, 0.1, 1.0), (5, 1.0, 1.0), (5, 0.0, 1.0), (5, 0.1, 1.0, 0.0), (2.5, 0.1, 1.0)])
    def test_invalid(self, args):
        with pytest.raises(ValueError):
            karras_schedule(*args)


class TestForwardDiffuse:
    def test_zero_sigma_is_identity(self):
        x = np.arange(6.0).reshape(2, 3)
        assert np.array_equal(forward_diffuse(x, 0.0, 1), x)

    def test_deterministic(self):
        x = np.zeros((4, 4))
        assert np.array_equal(forward_diffuse(x, 2.0, 9), forward_diffuse(x, 2.0, 9))

    def test_sample_std(self):
        out = forward_diffuse(np.zeros((128, 128)), 5.0, 0)
        assert 4.85 <= out.std() <= 5.15

    def test_negative_sigma(self):
        with pytest.raises(ValueError):
            forward_diffuse(np.zeros(3), -1.0, 0)


class TestHeun:
    def test_constant_denoiser_collapses_to_constant(self):
        assert np.array_equal(heun_step(constant(0.7), np.array([3.0, -2.0]), 1.3, 0.0), [0.7, 0.7])

    def test_gaussian_prior_hand_value(self):
        d = GaussianPriorDenoiser(0.0, 1.0)
        assert heun_step(d, np.array(2.0), 1.0, 0.5) == pytest.approx(1.6, abs=1e-15)

    def test_identity_denoiser_is_fixed_point(self):
        x = np.array([1.0, -4.0, 2.5])
        assert np.array_equal(heun_step(lambda v, s: v, x, 3.0, 1.0), x)

    @pytest.mark.parametrize("pair", [(1.0, 1.0), (0.5, 1.0), (1.0, -0.1)])
    def test_invalid_order(self, pair):
        with pytest.raises(ValueError):
            heun_step(constant(0.0), np.zeros(2), *pair)


class TestDataConsistency:
    def test_zero_lambda_is_identity(self):
        op = build_operator(TransducerGeometry(element_count=4, sample_count=64), ImagingGrid(4, 4, 0.5e-3, 1e-3, -0.3e-3, 0.3e-3), 0.0)
        x = np.random.default_rng(0).standard_normal((4, 4))
        dc = DataConsistencyConfig(0.0, [op], [np.zeros(op.rf_shape)])
        assert np.array_equal(data_consistency(x, dc), x)

    def test_exact_solution_is_fixed(self):
        grid = ImagingGrid(6, 6, 0.5e-3, 1.2e-3, -0.4e-3, 0.4e-3)
        op = build_operator(TransducerGeometry(element_count=4, sample_count=64), grid, 0.1)
        x = np.random.default_rng(1).standard_normal(grid.shape)
        dc = DataConsistencyConfig(0.5, [op], [forward(op, x)])
        assert np.linalg.norm(consistency_gradient(x, dc)) <= 1e-10
        assert np.allclose(data_consistency(x, dc), x, atol=1e-10)

    def test_scalar_surrogate(self):
        # H = identity (1x1), y = 0, x = 3, lambda = 1 -> 2
        class Identity:
            matrix = np.eye(1)
            rf_shape = (1, 1)
            grid = type("G", (), {"shape": (1, 1)})()

        dc = DataConsistencyConfig(1.0, [Identity()], [np.zeros((1, 1))])
        assert data_consistency(np.array([[3.0]]), dc)[0, 0] == pytest.approx(2.0, abs=1e-15)

    def test_gradient_matches_finite_differences(self):
        grid = ImagingGrid(4, 4, 0.5e-3, 1e-3, -0.3e-3, 0.3e-3)
        ops = [build_operator(TransducerGeometry(element_count=4, sample_count=64), grid, t) for t in (-0.1, 0.1)]
        rng = np.random.default_rng(2)
        ys = [rng.standard_normal(op.rf_shape) for op in ops]
        dc = DataConsistencyConfig(1.0, ops, ys, scale=1.0)
        x = rng.standard_normal(grid.shape)
        g = consistency_gradient(x, dc)
        h = 1e-6
        for idx in [(0, 0), (2, 3), (3, 1)]:
            e = np.zeros(grid.shape)
            e[idx] = h
            fd = (residual_norm(x + e, dc) - residual_norm(x - e, dc)) / (2 * h)
            assert g[idx] == pytest.approx(fd, rel=1e-5, abs=1e-8)

    def test_shape_mismatch(self):
        op = build_operator(TransducerGeometry(element_count=4, sample_count=64), ImagingGrid(4, 4, 0.5e-3, 1e-3, -0.3e-3, 0.3e-3), 0.0)
        dc = DataConsistencyConfig(0.1, [op], [np.zeros(op.rf_shape)])
        with pytest.raises(ValueError):
            data_consistency(np.zeros((3, 4)), dc)
        with pytest.raises(ValueError):
            DataConsistencyConfig(0.1, [op], [np.zeros((2, 2))])

    @pytest.mark.parametrize("kwargs", [{"lam": -0.1}, {"eps": 0.0}])
    def test_invalid_config(self, kwargs):
        with pytest.raises(ValueError):
            DataConsistencyConfig(**kwargs)


class TestSampleFull:
    def test_single_step_constant_denoiser(self):
        out = sample_full(constant(1.25), karras_schedule(1, 0.002, 80.0), (3, 3), rng=0)
        assert np.array_equal(out, np.full((3, 3), 1.25))

    def test_gaussian_prior_matches_flow_oracle(self):
        mu, s = 0.3, 0.8
        d = GaussianPriorDenoiser(mu, s)
        sched = karras_schedule(50, 0.002, 80.0)
        out = sample_full(d, sched, (64,), rng=5)
        x_init = 80.0 * np.random.default_rng(5).standard_normal(64)
        oracle = gaussian_flow(x_init, mu, s, 80.0, 0.0)
        assert np.max(np.abs(out - oracle)) < 0.05

    def test_doubling_steps_cuts_error_by_three(self):
        mu, s = 0.3, 0.8
        d = GaussianPriorDenoiser(mu, s)
        errs = []
        for n in (25, 50):
            out = sample_full(d, karras_schedule(n, 0.002, 80.0), (64,), rng=5)
            x_init = 80.0 * np.random.default_rng(5).standard_normal(64)
            errs.append(np.max(np.abs(out - gaussian_flow(x_init, mu, s, 80.0, 0.0))))
        assert errs[0] >= 3 * errs[1]

    def test_deterministic(self):
        d = GaussianPriorDenoiser(0.0, 1.0)
        sched = karras_schedule(10, 0.002, 80.0)
        assert np.array_equal(sample_full(d, sched, (5,), rng=3), sample_full(d, sched, (5,), rng=3))


class TestShortcut:
    def test_rebuild_from_sigma_max_with_zero_start_equals_full(self):
        d = GaussianPriorDenoiser(0.2, 0.7)
        cfg = ShortcutConfig(sigma_k=80.0, steps=50, schedule_mode="rebuild")
        short = sample_shortcut(d, np.zeros((8,)), cfg, rng=11)
        full = sample_full(d, karras_schedule(50, 0.002, 80.0), (8,), rng=11)
        assert np.array_equal(short, full)

    def test_gaussian_prior_warm_start_matches_flow_oracle(self):
        mu, s = 0.0, 1.0
        d = GaussianPriorDenoiser(mu, s)
        rng = np.random.default_rng(4)
        truth = rng.standard_normal(32)
        x_s = truth + 0.1 * rng.standard_normal(32)
        out = sample_shortcut(d, x_s, ShortcutConfig(sigma_k=5.0, steps=20), rng=8)
        x_k = x_s + 5.0 * np.random.default_rng(8).standard_normal(32)
        oracle = gaussian_flow(x_k, mu, s, 5.0, 0.0)
        # Heun error on this schedule is O(1/s^2); bound from the 20-step value
        assert np.max(np.abs(out - oracle)) < 20.0 / 20**2

    def test_single_step_constant_denoiser(self):
        out = sample_shortcut(constant(-0.4), np.ones((2, 2)), ShortcutConfig(sigma_k=5.0, steps=1), rng=0)
        assert np.array_equal(out, np.full((2, 2), -0.4))

    def test_rebuild_starts_exactly_at_sigma_k(self):
        sig, n = shortcut_sigmas(ShortcutConfig(sigma_k=5.0, steps=20))
        assert sig[0] == 5.0 and sig[-2] == 0.002 and sig[-1] == 0.0
        assert len(sig) - 1 == 20 and n == 20

    @pytest.mark.parametrize("sigma_max", [40.0, 60.0, 80.0])
    @pytest.mark.parametrize("steps", [1, 5, 10, 20, 50])
    def test_truncate_tail_has_requested_length(self, sigma_max, steps):
        tail, n_full = truncated_schedule(5.0, steps, sigma_max, 0.002, 7.0)
        full = karras_schedule(n_full, 0.002, sigma_max).sigmas
        assert len(tail) - 1 == steps
        assert tail[0] <= 5.0
        start = len(full) - 1 - steps
        assert start == 0 or full[start - 1] > 5.0
        assert np.array_equal(tail, full[start:])

    def test_truncate_logs_injected_sigma(self):
        log = RunLog()
        cfg = ShortcutConfig(sigma_k=5.0, steps=20, schedule_mode="truncate", sigma_max=60.0)
        sample_shortcut(GaussianPriorDenoiser(), np.zeros(4), cfg, rng=0, log=log)
        assert log.requested_sigma == 5.0
        assert log.injected_sigma <= 5.0
        assert len(log.rows) == 20

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"sigma_k": 0.001},
            {"steps": 0},
            {"schedule_mode": "other"},
            {"schedule_mode": "truncate", "sigma_k": 100.0, "sigma_max": 80.0},
        ],
    )
    def test_invalid_config(self, kwargs):
        with pytest.raises(ValueError):
            ShortcutConfig(**kwargs)


class TestCallCounting:
    @pytest.mark.parametrize("n, calls", [(50, 99), (20, 39), (1, 1)])
    def test_full_counts(self, n, calls):
        log = RunLog()
        sample_full(GaussianPriorDenoiser(), karras_schedule(n, 0.002, 80.0), (2,), rng=0, log=log)
        assert count_denoiser_calls(log) == calls

    @pytest.mark.parametrize("mode", ["rebuild", "truncate"])
    @pytest.mark.parametrize("steps, calls", [(20, 39), (1, 1), (5, 9)])
    def test_shortcut_counts(self, mode, steps, calls):
        log = RunLog()
        cfg = ShortcutConfig(steps=steps, schedule_mode=mode)
        sample_shortcut(GaussianPriorDenoiser(), np.zeros(2), cfg, rng=0, log=log)
        assert count_denoiser_calls(log) == calls

    def test_run_log_csv(self, tmp_path):
        grid = ImagingGrid(4, 4, 0.5e-3, 1e-3, -0.3e-3, 0.3e-3)
        op = build_operator(TransducerGeometry(element_count=4, sample_count=64), grid, 0.0)
        y = forward(op, np.ones(grid.shape))
        dc = DataConsistencyConfig(0.01, [op], [y])
        log = RunLog()
        sample_shortcut(GaussianPriorDenoiser(), np.zeros(grid.shape), ShortcutConfig(steps=3), dc, rng=0, log=log)
        path = tmp_path / "log.csv"
        log.write_csv(path)
        lines = path.read_text().splitlines()
        assert lines[0] == "step,sigma_cur,sigma_next,residual_pre,residual_post,denoiser_calls"
        assert len(lines) == 4
        for row in log.rows:
            assert row["residual_post"] != row["residual_pre"]


def test_samplers_accept_rf_frames_as_measurements():
    grid = ImagingGrid(4, 4, 0.5e-3, 1e-3, -0.3e-3, 0.3e-3)
    op = build_operator(TransducerGeometry(element_count=4, sample_count=64), grid, 0.0)
    y = forward(op, np.ones(grid.shape))
    a = DataConsistencyConfig(0.05, [op], [y])
    b = DataConsistencyConfig(0.05, [op], [RfFrame(y.samples.copy(), 0.0).samples])
    x = np.zeros(grid.shape)
    assert np.array_equal(data_consistency(x, a), data_consistency(x, b))
