"""Noise schedule and DDIM step algebra."""

from types import SimpleNamespace

import numpy as np
import pytest

from sdlab import autodiff as ad
from sdlab.autodiff import Field
from sdlab.errors import ConfigError, DimensionError
from sdlab.schedule import (Schedule, _coeffs, ddim_inverse_step, ddim_step,
                            make_schedule)


class TestMakeSchedule:
    def test_abar0_is_exactly_one(self):
        assert make_schedule(30).alpha_bar[0] == 1.0

    def test_strictly_decreasing_at_default_T(self):
        ab = make_schedule(30).alpha_bar
        assert (np.diff(ab) < 0).all()

    def test_default_step_count_is_30(self):
        sched = make_schedule(30)
        assert sched.T == 30
        assert sched.alpha_bar.size == 31

    def test_rejects_tiny_T(self):
        with pytest.raises(ConfigError):
            make_schedule(1)

    def test_monotonic_and_bounded_for_all_T_2_to_100(self):
        for T in range(2, 101):
            ab = make_schedule(T).alpha_bar
            assert ab[0] == 1.0
            assert ab[-1] > 0.0
            assert (np.diff(ab) < 0).all()
            assert (ab >= 1e-4 - 1e-12).all() and (ab <= 1.0).all()

    def test_schedule_validation(self):
        with pytest.raises(ConfigError):
            Schedule(np.array([1.0, 0.5, 0.5]))  # not strictly decreasing
        with pytest.raises(ConfigError):
            Schedule(np.array([0.9, 0.5, 0.2]))  # abar_0 != 1


class TestDdimStepAlgebra:
    def test_eps_zero_closed_form(self):
        sched = Schedule(np.array([1.0, 0.8, 0.5]))
        z = Field([1.0])
        out = ddim_step(z, Field([0.0]), 2, sched)
        assert out.data[0] == pytest.approx(np.sqrt(1.6), abs=1e-5)

    def test_equal_alphas_cancel_for_any_eps(self):
        stub = SimpleNamespace(alpha_bar=np.array([1.0, 0.5, 0.5]))
        c1, c2 = _coeffs(stub, 2, 1)
        assert c1 == 1.0 and c2 == 0.0

    def test_inverse_step_eps_zero_is_pure_rescale(self):
        sched = Schedule(np.array([1.0, 0.8, 0.5]))
        z = Field([2.0])
        out = ddim_inverse_step(z, Field([0.0]), 0, sched)
        assert out.data[0] == pytest.approx(2.0 * np.sqrt(0.8), abs=1e-6)

    def test_round_trip_identity_100_random_triples(self):
        sched = make_schedule(30)
        rng = np.random.default_rng(0)
        for _ in range(100):
            t = int(rng.integers(0, sched.T))
            z = Field(rng.standard_normal((8, 8)).astype(np.float32))
            e = Field(rng.standard_normal((8, 8)).astype(np.float32))
            fwd = ddim_inverse_step(z, e, t, sched)
            back = ddim_step(fwd, e, t + 1, sched)
            assert np.abs(back.data - z.data).max() < 1e-5

    def test_step_range_checks(self):
        sched = make_schedule(10)
        z = Field(np.zeros(3))
        with pytest.raises(DimensionError):
            ddim_step(z, z, 0, sched)
        with pytest.raises(DimensionError):
            ddim_step(z, z, 11, sched)
        with pytest.raises(DimensionError):
            ddim_inverse_step(z, z, 10, sched)

    def test_step_is_differentiable_through_eps(self):
        sched = make_schedule(10)
        eps = Field(np.ones((2, 2), dtype=np.float32), requires_grad=True)
        z = Field(np.zeros((2, 2), dtype=np.float32))
        with ad.Tape():
            out = ddim_step(z, eps, 5, sched)
            ad.backward(ad.sum_all(out))
        c1, c2 = _coeffs(sched, 5, 4)
        assert np.allclose(eps.grad, np.full((2, 2), c2), rtol=1e-6)
