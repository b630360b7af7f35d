"""Adam update contracts."""

import numpy as np
import pytest

from sdlab.autodiff import Field
from sdlab.errors import ConfigError
from sdlab.optim import Adam, adam_step


def test_beta1_zero_first_moment_is_raw_gradient():
    p = np.zeros(3)
    m = np.zeros(3)
    v = np.zeros(3)
    for step in range(1, 4):
        g = np.array([0.5, -1.0, 2.0]) * step
        adam_step(p, g, m, v, step, lr=1e-4, beta1=0.0, beta2=0.999)
        assert np.array_equal(m, g)


def test_defaults_match_inversion_recipe():
    opt = Adam([Field(np.zeros(2), requires_grad=True)])
    assert opt.lr == 1e-4
    assert (opt.beta1, opt.beta2) == (0.0, 0.999)


def test_constant_gradient_update_tends_to_lr_sign():
    lr = 1e-4
    p = np.array([0.0])
    m = np.zeros(1)
    v = np.zeros(1)
    g = np.array([3.7])
    prev = p.copy()
    for step in range(1, 1001):
        adam_step(p, g, m, v, step, lr=lr)
        delta = p - prev
        prev = p.copy()
    # magnitude approaches lr, direction is -sign(g)
    assert delta[0] == pytest.approx(-lr, rel=1e-3)


def test_nonpositive_lr_rejected():
    with pytest.raises(ConfigError):
        adam_step(np.zeros(1), np.ones(1), np.zeros(1), np.zeros(1), 1, lr=0.0)
    with pytest.raises(ConfigError):
        Adam([Field(np.zeros(1), requires_grad=True)], lr=-1e-4)


def test_adam_class_skips_gradless_params_and_zero_grad_clears():
    a = Field(np.ones(2, dtype=np.float32), requires_grad=True)
    b = Field(np.ones(2, dtype=np.float32), requires_grad=True)
    a.grad = np.full(2, 0.5, dtype=np.float32)
    opt = Adam([a, b], lr=1e-2)
    opt.step()
    assert not np.array_equal(a.data, np.ones(2))
    assert np.array_equal(b.data, np.ones(2))
    opt.zero_grad()
    assert a.grad is None
