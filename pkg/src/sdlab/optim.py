"""Adam optimizer, defaults matching the inversion recipe (lr 1e-4, betas (0, 0.999))."""

import numpy as np

from .errors import ConfigError


def adam_step(param, grad, m, v, step, lr, beta1=0.0, beta2=0.999, eps=1e-8):
    """One in-place Adam update with bias correction.

    m and v are the running first/second moment arrays (zero-initialized by
    the caller); step counts from 1.
    """
    if lr <= 0:
        raise ConfigError(f"adam: lr must be positive, got {lr}")
    if step < 1:
        raise ConfigError("adam: step counter starts at 1")
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    mhat = m / (1.0 - beta1 ** step)
    vhat = v / (1.0 - beta2 ** step)
    param -= lr * mhat / (np.sqrt(vhat) + eps)
    return param


class Adam:
    def __init__(self, params, lr=1e-4, betas=(0.0, 0.999), eps=1e-8):
        if lr <= 0:
            raise ConfigError(f"adam: lr must be positive, got {lr}")
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            adam_step(p.data, p.grad, m, v, self.t, self.lr, self.beta1, self.beta2, self.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None
