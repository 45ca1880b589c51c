"""Adaptive-moment gradient descent shared by both trainable models."""

import numpy as np

__all__ = ["Adam", "TrainingError"]


class TrainingError(RuntimeError):
    """Training aborted (non-finite loss or invalid configuration)."""


class Adam:
    """Standard Adam with bias correction, updating parameters in place.

    Parameters are a dict name -> float64 array; step() takes a grads dict
    with the same keys and shapes.
    """

    def __init__(self, params, lr=5e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        if lr <= 0:
            raise TrainingError("learning rate must be positive")
        self.params = params
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads):
        if set(grads) != set(self.params):
            raise TrainingError("gradient keys do not match parameter keys")
        self.t += 1
        b1t = 1.0 - self.beta1**self.t
        b2t = 1.0 - self.beta2**self.t
        for name, g in grads.items():
            p = self.params[name]
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)
