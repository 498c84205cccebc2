"""Adaptive-moment optimizer over named parameter tensors."""

import numpy as np

from .autodiff import InvalidArgumentError


class Adam:
    """Standard first-order adaptive-moment updates with bias correction.

    Operates on a {name: Tensor} dict; parameters whose grad is unset
    contribute zero gradient that step. Moment buffers are exposed as
    named arrays so a checkpoint can persist and restore them.
    """

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        if lr <= 0:
            raise InvalidArgumentError(f"learning rate must be > 0, got {lr}")
        if not (0 <= beta1 < 1 and 0 <= beta2 < 1):
            raise InvalidArgumentError(
                f"momentum constants must lie in [0, 1), got {beta1}, {beta2}")
        self.params = dict(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        self.t += 1
        correct1 = 1.0 - self.beta1 ** self.t
        correct2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / correct1) / (np.sqrt(v / correct2)
                                                  + self.eps)

    def state_arrays(self):
        """Moment buffers and step count as flat named float arrays."""
        out = {"opt.t": np.array([float(self.t)])}
        for name in self.params:
            out[f"opt.m.{name}"] = self.m[name]
            out[f"opt.v.{name}"] = self.v[name]
        return out

    def load_state(self, arrays):
        """Restore step count and moments; missing names stay zeroed."""
        if "opt.t" in arrays:
            self.t = int(round(float(np.asarray(arrays["opt.t"]).ravel()[0])))
        for name in self.params:
            if f"opt.m.{name}" in arrays:
                self.m[name] = np.asarray(arrays[f"opt.m.{name}"],
                                          dtype=np.float64).reshape(
                                              self.m[name].shape)
            if f"opt.v.{name}" in arrays:
                self.v[name] = np.asarray(arrays[f"opt.v.{name}"],
                                          dtype=np.float64).reshape(
                                              self.v[name].shape)
