"""Adam optimizer with bias correction.

Update rule (per parameter): m = b1*m + (1-b1)*g; v = b2*v + (1-b2)*g^2;
p -= lr * m_hat / (sqrt(v_hat) + eps) with m_hat = m/(1-b1^t), v_hat =
v/(1-b2^t). With lr=0 the step is the exact identity on parameters.
"""

import numpy as np

from .errors import ConfigError, NonFiniteGradientError


class Adam:
    """Holds step_count and per-parameter first/second moment arrays.

    ``named_params`` is a dict or iterable of (name, Tensor); names feed the
    non-finite-gradient diagnostics. A parameter whose grad is still None is
    treated as having a zero gradient.
    """

    def __init__(self, named_params, lr, beta1=0.9, beta2=0.999, epsilon=1e-8):
        if lr < 0:
            raise ConfigError(f"Adam: negative learning rate {lr}")
        if not (0.0 < beta1 < 1.0 and 0.0 < beta2 < 1.0):
            raise ConfigError(f"Adam: betas must be in (0,1), got {beta1}, {beta2}")
        if epsilon <= 0:
            raise ConfigError(f"Adam: epsilon must be positive, got {epsilon}")
        if hasattr(named_params, "items"):
            named_params = named_params.items()
        self.params = list(named_params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.step_count = 0
        self.first_moment = {n: np.zeros_like(p.data) for n, p in self.params}
        self.second_moment = {n: np.zeros_like(p.data) for n, p in self.params}

    def zero_grad(self):
        for _, p in self.params:
            p.zero_grad()

    def step(self):
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for name, p in self.params:
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            elif not np.isfinite(g).all():
                raise NonFiniteGradientError(name, f"at step {t}")
            m = self.first_moment[name]
            v = self.second_moment[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (m / c1) / (np.sqrt(v / c2) + self.epsilon)
            p.data -= (self.lr * update).astype(p.data.dtype, copy=False)
