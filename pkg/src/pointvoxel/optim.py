"""Parameter update rules: SGD with momentum and Adam.

Optimizers mutate the parameter arrays of a store (dict of name -> ndarray)
in place, iterating names in sorted order so updates are deterministic given
the gradients. NaN gradients abort with the offending parameter name.
"""

import numpy as np

from .errors import ConfigError, TrainingError


class SGD:
    def __init__(self, lr=0.01, momentum=0.0):
        self.lr = lr
        self.momentum = momentum
        self._velocity = {}

    def step(self, params, grads):
        for name in sorted(grads):
            g = grads[name]
            if np.isnan(g).any():
                raise TrainingError(f"NaN gradient for parameter {name!r}")
            p = params[name]
            if p.shape != g.shape:
                raise TrainingError(f"gradient shape {g.shape} != param shape {p.shape} for {name!r}")
            if self.momentum != 0.0:
                v = self._velocity.get(name)
                if v is None:
                    v = np.zeros_like(p)
                    self._velocity[name] = v
                v *= p.dtype.type(self.momentum)
                v += g
                g = v
            p -= p.dtype.type(self.lr) * g


class Adam:
    def __init__(self, lr=0.001, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self._m = {}
        self._v = {}
        self._t = 0

    def step(self, params, grads):
        self._t += 1
        t = self._t
        for name in sorted(grads):
            g = grads[name]
            if np.isnan(g).any():
                raise TrainingError(f"NaN gradient for parameter {name!r}")
            p = params[name]
            if p.shape != g.shape:
                raise TrainingError(f"gradient shape {g.shape} != param shape {p.shape} for {name!r}")
            dt = p.dtype.type
            m = self._m.setdefault(name, np.zeros_like(p))
            v = self._v.setdefault(name, np.zeros_like(p))
            m *= dt(self.beta1)
            m += dt(1 - self.beta1) * g
            v *= dt(self.beta2)
            v += dt(1 - self.beta2) * (g * g)
            mhat = m / dt(1 - self.beta1 ** t)
            vhat = v / dt(1 - self.beta2 ** t)
            p -= dt(self.lr) * mhat / (np.sqrt(vhat) + dt(self.eps))


def make_optimizer(config):
    """Build an optimizer from a config mapping with a 'kind' key."""
    cfg = dict(config)
    kind = cfg.pop("kind", "sgd").lower()
    if kind == "sgd":
        return SGD(lr=cfg.pop("lr", 0.01), momentum=cfg.pop("momentum", 0.0))
    if kind == "adam":
        return Adam(lr=cfg.pop("lr", 0.001), beta1=cfg.pop("beta1", 0.9),
                    beta2=cfg.pop("beta2", 0.999), eps=cfg.pop("eps", 1e-8))
    raise ConfigError(f"unknown optimizer kind {kind!r}")
