"""Luenberger-type state estimator driven by sampled outputs."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError
from .model import SystemModel, rk4


@dataclass
class ObserverState:
    xhat: np.ndarray
    L: np.ndarray

    def __post_init__(self):
        self.xhat = np.asarray(self.xhat, dtype=float)
        self.L = np.atleast_2d(np.asarray(self.L, dtype=float))

    def check(self, model: SystemModel):
        if self.xhat.shape != (model.n_x,) or self.L.shape != (model.n_x, model.n_y):
            raise ConfigurationError("observer dimensions do not match the model")
        return self


def observer_rhs(model: SystemModel, L, xhat, u, y):
    """``f(xhat, u) + E w^b + L (y - C xhat)``."""
    return (np.asarray(model.f(xhat, u), dtype=float) + model.bias_drift
            + L @ (np.asarray(y, dtype=float) - model.C @ xhat))


def observer_step(model: SystemModel, L, xhat, u, y, dt, substeps=1):
    """Advance the estimate by ``dt`` with the measurement ``y`` held.

    ``u`` may be a held vector or a callable ``u(t, xhat)`` evaluated inside the stages.
    """
    if dt <= 0:
        raise ConfigurationError("dt must be positive")
    L = np.atleast_2d(np.asarray(L, dtype=float))
    y = np.asarray(y, dtype=float)
    uf = u if callable(u) else (lambda t, v, _u=np.asarray(u, dtype=float): _u)
    return rk4(lambda t, v: observer_rhs(model, L, v, uf(t, v), y), np.asarray(xhat, dtype=float), 0.0, dt, substeps)
