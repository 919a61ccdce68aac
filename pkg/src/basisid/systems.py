"""Reference systems for generating benchmark datasets.

These are the data-generating processes the test suite and the CLI's
``generate`` command draw from.  The primary benchmark is a scalar system
with a sharply nonlinear, saturating state transition observed through an
identity measurement -- easy to simulate, hard to fit with few features,
and prone to over-fitting with many.
"""

from __future__ import annotations

import numpy as np

from .basis import BasisSpec
from .model import Dataset, ModelParams

# noise levels of the scalar benchmark
EXAMPLE1_Q = 0.1
EXAMPLE1_R = 0.5


def example1_transition(x):
    """The benchmark state transition f(x) = -10 x / (1 + 3 x^2)."""
    x = np.asarray(x, dtype=np.float64)
    return -10.0 * x / (1.0 + 3.0 * x * x)


def generate_example1(T: int = 1000, seed: int = 0, x1: float = 0.0
                      ) -> tuple[Dataset, np.ndarray]:
    """Simulate the scalar benchmark; returns the dataset and true states.

    Dynamics: x[t+1] = -10 x[t] / (1 + 3 x[t]^2) + w,  w ~ N(0, 0.1)
    Measurement: y[t] = x[t] + e,                      e ~ N(0, 0.5)
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    rng = np.random.default_rng(seed)
    w = rng.normal(0.0, np.sqrt(EXAMPLE1_Q), size=T)
    e = rng.normal(0.0, np.sqrt(EXAMPLE1_R), size=T)
    x = np.empty(T)
    x[0] = x1
    for t in range(T - 1):
        x[t + 1] = -10.0 * x[t] / (1.0 + 3.0 * x[t] * x[t]) + w[t]
    y = x + e
    return Dataset(u=np.zeros((T, 0)), y=y.reshape(-1, 1)), x


def linear_model(a: float = 0.9, q: float = 0.1, c: float = 1.0,
                 r: float = 0.1, init_var: float = 1.0) -> ModelParams:
    """Scalar linear-Gaussian model x' = a x + w, y = c x + e."""
    basis = BasisSpec.linear(1)
    return ModelParams(basis_x=basis, basis_u=None,
                       Gamma_f=np.array([[a]]), Gamma_g=np.array([[c]]),
                       Q=np.array([[q]]), R=np.array([[r]]),
                       init_mean=np.zeros(1),
                       init_cov=np.array([[init_var]]))


def generate_linear(T: int = 1000, seed: int = 0, a: float = 0.9,
                    q: float = 0.1, c: float = 1.0, r: float = 0.1,
                    x1: float | None = None) -> tuple[Dataset, np.ndarray]:
    """Simulate the scalar linear-Gaussian system; returns (dataset, states).

    With ``x1=None`` the initial state is drawn from the model's initial
    distribution; zero noise (q = r = 0) is allowed and gives the
    deterministic geometric trajectory.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    if q < 0 or r < 0:
        raise ValueError("noise variances must be >= 0")
    rng = np.random.default_rng(seed)
    x = np.empty(T)
    x[0] = rng.normal(0.0, 1.0) if x1 is None else float(x1)
    w = rng.normal(0.0, np.sqrt(q), size=T) if q > 0 else np.zeros(T)
    e = rng.normal(0.0, np.sqrt(r), size=T) if r > 0 else np.zeros(T)
    for t in range(T - 1):
        x[t + 1] = a * x[t] + w[t]
    y = c * x + e
    return Dataset(u=np.zeros((T, 0)), y=y.reshape(-1, 1)), x
