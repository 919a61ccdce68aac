"""Sequential Monte Carlo: conditional particle filtering with ancestor
sampling, plus the small reusable pieces (weights, resampling) it is built
from.

The central entry point is :func:`cpf_as`, one sweep of a conditional
particle filter whose last particle slot is pinned to a reference
trajectory.  Repeated sweeps, each conditioned on the previous output,
form a Markov kernel on trajectory space that leaves the joint smoothing
distribution invariant -- that property is what the identification loop
relies on, and what the tests check against an exact Gaussian smoother.

Particles are stored raw, per time step, together with the ancestor
indices that link them; surviving trajectories are recovered by tracing
ancestors backward.  With few particles almost all trajectories coalesce,
so the traced ensemble typically contains many duplicates of a few
distinct paths.  That is expected and harmless for the downstream
weighted averages.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import (DegenerateWeightsError, DimensionMismatchError,
                     DivergenceError)
from .model import Dataset, ModelParams

RESAMPLING_SCHEMES = ("multinomial", "systematic")


# ---------------------------------------------------------------------------
# weights


def measurement_log_weight(model: ModelParams, y, x, u=None) -> float:
    """Log density of one measurement under the model at state ``x``.

    Stays finite for measurements hundreds of standard deviations from the
    mean; use this rather than :func:`measurement_weight` whenever the
    result feeds a normalization.
    """
    from .model import obs_mean
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if y.shape != (model.n_y,):
        raise DimensionMismatchError(f"y must have length {model.n_y}")
    diff = y - obs_mean(model, x, u)
    L = np.linalg.cholesky(model.R)
    sol = np.linalg.solve(L, diff)
    return float(-0.5 * model.n_y * np.log(2.0 * np.pi)
                 - np.log(np.diag(L)).sum() - 0.5 * sol @ sol)


def measurement_weight(model: ModelParams, y, x, u=None) -> float:
    """Measurement weight ``p(y | x)`` (may underflow to 0 far from the
    mean; the log version never does)."""
    return float(np.exp(measurement_log_weight(model, y, x, u)))


def normalize_log_weights(logw) -> tuple[np.ndarray, bool]:
    """Exponentiate and normalize log weights stably.

    Returns ``(weights, degenerate)``; when every entry is ``-inf`` or
    non-finite the weights collapse to uniform and ``degenerate`` is True.
    """
    logw = np.asarray(logw, dtype=np.float64)
    mx = np.max(logw) if logw.size else -np.inf
    if not np.isfinite(mx):
        return np.full(logw.shape, 1.0 / max(logw.size, 1)), True
    w = np.exp(logw - mx)
    return w / w.sum(), False


def _checked_cumulative(weights) -> np.ndarray:
    weights = np.asarray(weights, dtype=np.float64)
    if weights.size == 0 or np.any(weights < 0) or \
            not np.all(np.isfinite(weights)):
        raise DegenerateWeightsError("weights must be nonnegative and finite")
    s = weights.sum()
    if s <= 0.0:
        raise DegenerateWeightsError("all resampling weights are zero")
    cum = np.cumsum(weights / s)
    cum[-1] = 1.0
    return cum


def multinomial_resample(weights, count: int, rng) -> np.ndarray:
    """``count`` independent index draws proportional to ``weights``."""
    cum = _checked_cumulative(weights)
    return np.searchsorted(cum, rng.random(int(count))).astype(np.int64)


def systematic_resample(weights, count: int, rng) -> np.ndarray:
    """``count`` stratified index draws with one shared uniform offset."""
    cum = _checked_cumulative(weights)
    u = (rng.random() + np.arange(int(count))) / int(count)
    return np.searchsorted(cum, u).astype(np.int64)


def ancestor_weights(model: ModelParams, particles_t, u_t, conditioned_next,
                     filter_weights_t) -> np.ndarray:
    """Normalized ancestor-sampling distribution for the reference particle.

    Entry ``j`` is proportional to ``filter_weights_t[j]`` times the
    transition density from particle ``j`` to ``conditioned_next``,
    evaluated in the log domain.

    Raises :class:`DegenerateWeightsError` when every product underflows;
    the filter sweep itself catches that case and falls back to a uniform
    draw instead.
    """
    from .model import step_mean
    particles_t = np.asarray(particles_t, dtype=np.float64)
    filter_weights_t = np.asarray(filter_weights_t, dtype=np.float64)
    conditioned_next = np.asarray(conditioned_next,
                                  dtype=np.float64).reshape(-1)
    L = np.linalg.cholesky(model.Q)
    const = (-0.5 * model.n_x * np.log(2.0 * np.pi)
             - np.log(np.diag(L)).sum())
    logw = np.empty(particles_t.shape[0])
    with np.errstate(divide="ignore"):
        lfw = np.log(filter_weights_t)
    for i in range(particles_t.shape[0]):
        diff = conditioned_next - step_mean(model, particles_t[i], u_t)
        sol = np.linalg.solve(L, diff)
        logw[i] = lfw[i] + const - 0.5 * sol @ sol
    w, degenerate = normalize_log_weights(logw)
    if degenerate:
        raise DegenerateWeightsError(
            "all ancestor-sampling weights underflowed")
    return w


# ---------------------------------------------------------------------------
# particle system


@dataclass(frozen=True)
class ParticleSystem:
    """Everything one conditional filter sweep produced.

    Attributes
    ----------
    states : ndarray (T, N, n_x)
        Raw particles per time step; slot ``N-1`` holds the reference
        trajectory at every step.
    ancestors : ndarray (T-1, N)
        ``ancestors[t, i]`` is the index at time ``t`` of the parent of
        particle ``i`` at time ``t+1``.
    filter_weights : ndarray (T, N)
        Normalized measurement weights at every step (the last row is the
        final trajectory-selection distribution).
    sampled_index : int
        Trajectory index drawn from the final weights.
    degenerate_count : int
        Number of steps where all weights underflowed and were replaced by
        uniform ones.
    """

    states: np.ndarray
    ancestors: np.ndarray
    filter_weights: np.ndarray
    sampled_index: int
    degenerate_count: int = 0

    @property
    def T(self) -> int:
        return self.states.shape[0]

    @property
    def N(self) -> int:
        return self.states.shape[1]

    @property
    def n_x(self) -> int:
        return self.states.shape[2]

    @property
    def final_weights(self) -> np.ndarray:
        return self.filter_weights[-1]

    def trace_indices(self) -> np.ndarray:
        """Index map ``(T, N)``: column ``i`` addresses the surviving
        trajectory that ends in particle ``i``."""
        T, N = self.T, self.N
        idx = np.empty((T, N), dtype=np.int64)
        idx[T - 1] = np.arange(N)
        for t in range(T - 2, -1, -1):
            idx[t] = self.ancestors[t][idx[t + 1]]
        return idx

    def trajectory(self, i: int) -> np.ndarray:
        """The surviving trajectory ending in particle ``i``, shape (T, n_x)."""
        if not 0 <= i < self.N:
            raise IndexError(f"trajectory index {i} out of range")
        idx = self.trace_indices()[:, i]
        return self.states[np.arange(self.T), idx].copy()

    def trajectories(self) -> np.ndarray:
        """All surviving trajectories, shape (T, N, n_x)."""
        idx = self.trace_indices()
        return self.states[np.arange(self.T)[:, None], idx]

    def sampled_trajectory(self) -> np.ndarray:
        return self.trajectory(self.sampled_index)


# ---------------------------------------------------------------------------
# the conditional sweep


def _input_features(model: ModelParams, data: Dataset) -> np.ndarray:
    """Precompute ``phi_u(u[t])`` for all t; (T, 0) when autonomous."""
    from .basis import eval_features_batch
    if model.basis_u is None:
        if data.n_u != 0:
            raise DimensionMismatchError(
                "model is autonomous but the dataset has inputs")
        return np.zeros((data.T, 0))
    if data.n_u != model.basis_u.dims:
        raise DimensionMismatchError(
            f"dataset has {data.n_u} input channels, model expects "
            f"{model.basis_u.dims}")
    _, tu = model.tables()
    return eval_features_batch(model.basis_u, data.u, table=tu)


def _kernel_params(model: ModelParams):
    """Cholesky factors and table arrays in kernel order."""
    tx, _ = model.tables()
    Lq = np.linalg.cholesky(model.Q)
    Lr = np.linalg.cholesky(model.R)
    Linit = np.linalg.cholesky(model.init_cov)
    return tx, Lq, Lr, Linit


def run_filter_arrays(y, ufeat, cond, N, Gf, Gg, Lq, Lr, init_mean, Linit,
                      table, seed, systematic):
    """Thin wrapper over the jit kernel; arrays in, arrays out.

    Exists so the identification loop can re-run sweeps without rebuilding
    model objects.  Raises :class:`DivergenceError` when a propagated state
    goes non-finite.
    """
    res = _kernels.filter_kernel(
        y, ufeat, cond, N, Gf, Gg, Lq, Lr, init_mean, Linit,
        *table.arrays(), seed & 0xFFFFFFFF, systematic)
    (states, feats, weights, ancestors, tidx, J, degen, status, fail_t) = res
    if status != _kernels.OK:
        raise DivergenceError("particle propagation produced a non-finite "
                              "state", time_index=int(fail_t))
    return states, feats, weights, ancestors, tidx, int(J), int(degen)


def cpf_as(model: ModelParams, data: Dataset, conditioned, N: int,
           seed: int = 0, resampling: str = "multinomial"
           ) -> tuple[np.ndarray, ParticleSystem]:
    """One conditional-particle-filter sweep with ancestor sampling.

    Parameters
    ----------
    model : ModelParams
        Current model; supplies dynamics, noise, and initial distribution.
    data : Dataset
        Observations (and inputs) of length T.
    conditioned : ndarray (T, n_x)
        Reference trajectory occupying the last particle slot.
    N : int
        Number of particles (>= 1).  ``N == 1`` degenerates to returning
        the reference trajectory unchanged.
    seed : int
        Seed for the sweep's random draws; same inputs and seed give
        bit-identical output.
    resampling : str
        ``"multinomial"`` (default) or ``"systematic"`` for the free
        particles' ancestors.

    Returns
    -------
    (trajectory, system)
        The sampled state trajectory (T, n_x) and the full
        :class:`ParticleSystem` of the sweep.
    """
    if N < 1:
        raise ValueError("N must be >= 1")
    if resampling not in RESAMPLING_SCHEMES:
        raise ValueError(f"unknown resampling scheme {resampling!r}; "
                         f"expected one of {RESAMPLING_SCHEMES}")
    cond = np.ascontiguousarray(conditioned, dtype=np.float64)
    if cond.ndim == 1:
        cond = cond.reshape(-1, 1)
    if cond.shape != (data.T, model.n_x):
        raise DimensionMismatchError(
            f"conditioned trajectory must be ({data.T}, {model.n_x}), "
            f"got {cond.shape}")
    if not np.all(np.isfinite(cond)):
        raise ValueError("conditioned trajectory must be finite")
    if data.n_y != model.n_y:
        raise DimensionMismatchError(
            f"dataset has {data.n_y} output channels, model has {model.n_y}")

    ufeat = _input_features(model, data)
    table, Lq, Lr, Linit = _kernel_params(model)
    states, feats, weights, ancestors, tidx, J, degen = run_filter_arrays(
        np.ascontiguousarray(data.y), ufeat, cond, int(N),
        model.Gamma_f, model.Gamma_g, Lq, Lr, model.init_mean, Linit,
        table, int(seed), resampling == "systematic")

    system = ParticleSystem(states=states, ancestors=ancestors,
                            filter_weights=weights, sampled_index=J,
                            degenerate_count=degen)
    traj = states[np.arange(data.T), tidx[:, J]].copy()
    return traj, system


# ---------------------------------------------------------------------------
# plain bootstrap filtering (for one-step-ahead evaluation)


def one_step_predictions(model: ModelParams, data: Dataset, N: int = 200,
                         seed: int = 0) -> np.ndarray:
    """One-step-ahead output predictions from a bootstrap particle filter.

    Entry ``t`` is the particle estimate of ``E[y_t | y_{1:t-1}]`` (the
    first entry uses the initial state distribution).  Used for scoring a
    model on held-out data without closed-form filtering.
    """
    if N < 1:
        raise ValueError("N must be >= 1")
    from .basis import eval_features_batch
    rng = np.random.default_rng(seed)
    tx, _ = model.tables()
    ufeat = _input_features(model, data)
    Lq = np.linalg.cholesky(model.Q)
    Lr = np.linalg.cholesky(model.R)
    ld_r = np.log(np.diag(Lr)).sum()
    m_x = model.m_x

    X = model.init_mean + rng.standard_normal((N, model.n_x)) @ \
        np.linalg.cholesky(model.init_cov).T
    yhat = np.empty((data.T, model.n_y))
    # overflow in an exploding filter is reported as DivergenceError on the
    # next step, so the intermediate warning is just noise
    with np.errstate(over="ignore", invalid="ignore"):
        for t in range(data.T):
            Z = eval_features_batch(model.basis_x, X, table=tx)
            Ey = Z @ model.Gamma_g[:, :m_x].T \
                + model.Gamma_g[:, m_x:] @ ufeat[t]
            yhat[t] = Ey.mean(axis=0)
            diff = data.y[t] - Ey
            sol = np.linalg.solve(Lr, diff.T)
            logw = -0.5 * (sol * sol).sum(axis=0) - ld_r \
                - 0.5 * model.n_y * np.log(2 * np.pi)
            w, _ = normalize_log_weights(logw)
            idx = multinomial_resample(w, N, rng)
            mean_next = (Z @ model.Gamma_f[:, :m_x].T
                         + model.Gamma_f[:, m_x:] @ ufeat[t])[idx]
            X = mean_next + rng.standard_normal((N, model.n_x)) @ Lq.T
            if not np.all(np.isfinite(X)):
                raise DivergenceError(
                    "bootstrap filter state became non-finite",
                    time_index=t + 1)
    return yhat
