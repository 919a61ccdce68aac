"""Identification by stochastic-approximation EM with particle smoothing.

Each iteration runs one conditional particle filter sweep under the current
model (the E-step), turns the weighted trajectory ensemble into quadratic
sufficient statistics, blends those into a running average with a decaying
step size, and solves the regularized least-squares problem the statistics
define in closed form (the M-step).  Because the model is linear in its
basis-function weights, the M-step is exact: coefficients come from a ridge
system and noise covariances from the residual moments.

State and measurement equations are maximized independently; either can be
frozen (fully or per-entry) through a :class:`~basisid.model.StructureSpec`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from scipy.linalg import blas as _blas

from . import smc as _smc
from .basis import BasisSpec, PriorSpec, build_precision, compile_table
from .errors import (DimensionMismatchError, DivergenceError,
                     RankDeficiencyError)
from .model import Dataset, ModelParams, StructureSpec

MIN_EIGENVALUE = 1e-9


# ---------------------------------------------------------------------------
# sufficient statistics


@dataclass
class SuffStats:
    """Weighted second moments of a response/regressor pair.

    ``phi`` is the response moment E[zeta zeta'], ``psi`` the cross moment
    E[zeta z'], ``sigma`` the regressor moment E[z z'], each scaled by 1/T.
    """

    phi: np.ndarray
    psi: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        self.phi = np.asarray(self.phi, dtype=np.float64)
        self.psi = np.asarray(self.psi, dtype=np.float64)
        self.sigma = np.asarray(self.sigma, dtype=np.float64)
        p, q = self.psi.shape
        if self.phi.shape != (p, p) or self.sigma.shape != (q, q):
            raise DimensionMismatchError(
                f"inconsistent stats shapes: phi {self.phi.shape}, "
                f"psi {self.psi.shape}, sigma {self.sigma.shape}")

    @property
    def p(self) -> int:
        return self.psi.shape[0]

    @property
    def q(self) -> int:
        return self.psi.shape[1]

    @classmethod
    def zeros(cls, p: int, q: int) -> "SuffStats":
        return cls(np.zeros((p, p)), np.zeros((p, q)), np.zeros((q, q)))


def _syrk(a: np.ndarray) -> np.ndarray:
    """``a.T @ a`` through the symmetric rank-k BLAS update.

    ``a`` is (n, q) C-contiguous; passing ``a.T`` (Fortran-contiguous)
    avoids the copy the wrapper would otherwise make.
    """
    c = _blas.dsyrk(1.0, a.T, lower=0)
    return np.triu(c) + np.triu(c, 1).T


def _weighted_moments(zeta_w: np.ndarray, z_w: np.ndarray
                      ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Unscaled (phi, psi, sigma) from sqrt-weight-scaled rows."""
    sigma = _syrk(np.ascontiguousarray(z_w))
    phi = zeta_w.T @ zeta_w
    psi = zeta_w.T @ z_w
    return phi, psi, sigma


def _stacked_regressors(feats_x: np.ndarray, ufeat: np.ndarray,
                        sw: np.ndarray) -> np.ndarray:
    """Flatten (T, N, m_x) state features and (T, m_u) input features into
    regressor rows ordered time-major: row t*N + i.

    The state features arrive already scaled by the sqrt-weights; the input
    features are shared across particles, so the same per-particle factor is
    applied here to keep every column of a row consistently weighted.
    """
    T, N, m_x = feats_x.shape
    m_u = ufeat.shape[1]
    out = np.empty((T * N, m_x + m_u))
    out[:, :m_x] = feats_x.reshape(T * N, m_x)
    if m_u:
        out[:, m_x:] = np.repeat(ufeat, N, axis=0)
        out[:, m_x:] *= np.tile(sw, T)[:, None]
    return out


def iteration_stats(system: "_smc.ParticleSystem", model: ModelParams,
                    data: Dataset, equation: str = "state") -> SuffStats:
    """Sufficient statistics of one particle system under final weights.

    For the state equation the response is the next state and the regressor
    the current state/input features, over t = 1..T-1; for the measurement
    equation the response is the observed output over t = 1..T.  Every
    trajectory contributes with its final weight at all times.  Results are
    scaled by 1/T.
    """
    if equation not in ("state", "measurement"):
        raise ValueError("equation must be 'state' or 'measurement'")
    from .basis import eval_features_batch
    T, N = system.T, system.N
    if T != data.T:
        raise DimensionMismatchError("particle system and dataset lengths "
                                     "differ")
    tx, _ = model.tables()
    X = system.trajectories()                      # (T, N, n_x)
    feats = eval_features_batch(
        model.basis_x, X.reshape(T * N, model.n_x),
        table=tx).reshape(T, N, model.m_x)
    ufeat = _smc._input_features(model, data)

    sw = np.sqrt(system.final_weights)
    if equation == "state":
        Z = _stacked_regressors(feats[:-1] * sw[None, :, None], ufeat[:-1],
                                sw)
        B = (X[1:] * sw[None, :, None]).reshape((T - 1) * N, model.n_x)
    else:
        Z = _stacked_regressors(feats * sw[None, :, None], ufeat, sw)
        B = (np.broadcast_to(data.y[:, None, :], (T, N, data.n_y))
             * sw[None, :, None]).reshape(T * N, data.n_y)
    phi, psi, sigma = _weighted_moments(B, Z)
    return SuffStats(phi / T, psi / T, sigma / T)


# ---------------------------------------------------------------------------
# step-size schedule


@dataclass(frozen=True)
class GammaSchedule:
    """Stochastic-approximation step sizes gamma_k = (k - burn_in)^-exponent.

    The first ``burn_in + 1`` iterations use gamma = 1 (statistics are fully
    replaced, no averaging); afterwards the step decays polynomially.  The
    exponent must lie in (0.5, 1] so the usual convergence conditions
    (steps sum to infinity, squares sum finitely) hold.
    """

    exponent: float = 0.7
    burn_in: int = 0

    def __post_init__(self):
        if not (0.5 < self.exponent <= 1.0):
            raise ValueError("gamma exponent must lie in (0.5, 1]")
        if self.burn_in < 0:
            raise ValueError("burn_in must be >= 0")


def gamma_value(schedule: GammaSchedule, k: int) -> float:
    """Step size for one-based iteration ``k``; gamma_1 is always 1."""
    if k < 1:
        raise ValueError("iteration index k must be >= 1")
    if k <= schedule.burn_in + 1:
        return 1.0
    return float(k - schedule.burn_in) ** (-schedule.exponent)


def blend_stats(old: SuffStats, new: SuffStats, gamma_k: float) -> SuffStats:
    """Convex combination (1 - gamma) * old + gamma * new, per field."""
    if not (0.0 < gamma_k <= 1.0):
        raise ValueError("gamma_k must lie in (0, 1]")
    if (old.p, old.q) != (new.p, new.q):
        raise DimensionMismatchError("stats dimensions differ")
    g = float(gamma_k)
    return SuffStats((1 - g) * old.phi + g * new.phi,
                     (1 - g) * old.psi + g * new.psi,
                     (1 - g) * old.sigma + g * new.sigma)


# ---------------------------------------------------------------------------
# M-step


def _floor_spectrum(Pi: np.ndarray, floor: float) -> tuple[np.ndarray, int]:
    """Symmetrize and raise eigenvalues below ``floor``."""
    Pi = 0.5 * (Pi + Pi.T)
    evals, evecs = np.linalg.eigh(Pi)
    n_low = int(np.sum(evals < floor))
    if n_low:
        evals = np.maximum(evals, floor)
        Pi = (evecs * evals) @ evecs.T
        Pi = 0.5 * (Pi + Pi.T)
    return Pi, n_low


def _m_step_impl(phi, psi, sigma, P_diag, T, mask, fixed,
                 equation: str | None = None
                 ) -> tuple[np.ndarray, np.ndarray, int]:
    """Row-masked ridge solve plus residual moment.  Returns the number of
    floored eigenvalues alongside (Gamma, Pi)."""
    p, q = psi.shape
    A = sigma + np.diag(P_diag / T)
    if mask is None:
        try:
            cf = scipy.linalg.cho_factor(A, lower=True)
        except scipy.linalg.LinAlgError:
            raise RankDeficiencyError(
                "regressor moment matrix is singular; add or increase "
                "regularization", equation=equation) from None
        Gamma = scipy.linalg.cho_solve(cf, psi.T).T
    else:
        Gamma = fixed.copy() if fixed is not None else np.zeros((p, q))
        groups: dict[bytes, list[int]] = {}
        for r in range(p):
            groups.setdefault(mask[r].tobytes(), []).append(r)
        for rows in groups.values():
            act = mask[rows[0]]
            if not act.any():
                continue
            try:
                cf = scipy.linalg.cho_factor(A[np.ix_(act, act)], lower=True)
            except scipy.linalg.LinAlgError:
                raise RankDeficiencyError(
                    "restricted regressor moment matrix is singular; add "
                    "or increase regularization", equation=equation,
                    row=rows[0]) from None
            inact = ~act
            for r in rows:
                rhs = psi[r, act]
                if inact.any():
                    rhs = rhs - Gamma[r, inact] @ sigma[np.ix_(inact, act)]
                Gamma[r, act] = scipy.linalg.cho_solve(cf, rhs)
    GS = Gamma @ sigma
    Pi = phi - psi @ Gamma.T - Gamma @ psi.T + GS @ Gamma.T
    Pi, n_low = _floor_spectrum(Pi, MIN_EIGENVALUE)
    return Gamma, Pi, n_low


def m_step(stats: SuffStats, P, T: int, mask=None, fixed=None
           ) -> tuple[np.ndarray, np.ndarray]:
    """Closed-form maximization given blended statistics.

    Solves ``Gamma = Psi (Sigma + P/T)^{-1}`` by symmetric factorization,
    row by row where ``mask`` freezes entries at ``fixed`` values (the
    frozen contribution moves to the right-hand side), and returns the
    residual moment ``Pi = Phi - Psi Gamma' - Gamma Psi' + Gamma Sigma
    Gamma'``, symmetrized and eigenvalue-floored at 1e-9.  With ``P = 0``
    and no mask this is exactly the unregularized least-squares solution.

    Parameters
    ----------
    stats : SuffStats
    P : array
        Diagonal prior precision over regressor entries; either the full
        (q, q) diagonal matrix or its diagonal as a vector.
    T : int
        Number of data points the statistics were scaled by.
    mask, fixed : arrays (p, q), optional
        Boolean learn-mask and frozen values for masked entries.

    Raises
    ------
    RankDeficiencyError
        When the (restricted) system is singular.
    """
    P = np.asarray(P, dtype=np.float64)
    if P.ndim == 2:
        if P.shape != (stats.q, stats.q):
            raise DimensionMismatchError(
                f"P must be {stats.q}x{stats.q}, got {P.shape}")
        if np.any(P != np.diag(np.diagonal(P))):
            raise ValueError("P must be a diagonal matrix")
        P_diag = np.diagonal(P).copy()
    elif P.ndim == 1:
        if P.shape != (stats.q,):
            raise DimensionMismatchError(
                f"diagonal of P must have length {stats.q}")
        P_diag = P.copy()
    else:
        raise DimensionMismatchError("P must be a matrix or its diagonal")
    if np.any(P_diag < 0):
        raise ValueError("P must be positive semidefinite")
    if T < 1:
        raise ValueError("T must be >= 1")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (stats.p, stats.q):
            raise DimensionMismatchError(
                f"mask must be {stats.p}x{stats.q}, got {mask.shape}")
        if fixed is not None:
            fixed = np.asarray(fixed, dtype=np.float64)
            if fixed.shape != mask.shape:
                raise DimensionMismatchError("fixed must match mask shape")
    Gamma, Pi, _ = _m_step_impl(stats.phi, stats.psi, stats.sigma,
                                P_diag, T, mask, fixed)
    return Gamma, Pi


# ---------------------------------------------------------------------------
# run configuration and driver


@dataclass(frozen=True)
class PsaemConfig:
    """Controls for one identification run.

    ``init_model`` provides theta[0] (bases, coefficients, noise, initial
    state distribution); ``structure`` freezes known parts.  ``trace_period``
    thins the parameter trace: a snapshot is stored every that many
    iterations (plus the final one).
    """

    N: int
    K: int
    init_model: ModelParams
    gamma: GammaSchedule = GammaSchedule()
    prior: PriorSpec = PriorSpec()
    structure: StructureSpec | None = None
    seed: int = 0
    trace_period: int = 10
    resampling: str = "multinomial"

    def __post_init__(self):
        if self.N < 1:
            raise ValueError("N must be >= 1")
        if self.K < 0:
            raise ValueError("K must be >= 0")
        if self.trace_period < 1:
            raise ValueError("trace_period must be >= 1")
        if self.resampling not in _smc.RESAMPLING_SCHEMES:
            raise ValueError(
                f"unknown resampling scheme {self.resampling!r}")


@dataclass
class PsaemResult:
    """Identification output: final model, thinned trace, per-iteration
    diagnostics records."""

    model: ModelParams
    trace: list[tuple[int, ModelParams]] = field(default_factory=list)
    diagnostics: list[dict] = field(default_factory=list)


def regressor_precision(model: ModelParams, prior: PriorSpec) -> np.ndarray:
    """Diagonal of the prior precision over the stacked regressor."""
    d = np.diagonal(build_precision(model.basis_x, prior)).copy()
    if model.basis_u is not None:
        du = np.diagonal(build_precision(model.basis_u, prior)).copy()
        d = np.concatenate([d, du])
    return d


def initial_model(data: Dataset, basis_x: BasisSpec,
                  basis_u: BasisSpec | None = None,
                  structure: StructureSpec | None = None) -> ModelParams:
    """Default theta[0]: zero coefficients except a stabilizing 0.5 on any
    identity feature of the matching state dimension, noise covariances at
    the pooled output variance, and a zero-mean initial state.

    Entries frozen by ``structure`` are set to their fixed values.
    """
    n_x = basis_x.dims
    n_y = data.n_y
    m_x = basis_x.feature_count
    m_u = 0 if basis_u is None else basis_u.feature_count
    q = m_x + m_u

    Gf = np.zeros((n_x, q))
    table = compile_table(basis_x)
    # identity features reading exactly one coordinate
    for j in range(table.m):
        idn = np.flatnonzero(table.ftype[j] == 3)
        if idn.size == 1 and np.all(table.ftype[j][table.ftype[j] != 3] == 0):
            Gf[int(idn[0]), j] = 0.5
    Gg = np.zeros((n_y, q))

    if structure is not None:
        if structure.state_mask is not None:
            Gf = np.where(structure.state_mask, Gf, structure.state_fixed)
        if structure.meas_mask is not None:
            Gg = np.where(structure.meas_mask, Gg, structure.meas_fixed)

    s = float(np.mean(np.var(data.y, axis=0)))
    if not math.isfinite(s) or s <= 0:
        s = 1.0
    return ModelParams(basis_x=basis_x, basis_u=basis_u, Gamma_f=Gf,
                       Gamma_g=Gg, Q=s * np.eye(n_x), R=s * np.eye(n_y),
                       init_mean=np.zeros(n_x), init_cov=s * np.eye(n_x))


def _resolve_equation(mask, fixed, learn_noise, p, q):
    """Normalize one equation's structure into (mask, fixed, active) where
    ``active`` says whether anything at all is learned."""
    if mask is None:
        return None, None, True
    active = bool(mask.any()) or learn_noise
    return mask, fixed, active


def psaem_identify(data: Dataset, config: PsaemConfig) -> PsaemResult:
    """Run the full identification loop.

    Iterates: one conditional particle filter sweep under the current
    parameters, statistics blending with the step-size schedule, and the
    closed-form M-step per learnable equation.  Known equations (all-False
    masks with frozen noise) are never touched.  ``K = 0`` returns the
    initial model unchanged.

    Raises
    ------
    DivergenceError
        If particle propagation produces non-finite states; annotated with
        the iteration number.
    RankDeficiencyError
        If an M-step system is singular; annotated with the iteration.
    """
    model = config.init_model
    if data.n_y != model.n_y:
        raise DimensionMismatchError(
            f"dataset has {data.n_y} outputs, model has {model.n_y}")
    structure = config.structure or StructureSpec.learn_all()
    structure.validate_against(model)

    T, N, K = data.T, config.N, config.K
    n_x, n_y = model.n_x, model.n_y
    m_x, q = model.m_x, model.q

    if K == 0:
        return PsaemResult(model=model)

    tx, _ = model.tables()
    ufeat = _smc._input_features(model, data)
    y = np.ascontiguousarray(data.y)
    P_diag = regressor_precision(model, config.prior)

    smask, sfixed, learn_state = _resolve_equation(
        structure.state_mask, structure.state_fixed, structure.learn_Q,
        n_x, q)
    mmask, mfixed, learn_meas = _resolve_equation(
        structure.meas_mask, structure.meas_fixed, structure.learn_R,
        n_y, q)

    # working parameter arrays (model objects are only built for snapshots)
    Gf = model.Gamma_f.copy()
    Gg = model.Gamma_g.copy()
    Q = model.Q.copy()
    R = model.R.copy()
    Lq = np.linalg.cholesky(Q)
    Lr = np.linalg.cholesky(R)
    init_mean = model.init_mean.copy()
    Linit = np.linalg.cholesky(model.init_cov)

    stats_f = SuffStats.zeros(n_x, q) if learn_state else None
    stats_g = SuffStats.zeros(n_y, q) if learn_meas else None

    cond = np.zeros((T, n_x))
    seeds = np.random.SeedSequence(config.seed).generate_state(
        K, dtype=np.uint32)
    systematic = config.resampling == "systematic"
    rows = np.arange(T)[:, None]

    def snapshot() -> ModelParams:
        return ModelParams(basis_x=model.basis_x, basis_u=model.basis_u,
                           Gamma_f=Gf.copy(), Gamma_g=Gg.copy(),
                           Q=Q.copy(), R=R.copy(),
                           init_mean=init_mean.copy(),
                           init_cov=model.init_cov.copy())

    trace: list[tuple[int, ModelParams]] = []
    diagnostics: list[dict] = []

    for k in range(1, K + 1):
        try:
            states, feats, weights, ancestors, tidx, J, degen = \
                _smc.run_filter_arrays(y, ufeat, cond, N, Gf, Gg, Lq, Lr,
                                       init_mean, Linit, tx,
                                       int(seeds[k - 1]), systematic)
        except DivergenceError as err:
            raise DivergenceError(
                "particle propagation produced a non-finite state",
                time_index=err.time_index, iteration=k) from None

        g = gamma_value(config.gamma, k)
        sw = np.sqrt(weights[-1])
        Xw = states[rows, tidx]
        Zw = feats[rows, tidx]
        Xw *= sw[None, :, None]
        Zw *= sw[None, :, None]

        floored = 0
        rec = {"k": k, "gamma": g, "degenerate_weight_steps": int(degen),
               "pi_floor_activations": 0, "pi_trace_state": None,
               "pi_trace_meas": None}
        try:
            if learn_state:
                Z = _stacked_regressors(Zw[:-1], ufeat[:-1], sw)
                B = Xw[1:].reshape((T - 1) * N, n_x)
                phi, psi, sigma = _weighted_moments(B, Z)
                om = 1.0 - g
                stats_f.phi *= om
                stats_f.phi += (g / T) * phi
                stats_f.psi *= om
                stats_f.psi += (g / T) * psi
                stats_f.sigma *= om
                stats_f.sigma += (g / T) * sigma
                Gf, Pi, n_low = _m_step_impl(
                    stats_f.phi, stats_f.psi, stats_f.sigma, P_diag, T,
                    smask, sfixed, equation="state")
                floored += n_low
                rec["pi_trace_state"] = float(np.trace(Pi))
                if structure.learn_Q:
                    Q = Pi
                    Lq = np.linalg.cholesky(Q)
            if learn_meas:
                Z = _stacked_regressors(Zw, ufeat, sw)
                B = (np.broadcast_to(y[:, None, :], (T, N, n_y)) *
                     sw[None, :, None]).reshape(T * N, n_y)
                phi, psi, sigma = _weighted_moments(
                    np.ascontiguousarray(B), Z)
                om = 1.0 - g
                stats_g.phi *= om
                stats_g.phi += (g / T) * phi
                stats_g.psi *= om
                stats_g.psi += (g / T) * psi
                stats_g.sigma *= om
                stats_g.sigma += (g / T) * sigma
                Gg, Pi_g, n_low = _m_step_impl(
                    stats_g.phi, stats_g.psi, stats_g.sigma, P_diag, T,
                    mmask, mfixed, equation="measurement")
                floored += n_low
                rec["pi_trace_meas"] = float(np.trace(Pi_g))
                if structure.learn_R:
                    R = Pi_g
                    Lr = np.linalg.cholesky(R)
        except RankDeficiencyError as err:
            err.args = (f"iteration {k}: {err.args[0]}",)
            raise
        if not (np.all(np.isfinite(Gf)) and np.all(np.isfinite(Q))
                and np.all(np.isfinite(Gg)) and np.all(np.isfinite(R))):
            raise DivergenceError("parameter update became non-finite",
                                  iteration=k)

        cond = states[np.arange(T), tidx[:, J]].copy()
        rec["pi_floor_activations"] = floored
        diagnostics.append(rec)
        if k % config.trace_period == 0 or k == K:
            trace.append((k, snapshot()))

    return PsaemResult(model=snapshot(), trace=trace,
                       diagnostics=diagnostics)
