"""Model containers, structure constraints, and simulation.

The model class represents a discrete-time stochastic state-space system

    x[t+1] = Gamma_f @ [phi_x(x[t]); phi_u(u[t])] + w[t],   w ~ N(0, Q)
    y[t]   = Gamma_g @ [phi_x(x[t]); phi_u(u[t])] + e[t],   e ~ N(0, R)

where ``phi_x`` and ``phi_u`` are the feature maps of two basis
specifications.  Both equations share the same regressor, so known-linear,
known-static, or partially known structure is expressed by masking columns
of the coefficient matrices rather than by special-casing the dynamics.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import basis as _basis
from .basis import BasisSpec, FeatureTable, compile_table, eval_features_batch
from .errors import DimensionMismatchError, DivergenceError


def _check_cov(M: np.ndarray, name: str, dim: int):
    if M.shape != (dim, dim):
        raise DimensionMismatchError(
            f"{name} must be {dim}x{dim}, got {M.shape}")
    if not np.all(np.isfinite(M)):
        raise ValueError(f"invariant violated: {name} finite")
    if not np.allclose(M, M.T, atol=1e-10, rtol=1e-8):
        raise ValueError(f"invariant violated: {name} symmetric")
    try:
        np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        raise ValueError(
            f"invariant violated: {name} positive definite") from None


@dataclass(frozen=True)
class ModelParams:
    """A fully specified model: bases, coefficients, noise, initial state.

    Attributes
    ----------
    basis_x : BasisSpec
        State feature map; its ``dims`` fixes the state dimension ``n_x``.
    basis_u : BasisSpec or None
        Input feature map, or None for an autonomous model.
    Gamma_f : ndarray (n_x, m_x + m_u)
        State-equation coefficients over the stacked features.
    Gamma_g : ndarray (n_y, m_x + m_u)
        Measurement-equation coefficients.
    Q, R : ndarray
        Process and measurement noise covariances (positive definite).
    init_mean, init_cov : ndarray
        Gaussian initial state distribution.
    """

    basis_x: BasisSpec
    basis_u: BasisSpec | None
    Gamma_f: np.ndarray
    Gamma_g: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    init_mean: np.ndarray
    init_cov: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "Gamma_f",
                           np.asarray(self.Gamma_f, dtype=np.float64))
        object.__setattr__(self, "Gamma_g",
                           np.asarray(self.Gamma_g, dtype=np.float64))
        object.__setattr__(self, "Q", np.asarray(self.Q, dtype=np.float64))
        object.__setattr__(self, "R", np.asarray(self.R, dtype=np.float64))
        object.__setattr__(self, "init_mean",
                           np.asarray(self.init_mean,
                                      dtype=np.float64).reshape(-1))
        object.__setattr__(self, "init_cov",
                           np.asarray(self.init_cov, dtype=np.float64))
        self.validate()

    # -- derived sizes -----------------------------------------------------

    @property
    def n_x(self) -> int:
        return self.basis_x.dims

    @property
    def n_y(self) -> int:
        return self.Gamma_g.shape[0]

    @property
    def m_x(self) -> int:
        return self.basis_x.feature_count

    @property
    def m_u(self) -> int:
        return 0 if self.basis_u is None else self.basis_u.feature_count

    @property
    def q(self) -> int:
        """Total regressor length ``m_x + m_u``."""
        return self.m_x + self.m_u

    def validate(self):
        """Check all shape and noise invariants; raises on the first failure."""
        q = self.q
        if self.Gamma_f.ndim != 2 or self.Gamma_f.shape != (self.n_x, q):
            raise DimensionMismatchError(
                f"Gamma_f must be {self.n_x}x{q}, got {self.Gamma_f.shape}")
        if self.Gamma_g.ndim != 2 or self.Gamma_g.shape[1] != q:
            raise DimensionMismatchError(
                f"Gamma_g must have {q} columns, got {self.Gamma_g.shape}")
        if self.Gamma_g.shape[0] < 1:
            raise DimensionMismatchError("Gamma_g needs at least one row")
        for name, M in (("Gamma_f", self.Gamma_f), ("Gamma_g", self.Gamma_g)):
            if not np.all(np.isfinite(M)):
                raise ValueError(f"invariant violated: {name} finite")
        _check_cov(self.Q, "Q", self.n_x)
        _check_cov(self.R, "R", self.n_y)
        if self.init_mean.shape != (self.n_x,):
            raise DimensionMismatchError(
                f"init_mean must have length {self.n_x}")
        if not np.all(np.isfinite(self.init_mean)):
            raise ValueError("invariant violated: init_mean finite")
        _check_cov(self.init_cov, "init_cov", self.n_x)

    # -- table caching -----------------------------------------------------

    def tables(self) -> tuple[FeatureTable, FeatureTable | None]:
        """Compiled feature tables for both bases (cached on first use)."""
        cached = getattr(self, "_tables", None)
        if cached is None:
            tx = compile_table(self.basis_x)
            tu = None if self.basis_u is None else compile_table(self.basis_u)
            object.__setattr__(self, "_tables", (tx, tu))
            cached = (tx, tu)
        return cached


def regressor(model: ModelParams, x, u=None) -> np.ndarray:
    """Stacked feature vector ``[phi_x(x); phi_u(u)]`` at one point."""
    tx, tu = model.tables()
    zx = _basis.eval_features(model.basis_x, x, table=tx)
    if model.basis_u is None:
        if u is not None and np.size(u):
            raise DimensionMismatchError("model is autonomous but an input "
                                         "was supplied")
        return zx
    if u is None:
        raise DimensionMismatchError("model expects an input")
    zu = _basis.eval_features(model.basis_u, u, table=tu)
    return np.concatenate([zx, zu])


def step_mean(model: ModelParams, x, u=None) -> np.ndarray:
    """Noise-free next state ``Gamma_f @ regressor``."""
    return model.Gamma_f @ regressor(model, x, u)


def obs_mean(model: ModelParams, x, u=None) -> np.ndarray:
    """Noise-free measurement ``Gamma_g @ regressor``."""
    return model.Gamma_g @ regressor(model, x, u)


def state_function(model: ModelParams, X) -> np.ndarray:
    """Evaluate the state-transition function on a grid, inputs at zero.

    ``X`` has one point per row (a 1-d array is treated as scalar states);
    returns ``(len(X), n_x)``.  Input features are evaluated at ``u = 0``
    so the returned values isolate the state-dependent part plus any
    constant contribution of the input basis.
    """
    tx, tu = model.tables()
    X = np.atleast_1d(np.asarray(X, dtype=np.float64))
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    Z = eval_features_batch(model.basis_x, X, table=tx)
    out = Z @ model.Gamma_f[:, :model.m_x].T
    if model.basis_u is not None:
        zu = _basis.eval_features(model.basis_u,
                                  np.zeros(model.basis_u.dims), table=tu)
        out = out + model.Gamma_f[:, model.m_x:] @ zu
    return out


# ---------------------------------------------------------------------------
# structure constraints


@dataclass(frozen=True)
class StructureSpec:
    """Which coefficients and noise covariances the identification may touch.

    Masks are boolean arrays over the coefficient matrices: ``True`` marks a
    learnable entry, ``False`` an entry frozen at the corresponding value in
    the ``*_fixed`` array.  ``None`` masks mean "learn everything" (with
    fixed values irrelevant).  Noise covariances are learned or kept at
    their initial values wholesale via ``learn_Q`` / ``learn_R``.
    """

    state_mask: np.ndarray | None = None
    state_fixed: np.ndarray | None = None
    meas_mask: np.ndarray | None = None
    meas_fixed: np.ndarray | None = None
    learn_Q: bool = True
    learn_R: bool = True

    def __post_init__(self):
        for mname, fname in (("state_mask", "state_fixed"),
                             ("meas_mask", "meas_fixed")):
            mask = getattr(self, mname)
            fixed = getattr(self, fname)
            if mask is None:
                if fixed is not None:
                    raise ValueError(f"{fname} given without {mname}")
                continue
            mask = np.asarray(mask, dtype=bool)
            object.__setattr__(self, mname, mask)
            if fixed is None:
                fixed = np.zeros(mask.shape)
            fixed = np.asarray(fixed, dtype=np.float64)
            if fixed.shape != mask.shape:
                raise DimensionMismatchError(
                    f"{fname} shape {fixed.shape} does not match "
                    f"{mname} shape {mask.shape}")
            if not np.all(np.isfinite(fixed)):
                raise ValueError(f"{fname} must be finite")
            object.__setattr__(self, fname, fixed)

    @classmethod
    def learn_all(cls) -> "StructureSpec":
        return cls()

    def validate_against(self, model: ModelParams):
        """Check mask shapes against a concrete model."""
        if self.state_mask is not None and \
                self.state_mask.shape != model.Gamma_f.shape:
            raise DimensionMismatchError(
                f"state_mask shape {self.state_mask.shape} does not match "
                f"Gamma_f shape {model.Gamma_f.shape}")
        if self.meas_mask is not None and \
                self.meas_mask.shape != model.Gamma_g.shape:
            raise DimensionMismatchError(
                f"meas_mask shape {self.meas_mask.shape} does not match "
                f"Gamma_g shape {model.Gamma_g.shape}")


# ---------------------------------------------------------------------------
# data


@dataclass(frozen=True)
class Dataset:
    """An input-output record: ``u`` (T, n_u) and ``y`` (T, n_y).

    ``n_u`` may be zero for autonomous systems; ``y`` must be non-empty.
    """

    u: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        y = np.asarray(self.y, dtype=np.float64)
        if y.ndim == 1:
            y = y.reshape(-1, 1)
        if self.u is None:
            u = np.zeros((y.shape[0] if y.ndim == 2 else 0, 0))
        else:
            u = np.asarray(self.u, dtype=np.float64)
        if u.ndim == 1:
            u = u.reshape(-1, 1)
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "y", y)
        if y.ndim != 2 or u.ndim != 2:
            raise DimensionMismatchError("u and y must be 2-d arrays")
        if y.shape[1] < 1:
            raise ValueError("dataset needs at least one output channel")
        if u.shape[0] != y.shape[0]:
            raise DimensionMismatchError(
                f"u has {u.shape[0]} rows but y has {y.shape[0]}")
        if y.shape[0] < 1:
            raise ValueError("dataset must contain at least one time step")
        if not (np.all(np.isfinite(u)) and np.all(np.isfinite(y))):
            raise ValueError("dataset values must be finite")

    @property
    def T(self) -> int:
        return self.y.shape[0]

    @property
    def n_u(self) -> int:
        return self.u.shape[1]

    @property
    def n_y(self) -> int:
        return self.y.shape[1]


# ---------------------------------------------------------------------------
# simulation and metrics


def simulate(model: ModelParams, u=None, T: int | None = None, x1=None,
             seed: int | None = None, with_noise: bool = True
             ) -> tuple[np.ndarray, np.ndarray]:
    """Roll the model forward, returning states ``(T, n_x)`` and outputs
    ``(T, n_y)``.

    The horizon comes from ``u`` when given, else from ``T``.  ``x1``
    defaults to the model's initial mean.  With noise enabled, process and
    measurement noise are drawn from ``Q`` and ``R`` using ``seed``.

    Raises
    ------
    DivergenceError
        If a state leaves the representable range; the error carries the
        zero-based time index of the first bad step.
    """
    if u is not None:
        u = np.asarray(u, dtype=np.float64)
        if u.ndim == 1:
            u = u.reshape(-1, 1)
        if model.basis_u is None:
            raise DimensionMismatchError("model is autonomous but an input "
                                         "sequence was supplied")
        if u.shape[1] != model.basis_u.dims:
            raise DimensionMismatchError(
                f"input rows must have length {model.basis_u.dims}")
        horizon = u.shape[0]
        if T is not None and T != horizon:
            raise DimensionMismatchError("T disagrees with len(u)")
    else:
        if model.basis_u is not None:
            raise DimensionMismatchError("model expects an input sequence")
        if T is None:
            raise ValueError("autonomous simulation needs T")
        horizon = int(T)
    if horizon < 1:
        raise ValueError("simulation horizon must be >= 1")

    rng = np.random.default_rng(seed)
    n_x, n_y = model.n_x, model.n_y
    tx, tu = model.tables()

    if x1 is None:
        x = model.init_mean.copy()
    else:
        x = np.asarray(x1, dtype=np.float64).reshape(-1)
        if x.shape != (n_x,):
            raise DimensionMismatchError(f"x1 must have length {n_x}")

    if with_noise:
        Lq = np.linalg.cholesky(model.Q)
        Lr = np.linalg.cholesky(model.R)

    X = np.empty((horizon, n_x))
    Y = np.empty((horizon, n_y))
    Gf, Gg = model.Gamma_f, model.Gamma_g
    # overflow in an exploding rollout is reported as DivergenceError on the
    # next step, so the intermediate warning is just noise
    with np.errstate(over="ignore", invalid="ignore"):
        for t in range(horizon):
            if not np.all(np.isfinite(x)):
                raise DivergenceError("simulated state became non-finite",
                                      time_index=t)
            X[t] = x
            z = _basis.eval_features(model.basis_x, x, table=tx)
            if model.basis_u is not None:
                zu = _basis.eval_features(model.basis_u, u[t], table=tu)
                z = np.concatenate([z, zu])
            Y[t] = Gg @ z
            if with_noise:
                Y[t] += Lr @ rng.standard_normal(n_y)
            x = Gf @ z
            if with_noise:
                x += Lq @ rng.standard_normal(n_x)
    return X, Y


def metrics(y_true, y_model) -> dict:
    """Mean, standard deviation, and RMS of the output error.

    Errors are pooled over time steps and channels.
    """
    a = np.asarray(y_true, dtype=np.float64)
    b = np.asarray(y_model, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatchError(
            f"output shapes differ: {a.shape} vs {b.shape}")
    err = (b - a).ravel()
    return {
        "mean_error": float(np.mean(err)),
        "std_error": float(np.std(err)),
        "rms_error": float(np.sqrt(np.mean(err ** 2))),
    }
