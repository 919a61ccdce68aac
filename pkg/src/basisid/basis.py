"""Basis function expansions on compact domains.

A :class:`BasisSpec` describes a finite family of features ``phi(x)`` used to
represent an unknown function as ``f(x) = Gamma @ phi(x)``.  Supported kinds:

* ``fourier`` -- real trigonometric features on ``[-L, L]^d``, ordered as
  ``[1, cos(pi x / L), sin(pi x / L), cos(2 pi x / L), sin(2 pi x / L), ...]``
  per dimension.  Multivariate families are built either as tensor products
  (all cross terms) or additively (per-dimension features concatenated).
* ``linear`` -- the coordinates themselves, one feature per dimension.
* ``constant`` -- the single feature ``1``.
* ``composite`` -- a concatenation of sub-bases, each applied to a chosen
  subset of input coordinates.  This is how partially known structure is
  expressed, e.g. a linear part in all states plus a trigonometric part in
  one state.

Every spec compiles to a flat :class:`FeatureTable` where feature ``j`` is a
product of per-dimension factors (unit, cosine, sine, or identity).  The
table is plain arrays so the evaluation loops can be jit-compiled.

Arguments of trigonometric factors are clamped to ``[-L, L]``; outside the
domain the features saturate instead of oscillating, which keeps weight
updates stable when a sampled state briefly leaves the design region.
Identity factors are never clamped.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatchError
from . import _kernels

KINDS = ("fourier", "linear", "constant", "composite")
COMPOSITIONS = ("tensor_product", "additive")

# factor type codes shared with the jit kernels
FT_UNIT = 0
FT_COS = 1
FT_SIN = 2
FT_IDENTITY = 3


@dataclass(frozen=True)
class BasisSpec:
    """Declarative description of a feature family.

    Use the classmethod constructors (:meth:`fourier`, :meth:`linear`,
    :meth:`constant`, :meth:`composite`) rather than the raw constructor;
    they fill in the fields consistently.

    Attributes
    ----------
    kind : str
        One of ``"fourier"``, ``"linear"``, ``"constant"``, ``"composite"``.
    m : int or tuple of int
        Number of features per dimension (fourier only; includes the
        constant feature of the first dimension block).
    L : float or None
        Domain half-width for fourier features.
    dims : int
        Input dimension the basis is evaluated on.
    composition : str
        ``"tensor_product"`` or ``"additive"`` for multivariate fourier.
    parts : tuple or None
        For composites: ``((sub_spec, (dim_index, ...)), ...)``.
    """

    kind: str
    m: int | tuple[int, ...] = 1
    L: float | None = None
    dims: int = 1
    composition: str = "tensor_product"
    parts: tuple[tuple["BasisSpec", tuple[int, ...]], ...] | None = None

    # -- constructors -----------------------------------------------------

    @classmethod
    def fourier(cls, m: int | tuple[int, ...], L: float, dims: int = 1,
                composition: str = "tensor_product") -> "BasisSpec":
        """Trigonometric basis with ``m`` features per dimension on [-L, L]."""
        return cls(kind="fourier", m=m, L=float(L), dims=dims,
                   composition=composition)

    @classmethod
    def linear(cls, dims: int = 1) -> "BasisSpec":
        """Identity features, one per coordinate."""
        return cls(kind="linear", m=dims, dims=dims)

    @classmethod
    def constant(cls, dims: int = 1) -> "BasisSpec":
        """The single feature 1."""
        return cls(kind="constant", m=1, dims=dims)

    @classmethod
    def composite(cls, parts, dims: int) -> "BasisSpec":
        """Concatenate sub-bases, each reading a subset of the coordinates.

        Parameters
        ----------
        parts : iterable of (BasisSpec, dim_indices)
            ``dim_indices`` maps each sub-basis input dimension to a
            coordinate of the composite input, in order.
        dims : int
            Dimension of the composite input.
        """
        norm = tuple((spec, tuple(int(i) for i in idx)) for spec, idx in parts)
        return cls(kind="composite", m=0, dims=dims, parts=norm)

    # -- validation --------------------------------------------------------

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown basis kind {self.kind!r}; "
                             f"expected one of {KINDS}")
        if self.dims < 1:
            raise ValueError("basis dims must be >= 1")
        if self.kind == "fourier":
            if self.composition not in COMPOSITIONS:
                raise ValueError(
                    f"unknown composition {self.composition!r}; "
                    f"expected one of {COMPOSITIONS}")
            if self.L is None or not math.isfinite(self.L) or self.L <= 0:
                raise ValueError("fourier basis requires a finite "
                                 "half-width L > 0")
            for md in self.m_per_dim():
                if md < 1:
                    raise ValueError("fourier basis needs m >= 1 features "
                                     "per dimension")
        elif self.kind == "linear":
            if self.m != self.dims:
                raise ValueError("linear basis has exactly one feature per "
                                 "dimension")
        elif self.kind == "constant":
            if self.m != 1:
                raise ValueError("constant basis has exactly one feature")
        elif self.kind == "composite":
            if not self.parts:
                raise ValueError("composite basis needs at least one part")
            for spec, idx in self.parts:
                if spec.kind == "composite":
                    raise ValueError("composite parts must be leaf bases")
                if len(idx) != spec.dims:
                    raise ValueError(
                        f"part of dimension {spec.dims} received "
                        f"{len(idx)} coordinate indices")
                for i in idx:
                    if not 0 <= i < self.dims:
                        raise ValueError(
                            f"coordinate index {i} out of range for a "
                            f"{self.dims}-dimensional composite")

    def m_per_dim(self) -> tuple[int, ...]:
        """Per-dimension feature counts for a fourier spec."""
        if isinstance(self.m, tuple):
            if len(self.m) != self.dims:
                raise ValueError("per-dimension m must have one entry per "
                                 "dimension")
            return self.m
        return (int(self.m),) * self.dims

    @property
    def feature_count(self) -> int:
        """Total number of features the spec produces."""
        if self.kind == "fourier":
            counts = self.m_per_dim()
            if self.composition == "tensor_product":
                n = 1
                for c in counts:
                    n *= c
                return n
            return sum(counts)
        if self.kind == "linear":
            return self.dims
        if self.kind == "constant":
            return 1
        return sum(spec.feature_count for spec, _ in self.parts)

    def to_dict(self) -> dict:
        """JSON-friendly representation (inverse of :func:`spec_from_dict`)."""
        d = {"kind": self.kind, "dims": self.dims}
        if self.kind == "fourier":
            d["m"] = list(self.m) if isinstance(self.m, tuple) else self.m
            d["L"] = self.L
            d["composition"] = self.composition
        elif self.kind == "composite":
            d["parts"] = [[spec.to_dict(), list(idx)]
                          for spec, idx in self.parts]
        return d


def spec_from_dict(d: dict) -> BasisSpec:
    """Rebuild a :class:`BasisSpec` from its :meth:`~BasisSpec.to_dict` form."""
    kind = d.get("kind")
    dims = int(d.get("dims", 1))
    if kind == "fourier":
        m = d["m"]
        m = tuple(int(v) for v in m) if isinstance(m, list) else int(m)
        return BasisSpec.fourier(m, float(d["L"]), dims=dims,
                                 composition=d.get("composition",
                                                   "tensor_product"))
    if kind == "linear":
        return BasisSpec.linear(dims)
    if kind == "constant":
        return BasisSpec.constant(dims)
    if kind == "composite":
        parts = [(spec_from_dict(sd), tuple(int(i) for i in idx))
                 for sd, idx in d["parts"]]
        return BasisSpec.composite(parts, dims)
    raise ValueError(f"unknown basis kind {kind!r}")


# ---------------------------------------------------------------------------
# compiled feature tables


@dataclass(frozen=True)
class FeatureTable:
    """Flat product-of-factors encoding of a basis, ready for jit loops.

    Feature ``j`` is ``prod_d factor(ftype[j, d], freq[j, d], x[d])`` where a
    factor is 1, ``cos(freq * argscale[d] * clamp(x[d]))``,
    ``sin(freq * argscale[d] * clamp(x[d]))``, or ``x[d]``.
    """

    ftype: np.ndarray       # (m, dims) uint8 factor codes
    freq: np.ndarray        # (m, dims) int32 harmonic numbers
    argscale: np.ndarray    # (dims,) pi / L per dimension (0 where unused)
    clamp_lo: np.ndarray    # (dims,) lower clamp for trig arguments
    clamp_hi: np.ndarray    # (dims,)
    maxfreq: int            # highest harmonic over the whole table
    orders: np.ndarray = field(repr=False, default=None)  # (m,) int64

    @property
    def m(self) -> int:
        return self.ftype.shape[0]

    @property
    def dims(self) -> int:
        return self.ftype.shape[1]

    def arrays(self):
        """The positional argument pack expected by the jit kernels."""
        return (self.ftype, self.freq, self.argscale,
                self.clamp_lo, self.clamp_hi, self.maxfreq)


def _dim_factor_lists(m_d: int):
    """(ftype, freq) codes of the 1-d fourier ladder [1, cos, sin, cos2, ...]."""
    out = [(FT_UNIT, 0)]
    k = 1
    while len(out) < m_d:
        out.append((FT_COS, k))
        if len(out) < m_d:
            out.append((FT_SIN, k))
        k += 1
    return out


def compile_table(spec: BasisSpec) -> FeatureTable:
    """Flatten a :class:`BasisSpec` into a :class:`FeatureTable`."""
    dims = spec.dims
    rows_type: list[list[int]] = []
    rows_freq: list[list[int]] = []
    argscale = np.zeros(dims)
    clamp_lo = np.full(dims, -np.inf)
    clamp_hi = np.full(dims, np.inf)

    def unit_row():
        return [FT_UNIT] * dims, [0] * dims

    def add_fourier(sub: BasisSpec, dim_map: tuple[int, ...]):
        scale = math.pi / sub.L
        for local, g in enumerate(dim_map):
            if argscale[g] != 0.0 and argscale[g] != scale:
                raise ValueError(
                    f"coordinate {g} is used by two fourier parts with "
                    f"different half-widths")
            argscale[g] = scale
            clamp_lo[g] = -sub.L
            clamp_hi[g] = sub.L
        counts = sub.m_per_dim()
        ladders = [_dim_factor_lists(c) for c in counts]
        if sub.composition == "tensor_product":
            shape = tuple(len(l) for l in ladders)
            for combo in np.ndindex(shape):
                t, f = unit_row()
                for local, pick in enumerate(combo):
                    ft, fr = ladders[local][pick]
                    g = dim_map[local]
                    t[g], f[g] = ft, fr
                rows_type.append(t)
                rows_freq.append(f)
        else:  # additive: per-dimension ladders back to back
            for local, ladder in enumerate(ladders):
                g = dim_map[local]
                for ft, fr in ladder:
                    t, f = unit_row()
                    t[g], f[g] = ft, fr
                    rows_type.append(t)
                    rows_freq.append(f)

    def add_linear(dim_map: tuple[int, ...]):
        for g in dim_map:
            t, f = unit_row()
            t[g], f[g] = FT_IDENTITY, 1
            rows_type.append(t)
            rows_freq.append(f)

    def add_constant():
        t, f = unit_row()
        rows_type.append(t)
        rows_freq.append(f)

    def add(sub: BasisSpec, dim_map: tuple[int, ...]):
        if sub.kind == "fourier":
            add_fourier(sub, dim_map)
        elif sub.kind == "linear":
            add_linear(dim_map)
        elif sub.kind == "constant":
            add_constant()
        else:  # pragma: no cover - excluded by BasisSpec validation
            raise ValueError("nested composite")

    if spec.kind == "composite":
        for sub, idx in spec.parts:
            add(sub, idx)
    else:
        add(spec, tuple(range(dims)))

    ftype = np.array(rows_type, dtype=np.uint8)
    freq = np.array(rows_freq, dtype=np.int32)
    maxfreq = int(freq[ftype != FT_IDENTITY].max()) if np.any(
        ftype != FT_IDENTITY) else 0

    # frequency order: ceil of the euclidean norm of the per-dimension
    # harmonic numbers, counting identity factors as first order.
    eff = np.where(ftype == FT_IDENTITY, 1, freq).astype(np.int64)
    eff[ftype == FT_UNIT] = 0
    sq = (eff * eff).sum(axis=1)
    orders = np.empty(len(sq), dtype=np.int64)
    for j, s in enumerate(sq):
        r = math.isqrt(int(s))
        orders[j] = r if r * r == s else r + 1

    return FeatureTable(ftype=ftype, freq=freq, argscale=argscale,
                        clamp_lo=clamp_lo, clamp_hi=clamp_hi,
                        maxfreq=maxfreq, orders=orders)


# ---------------------------------------------------------------------------
# evaluation


def _as_point(x, dims: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 0:
        x = x.reshape(1)
    if x.ndim != 1 or x.shape[0] != dims:
        raise DimensionMismatchError(
            f"expected a point of dimension {dims}, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("basis evaluation point must be finite")
    return x


def eval_features(spec: BasisSpec, x, table: FeatureTable | None = None
                  ) -> np.ndarray:
    """Evaluate all features of ``spec`` at a single point ``x``.

    Returns a vector of length ``spec.feature_count``.  Pass a precompiled
    ``table`` to skip recompilation in hot loops.
    """
    table = table if table is not None else compile_table(spec)
    x = _as_point(x, table.dims)
    return _kernels.features_batch(*table.arrays(), x.reshape(1, -1))[0]


def eval_features_batch(spec: BasisSpec, X, table: FeatureTable | None = None
                        ) -> np.ndarray:
    """Evaluate features at each row of ``X``; returns ``(len(X), m)``."""
    table = table if table is not None else compile_table(spec)
    X = np.ascontiguousarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    if X.ndim != 2 or X.shape[1] != table.dims:
        raise DimensionMismatchError(
            f"expected points of dimension {table.dims}, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError("basis evaluation points must be finite")
    return _kernels.features_batch(*table.arrays(), X)


def clamp_to_domain(spec: BasisSpec, x, table: FeatureTable | None = None
                    ) -> np.ndarray:
    """Project a point onto the box where trigonometric features live.

    Coordinates without a compact domain (linear/constant factors only) are
    returned unchanged; points already inside come back identical.
    """
    table = table if table is not None else compile_table(spec)
    x = _as_point(x, table.dims)
    return np.clip(x, table.clamp_lo, table.clamp_hi)


# ---------------------------------------------------------------------------
# priors


PRIOR_SCHEMES = ("none", "flat", "frequency_squared")


@dataclass(frozen=True)
class PriorSpec:
    """Zero-mean Gaussian prior on basis weights, encoded as a precision.

    ``none`` disables regularization (zero precision); ``flat`` penalizes
    every weight equally with ``lam``; ``frequency_squared`` penalizes the
    weight of each feature with ``lam * order**2`` where ``order`` is the
    feature's frequency order (constant and identity features count as
    first order), so high harmonics are damped the hardest.
    """

    scheme: str = "none"
    lam: float = 0.0

    def __post_init__(self):
        if self.scheme not in PRIOR_SCHEMES:
            raise ValueError(f"unknown prior scheme {self.scheme!r}; "
                             f"expected one of {PRIOR_SCHEMES}")
        if not math.isfinite(self.lam) or self.lam < 0:
            raise ValueError("prior strength lam must be finite and >= 0")


def frequency_orders(spec: BasisSpec) -> np.ndarray:
    """Integer frequency order of each feature (0 for the constant)."""
    return compile_table(spec).orders.copy()


def build_precision(spec: BasisSpec, prior: PriorSpec) -> np.ndarray:
    """Diagonal prior precision matrix for the weights of ``spec``.

    Shape is ``(m, m)`` with ``m = spec.feature_count``.  The ``none``
    scheme returns exactly zero regardless of ``lam``.
    """
    m = spec.feature_count
    if prior.scheme == "none":
        return np.zeros((m, m))
    if prior.scheme == "flat":
        return np.eye(m) * prior.lam
    orders = np.maximum(compile_table(spec).orders, 1)
    return np.diag(prior.lam * orders.astype(np.float64) ** 2)
