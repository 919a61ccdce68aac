"""File formats: datasets, models, run configurations, traces, grids.

Formats are plain text for diffability:

* **Datasets** are CSV with a header naming columns ``u1..u{n_u}`` and
  ``y1..y{n_y}`` (any column order, LF or CRLF); one time step per row.
* **Models** are JSON documents tagged ``{"format": "basisid.model",
  "version": 1}`` storing bases and matrices at full precision, so a
  write-read round trip is bit-identical.
* **Run configurations** are flat JSON key-value documents (schema below);
  unknown keys warn instead of failing so configs stay forward compatible.
* **Traces / diagnostics** are JSON Lines, one record per entry.
* **Function grids** are two-plus-column CSV of grid point and transition
  value, for external plotting.

Config schema (all keys optional unless noted): ``dataset`` (path),
``output_dir``, ``n_x`` (required), ``basis_x_kind`` / ``basis_x_m`` /
``basis_x_L`` / ``basis_x_composition``, ``basis_u_kind`` / ``basis_u_m`` /
``basis_u_L`` / ``basis_u_composition``, ``prior_scheme`` /
``prior_lambda``, ``N``, ``K``, ``gamma_exponent``, ``gamma_burn_in``,
``seed``, ``trace_period``, ``resampling``, ``init_model`` (path),
``known_g_identity`` (bool), ``known_R`` / ``known_Q`` (noise variances to
freeze), ``learn_Q`` / ``learn_R`` (bools), and explicit structure arrays
``state_mask`` / ``state_fixed`` / ``meas_mask`` / ``meas_fixed``.
``basis_x_L: null`` means "pick from the data" (1.5 x the largest absolute
output).  Relative paths are resolved against the config file's directory.
"""

from __future__ import annotations

import csv
import json
import math
import re
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .basis import BasisSpec, PriorSpec, compile_table, spec_from_dict
from .em import GammaSchedule, PsaemConfig, initial_model
from .errors import DataParseError, ModelFormatError
from .model import Dataset, ModelParams, StructureSpec, state_function

MODEL_FORMAT = "basisid.model"
MODEL_VERSION = 1

_COLUMN_RE = re.compile(r"^([uy])([1-9][0-9]*)$")


# ---------------------------------------------------------------------------
# datasets


def load_dataset(path) -> Dataset:
    """Read a CSV dataset; see the module docstring for the format.

    Raises :class:`DataParseError` with a one-based line number for ragged
    rows, non-numeric or non-finite cells, bad headers, and missing output
    columns.
    """
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataParseError("empty dataset file", line=1) from None
        u_cols: dict[int, int] = {}
        y_cols: dict[int, int] = {}
        for pos, raw in enumerate(header):
            name = raw.strip()
            match = _COLUMN_RE.match(name)
            if not match:
                raise DataParseError(
                    f"unrecognized column name {name!r} (expected u<k> or "
                    f"y<k>)", line=1)
            dest = u_cols if match.group(1) == "u" else y_cols
            idx = int(match.group(2))
            if idx in dest:
                raise DataParseError(f"duplicate column {name!r}", line=1)
            dest[idx] = pos
        for dest, tag in ((u_cols, "u"), (y_cols, "y")):
            if dest and sorted(dest) != list(range(1, len(dest) + 1)):
                raise DataParseError(
                    f"{tag} columns must be numbered 1..{len(dest)} without "
                    f"gaps", line=1)
        if not y_cols:
            raise DataParseError("dataset has no y columns", line=1)

        n_cols = len(header)
        u_pos = [u_cols[i] for i in sorted(u_cols)]
        y_pos = [y_cols[i] for i in sorted(y_cols)]
        u_rows: list[list[float]] = []
        y_rows: list[list[float]] = []
        for lineno, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue  # ignore trailing blank lines
            if len(row) != n_cols:
                raise DataParseError(
                    f"expected {n_cols} cells, found {len(row)}",
                    line=lineno)
            try:
                vals = [float(cell) for cell in row]
            except ValueError:
                raise DataParseError("non-numeric cell", line=lineno) \
                    from None
            if not all(math.isfinite(v) for v in vals):
                raise DataParseError("non-finite value", line=lineno)
            u_rows.append([vals[p] for p in u_pos])
            y_rows.append([vals[p] for p in y_pos])
    if not y_rows:
        raise DataParseError("dataset has a header but no data rows", line=2)
    u = np.array(u_rows, dtype=np.float64).reshape(len(y_rows), len(u_pos))
    y = np.array(y_rows, dtype=np.float64)
    return Dataset(u=u, y=y)


def save_dataset(data: Dataset, path) -> None:
    """Write a dataset as CSV with full round-trip precision."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = [f"u{i + 1}" for i in range(data.n_u)] + \
        [f"y{i + 1}" for i in range(data.n_y)]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for t in range(data.T):
            writer.writerow([repr(float(v)) for v in data.u[t]] +
                            [repr(float(v)) for v in data.y[t]])


# ---------------------------------------------------------------------------
# models


def _matrix(obj, name: str) -> np.ndarray:
    try:
        arr = np.array(obj, dtype=np.float64)
    except (TypeError, ValueError):
        raise ModelFormatError(f"field {name!r} is not numeric") from None
    return arr


def save_model(model: ModelParams, path) -> None:
    """Serialize a model to versioned JSON; round trips bit-identically."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model_to_dict(model), fh, indent=1)
        fh.write("\n")


def model_to_dict(model: ModelParams) -> dict:
    """JSON-ready dictionary form of a model."""
    return {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "n_x": model.n_x,
        "n_y": model.n_y,
        "basis_x": model.basis_x.to_dict(),
        "basis_u": None if model.basis_u is None
        else model.basis_u.to_dict(),
        "Gamma_f": model.Gamma_f.tolist(),
        "Gamma_g": model.Gamma_g.tolist(),
        "Q": model.Q.tolist(),
        "R": model.R.tolist(),
        "init_mean": model.init_mean.tolist(),
        "init_cov": model.init_cov.tolist(),
    }


_MODEL_FIELDS = {"format", "version", "n_x", "n_y", "basis_x", "basis_u",
                 "Gamma_f", "Gamma_g", "Q", "R", "init_mean", "init_cov"}


def model_from_dict(doc: dict, source: str = "model document") -> ModelParams:
    """Validate and construct a model from its dictionary form."""
    if not isinstance(doc, dict):
        raise ModelFormatError(f"{source}: expected a JSON object")
    if doc.get("format") != MODEL_FORMAT:
        raise ModelFormatError(
            f"{source}: not a model file (format tag "
            f"{doc.get('format')!r})")
    if doc.get("version") != MODEL_VERSION:
        raise ModelFormatError(
            f"{source}: unsupported model version {doc.get('version')!r} "
            f"(this build reads version {MODEL_VERSION})")
    unknown = set(doc) - _MODEL_FIELDS
    if unknown:
        warnings.warn(f"{source}: ignoring unknown fields "
                      f"{sorted(unknown)}", stacklevel=2)
    missing = _MODEL_FIELDS - {"basis_u"} - set(doc)
    if missing:
        raise ModelFormatError(f"{source}: missing fields "
                               f"{sorted(missing)}")
    try:
        basis_x = spec_from_dict(doc["basis_x"])
        basis_u = None if doc.get("basis_u") is None \
            else spec_from_dict(doc["basis_u"])
    except (KeyError, TypeError, ValueError) as err:
        raise ModelFormatError(f"{source}: bad basis spec: {err}") from None
    try:
        model = ModelParams(
            basis_x=basis_x, basis_u=basis_u,
            Gamma_f=_matrix(doc["Gamma_f"], "Gamma_f"),
            Gamma_g=_matrix(doc["Gamma_g"], "Gamma_g"),
            Q=_matrix(doc["Q"], "Q"), R=_matrix(doc["R"], "R"),
            init_mean=_matrix(doc["init_mean"], "init_mean"),
            init_cov=_matrix(doc["init_cov"], "init_cov"))
    except ValueError as err:  # includes DimensionMismatchError
        raise ModelFormatError(f"{source}: {err}") from None
    if int(doc["n_x"]) != model.n_x or int(doc["n_y"]) != model.n_y:
        raise ModelFormatError(
            f"{source}: declared sizes (n_x={doc['n_x']}, n_y={doc['n_y']}) "
            f"disagree with matrix shapes")
    return model


def load_model(path) -> ModelParams:
    """Read a model file written by :func:`save_model`.

    Raises :class:`ModelFormatError` for wrong format tags, version
    mismatches, malformed fields, or any model-invariant violation (the
    message names the violated invariant).  Unknown extra fields only warn.
    """
    path = Path(path)
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as err:
        raise ModelFormatError(f"{path}: invalid JSON: {err}") from None
    return model_from_dict(doc, source=str(path))


# ---------------------------------------------------------------------------
# traces, diagnostics, grids


def save_trace(trace, path) -> None:
    """Write a parameter trace as JSON Lines of {k, model} records."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for k, model in trace:
            fh.write(json.dumps({"k": int(k),
                                 "model": model_to_dict(model)}))
            fh.write("\n")


def save_diagnostics(records, path) -> None:
    """Write per-iteration diagnostics as JSON Lines."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec))
            fh.write("\n")


def export_function_grid(model: ModelParams, dimension: int, grid,
                         path) -> None:
    """Write (x, f(x)) pairs of the state-transition function along one
    state coordinate (the others held at zero), as CSV.

    Grid points must lie inside the basis domain of that coordinate.
    """
    grid = np.asarray(grid, dtype=np.float64).reshape(-1)
    if not 0 <= dimension < model.n_x:
        raise ValueError(f"dimension must be in [0, {model.n_x})")
    table = compile_table(model.basis_x)
    lo, hi = table.clamp_lo[dimension], table.clamp_hi[dimension]
    if np.any(grid < lo) or np.any(grid > hi):
        raise ValueError(
            f"grid leaves the basis domain [{lo}, {hi}] of coordinate "
            f"{dimension}")
    X = np.zeros((grid.size, model.n_x))
    X[:, dimension] = grid
    values = state_function(model, X)[:, dimension]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["x", "f"])
        for xv, fv in zip(grid, values):
            writer.writerow([repr(float(xv)), repr(float(fv))])


# ---------------------------------------------------------------------------
# run configuration


_CONFIG_KEYS = {
    "dataset", "output_dir", "n_x",
    "basis_x_kind", "basis_x_m", "basis_x_L", "basis_x_composition",
    "basis_u_kind", "basis_u_m", "basis_u_L", "basis_u_composition",
    "prior_scheme", "prior_lambda",
    "N", "K", "gamma_exponent", "gamma_burn_in", "seed", "trace_period",
    "resampling", "init_model", "known_g_identity", "known_R", "known_Q",
    "learn_Q", "learn_R",
    "state_mask", "state_fixed", "meas_mask", "meas_fixed",
}

_STRUCTURE_KEYS = ("state_mask", "state_fixed", "meas_mask", "meas_fixed")


@dataclass
class RunConfig:
    """Parsed identification run configuration (see module docstring for
    the file schema).  Paths are already resolved to absolute ones."""

    n_x: int
    dataset: Path | None = None
    output_dir: Path | None = None
    basis_x_kind: str = "fourier"
    basis_x_m: int | tuple[int, ...] = 10
    basis_x_L: float | None = None
    basis_x_composition: str = "tensor_product"
    basis_u_kind: str | None = None
    basis_u_m: int | tuple[int, ...] = 10
    basis_u_L: float | None = None
    basis_u_composition: str = "tensor_product"
    prior: PriorSpec = PriorSpec()
    N: int = 5
    K: int = 100
    gamma: GammaSchedule = GammaSchedule()
    seed: int = 0
    trace_period: int = 10
    resampling: str = "multinomial"
    init_model: Path | None = None
    known_g_identity: bool = False
    known_R: float | None = None
    known_Q: float | None = None
    learn_Q: bool = True
    learn_R: bool = True
    structure_arrays: dict = field(default_factory=dict)


def _expect(doc, key, kinds, default):
    if key not in doc or doc[key] is None:
        return default
    val = doc[key]
    if kinds is bool:
        if not isinstance(val, bool):
            raise ValueError(f"config key {key!r} must be a boolean")
        return val
    if kinds is int:
        if isinstance(val, bool) or not isinstance(val, int):
            raise ValueError(f"config key {key!r} must be an integer")
        return val
    if kinds is float:
        if isinstance(val, bool) or not isinstance(val, (int, float)):
            raise ValueError(f"config key {key!r} must be a number")
        return float(val)
    if kinds is str:
        if not isinstance(val, str):
            raise ValueError(f"config key {key!r} must be a string")
        return val
    raise AssertionError(kinds)


def load_config(path) -> RunConfig:
    """Read and validate a run-configuration file.

    Unknown keys produce a warning; referenced files (dataset, init model)
    must exist.  Relative paths are resolved against the config directory.
    """
    path = Path(path)
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as err:
        raise DataParseError(f"{path}: invalid JSON: {err}",
                             line=err.lineno) from None
    if not isinstance(doc, dict):
        raise DataParseError(f"{path}: config must be a JSON object")
    unknown = set(doc) - _CONFIG_KEYS
    if unknown:
        warnings.warn(f"{path}: ignoring unknown config keys "
                      f"{sorted(unknown)}", stacklevel=2)
    if "n_x" not in doc:
        raise ValueError(f"{path}: config key 'n_x' is required")

    base = path.parent

    def resolve(key):
        raw = _expect(doc, key, str, None)
        if raw is None:
            return None
        p = Path(raw)
        return p if p.is_absolute() else (base / p).resolve()

    dataset = resolve("dataset")
    if dataset is not None and not dataset.exists():
        raise ValueError(f"{path}: dataset file not found: {dataset}")
    init_model = resolve("init_model")
    if init_model is not None and not init_model.exists():
        raise ValueError(f"{path}: init_model file not found: {init_model}")
    if init_model is not None and any(k.startswith("basis_") for k in doc):
        raise ValueError(f"{path}: init_model and basis_* keys are "
                         f"mutually exclusive")

    structure_arrays = {k: doc[k] for k in _STRUCTURE_KEYS if k in doc
                        and doc[k] is not None}
    known_g = _expect(doc, "known_g_identity", bool, False)
    if known_g and structure_arrays:
        raise ValueError(f"{path}: known_g_identity and explicit structure "
                         f"arrays are mutually exclusive")

    def basis_m(key):
        val = doc.get(key)
        if isinstance(val, list):
            return tuple(int(v) for v in val)
        return _expect(doc, key, int, 10)

    cfg = RunConfig(
        n_x=_expect(doc, "n_x", int, None),
        dataset=dataset,
        output_dir=resolve("output_dir"),
        basis_x_kind=_expect(doc, "basis_x_kind", str, "fourier"),
        basis_x_m=basis_m("basis_x_m"),
        basis_x_L=_expect(doc, "basis_x_L", float, None),
        basis_x_composition=_expect(doc, "basis_x_composition", str,
                                    "tensor_product"),
        basis_u_kind=_expect(doc, "basis_u_kind", str, None),
        basis_u_m=basis_m("basis_u_m"),
        basis_u_L=_expect(doc, "basis_u_L", float, None),
        basis_u_composition=_expect(doc, "basis_u_composition", str,
                                    "tensor_product"),
        prior=PriorSpec(scheme=_expect(doc, "prior_scheme", str, "none"),
                        lam=_expect(doc, "prior_lambda", float, 0.0)),
        N=_expect(doc, "N", int, 5),
        K=_expect(doc, "K", int, 100),
        gamma=GammaSchedule(
            exponent=_expect(doc, "gamma_exponent", float, 0.7),
            burn_in=_expect(doc, "gamma_burn_in", int, 0)),
        seed=_expect(doc, "seed", int, 0),
        trace_period=_expect(doc, "trace_period", int, 10),
        resampling=_expect(doc, "resampling", str, "multinomial"),
        init_model=init_model,
        known_g_identity=known_g,
        known_R=_expect(doc, "known_R", float, None),
        known_Q=_expect(doc, "known_Q", float, None),
        learn_Q=_expect(doc, "learn_Q", bool, True),
        learn_R=_expect(doc, "learn_R", bool, True),
        structure_arrays=structure_arrays,
    )
    if cfg.n_x < 1:
        raise ValueError(f"{path}: n_x must be >= 1")
    return cfg


def _default_half_width(values: np.ndarray) -> float:
    """Basis half-width from data: 1.5 x the largest magnitude seen."""
    peak = float(np.max(np.abs(values))) if values.size else 1.0
    return 1.5 * peak if peak > 0 else 1.0


def _build_basis(kind: str, m, L, composition: str, dims: int,
                 data_values: np.ndarray) -> BasisSpec:
    if kind == "fourier":
        half = _default_half_width(data_values) if L is None else float(L)
        return BasisSpec.fourier(m, half, dims=dims, composition=composition)
    if kind == "linear":
        return BasisSpec.linear(dims)
    if kind == "constant":
        return BasisSpec.constant(dims)
    raise ValueError(f"unknown basis kind {kind!r} in config")


def _identity_columns(basis_x: BasisSpec) -> dict[int, int]:
    """Map state dimension -> column of its pure identity feature."""
    table = compile_table(basis_x)
    cols: dict[int, int] = {}
    for j in range(table.m):
        row = table.ftype[j]
        idn = np.flatnonzero(row == 3)
        if idn.size == 1 and np.all(row[row != 3] == 0):
            cols.setdefault(int(idn[0]), j)
    return cols


def configure_run(cfg: RunConfig, data: Dataset) -> PsaemConfig:
    """Assemble a ready-to-run :class:`~basisid.em.PsaemConfig` from a
    parsed configuration and its dataset.

    Resolves data-dependent defaults (basis half-widths), expands the
    ``known_g_identity`` shortcut into a composite basis plus measurement
    constraints, applies ``known_Q`` / ``known_R``, and builds the initial
    model.
    """
    n_x = cfg.n_x
    if cfg.init_model is not None:
        init = load_model(cfg.init_model)
        basis_x, basis_u = init.basis_x, init.basis_u
        if basis_x.dims != n_x:
            raise ValueError(
                f"init model has n_x={basis_x.dims}, config says {n_x}")
    else:
        basis_x = _build_basis(cfg.basis_x_kind, cfg.basis_x_m, cfg.basis_x_L,
                               cfg.basis_x_composition, n_x, data.y)
        u_kind = cfg.basis_u_kind
        if u_kind is None:
            u_kind = "linear" if data.n_u else "none"
        if u_kind == "none":
            if data.n_u:
                raise ValueError("dataset has inputs but basis_u_kind is "
                                 "'none'")
            basis_u = None
        else:
            if not data.n_u:
                raise ValueError("config requests an input basis but the "
                                 "dataset has no u columns")
            basis_u = _build_basis(u_kind, cfg.basis_u_m, cfg.basis_u_L,
                                   cfg.basis_u_composition, data.n_u, data.u)
        init = None

    state_mask = state_fixed = meas_mask = meas_fixed = None

    if cfg.known_g_identity:
        if data.n_y != n_x:
            raise ValueError("known_g_identity requires n_y == n_x")
        id_cols = _identity_columns(basis_x)
        added_linear = False
        if any(d not in id_cols for d in range(n_x)):
            if cfg.init_model is not None:
                raise ValueError(
                    "known_g_identity needs identity features, but the "
                    "init model's basis has none for some state dimension")
            # prepend identity features so g can be expressed exactly
            parts = [(BasisSpec.linear(n_x), tuple(range(n_x)))]
            if basis_x.kind == "composite":
                parts.extend(basis_x.parts)
            else:
                parts.append((basis_x, tuple(range(n_x))))
            basis_x = BasisSpec.composite(parts, n_x)
            id_cols = _identity_columns(basis_x)
            added_linear = True
        q = basis_x.feature_count + \
            (0 if basis_u is None else basis_u.feature_count)
        meas_mask = np.zeros((n_x, q), dtype=bool)
        meas_fixed = np.zeros((n_x, q))
        for d in range(n_x):
            meas_fixed[d, id_cols[d]] = 1.0
        if added_linear:
            # the identity features exist only to express g; keep the
            # transition inside the configured feature family
            state_mask = np.ones((n_x, q), dtype=bool)
            state_fixed = np.zeros((n_x, q))
            for d in range(n_x):
                state_mask[:, id_cols[d]] = False
    elif cfg.structure_arrays:
        sa = cfg.structure_arrays
        state_mask = sa.get("state_mask")
        state_fixed = sa.get("state_fixed")
        meas_mask = sa.get("meas_mask")
        meas_fixed = sa.get("meas_fixed")

    structure = StructureSpec(
        state_mask=None if state_mask is None
        else np.asarray(state_mask, dtype=bool),
        state_fixed=None if state_mask is None or state_fixed is None
        else np.asarray(state_fixed, dtype=np.float64),
        meas_mask=None if meas_mask is None
        else np.asarray(meas_mask, dtype=bool),
        meas_fixed=None if meas_mask is None or meas_fixed is None
        else np.asarray(meas_fixed, dtype=np.float64),
        learn_Q=cfg.learn_Q and cfg.known_Q is None,
        learn_R=cfg.learn_R and cfg.known_R is None,
    )

    if init is None:
        init = initial_model(data, basis_x, basis_u, structure=structure)
    if cfg.known_Q is not None or cfg.known_R is not None:
        Q = cfg.known_Q * np.eye(init.n_x) if cfg.known_Q is not None \
            else init.Q
        R = cfg.known_R * np.eye(init.n_y) if cfg.known_R is not None \
            else init.R
        init = ModelParams(basis_x=init.basis_x, basis_u=init.basis_u,
                           Gamma_f=init.Gamma_f, Gamma_g=init.Gamma_g,
                           Q=Q, R=R, init_mean=init.init_mean,
                           init_cov=init.init_cov)

    return PsaemConfig(N=cfg.N, K=cfg.K, init_model=init, gamma=cfg.gamma,
                       prior=cfg.prior, structure=structure, seed=cfg.seed,
                       trace_period=cfg.trace_period,
                       resampling=cfg.resampling)
