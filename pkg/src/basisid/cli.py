"""Command-line interface.

Subcommands
-----------
generate   simulate a benchmark system or stored model into a dataset file
identify   run the identification loop from a dataset + config
simulate   roll a stored model forward (with or without noise)
evaluate   score a model against a dataset (simulation / prediction error)
compare    rank several models on the same dataset

Exit codes: 0 success; 2 bad usage or flag combinations; 3 unreadable or
malformed inputs (data, config, model files); 4 divergence during a run;
5 rank-deficient M-step.  ``--json`` switches each command's report to a
single machine-readable JSON document on stdout.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import io as _io
from . import systems
from .basis import compile_table
from .em import psaem_identify
from .errors import (BasisIdError, DataParseError, DivergenceError,
                     ModelFormatError, RankDeficiencyError)
from .model import Dataset, ModelParams, metrics, simulate, state_function
from .smc import one_step_predictions

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_PARSE = 3
EXIT_DIVERGED = 4
EXIT_RANK = 5


class UsageError(Exception):
    """Bad flag combination detected after argument parsing."""


def _emit(args, doc: dict, text_lines: list[str]) -> None:
    if getattr(args, "json", False):
        print(json.dumps(doc, indent=1))
    else:
        for line in text_lines:
            print(line)


# ---------------------------------------------------------------------------
# generate


def _cmd_generate(args) -> int:
    if args.system == "example1":
        data, _ = systems.generate_example1(T=args.T, seed=args.seed)
    elif args.system == "linear":
        data, _ = systems.generate_linear(T=args.T, seed=args.seed,
                                          a=args.a, q=args.q, c=args.c,
                                          r=args.r, x1=args.x1)
    else:  # file
        if args.model is None:
            raise UsageError("generate --system file requires --model")
        model = _io.load_model(args.model)
        u = None
        if args.data is not None:
            u = _io.load_dataset(args.data).u
        X, Y = simulate(model, u=u, T=None if u is not None else args.T,
                        x1=None if args.x1 is None else [args.x1],
                        seed=args.seed, with_noise=not args.no_noise)
        data = Dataset(u=u if u is not None else np.zeros((args.T, 0)), y=Y)
    _io.save_dataset(data, args.out)
    _emit(args, {"command": "generate", "out": str(args.out), "T": data.T,
                 "n_u": data.n_u, "n_y": data.n_y},
          [f"wrote {data.T} rows ({data.n_u} inputs, {data.n_y} outputs) "
           f"to {args.out}"])
    return EXIT_OK


# ---------------------------------------------------------------------------
# identify


def _cmd_identify(args) -> int:
    cfg = _io.load_config(args.config)
    data_path = Path(args.data) if args.data else cfg.dataset
    if data_path is None:
        raise UsageError("no dataset: pass --data or set 'dataset' in the "
                         "config")
    data = _io.load_dataset(data_path)
    run = _io.configure_run(cfg, data)

    out_model = Path(args.out_model) if args.out_model else None
    if out_model is None:
        if cfg.output_dir is None:
            raise UsageError("no output path: pass --out-model or set "
                             "'output_dir' in the config")
        out_model = cfg.output_dir / "model.json"
    out_trace = Path(args.out_trace) if args.out_trace else \
        out_model.with_suffix(".trace.jsonl")
    out_diag = Path(args.out_diagnostics) if args.out_diagnostics else \
        out_model.with_suffix(".diagnostics.jsonl")

    result = psaem_identify(data, run)

    _io.save_model(result.model, out_model)
    _io.save_trace(result.trace, out_trace)
    _io.save_diagnostics(result.diagnostics, out_diag)
    degen = sum(r["degenerate_weight_steps"] for r in result.diagnostics)
    _emit(args,
          {"command": "identify", "iterations": run.K,
           "model": str(out_model), "trace": str(out_trace),
           "diagnostics": str(out_diag),
           "degenerate_weight_steps": degen},
          [f"identified over {run.K} iterations "
           f"(N={run.N}, seed={run.seed})",
           f"model:       {out_model}",
           f"trace:       {out_trace}",
           f"diagnostics: {out_diag}"]
          + ([f"note: {degen} time steps had fully degenerate weights"]
             if degen else []))
    return EXIT_OK


# ---------------------------------------------------------------------------
# simulate


def _cmd_simulate(args) -> int:
    model = _io.load_model(args.model)
    u = None
    if args.data is not None:
        u = _io.load_dataset(args.data).u
        if u.shape[1] == 0:
            u = None
    if u is None and args.T is None:
        raise UsageError("simulate needs --T (or --data with input columns)")
    X, Y = simulate(model, u=u, T=args.T if u is None else None,
                    x1=None if args.x1 is None else [args.x1],
                    seed=args.seed, with_noise=args.noise)
    data = Dataset(u=u if u is not None else np.zeros((Y.shape[0], 0)), y=Y)
    _io.save_dataset(data, args.out)
    _emit(args, {"command": "simulate", "out": str(args.out),
                 "T": data.T, "noise": bool(args.noise)},
          [f"simulated {data.T} steps "
           f"({'with' if args.noise else 'without'} noise) to {args.out}"])
    return EXIT_OK


# ---------------------------------------------------------------------------
# evaluate / compare


def _truth_function(args):
    """Returns f_true(grid) -> values for --truth-model / --truth-system."""
    if getattr(args, "truth_model", None):
        truth = _io.load_model(args.truth_model)
        if truth.n_x != 1:
            raise UsageError("--truth-model grids only scalar-state models")
        return lambda g: state_function(truth, g)[:, 0]
    if getattr(args, "truth_system", None):
        if args.truth_system != "example1":
            raise UsageError(
                f"unknown truth system {args.truth_system!r}")
        return systems.example1_transition
    return None


def _grid_interval(args, data: Dataset) -> tuple[float, float]:
    if args.grid_lo is not None and args.grid_hi is not None:
        return float(args.grid_lo), float(args.grid_hi)
    # central 95% of the measured outputs as a stand-in for the state range
    lo, hi = np.quantile(data.y, [0.025, 0.975])
    return float(lo), float(hi)


def _score_model(model: ModelParams, data: Dataset, args) -> dict:
    """Simulation + one-step metrics for one model; marks divergence."""
    out: dict = {}
    u = data.u if data.n_u else None
    try:
        _, y_sim = simulate(model, u=u, T=None if u is not None else data.T,
                            with_noise=False)
        out.update(metrics(data.y, y_sim))
    except DivergenceError as err:
        out["diverged"] = f"simulation: {err}"
    try:
        yhat = one_step_predictions(model, data, N=args.particles,
                                    seed=args.seed)
        out["one_step_rmse"] = metrics(data.y, yhat)["rms_error"]
    except DivergenceError as err:
        out.setdefault("diverged", f"prediction: {err}")

    truth = _truth_function(args)
    if truth is not None:
        if model.n_x != 1:
            raise UsageError("truth-function comparison is only defined "
                             "for scalar-state models")
        lo, hi = _grid_interval(args, data)
        table = compile_table(model.basis_x)
        lo = max(lo, float(table.clamp_lo[0]))
        hi = min(hi, float(table.clamp_hi[0]))
        grid = np.linspace(lo, hi, args.grid_points)
        fhat = state_function(model, grid)[:, 0]
        out["grid_rmse"] = float(
            np.sqrt(np.mean((fhat - truth(grid)) ** 2)))
        out["grid_interval"] = [lo, hi]
    return out


def _format_score(name: str, score: dict) -> list[str]:
    lines = [f"model: {name}"]
    if "diverged" in score:
        lines.append(f"  diverged: {score['diverged']}")
    if "rms_error" in score:
        lines.append(f"  simulation error: mean {score['mean_error']:+.6g}, "
                     f"std {score['std_error']:.6g}, "
                     f"rms {score['rms_error']:.6g}")
    if "one_step_rmse" in score:
        lines.append(f"  one-step-ahead rmse: {score['one_step_rmse']:.6g}")
    if "grid_rmse" in score:
        lo, hi = score["grid_interval"]
        lines.append(f"  transition grid rmse on [{lo:.4g}, {hi:.4g}]: "
                     f"{score['grid_rmse']:.6g}")
    return lines


def _cmd_evaluate(args) -> int:
    model = _io.load_model(args.model)
    data = _io.load_dataset(args.data)
    if data.n_y != model.n_y:
        raise UsageError(f"dataset has {data.n_y} outputs, model has "
                         f"{model.n_y}")
    score = _score_model(model, data, args)
    _emit(args, {"command": "evaluate", "model": str(args.model), **score},
          _format_score(str(args.model), score))
    if args.export_grid:
        lo, hi = _grid_interval(args, data)
        table = compile_table(model.basis_x)
        lo = max(lo, float(table.clamp_lo[0]))
        hi = min(hi, float(table.clamp_hi[0]))
        _io.export_function_grid(model, 0,
                                 np.linspace(lo, hi, args.grid_points),
                                 args.export_grid)
    return EXIT_DIVERGED if "diverged" in score else EXIT_OK


def _cmd_compare(args) -> int:
    data = _io.load_dataset(args.data)
    rows = []
    for path in args.models:
        model = _io.load_model(path)
        if data.n_y != model.n_y:
            raise UsageError(f"{path}: dataset has {data.n_y} outputs, "
                             f"model has {model.n_y}")
        score = _score_model(model, data, args)
        rows.append({"model": str(path), **score})
    rows.sort(key=lambda r: r.get("rms_error", float("inf")))
    lines = [f"ranked by RMS simulation error on {args.data}:"]
    for rank, row in enumerate(rows, start=1):
        rms = row.get("rms_error")
        note = " (diverged)" if "diverged" in row else ""
        head = f"{rank}. {row['model']}: " + \
            (f"rms {rms:.6g}" if rms is not None else "no simulation") + note
        lines.append(head)
        if "grid_rmse" in row:
            lines.append(f"   transition grid rmse: "
                         f"{row['grid_rmse']:.6g}")
    _emit(args, {"command": "compare", "ranking": rows}, lines)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="basisid",
        description="Identify nonlinear state-space models from "
                    "input-output data using basis-function expansions.",
        epilog="exit codes: 0 ok, 2 usage, 3 bad input files, "
               "4 divergence, 5 rank-deficient update")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="simulate a dataset")
    p.add_argument("--system", choices=["example1", "linear", "file"],
                   required=True)
    p.add_argument("--T", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--a", type=float, default=0.9,
                   help="linear system pole")
    p.add_argument("--q", type=float, default=0.1,
                   help="linear process noise variance")
    p.add_argument("--c", type=float, default=1.0,
                   help="linear output gain")
    p.add_argument("--r", type=float, default=0.1,
                   help="linear measurement noise variance")
    p.add_argument("--x1", type=float, default=None,
                   help="initial state (scalar systems)")
    p.add_argument("--model", help="stored model for --system file")
    p.add_argument("--data", help="dataset supplying inputs for "
                                  "--system file")
    p.add_argument("--no-noise", action="store_true",
                   help="noise-free replay for --system file")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=_cmd_generate)

    p = sub.add_parser("identify", help="fit a model to a dataset")
    p.add_argument("--data", help="dataset CSV (defaults to the config's "
                                  "'dataset')")
    p.add_argument("--config", required=True, help="run configuration JSON")
    p.add_argument("--out-model", help="output model path")
    p.add_argument("--out-trace", help="output trace path (JSONL)")
    p.add_argument("--out-diagnostics", help="output diagnostics path "
                                             "(JSONL)")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=_cmd_identify)

    p = sub.add_parser("simulate", help="roll a stored model forward")
    p.add_argument("--model", required=True)
    p.add_argument("--T", type=int, default=None)
    p.add_argument("--data", help="dataset supplying the input sequence")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--x1", type=float, default=None)
    noise = p.add_mutually_exclusive_group()
    noise.add_argument("--noise", dest="noise", action="store_true",
                       help="include process/measurement noise")
    noise.add_argument("--no-noise", dest="noise", action="store_false",
                       help="noise-free response (default)")
    p.set_defaults(noise=False)
    p.add_argument("--out", required=True)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=_cmd_simulate)

    def add_eval_flags(p):
        p.add_argument("--truth-model",
                       help="stored model providing the true transition")
        p.add_argument("--truth-system", choices=["example1"],
                       help="built-in system providing the true transition")
        p.add_argument("--grid-lo", type=float, default=None)
        p.add_argument("--grid-hi", type=float, default=None)
        p.add_argument("--grid-points", type=int, default=401)
        p.add_argument("--particles", type=int, default=200,
                       help="particle count for one-step predictions")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--json", action="store_true")

    p = sub.add_parser("evaluate", help="score a model on a dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--export-grid", help="also write the fitted transition "
                                         "on a grid (CSV)")
    add_eval_flags(p)
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("compare", help="rank models on a dataset")
    p.add_argument("--models", nargs="+", required=True)
    p.add_argument("--data", required=True)
    add_eval_flags(p)
    p.set_defaults(func=_cmd_compare)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (DataParseError, ModelFormatError, FileNotFoundError,
            IsADirectoryError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_PARSE
    except DivergenceError as err:
        print(f"error: diverged: {err}", file=sys.stderr)
        return EXIT_DIVERGED
    except RankDeficiencyError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_RANK
    except (ValueError, BasisIdError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_PARSE


if __name__ == "__main__":
    sys.exit(main())
