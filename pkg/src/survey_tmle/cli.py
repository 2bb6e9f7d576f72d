"""Command-line entry point: ``survey-tmle <command> [options]``.

Every option can also come from a ``--config`` file of ``key = value`` lines
(``#`` starts a comment); keys are the long option names with or without the
leading dashes, and command-line flags win over the file.

Exit status: 0 success, 2 input error, 3 estimation failure, 4 oracle failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import __version__
from .data import BINARY, CONTINUOUS, SamplingFunction, WeightedSample
from .design import run_pilot
from .exceptions import EstimationError, InputError, OracleFailure, RejectiveInfeasible, SurveyTmleError
from .io import (
    format_metrics,
    format_report,
    load_dataset,
    read_h_file,
    to_json,
    write_h_file,
    write_metrics_csv,
    write_sample_csv,
    write_text,
)
from .rng import make_rng
from .sampling import DESIGNS, draw_sample, make_plan

logger = logging.getLogger("survey_tmle")

EXIT_OK, EXIT_ERROR, EXIT_INPUT, EXIT_ESTIMATION, EXIT_ORACLE = 0, 1, 2, 3, 4

# stream ids under the master seed
_DRAW_STREAM, _PILOT_STREAM, _MC_STREAM = 0, 1, 2


def _csv_list(text):
    return [s.strip() for s in str(text).split(",") if s.strip()]


def _int_list(text):
    try:
        return [int(s) for s in _csv_list(text)]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _range(text):
    parts = _csv_list(text)
    try:
        lo, hi = (float(p) for p in parts)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected 'lo,hi', got {text!r}") from None
    return lo, hi


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise InputError(f"expected a boolean, got {text!r}")


# ------------------------------------------------------------------- parser


def _data_options(p):
    g = p.add_argument_group("input data")
    g.add_argument("--input", help="CSV file with a header row")
    g.add_argument("--a-col", default="A", help="exposure column (default A)")
    g.add_argument("--y-col", default="Y", help="outcome column (default Y)")
    g.add_argument("--v-col", default="V", help="stratum column (default V; omitted column means one stratum)")
    g.add_argument("--w-cols", type=_csv_list, help="comma-separated context columns (default: all others)")
    g.add_argument("--y-range", type=_range, help="'lo,hi' outcome range for rescaling (default: data range)")


def _sampling_options(p, n_required):
    g = p.add_argument_group("sampling")
    g.add_argument("--n", type=int, help="sample size" + ("" if n_required else " (default: use all rows)"))
    g.add_argument("--h-file", help="two-column CSV stratum,h (default: uniform h = 1)")
    g.add_argument("--design", choices=DESIGNS, default="rejective")
    g.add_argument("--seed", type=int, help="master seed (required whenever a draw is made)")


def _estimator_options(p):
    g = p.add_argument_group("estimation")
    g.add_argument("--alpha", type=float, default=0.05)
    g.add_argument("--g-min", type=float, default=0.01, help="bound on the exposure mechanism")
    g.add_argument("--out", help="JSON report path (default: stdout)")
    g.add_argument("--dump-nuisances", help="write fitted nuisance models as JSON")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="survey-tmle", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value file mirroring the options")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True

    p = sub.add_parser("sample", parents=[common], help="draw a sub-sample and write indices and weights")
    _data_options(p)
    _sampling_options(p, n_required=True)
    p.add_argument("--exposure", choices=(CONTINUOUS, BINARY), default=CONTINUOUS)
    p.add_argument("--out", help="CSV path (default: stdout)")

    p = sub.add_parser("pilot", parents=[common], help="uniform pilot and optimal sampling function")
    _data_options(p)
    p.add_argument("--n0", type=int, help="pilot sample size")
    p.add_argument("--estimator", choices=(CONTINUOUS, BINARY), default=CONTINUOUS)
    p.add_argument("--design", choices=DESIGNS, default="rejective")
    p.add_argument("--seed", type=int)
    p.add_argument("--g-min", type=float, default=0.01)
    p.add_argument("--floor", type=float, default=0.05, help="lower bound on h before renormalisation")
    p.add_argument("--out", help="h-file path (default: stdout)")
    p.add_argument("--json", help="also write pilot details as JSON")

    for name, kind in (("tmle-binary", BINARY), ("tmle-continuous", CONTINUOUS)):
        p = sub.add_parser(name, parents=[common], help=f"TMLE of the {kind}-exposure parameter")
        _data_options(p)
        _sampling_options(p, n_required=False)
        _estimator_options(p)
        if kind == CONTINUOUS:
            g = p.add_argument_group("targeting")
            g.add_argument("--max-iter", type=int, default=7)
            g.add_argument("--mic", type=float, default=0.01, help="score stopping constant")
            g.add_argument("--psi-tol", type=float, default=0.05, help="stop when psi moves less than this "
                                                                         "fraction of the CI half-width")
            g.add_argument("--n-atoms", type=int, default=50, help="nonzero exposure atoms per context")
            g.add_argument("--stratify", choices=("none", "outcome", "all"), default="none",
                           help="fit nuisances separately per stratum")
            g.add_argument("--mc-mode", action="store_true", help="evaluate psi by Monte Carlo")
            g.add_argument("--mc-B", type=int, default=100_000, help="Monte Carlo draws")
        p.set_defaults(exposure=kind)

    p = sub.add_parser("simulate", parents=[common], help="Monte Carlo study on the built-in processes")
    p.add_argument("--dgp", choices=("1", "2", "3", "all"), default="all")
    p.add_argument("--N", type=int, default=200_000)
    p.add_argument("--B", type=int, default=200)
    p.add_argument("--n-grid", type=_int_list, default=[500, 2000, 5000])
    p.add_argument("--h-mode", choices=("uniform", "pilot", "both"), default="both")
    p.add_argument("--n0", type=int, default=1000)
    p.add_argument("--design", choices=DESIGNS, default="rejective")
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--allow-large-fraction", action="store_true")
    p.add_argument("--out", default="study", help="output prefix for .json, .csv and .txt (default: study)")

    p = sub.add_parser("validate", parents=[common], help="run the oracle battery")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--draws", type=int, default=100_000, help="draws for the enumeration checks")
    p.add_argument("--fluct-tol", type=float, default=1e-12,
                   help="fluctuation solver tolerance (loosen to see the oracle fail)")
    p.add_argument("--out", help="JSON results path")
    return parser


def read_config(path) -> dict:
    """``key = value`` pairs; blank lines and ``#`` comments are ignored."""
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise InputError(f"cannot read config {path}: {exc.strerror}") from None
    out = {}
    for k, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InputError(f"{path}: line {k}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.lstrip("-").replace("-", "_")] = value
    return out


def _subparser(parser, command):
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[command]
    raise KeyError(command)


def parse_args(argv=None) -> argparse.Namespace:
    """Parse ``argv``, then fill unset options from ``--config`` and reparse so flags win."""
    parser = build_parser()
    args = parser.parse_args(argv)
    if not args.config:
        return args
    sub = _subparser(parser, args.command)
    known = {a.dest: a for a in sub._actions}
    values = read_config(args.config)
    defaults = {}
    for key, value in values.items():
        action = known.get(key)
        if action is None or key in ("config", "help"):
            raise InputError(f"{args.config}: unknown option {key!r} for {args.command}")
        if isinstance(action, argparse._StoreTrueAction):
            value = _bool(value)
        elif action.type is not None:
            try:
                value = action.type(value)
            except (argparse.ArgumentTypeError, ValueError) as exc:
                raise InputError(f"{args.config}: bad value for {key!r}: {exc}") from None
        if action.choices is not None and value not in action.choices:
            raise InputError(f"{args.config}: {key!r} must be one of {list(action.choices)}")
        defaults[key] = value
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


# ----------------------------------------------------------------- commands


def _require(args, *names):
    for name in names:
        if getattr(args, name, None) is None:
            raise InputError(f"{args.command}: --{name.replace('_', '-')} is required")


def _load(args, exposure):
    _require(args, "input")
    return load_dataset(args.input, a_col=args.a_col, y_col=args.y_col, v_col=args.v_col or None,
                        w_cols=args.w_cols, exposure=exposure, outcome_scale=args.y_range)


def _h_function(args, ds) -> SamplingFunction:
    if not args.h_file:
        return SamplingFunction.uniform(ds.stratum_domain)
    h = read_h_file(args.h_file)
    missing = [v for v in ds.stratum_domain if v not in h.values]
    if missing:
        raise InputError(f"{args.h_file}: no h value for strata {missing}")
    return h


def _h_summary(h: SamplingFunction) -> str:
    return ", ".join(f"{k}:{h.values[k]:.4g}" for k in sorted(h.values, key=str))


def _log_run(args, **fields):
    parts = [f"survey-tmle {__version__}", f"command={args.command}"]
    parts += [f"{k}={v}" for k, v in fields.items()]
    logger.info(" ".join(parts))


def _emit(path, text):
    if path:
        write_text(path, text)
    else:
        sys.stdout.write(text)


def _draw(args, ds) -> WeightedSample:
    h = _h_function(args, ds)
    _log_run(args, seed=args.seed, design=args.design, n=args.n, N=ds.N, h=f"[{_h_summary(h)}]")
    plan = make_plan(ds, h, args.n)
    return draw_sample(plan, ds, make_rng(args.seed, _DRAW_STREAM), args.design)


def cmd_sample(args):
    _require(args, "n", "seed")
    ds = _load(args, args.exposure)
    sample = _draw(args, ds)
    try:
        write_sample_csv(args.out or sys.stdout, sample)
    except OSError as exc:
        raise InputError(f"cannot write {args.out}: {exc.strerror}") from None
    return EXIT_OK


def cmd_pilot(args):
    _require(args, "n0", "seed")
    ds = _load(args, args.estimator)
    _log_run(args, seed=args.seed, design=args.design, n=args.n0, N=ds.N, h="uniform")
    res = run_pilot(ds, args.n0, args.estimator, make_rng(args.seed, _PILOT_STREAM),
                    estimator_params={"g_min": args.g_min}, design=args.design, floor=args.floor)
    logger.info("optimal h: [%s]", _h_summary(res.h_opt))
    if args.out:
        write_h_file(args.out, res.h_opt)
    else:
        sys.stdout.write("stratum,h\n" + "".join(f"{k},{res.h_opt.values[k]!r}\n"
                                                  for k in sorted(res.h_opt.values, key=str)))
    if args.json:
        write_text(args.json, to_json({
            "f2": res.f2_by_stratum, "pi2": res.pi2_hat, "h": res.h_opt.values,
            "imputed_strata": list(res.imputed_strata), "pilot": res.report.to_dict(), **res.extra,
        }))
    return EXIT_OK


def _estimate(args, kind):
    from .tmle_binary import BinaryTMLE
    from .tmle_continuous import ContinuousTMLE

    ds = _load(args, kind)
    if args.n is None:
        if args.h_file:
            raise InputError("--h-file needs --n")
        _log_run(args, seed=args.seed, design="none", n=ds.N, N=ds.N, h="full data")
        sample = WeightedSample.full(ds)
    else:
        _require(args, "seed")
        sample = _draw(args, ds)
    if kind == BINARY:
        model = BinaryTMLE(alpha=args.alpha, g_min=args.g_min)
    else:
        if args.mc_mode:
            _require(args, "seed")
        model = ContinuousTMLE(
            alpha=args.alpha, g_min=args.g_min, max_iter=args.max_iter, mic=args.mic, psi_tol=args.psi_tol,
            n_atoms=args.n_atoms, stratify=args.stratify, mc_mode=args.mc_mode, mc_B=args.mc_B,
            random_state=make_rng(args.seed, _MC_STREAM) if args.mc_mode else None,
        )
    model.fit_sample(sample)
    report = model.report_
    if not report.converged:
        logger.warning("targeting stopped without meeting the convergence criterion")
    out = report.to_dict()
    out.update({"seed": args.seed, "design": args.design if args.n is not None else "none"})
    _emit(args.out, to_json(out))
    if args.out:
        sys.stderr.write(format_report(report))
    if args.dump_nuisances:
        write_text(args.dump_nuisances, to_json(model.nuisance_dump()))
    return EXIT_OK


def cmd_simulate(args):
    from .simulation import STUDY_ESTIMATOR, StudyConfig, run_study

    _require(args, "seed")
    dgps = (1, 2, 3) if args.dgp == "all" else (int(args.dgp),)
    modes = ("uniform", "pilot") if args.h_mode == "both" else (args.h_mode,)
    config = StudyConfig(dgps=dgps, N=args.N, B=args.B, n_grid=tuple(args.n_grid), h_modes=modes, seed=args.seed,
                         n0=args.n0, design=args.design, threads=args.threads,
                         allow_large_fraction=args.allow_large_fraction, alpha=args.alpha,
                         estimator=dict(STUDY_ESTIMATOR))
    _log_run(args, seed=args.seed, design=args.design, n=list(config.n_grid), N=config.N,
             h="/".join(modes), B=config.B, dgp=args.dgp)
    metrics = run_study(config)
    prefix = args.out
    write_text(f"{prefix}.json", to_json(metrics.to_dict()))
    try:
        write_metrics_csv(f"{prefix}.csv", metrics)
    except OSError as exc:
        raise InputError(f"cannot write {prefix}.csv: {exc.strerror}") from None
    table = format_metrics(metrics)
    write_text(f"{prefix}.txt", table)
    sys.stdout.write(table)
    return EXIT_OK


def cmd_validate(args):
    from .oracles import run_oracles

    _log_run(args, seed=args.seed, draws=args.draws)
    results = run_oracles(args.seed, args.fluct_tol, args.draws)
    for r in results:
        sys.stdout.write(f"{'PASS' if r.passed else 'FAIL'}  {r.name}: {r.detail}\n")
    if args.out:
        write_text(args.out, to_json([{"name": r.name, "passed": bool(r.passed), "detail": r.detail}
                                      for r in results]))
    if not all(r.passed for r in results):
        raise OracleFailure(f"{sum(not r.passed for r in results)} oracle check(s) failed")
    return EXIT_OK


COMMANDS = {
    "sample": cmd_sample,
    "pilot": cmd_pilot,
    "tmle-binary": lambda a: _estimate(a, BINARY),
    "tmle-continuous": lambda a: _estimate(a, CONTINUOUS),
    "simulate": cmd_simulate,
    "validate": cmd_validate,
}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr,
                        force=True)
    logging.captureWarnings(True)
    try:
        args = parse_args(argv)
        if args.verbose:
            logging.getLogger().setLevel(logging.DEBUG)
        return COMMANDS[args.command](args)
    except InputError as exc:
        logger.error("%s", exc)
        return EXIT_INPUT
    except (EstimationError, RejectiveInfeasible) as exc:
        logger.error("%s", exc)
        return EXIT_ESTIMATION
    except OracleFailure as exc:
        logger.error("%s", exc)
        return EXIT_ORACLE
    except SurveyTmleError as exc:
        logger.error("%s", exc)
        return EXIT_ERROR
    except OSError as exc:
        logger.error("%s", exc)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
