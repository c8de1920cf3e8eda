"""Command-line entry point.

Exit codes: 0 success, 2 invalid input, 3 degenerate estimate, 64 usage error.
"""

from __future__ import annotations

import argparse
import math
import sys
import time
from dataclasses import asdict
from pathlib import Path

from .baselines import wald_decomposition
from .core import (
    WEAK_FS_THRESHOLD,
    DegenerateEstimateError,
    EffectEstimate,
    SequenceSpec,
    ValidationError,
    as_pattern,
    check_span,
)
from .factorial import (
    BOUNDS,
    compliance_table_from_block,
    estimate_factor_effect,
    estimate_joint_effect,
    estimate_response_function,
    normal_quantile,
)
from .io import (
    RunReport,
    estimate_row,
    file_digest,
    load_factorial_csv,
    load_panel_csv,
    parse_probs,
)
from .panel import estimate_lag0_effect, estimate_lagp_effect, estimate_lagp_response, stack_lag0_effects
from .simulation import (
    SimulationConfig,
    draw_replicate,
    format_table,
    metrics_to_csv,
    metrics_to_json,
    monte_carlo,
)

EXIT_OK, EXIT_INVALID, EXIT_DEGENERATE, EXIT_USAGE = 0, 2, 3, 64


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _span(text: str) -> tuple[int, int]:
    try:
        lo, hi = (int(s) for s in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"range must look like a:b, got {text!r}") from None
    return lo, hi


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="htiv", description="Horvitz-Thompson IV estimators for factorial and panel experiments.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, data=True):
        if data:
            p.add_argument("--data", required=True, help="input CSV")
            p.add_argument("--probs", help="assignment probabilities, comma separated")
        p.add_argument("--alpha", type=float, default=0.05)
        p.add_argument("--json", metavar="PATH", help="write the report as JSON")
        p.add_argument("--csv", metavar="PATH", help="write the result rows as CSV")

    p = sub.add_parser("estimate-factorial", help="factor or joint effects")
    common(p)
    which = p.add_mutually_exclusive_group(required=True)
    which.add_argument("--factor", type=int, help="1-based factor index")
    which.add_argument("--range", type=_span, dest="span", help="factor block a:b")
    p.add_argument("--d", help="treatment pattern on the block, e.g. 11")
    p.add_argument("--dtilde", help="comparison pattern; omit for the response m(d)")
    p.add_argument("--bound", choices=BOUNDS, default="centered")

    p = sub.add_parser("estimate-panel", help="dynamic lag-p effects")
    common(p)
    p.add_argument("--t", type=int, help="target period (1-based)")
    p.add_argument("--lag", type=int, default=0)
    p.add_argument("--d", help="treatment path over t-lag..t")
    p.add_argument("--dtilde", help="comparison path")
    p.add_argument("--stack", action="store_true", help="lag-0 effect stacked over all periods")
    p.add_argument("--weighting", choices=("pooled", "mean"), default="pooled")
    p.add_argument("--bound", choices=BOUNDS, default="centered")

    p = sub.add_parser("compliance-table", help="signed first stages for every pattern")
    common(p)
    p.add_argument("--range", type=_span, dest="span", required=True)
    p.add_argument("--design", choices=("factorial", "panel"), default="factorial")

    p = sub.add_parser("simulate", help="Monte Carlo study from a config file")
    common(p, data=False)
    p.add_argument("--config", required=True)
    p.add_argument("--workers", type=int, help="worker processes (default from HTIV_WORKERS or 1)")

    p = sub.add_parser("decompose", help="Wald estimand decomposition on one simulated panel")
    common(p, data=False)
    p.add_argument("--config", required=True)
    p.add_argument("--rep", type=int, default=0, help="replicate index to draw")
    return parser


def _probs(args):
    return parse_probs(args.probs) if args.probs else None


def _warn(report: RunReport, label: str, est: EffectEstimate) -> None:
    if est.weak_fs_flag:
        report.warnings.append(
            f"{label}: weak first stage |fs| = {abs(est.fs_point):.3f} < 0.10, Bloom interval may be unreliable"
        )


def _response_estimate(resp, alpha) -> EffectEstimate:
    """Bloom interval for a single response m(d)."""
    var = resp.rf_var_bound / resp.fs_point**2
    half = normal_quantile(alpha) * math.sqrt(var)
    est = EffectEstimate(
        point=resp.point,
        fs_point=resp.fs_point,
        var_bound=var,
        ci_lo=resp.point - half,
        ci_hi=resp.point + half,
        alpha=alpha,
        n_units=resp.n_units,
        weak_fs_flag=abs(resp.fs_point) < WEAK_FS_THRESHOLD,
    )
    return est


def _estimate_factorial(args, report: RunReport) -> None:
    ds = load_factorial_csv(args.data, _probs(args))
    if args.factor is not None:
        if args.d or args.dtilde:
            raise ValidationError("--d/--dtilde apply to --range, not --factor")
        label = f"factor_{args.factor}"
        est = estimate_factor_effect(ds, args.factor, args.alpha, args.bound)
    else:
        if not args.d:
            raise ValidationError("--range needs --d")
        bits = args.d
        if args.dtilde:
            label = f"joint_{args.span[0]}:{args.span[1]}_{bits}_{args.dtilde}"
            spec = SequenceSpec.from_span(args.span, args.d, args.dtilde)
            est = estimate_joint_effect(ds, spec, args.alpha, args.bound)
        else:
            label = f"response_{args.span[0]}:{args.span[1]}_{bits}"
            resp = estimate_response_function(ds, args.span, as_pattern(bits), args.bound)
            if resp.degenerate:
                raise DegenerateEstimateError(f"no joint compliers detected for pattern {bits}", resp.pattern)
            est = _response_estimate(resp, args.alpha)
    report.estimates.append(estimate_row(label, est))
    _warn(report, label, est)


def _estimate_panel(args, report: RunReport) -> None:
    panel = load_panel_csv(args.data, _probs(args))
    if args.stack:
        label = f"stack_lag0_{args.weighting}"
        est = stack_lag0_effects(panel, args.alpha, args.weighting, args.bound)
    else:
        if args.t is None:
            raise ValidationError("--t is required unless --stack is given")
        if args.lag == 0 and not args.d and not args.dtilde:
            label = f"lag0_t{args.t}"
            est = estimate_lag0_effect(panel, args.t, args.alpha, args.bound)
        elif not args.d:
            raise ValidationError("--d is required for lag-p effects")
        elif args.dtilde:
            spec = SequenceSpec(args.t, args.lag, args.d, args.dtilde)
            label = f"lag{args.lag}_t{args.t}_{args.d}_{args.dtilde}"
            est = estimate_lagp_effect(panel, spec, args.alpha, args.bound)
        else:
            label = f"response_lag{args.lag}_t{args.t}_{args.d}"
            resp = estimate_lagp_response(panel, args.t, args.lag, as_pattern(args.d), args.bound)
            if resp.degenerate:
                raise DegenerateEstimateError(f"no joint compliers detected for path {args.d}", resp.pattern)
            est = _response_estimate(resp, args.alpha)
    report.estimates.append(estimate_row(label, est))
    _warn(report, label, est)


def _compliance(args, report: RunReport) -> None:
    if args.design == "factorial":
        ds = load_factorial_csv(args.data, _probs(args))
        z, d, p, y = ds.z, ds.d, ds.prob_matrix(), ds.y
    else:
        ds = load_panel_csv(args.data, _probs(args))
        z, d, p, y = ds.z, ds.d, ds.prob_matrix(), ds.y[:, args.span[1] - 1]
    lo, hi = check_span(args.span, z.shape[1], "factor" if args.design == "factorial" else "period")
    cols = slice(lo - 1, hi)
    for row in compliance_table_from_block(y, z[:, cols], d[:, cols], p[:, cols], args.alpha):
        bits = "".join(map(str, row.pattern))
        report.estimates.append(
            {
                "label": f"fs_{bits}",
                "point": row.fs_point,
                "fs": row.fs_point,
                "var_bound": row.var_bound,
                "ci_lo": row.ci_lo,
                "ci_hi": row.ci_hi,
                "alpha": args.alpha,
                "weak_fs": bool(abs(row.fs_point) < WEAK_FS_THRESHOLD),
                "rate": abs(row.fs_point),
            }
        )


def _write_outputs(args, report: RunReport, csv_text: str | None = None, json_text: str | None = None) -> None:
    if args.json:
        Path(args.json).write_text((json_text or report.to_json()) + "\n", encoding="utf-8")
    if args.csv:
        Path(args.csv).write_text(csv_text if csv_text is not None else report.to_csv(), encoding="utf-8")


def run_command(argv) -> tuple[int, RunReport | None]:
    """Parse and run one command; returns the exit code and the report, if any."""
    argv = list(argv)
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE, None
    except SystemExit as exc:  # --help
        return int(exc.code or 0), None
    start = time.perf_counter()
    source = getattr(args, "data", None) or getattr(args, "config", None)
    report = RunReport(command=["htiv", *argv], input_digest=None)
    try:
        if source is not None and Path(source).is_file():
            report.input_digest = file_digest(source)
        if args.command == "estimate-factorial":
            _estimate_factorial(args, report)
        elif args.command == "estimate-panel":
            _estimate_panel(args, report)
        elif args.command == "compliance-table":
            _compliance(args, report)
        elif args.command == "simulate":
            config = SimulationConfig.from_file(args.config)
            metrics = monte_carlo(config, args.workers)
            print(format_table(metrics))
            report.wall_time = time.perf_counter() - start
            _write_outputs(args, report, metrics_to_csv(metrics), metrics_to_json(metrics, config))
            return EXIT_OK, report
        elif args.command == "decompose":
            config = SimulationConfig.from_file(args.config)
            if config.profile != "panel":
                raise ValidationError("decompose needs a panel profile config")
            data, table = draw_replicate(config, args.rep)
            dec = wald_decomposition(table, data)
            row = {"label": "wald_decomposition", **asdict(dec)}
            row["carryover_terms"] = list(dec.carryover_terms)
            report.estimates.append(row)
            for key, value in row.items():
                if key != "label":
                    print(f"{key:20s} {value}")
            report.wall_time = time.perf_counter() - start
            _write_outputs(args, report)
            return EXIT_OK, report
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID, None
    except DegenerateEstimateError as exc:
        print(f"degenerate estimate: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE, None
    report.wall_time = time.perf_counter() - start
    print(report.format_table())
    _write_outputs(args, report)
    return EXIT_OK, report


def main(argv=None) -> int:
    code, _ = run_command(sys.argv[1:] if argv is None else argv)
    return code


if __name__ == "__main__":
    sys.exit(main())
