"""Command-line interface.

Commands: oracle (population limits), sample (subsample a CSV), fit
(logistic fit of a CSV), asymptotics (population matrices/variance),
simulate (replication studies).

Every run resolves one seed (explicit --seed or a fresh random one),
prints it on stderr, and records it in the outputs, so identical
invocations are byte-identical.  Exit codes: 0 success, 1 usage/parse
errors, 2 numerical failures (separation/singularity), 3 budget or
acceptance caps exceeded.
"""

from __future__ import annotations

import argparse
import secrets
import sys

import numpy as np

from . import _kernels as K
from .asymptotics import conditional_bias_slope, eval_matrices, lcc_variance
from .experiments import TooManyFailures, run_experiment
from .fileio import (
    ConfigError,
    CsvFormatError,
    LABEL_COLUMN,
    OFFSET_COLUMN,
    WEIGHT_COLUMN,
    atomic_write,
    format_value,
    load_config_file,
    parse_experiment,
    parse_population,
    read_coefficients,
    read_observations_csv,
    stream_rows,
    write_coefficients,
    write_report,
)
from .glm import FitConfig, GlmError, ModelParams, ObservationSet, fit_logistic
from .populations import (
    AcceptanceTooLow,
    DiscretePopulation,
    StepLogit,
    equal_class_bias,
    integration_grid,
    marginal_odds_ratio,
    population_theta_star,
    theta_cc_limit,
    true_log_odds,
)
from .sampling import (
    CaseControl,
    EmptySubsample,
    LocalCaseControl,
    TooFewCases,
    Uniform,
    WeightedCaseControl,
    acceptance_probabilities,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NUMERICAL = 2
EXIT_BUDGET = 3


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _resolve_seed(args) -> int:
    seed = getattr(args, "seed", None)
    if seed is None:
        seed = secrets.randbits(63)
    print(f"seed: {seed}", file=sys.stderr)
    return seed


def _emit(rows, args, comments=(), json_extra=None, out=None):
    out = out or getattr(args, "out", None) or "-"
    extra = dict(json_extra or {})
    if out == "-":
        import io

        buf = io.StringIO()
        _write_to_handle(buf, rows, args.format, comments, extra)
        sys.stdout.write(buf.getvalue())
    else:
        write_report(out, rows, args.format, comments=comments, json_extra=extra)


def _write_to_handle(handle, rows, fmt, comments, json_extra):
    import csv as _csv
    import json as _json

    rows = list(rows)
    if fmt == "json":
        from .fileio import _jsonable

        payload = {"rows": _jsonable(rows)}
        payload.update(_jsonable(json_extra))
        _json.dump(payload, handle, indent=2, sort_keys=True)
        handle.write("\n")
        return
    for comment in comments:
        handle.write(f"# {comment}\n")
    if rows:
        writer = _csv.DictWriter(handle, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        for row in rows:
            writer.writerow(
                {
                    k: format_value(v) if isinstance(v, (float, np.floating)) else v
                    for k, v in row.items()
                }
            )


def _load_population(path):
    raw = load_config_file(path)
    if "population" not in raw:
        raise ConfigError(f"{path}: missing key 'population'")
    return parse_population(raw["population"])


def _coef_rows(label, params: ModelParams, names, se=None):
    rows = [
        {
            "quantity": label,
            "coefficient": "intercept",
            "value": params.intercept,
            "mc_se": 0.0 if se is None else float(se[0]),
        }
    ]
    for i, name in enumerate(names):
        rows.append(
            {
                "quantity": label,
                "coefficient": name,
                "value": float(params.slopes[i]),
                "mc_se": 0.0 if se is None else float(se[i + 1]),
            }
        )
    return rows


# ---------------------------------------------------------------------------
# oracle


def cmd_oracle(args) -> int:
    seed = _resolve_seed(args)
    spec = _load_population(args.spec)
    names = [f"x{i + 1}" for i in range(spec.p)]
    star = population_theta_star(spec, tol=args.tol)
    b_eq = equal_class_bias(spec)
    rows = _coef_rows("theta_star", star.params, names, star.mc_se)
    rows.append(
        {"quantity": "equal_class_bias", "coefficient": "", "value": b_eq, "mc_se": 0.0}
    )
    b_values = [b_eq, *(args.b or [])]
    for b in b_values:
        cc = theta_cc_limit(spec, b, tol=args.tol)
        rows.extend(_coef_rows(f"theta_cc[b={b:.6g}]", cc.params, names, cc.mc_se))
    if isinstance(spec, DiscretePopulation):
        for j in range(spec.p):
            col = spec.points[:, j]
            if set(np.unique(col)) == {0.0, 1.0}:
                rows.append(
                    {
                        "quantity": "marginal_odds_ratio",
                        "coefficient": names[j],
                        "value": marginal_odds_ratio(spec, j),
                        "mc_se": 0.0,
                    }
                )
    if isinstance(spec, StepLogit):
        plot_path = args.plot_out or (
            (args.out or "steplogit") + ".fig1.csv"
            if args.out != "-"
            else "steplogit.fig1.csv"
        )
        _write_steplogit_plot(plot_path, spec, star.params)
        print(f"plot data: {plot_path}", file=sys.stderr)
    _emit(rows, args, comments=[f"seed {seed}", f"spec {args.spec}"], json_extra={"seed": seed})
    return EXIT_OK


def _write_steplogit_plot(path, spec: StepLogit, params: ModelParams):
    grid = integration_grid(spec)
    x = grid.points
    rows = []
    for xi in x[:, 0]:
        f_true = float(true_log_odds(spec, [[xi]])[0])
        f_fit = params.intercept + params.slopes[0] * xi
        rows.append(
            {
                "x": float(xi),
                "true_log_odds": f_true,
                "fit_log_odds": f_fit,
                "true_prob": float(1 / (1 + np.exp(-f_true))),
                "fit_prob": float(1 / (1 + np.exp(-f_fit))),
            }
        )
    write_report(path, rows, "csv")


# ---------------------------------------------------------------------------
# sample


def _count_pass(path):
    n0 = n1 = 0
    names = None
    for header, _, _, labels, _, _ in stream_rows(path):
        names = header.feature_names
        n1 += int(np.sum(labels == 1.0))
        n0 += int(np.sum(labels == 0.0))
    return n0, n1, names


def _reservoir_balanced_pass(path, per_class, rng):
    """Single-pass per-class reservoir sample; returns a WCC-weighted pilot set."""
    seen = {0.0: 0, 1.0: 0}
    kept = {0.0: [], 1.0: []}
    for _, _, feats, labels, _, _ in stream_rows(path):
        for k in range(labels.shape[0]):
            y = labels[k]
            seen[y] += 1
            if len(kept[y]) < per_class:
                kept[y].append(feats[k])
            else:
                j = int(rng.integers(0, seen[y]))
                if j < per_class:
                    kept[y][j] = feats[k]
    if not kept[0.0] or not kept[1.0]:
        raise TooFewCases("pilot needs both classes present")
    feats, labels, weights = [], [], []
    for y in (0.0, 1.0):
        feats.extend(kept[y])
        labels.extend([y] * len(kept[y]))
        weights.extend([seen[y] / len(kept[y])] * len(kept[y]))
    return ObservationSet(np.array(feats), labels, weights=weights)


def _sum_acceptance_pass(path, pilot: ModelParams) -> float:
    total = 0.0
    for _, _, feats, labels, _, _ in stream_rows(path):
        eta = pilot.linear_predictor(feats)
        total += float(np.sum(np.abs(labels - K.sigmoid(eta))))
    return total


def _build_scheme(args, seed):
    """Resolve the scheme, running count/pilot passes if needed."""
    if args.scheme == "uniform":
        if args.rate is None:
            raise _UsageError("--rate is required for uniform sampling")
        return Uniform(args.rate), None, None
    if args.scheme in ("cc", "wcc"):
        if args.a0 is not None and args.a1 is not None:
            cls = CaseControl if args.scheme == "cc" else WeightedCaseControl
            return cls(a0=args.a0, a1=args.a1), None, None
        if args.target_size is None:
            raise _UsageError(f"--a0/--a1 or --target-size required for {args.scheme}")
        n0, n1, _ = _count_pass(args.data)
        from .sampling import class_balanced_scheme

        labels = np.concatenate([np.zeros(n0), np.ones(n1)])
        return (
            class_balanced_scheme(labels, args.target_size, weighted=args.scheme == "wcc"),
            None,
            None,
        )
    # lcc
    if args.pilot is not None:
        pilot, _ = read_coefficients(args.pilot)
        pilot_source = args.pilot
    else:
        rng_pilot = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(1,)))
        pilot_obs = _reservoir_balanced_pass(
            args.data, max(args.pilot_size // 2, 2), rng_pilot
        )
        pilot = fit_logistic(pilot_obs).params
        pilot_source = f"wcc reservoir (size {args.pilot_size})"
    c = args.c
    if c is None:
        if args.target_size is not None:
            expected_c1 = _sum_acceptance_pass(args.data, pilot)
            c = args.target_size / expected_c1
        else:
            c = 1.0
    return LocalCaseControl(pilot, c=c, retain_cases=args.retain_cases), pilot, pilot_source


def cmd_sample(args) -> int:
    if not args.out or args.out == "-":
        raise _UsageError("sample needs --out PATH for the subsample CSV")
    seed = _resolve_seed(args)
    scheme, pilot, pilot_source = _build_scheme(args, seed)
    rng = np.random.default_rng(seed)
    rows_read = 0
    realized = 0
    expected = 0.0
    feature_names = None
    import csv as _csv

    with open(args.data, newline="") as src:
        first = _csv.reader(src)
        header_cells = next(first)
    if WEIGHT_COLUMN in header_cells or OFFSET_COLUMN in header_cells:
        raise CsvFormatError(
            "input already has weight/offset columns; sample from raw feature CSVs"
        )
    with atomic_write(args.out, newline="") as out:
        writer = _csv.writer(out)
        wrote_header = False
        for header, start, feats, labels, _, _ in stream_rows(args.data, args.chunk_size):
            if not wrote_header:
                feature_names = header.feature_names
                writer.writerow(
                    [LABEL_COLUMN, *feature_names, WEIGHT_COLUMN, OFFSET_COLUMN]
                )
                wrote_header = True
            n = labels.shape[0]
            rows_read += n
            if isinstance(scheme, LocalCaseControl):
                eta = scheme.pilot.linear_predictor(feats)
                keep, weight, prob = K.lcc_accept(
                    eta, labels, scheme.c, rng.random(n), scheme.retain_cases
                )
                offsets = -eta
            else:
                prob, weight = acceptance_probabilities(scheme, feats, labels)
                keep = rng.random(n) <= prob
                offsets = np.full(
                    n, scheme.bias if isinstance(scheme, CaseControl) else 0.0
                )
            expected += float(prob.sum())
            for i in np.flatnonzero(keep):
                realized += 1
                writer.writerow(
                    [
                        format_value(labels[i]),
                        *(format_value(v) for v in feats[i]),
                        format_value(weight[i]),
                        format_value(offsets[i]),
                    ]
                )
    if realized == 0:
        raise EmptySubsample("no rows accepted")
    adjustment = _scheme_adjustment_vector(scheme, len(feature_names))
    summary_rows = [
        {"key": "seed", "value": seed},
        {"key": "scheme", "value": _scheme_label(scheme)},
        {"key": "rows_read", "value": rows_read},
        {"key": "realized_size", "value": realized},
        {"key": "expected_size", "value": expected},
        {"key": "acceptance_rate_estimate", "value": expected / rows_read},
        {"key": "pilot_source", "value": pilot_source or ""},
        {
            "key": "adjustment",
            "value": " ".join(format_value(v) for v in adjustment),
        },
    ]
    if args.summary:
        write_report(
            args.summary,
            summary_rows,
            args.format,
            comments=[f"subsample of {args.data}"],
            json_extra={"seed": seed},
        )
    print(
        f"kept {realized} of {rows_read} rows "
        f"(expected {expected:.1f}) -> {args.out}",
        file=sys.stderr,
    )
    return EXIT_OK


def _scheme_label(scheme) -> str:
    if isinstance(scheme, Uniform):
        return f"uniform(rate={scheme.rate:.6g})"
    if isinstance(scheme, CaseControl):
        return f"cc(a0={scheme.a0:.6g}, a1={scheme.a1:.6g})"
    if isinstance(scheme, WeightedCaseControl):
        return f"wcc(a0={scheme.a0:.6g}, a1={scheme.a1:.6g})"
    return f"lcc(c={scheme.c:.6g}, retain_cases={scheme.retain_cases})"


def _scheme_adjustment_vector(scheme, p):
    from .sampling import _scheme_adjustment

    return _scheme_adjustment(scheme, p)


# ---------------------------------------------------------------------------
# fit


def cmd_fit(args) -> int:
    seed = _resolve_seed(args)
    obs, names = read_observations_csv(args.data)
    if args.ignore_offsets:
        obs = ObservationSet(obs.features, obs.labels, weights=obs.weights)
    config = FitConfig(grad_tol=args.grad_tol)
    result = fit_logistic(obs, config)
    params = result.params
    if args.adjustment:
        adj, _ = read_coefficients(args.adjustment)
        if adj.slopes.size != params.slopes.size:
            raise ConfigError("adjustment dimension does not match the fit")
        params = ModelParams.from_array(params.as_array() + adj.as_array())
    if args.out and args.out != "-":
        write_coefficients(args.out, params, names)
    rows = _coef_rows("coefficients", params, names)
    rows.append(
        {"quantity": "grad_norm", "coefficient": "", "value": result.grad_norm, "mc_se": 0.0}
    )
    rows.append(
        {
            "quantity": "iterations",
            "coefficient": "",
            "value": float(result.iterations),
            "mc_se": 0.0,
        }
    )
    # the coefficient file goes to --out; the report always to stdout
    _emit(
        rows,
        args,
        comments=[f"seed {seed}", f"fit of {args.data}"],
        json_extra={"seed": seed},
        out="-",
    )
    return EXIT_OK


# ---------------------------------------------------------------------------
# asymptotics


def _load_point(value, spec, tol):
    if value == "star":
        return population_theta_star(spec, tol=tol).params
    params, _ = read_coefficients(value)
    return params


def cmd_asymptotics(args) -> int:
    seed = _resolve_seed(args)
    spec = _load_population(args.spec)
    theta = _load_point(args.theta, spec, args.tol)
    pilot = _load_point(args.pilot, spec, args.tol)
    rng = np.random.default_rng(seed)
    report = eval_matrices(
        spec, theta, pilot, c=args.c, mc_nodes=args.mc_nodes, rng=rng
    )
    variance = lcc_variance(report)
    slope = conditional_bias_slope(report)
    rows = [
        {"quantity": "abar", "row": 0, "col": 0, "value": report.abar, "mc_se": report.mc_se["abar"]}
    ]
    k = report.G.size
    for i in range(k):
        rows.append(
            {
                "quantity": "G",
                "row": i,
                "col": 0,
                "value": float(report.G[i]),
                "mc_se": float(report.mc_se["G"][i]),
            }
        )
    for name, mat in (
        ("H", report.H),
        ("J", report.J),
        ("C", report.C),
        ("Sigma", report.Sigma),
        ("SigmaFull", report.SigmaFull),
        ("variance", variance),
        ("bias_slope", slope),
    ):
        se = report.mc_se.get(name)
        for i in range(k):
            for j in range(k):
                rows.append(
                    {
                        "quantity": name,
                        "row": i,
                        "col": j,
                        "value": float(mat[i, j]),
                        "mc_se": float(se[i, j]) if se is not None else 0.0,
                    }
                )
    extra = {
        "seed": seed,
        "c": report.c,
        "theta": report.theta.as_array(),
        "pilot": report.pilot.as_array(),
        "c_fd_relerr": report.c_fd_relerr,
    }
    _emit(rows, args, comments=[f"seed {seed}", f"spec {args.spec}"], json_extra=extra)
    return EXIT_OK


# ---------------------------------------------------------------------------
# simulate


def cmd_simulate(args) -> int:
    raw = load_config_file(args.config)
    if "population" not in raw:
        raise ConfigError(f"{args.config}: missing key 'population'")
    if "experiment" not in raw:
        raise ConfigError(f"{args.config}: missing key 'experiment'")
    unknown = set(raw) - {"population", "experiment"}
    if unknown:
        raise ConfigError(f"{args.config}: unknown key {sorted(unknown)[0]!r}")
    spec = parse_population(raw["population"])
    config = parse_experiment(raw["experiment"], spec)
    if args.seed is not None:
        from dataclasses import replace

        config = replace(config, master_seed=args.seed)
    print(f"seed: {config.master_seed}", file=sys.stderr)
    report = run_experiment(config, threads=args.threads)
    rows = []
    for method, summary in report.methods.items():
        rows.append(
            {
                "method": method,
                "bias_sq": summary.bias_sq,
                "bias_sq_se": summary.bias_sq_se,
                "var": summary.var,
                "var_se": summary.var_se,
                "mean_subsample_size": summary.mean_subsample_size,
                "n_failures": summary.n_failures,
            }
        )
    echo = {
        k: v
        for k, v in raw["experiment"].items()
    }
    extra = {
        "seed": config.master_seed,
        "config": echo,
        "theta_star": report.theta_star.params.as_array(),
        "theta_star_mc_se": report.theta_star.mc_se,
        "runtime_seconds": report.runtime_seconds,
        "n_failures": len(report.failures),
    }
    if report.lcc_acceptance_rates is not None:
        extra["lcc_acceptance_rate_mean"] = float(report.lcc_acceptance_rates.mean())
    comments = [
        f"seed {config.master_seed}",
        f"config {args.config}",
        "config echo: "
        + ", ".join(f"{k}={v}" for k, v in sorted(echo.items())),
        f"replications {config.replications}, failures {len(report.failures)}",
    ]
    _emit(rows, args, comments=comments, json_extra=extra)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lccsub", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed_default=None):
        p.add_argument("--seed", type=int, default=seed_default)
        p.add_argument("--format", choices=("csv", "json"), default="csv")
        p.add_argument("--out", default="-", help="output path ('-' for stdout)")

    p = sub.add_parser("oracle", help="population limits for a spec file")
    p.add_argument("--spec", required=True)
    p.add_argument("--b", type=float, action="append", help="extra CC bias values")
    p.add_argument("--tol", type=float, default=1e-10)
    p.add_argument("--plot-out", help="steplogit plot-data CSV path")
    common(p)
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("sample", help="subsample a CSV with weights/offsets")
    p.add_argument("--data", required=True)
    p.add_argument("--scheme", required=True, choices=("lcc", "cc", "wcc", "uniform"))
    p.add_argument("--pilot", help="coefficient file for the lcc pilot")
    p.add_argument("--pilot-size", type=int, default=1000)
    p.add_argument("--c", type=float)
    p.add_argument("--target-size", type=int)
    p.add_argument("--retain-cases", action="store_true")
    p.add_argument("--rate", type=float)
    p.add_argument("--a0", type=float)
    p.add_argument("--a1", type=float)
    p.add_argument("--summary")
    p.add_argument("--chunk-size", type=int, default=8192)
    common(p)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("fit", help="weighted, offset-aware logistic fit of a CSV")
    p.add_argument("--data", required=True)
    p.add_argument("--adjustment", help="coefficient file added to the fit")
    p.add_argument("--ignore-offsets", action="store_true")
    p.add_argument("--grad-tol", type=float, default=1e-10)
    common(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("asymptotics", help="population matrices and variance")
    p.add_argument("--spec", required=True)
    p.add_argument("--theta", default="star")
    p.add_argument("--pilot", default="star")
    p.add_argument("--c", type=float, default=1.0)
    p.add_argument("--mc-nodes", type=int, default=4 * 10**6)
    p.add_argument("--tol", type=float, default=1e-10)
    common(p)
    p.set_defaults(func=cmd_asymptotics)

    p = sub.add_parser("simulate", help="run a replication study config")
    p.add_argument("--config", required=True)
    p.add_argument("--threads", type=int, default=1)
    common(p)
    p.set_defaults(func=cmd_simulate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, CsvFormatError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except GlmError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (AcceptanceTooLow, TooManyFailures, EmptySubsample, TooFewCases) as exc:
        print(f"budget exceeded: {exc}", file=sys.stderr)
        return EXIT_BUDGET


if __name__ == "__main__":
    sys.exit(main())
