"""Command-line front end: ``acvmc <study> --config run.json``.

Each subcommand runs one study and writes a CSV table (header row, LF line
endings, floats with 17 significant digits) to ``--out`` or stdout. A
one-line summary per estimator goes to stdout when ``--out`` is given and to
stderr otherwise. Failures print a JSON object with an ``error`` category to
stderr and exit with 2 (configuration), 3 (infeasible problem), 4 (a
``--verify`` check failed) or 1 (anything else).
"""

from __future__ import annotations

import csv
import io
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import click
import numpy as np
from pydantic import ValidationError

from .allocate import AllocationProblem, mc_variance, optimize
from .config import (
    STUDIES,
    ExternalProblem,
    OptimizeAllocation,
    RunConfig,
    TunableProblem,
    load_config,
)
from .config import dump_config as render_config
from .ensemble import empirical_moments, tunable_moments
from .errors import AcvError, InfeasibleBudgetError, LayoutError
from .pilot import pilot_study
from .studies import CurveSpec, empirical_check, gap_scan, reduction_curves
from .theory import Allocation, Scheme, kl_search, solve

EXIT_RUNTIME, EXIT_SCHEMA, EXIT_INFEASIBLE, EXIT_VERIFY = 1, 2, 3, 4


class CliFailure(Exception):
    def __init__(self, category: str, message: str, code: int):
        super().__init__(message)
        self.category = category
        self.code = code


@dataclass
class StudyOutput:
    header: list[str]
    rows: list[list] = field(default_factory=list)
    summaries: list[str] = field(default_factory=list)
    verified: bool = True


def fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return format(float(value), ".17g")
    if isinstance(value, (tuple, list)):
        return ";".join(fmt(v) for v in value)
    return str(value)


def render_csv(out: StudyOutput) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(out.header)
    for row in out.rows:
        writer.writerow([fmt(v) for v in row])
    return buf.getvalue()


def _kl_cols(kl):
    return (kl[0], kl[1]) if kl else (None, None)


def _fixed_alloc(cfg: RunConfig, scheme: Scheme, moments) -> Allocation:
    spec = cfg.allocation
    if scheme is Scheme.MC:
        return Allocation(spec.n, ())
    alloc = Allocation(spec.n, tuple(spec.ratios), spec.kl if scheme is Scheme.ACV_KL else None)
    if scheme is Scheme.ACV_KL and alloc.kl is None:
        k, l, _ = kl_search(moments, alloc)
        alloc = alloc.with_kl(k, l)
    return alloc


def _optimized(cfg: RunConfig, scheme: Scheme, moments, costs, seed: int):
    spec = cfg.allocation
    return optimize(
        AllocationProblem(
            moments,
            costs,
            spec.budget,
            scheme,
            monotone_ratios=spec.monotone_ratios,
            n_starts=spec.n_starts,
            seed=seed,
        )
    )


# --- studies ----------------------------------------------------------------


def study_curves(cfg: RunConfig) -> StudyOutput:
    moments = cfg.moments()
    schemes = [s for s in cfg.estimators if s is not Scheme.MC]
    rows = reduction_curves(CurveSpec(tuple(cfg.x_grid), tuple(schemes), moments))
    out = StudyOutput(["scheme", "x", "gamma", "K", "L"])
    for row in rows:
        out.rows.append([row.scheme, row.x, row.gamma, *_kl_cols(row.kl)])
    last = cfg.x_grid[-1]
    for s in schemes:
        g = next(r.gamma for r in rows if r.scheme == s.value and r.x == last)
        out.summaries.append(f"{s.value}: gamma={g:.6g} at x={last}")
    return out


def study_allocate(cfg: RunConfig) -> StudyOutput:
    costs = cfg.costs()
    out = StudyOutput(
        ["theta1", "scheme", "N", "counts", "K", "L", "cost", "variance", "mc_variance", "gamma"]
    )
    p = cfg.problem
    grid = (p.theta1_grid or [p.theta1]) if isinstance(p, TunableProblem) else [None]
    for theta1 in grid:
        moments = cfg.moments(theta1)
        for scheme in cfg.estimators:
            if isinstance(cfg.allocation, OptimizeAllocation):
                sol = _optimized(cfg, scheme, moments, costs, cfg.seed)
                alloc, var, cost = sol.alloc, sol.predicted_variance, sol.achieved_cost
                mc = mc_variance(moments, cfg.allocation.budget, costs[0])
            else:
                alloc = _fixed_alloc(cfg, scheme, moments)
                var = solve(scheme, moments, alloc).variance
                n, counts = alloc.counts()
                cost = costs[0] * n + float(np.dot(costs[1 : 1 + len(counts)], counts))
                mc = mc_variance(moments, cost, costs[0])
            n, counts = alloc.counts()
            out.rows.append(
                [theta1, scheme.value, n, list(counts), *_kl_cols(alloc.kl), cost, var, mc, var / mc]
            )
            tag = "" if theta1 is None else f" theta1={theta1:.6g}"
            out.summaries.append(
                f"{scheme.value}{tag}: gamma={var / mc:.6g} cost={cost:.6g} variance={var:.6g}"
            )
    return out


def study_empirical(cfg: RunConfig) -> StudyOutput:
    ensemble = cfg.ensemble()
    moments = ensemble.moments
    costs = cfg.costs()
    out = StudyOutput(
        [
            "scheme", "N", "counts", "K", "L", "mean", "mean_se", "exact_mean", "variance",
            "variance_se", "predicted_variance", "oracle_pass_fraction", "passed",
        ]
    )
    for idx, scheme in enumerate(cfg.estimators):
        if isinstance(cfg.allocation, OptimizeAllocation):
            alloc = _optimized(cfg, scheme, moments, costs, cfg.seed).alloc
        else:
            alloc = _fixed_alloc(cfg, scheme, moments)
        weights = solve(scheme, moments, alloc).alpha
        chk = empirical_check(scheme, alloc, ensemble, weights, cfg.n_rep, cfg.seed, cfg.threads, idx)
        n, counts = alloc.counts() if scheme is not Scheme.MC else (int(alloc.n), ())
        ok = chk.passed()
        out.verified &= ok
        v = chk.variance
        out.rows.append(
            [
                scheme.value, n, list(counts), *_kl_cols(alloc.kl), v.mean, v.mean_se,
                chk.exact_mean, v.variance, v.variance_se, chk.predicted_variance,
                chk.oracle_pass_fraction(), ok,
            ]
        )
        gamma = chk.predicted_variance * n / moments.var_q
        cost = costs[0] * n + float(np.dot(costs[1 : 1 + len(counts)], counts))
        out.summaries.append(
            f"{scheme.value}: gamma={gamma:.6g} cost={cost:.6g} variance={v.variance:.6g} "
            f"predicted={chk.predicted_variance:.6g} {'PASS' if ok else 'FAIL'}"
        )
    return out


def study_pilot(cfg: RunConfig) -> StudyOutput:
    if not isinstance(cfg.allocation, OptimizeAllocation):
        raise CliFailure("schema", "the pilot study needs allocation.mode = optimize", EXIT_SCHEMA)
    ensemble = cfg.ensemble()
    rows = pilot_study(
        ensemble,
        cfg.estimators,
        cfg.n_pilot,
        cfg.allocation.budget,
        cfg.n_rep,
        cfg.seed,
        cfg.threads,
        cfg.allocation.n_starts,
    )
    out = StudyOutput(
        ["scheme", "n_rep", "mean", "mean_se", "bias", "variance", "known_variance", "bias_ok"]
    )
    by_scheme = {}
    for r in rows:
        by_scheme[r.scheme] = r
        out.verified &= r.bias_ok
        out.rows.append(
            [r.scheme.value, cfg.n_rep, r.mean, r.mean_se, r.bias, r.variance, r.known_variance, r.bias_ok]
        )
        out.summaries.append(
            f"{r.scheme.value}: variance={r.variance:.6g} known={r.known_variance:.6g} "
            f"bias={r.bias:.3g} (se {r.mean_se:.3g}) cost={cfg.allocation.budget:.6g}"
        )
    if Scheme.WRDIFF in by_scheme and Scheme.RDIFF in by_scheme:
        out.verified &= by_scheme[Scheme.WRDIFF].variance <= by_scheme[Scheme.RDIFF].variance
    return out


def study_gap(cfg: RunConfig) -> StudyOutput:
    p = cfg.problem
    if not isinstance(p, TunableProblem):
        raise CliFailure("schema", "the gap study needs the tunable problem", EXIT_SCHEMA)
    grid = np.linspace(p.theta2, p.theta, cfg.gap_points + 2)[1:-1]
    scan = gap_scan(grid, lambda t: tunable_moments(p.theta, t, p.theta2))
    out = StudyOutput(["theta1", "gamma_ocv", "gamma_ocv1", "ratio"])
    for r in scan.rows:
        out.rows.append([r.theta1, r.gamma_ocv, r.gamma_ocv1, r.ratio])
    out.summaries.append(f"OCV-1/OCV: max ratio {scan.max_ratio:.6g} at theta1={scan.argmax_theta:.6g}")
    return out


def study_moments(cfg: RunConfig) -> StudyOutput:
    analytic = cfg.moments().corr_matrix()
    empirical = None
    if not isinstance(cfg.problem, ExternalProblem):
        empirical = empirical_moments(cfg.ensemble(), cfg.n_samples, cfg.seed).corr_matrix()
    out = StudyOutput(["row", "col", "analytic_corr", "empirical_corr", "abs_diff"])
    m = analytic.shape[0]
    for i in range(m):
        for j in range(m):
            e = None if empirical is None else empirical[i, j]
            d = None if e is None else abs(e - analytic[i, j])
            out.rows.append([i, j, analytic[i, j], e, d])
    if empirical is not None:
        out.summaries.append(f"max |empirical - analytic| correlation: {np.max(np.abs(empirical - analytic)):.3g}")
    return out


STUDY_FUNCS: dict[str, Callable[[RunConfig], StudyOutput]] = {
    "curves": study_curves,
    "allocate": study_allocate,
    "empirical": study_empirical,
    "pilot": study_pilot,
    "gap": study_gap,
    "moments": study_moments,
}


# --- plumbing ---------------------------------------------------------------


def resolve_config(study: str, config: str | None, seed, threads, out) -> RunConfig:
    try:
        cfg = load_config(config) if config else RunConfig()
        data = cfg.model_dump()
        if cfg.study is not None and cfg.study != study:
            raise CliFailure(
                "schema", f"config is for study {cfg.study!r}, not {study!r}", EXIT_SCHEMA
            )
        data["study"] = study
        if seed is not None:
            data["seed"] = seed
        if threads is not None:
            data["threads"] = threads
        if out is not None:
            data["output"] = out
        return RunConfig.model_validate(data)
    except FileNotFoundError as exc:
        raise CliFailure("schema", f"config file not found: {exc.filename}", EXIT_SCHEMA) from exc
    except ValidationError as exc:
        msg = "; ".join(f"{'.'.join(map(str, e['loc']))}: {e['msg']}" for e in exc.errors())
        raise CliFailure("schema", msg, EXIT_SCHEMA) from exc
    except (ValueError, AcvError) as exc:
        raise CliFailure("schema", str(exc), EXIT_SCHEMA) from exc


def execute(study: str, cfg: RunConfig, verify: bool) -> StudyOutput:
    try:
        result = STUDY_FUNCS[study](cfg)
    except CliFailure:
        raise
    except (InfeasibleBudgetError, LayoutError) as exc:
        raise CliFailure("infeasible", str(exc), EXIT_INFEASIBLE) from exc
    except AcvError as exc:
        raise CliFailure(type(exc).__name__, str(exc), EXIT_RUNTIME) from exc
    except ValueError as exc:
        raise CliFailure("schema", str(exc), EXIT_SCHEMA) from exc
    return result


def _emit(result: StudyOutput, cfg: RunConfig):
    text = render_csv(result)
    if cfg.output:
        with open(cfg.output, "w", newline="") as fh:
            fh.write(text)
        summary_stream = sys.stdout
    else:
        sys.stdout.write(text)
        summary_stream = sys.stderr
    for line in result.summaries:
        print(line, file=summary_stream)


def _fail(exc: CliFailure):
    click.echo(json.dumps({"error": exc.category, "message": str(exc)}), err=True)
    sys.exit(exc.code)


def common_options(func):
    opts = [
        click.option("--config", "config", type=click.Path(dir_okay=False), help="JSON run configuration."),
        click.option("--seed", type=click.IntRange(0, 2**64 - 1), help="Base RNG seed (overrides config)."),
        click.option("--threads", type=click.IntRange(min=1), help="Worker cap (output does not depend on it)."),
        click.option("--out", type=click.Path(dir_okay=False), help="CSV output path (default: stdout)."),
        click.option("--verify", is_flag=True, help="Exit 4 if a statistical check fails."),
        click.option("--dump-config", is_flag=True, help="Print the resolved configuration and exit."),
    ]
    for opt in reversed(opts):
        func = opt(func)
    return func


def _make_command(study: str, help_text: str):
    @common_options
    def command(config, seed, threads, out, verify, dump_config):
        dump = dump_config
        try:
            cfg = resolve_config(study, config, seed, threads, None if dump else out)
            if dump:
                text = render_config(cfg)
                if out:
                    Path(out).write_text(text)
                else:
                    sys.stdout.write(text)
                return
            result = execute(study, cfg, verify)
            _emit(result, cfg)
            if verify and not result.verified:
                raise CliFailure("verify", f"{study}: statistical checks failed", EXIT_VERIFY)
        except CliFailure as exc:
            _fail(exc)

    command.__doc__ = help_text
    return click.command(name=study, help=help_text)(command)


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def main(verbose: bool):
    """Approximate control-variate Monte Carlo estimators and studies."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING)


_HELP = dict(
    [
    ("curves", "Variance-reduction ratio of each estimator versus r_i = 2^(i+x), with OCV-k baselines."),
    ("allocate", "Optimal (or fixed) sample allocation and predicted variance per estimator."),
    ("empirical", "Replicate estimators and check covariances, mean and variance against theory."),
    ("pilot", "Two-step estimation with pilot-estimated covariances, repeated n_rep times."),
    ("gap", "OCV-1 over OCV variance ratio across theta1 for the tunable problem."),
    ("moments", "Analytic versus sampled correlation matrix of the model ensemble."),
    ]
)
for _name in STUDIES:
    main.add_command(_make_command(_name, _HELP[_name]))


if __name__ == "__main__":  # pragma: no cover
    main()
