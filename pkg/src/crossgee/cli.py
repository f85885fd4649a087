"""Batch front end: CSV ingestion, fit/residuals/qic-compare/simulate.

Every run writes a machine-readable ``report.json`` (sorted keys, full
precision -> byte-identical across reruns with the same config and seed),
full-precision CSV tables, and a human ``summary.txt`` with the display
rounding used in the reference tables. Exit status: 0 success, 2 fit did
not converge (artifacts are still written), 1 hard error.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .data import LongitudinalDataset, Observation, SubjectRecord
from .design import ModelSpec, SplineConfig, build_design
from .diagnostics import diagnostics_report
from .errors import ConfigError, CrossgeeError, DataValidationError
from .estimator import fit
from .families import DEFAULT_LINKS, Family
from .simulation import MODELS, Scenario, StudySummary, run_study

REQUIRED_COLUMNS = ("subject", "sequence", "period", "time", "treatment", "response")

EXIT_OK = 0
EXIT_HARD_ERROR = 1
EXIT_NOT_CONVERGED = 2


# ---------------------------------------------------------------------------
# dataset I/O


def _parse_sequence(raw: str) -> tuple[str, ...]:
    raw = raw.strip()
    if ":" in raw:
        return tuple(tok for tok in raw.split(":") if tok)
    return tuple(raw)


def load_csv(path: str) -> LongitudinalDataset:
    """Read a long-format crossover CSV into a validated dataset.

    Required columns: subject, sequence, period, time, treatment, response.
    Any additional column is treated as a numeric covariate. Within-period
    indices are assigned by time order.
    """
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise DataValidationError(f"{path}: missing header row")
        missing = [c for c in REQUIRED_COLUMNS if c not in reader.fieldnames]
        if missing:
            raise DataValidationError(f"{path}: missing required columns: {', '.join(missing)}")
        extra = [c for c in reader.fieldnames if c not in REQUIRED_COLUMNS]
        rows = list(reader)

    by_subject: dict[str, dict] = {}
    seen_times: set[tuple[str, int, float]] = set()
    for lineno, row in enumerate(rows, start=2):
        sid = row["subject"].strip()
        seq = _parse_sequence(row["sequence"])
        try:
            period = int(row["period"])
            time = float(row["time"])
        except ValueError as exc:
            raise DataValidationError(f"{path}:{lineno}: bad period/time: {exc}") from None
        try:
            response = float(row["response"])
        except ValueError:
            raise DataValidationError(
                f"{path}:{lineno}: non-numeric response {row['response']!r}"
            ) from None
        if not 1 <= period <= len(seq):
            raise DataValidationError(
                f"{path}:{lineno}: period {period} outside the sequence {''.join(seq)!r}"
            )
        key = (sid, period, time)
        if key in seen_times:
            raise DataValidationError(
                f"{path}:{lineno}: duplicate (subject, period, time) {key!r}"
            )
        seen_times.add(key)

        entry = by_subject.setdefault(sid, {"sequence": seq, "obs": []})
        if entry["sequence"] != seq:
            raise DataValidationError(
                f"{path}:{lineno}: subject {sid!r} carries conflicting sequences"
            )
        covariates = {}
        for name in extra:
            value = row[name]
            if value is None or value == "":
                continue
            try:
                covariates[name] = float(value)
            except ValueError:
                raise DataValidationError(
                    f"{path}:{lineno}: non-numeric covariate {name}={value!r}"
                ) from None
        entry["obs"].append((period, time, row["treatment"].strip(), response, covariates))

    subjects = []
    for sid in sorted(by_subject):
        entry = by_subject[sid]
        observations = []
        by_period: dict[int, list] = {}
        for period, time, trt, resp, covs in entry["obs"]:
            by_period.setdefault(period, []).append((time, trt, resp, covs))
        for period in sorted(by_period):
            for k, (time, trt, resp, covs) in enumerate(sorted(by_period[period]), start=1):
                observations.append(
                    Observation(
                        period=period,
                        within_index=k,
                        time=time,
                        treatment=trt,
                        response=resp,
                        covariates=covs,
                    )
                )
        subjects.append(
            SubjectRecord(
                subject_id=sid, sequence=entry["sequence"], observations=tuple(observations)
            )
        )
    return LongitudinalDataset(subjects=tuple(subjects))


def save_csv(dataset: LongitudinalDataset, path: str) -> None:
    """Write a dataset back out in the `load_csv` schema (full precision)."""
    cov_names = list(dataset.covariate_names())
    multi = any(len(tok) > 1 for s in dataset.subjects for tok in s.sequence)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(REQUIRED_COLUMNS) + cov_names)
        for subj in dataset.subjects:
            seq = (":" if multi else "").join(subj.sequence)
            for o in subj.observations:
                row = [
                    subj.subject_id,
                    seq,
                    o.period,
                    repr(float(o.time)),
                    o.treatment,
                    repr(float(o.response)),
                ]
                row.extend(
                    repr(float(o.covariates[c])) if c in o.covariates else "" for c in cov_names
                )
                writer.writerow(row)


# ---------------------------------------------------------------------------
# configuration


@dataclass
class RunConfig:
    command: str
    input: str | None = None
    output_dir: str = "crossgee-out"
    seed: int = 0
    family: str = "gaussian"
    link: str | None = None
    correlation: str = "independence"
    spline_degree: int = 3
    basis_size: int | None = None
    no_splines: bool = False
    terms: tuple[str, ...] = ("intercept", "period", "treatment")
    carryover: bool = False
    carryover_reference: str | None = None
    max_iterations: int = 200
    tolerance: float = 1e-6
    qq_sims: int = 1000
    candidates: tuple[str, ...] = ()
    n_per_sequence: tuple[int, ...] = (10,)
    beta1: tuple[float, ...] = (0.5,)
    replicates: int = 100
    models: tuple[str, ...] = MODELS

    def __post_init__(self):
        if self.command not in ("fit", "residuals", "qic-compare", "simulate"):
            raise ConfigError(f"unknown command {self.command!r}")
        if self.command != "simulate":
            if not self.input:
                raise ConfigError(f"{self.command} requires an input dataset path")
            if not os.path.exists(self.input):
                raise ConfigError(f"input path {self.input!r} does not exist")
        for name in ("terms", "candidates", "models", "n_per_sequence", "beta1"):
            object.__setattr__(self, name, tuple(getattr(self, name)))

    def model_spec(self, family: str | None = None, link: str | None = None) -> ModelSpec:
        fam_kind = family or self.family
        fam = Family(fam_kind, link or self.link or DEFAULT_LINKS[fam_kind])
        spline = None if self.no_splines else SplineConfig(self.spline_degree, self.basis_size)
        return ModelSpec(
            family=fam,
            correlation=self.correlation,
            spline=spline,
            parametric_terms=self.terms,
            carryover=self.carryover,
            carryover_reference=self.carryover_reference,
            max_iterations=self.max_iterations,
            tolerance=self.tolerance,
        )


def config_from_sources(command: str, file_config: dict, overrides: dict) -> RunConfig:
    """Merge config-file values and explicit flags; flags win, then the
    CROSSGEE_SEED environment variable, then the file."""
    merged: dict = dict(file_config)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    merged["command"] = command
    if "seed" not in overrides or overrides.get("seed") is None:
        env_seed = os.environ.get("CROSSGEE_SEED")
        if env_seed is not None:
            merged["seed"] = int(env_seed)
    valid = {f.name for f in fields(RunConfig)}
    unknown = set(merged) - valid
    if unknown:
        raise ConfigError(f"unknown config fields: {sorted(unknown)}")
    return RunConfig(**merged)


# ---------------------------------------------------------------------------
# report writing


def _jsonable(obj):
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def _write_json(path: str, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(_jsonable(payload), fh, sort_keys=True, indent=2)
        fh.write("\n")


def _write_table(path: str, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def _fmt2(x: float) -> str:
    return "nan" if not np.isfinite(x) else f"{x:.2f}"


# ---------------------------------------------------------------------------
# commands


def _run_fit(config: RunConfig, emit_model_tables: bool) -> int:
    dataset = load_csv(config.input)
    spec = config.model_spec()
    bundle = build_design(dataset, spec)
    result = fit(bundle, spec)
    report = diagnostics_report(
        result, bundle, n_sim=config.qq_sims, seed=config.seed,
        include_qic=result.cov_robust is not None,
    )
    out = config.output_dir

    payload = {
        "command": config.command,
        "config": asdict(config),
        "converged": result.converged,
        "iterations": result.iterations,
        "phi": result.state.phi,
        "alpha": result.state.corr.alpha,
        "scores": dict(result.final_scores),
        "beta": {lab: float(b) for lab, b in zip(result.beta_labels, result.beta)},
        "qic": None if report.qic is None else asdict(report.qic),
        "wald": [asdict(w) for w in report.wald],
    }

    summary_lines = [
        f"command: {config.command}",
        f"converged: {result.converged} (cycles: {result.iterations})",
        f"family: {spec.family.kind}/{spec.family.link}  correlation: {spec.correlation}"
        + (f" (alpha={_fmt2(result.state.corr.alpha)})" if result.state.corr.alpha is not None else ""),
        f"dispersion: {_fmt2(result.state.phi)}",
    ]

    if emit_model_tables:
        wald_rows = [[w.label, w.estimate, w.std_err, w.wald, w.p_value] for w in report.wald]
        _write_table(
            os.path.join(out, "wald_table.csv"),
            ["label", "estimate", "std_err", "wald", "p_value"],
            wald_rows,
        )
        summary_lines += ["", f"{'':>14} Estimate Std.err    Wald  Pr(>|W|)"]
        summary_lines += [
            f"{w.label:>14} {_fmt2(w.estimate):>8} {_fmt2(w.std_err):>7} {_fmt2(w.wald):>7} {_fmt2(w.p_value):>9}"
            for w in report.wald
        ]
        if report.qic is not None:
            summary_lines.append(f"QIC: {_fmt2(report.qic.qic)}")

        if result.time_smooth is not None:
            grid, values, lo, hi = result.time_smooth_series()
            _write_table(
                os.path.join(out, "smooth_time.csv"),
                ["time", "fit", "lower", "upper"],
                [list(r) for r in zip(grid, values, lo, hi)],
            )
            payload["time_smooth"] = {"grid": grid, "fit": values, "lower": lo, "upper": hi}
        for trt in result.carry_smooths:
            grid, values, lo, hi = result.carry_smooth_series(trt)
            _write_table(
                os.path.join(out, f"smooth_carry_{trt}.csv"),
                ["time", "fit", "lower", "upper"],
                [list(r) for r in zip(grid, values, lo, hi)],
            )
            payload[f"carry_smooth:{trt}"] = {"grid": grid, "fit": values, "lower": lo, "upper": hi}

    res = report.residuals
    _write_table(
        os.path.join(out, "residuals.csv"),
        ["subject", "period", "within_index", "residual", "leverage"],
        [
            [sid, idx[0], idx[1], float(r), float(h)]
            for sid, idx, r, h in zip(res.subject_ids, res.obs_index, res.residuals, res.leverages)
        ],
    )
    qq = report.qq
    _write_table(
        os.path.join(out, "qq.csv"),
        ["theoretical", "sample", "lower", "upper"],
        [list(r) for r in zip(qq.theoretical, qq.sample, qq.lower, qq.upper)],
    )
    finite = res.finite_residuals()
    payload["residual_summary"] = {
        "n": int(finite.size),
        "mean": float(finite.mean()),
        "sd": float(finite.std(ddof=1)),
        "leverage_sum": float(res.leverages.sum()),
    }
    summary_lines.append(
        f"residuals: mean={_fmt2(payload['residual_summary']['mean'])} "
        f"sd={_fmt2(payload['residual_summary']['sd'])}"
    )

    _write_json(os.path.join(out, "report.json"), payload)
    _write_summary(out, summary_lines)
    return EXIT_OK if result.converged else EXIT_NOT_CONVERGED


def _run_qic_compare(config: RunConfig) -> int:
    if not config.candidates:
        raise ConfigError("qic-compare needs at least one family[:link] candidate")
    dataset = load_csv(config.input)
    rows = []
    any_bad = False
    for cand in config.candidates:
        fam_kind, _, link = cand.partition(":")
        spec = config.model_spec(family=fam_kind, link=link or None)
        bundle = build_design(dataset, spec)
        result = fit(bundle, spec)
        any_bad |= not result.converged
        from .diagnostics import qic as qic_fn  # local import avoids cycle at module load

        parts = qic_fn(result, bundle)
        rows.append(
            {
                "family": spec.family.kind,
                "link": spec.family.link,
                "qic": parts.qic,
                "quasi_likelihood": parts.quasi_likelihood,
                "trace_penalty": parts.trace_penalty,
                "converged": result.converged,
            }
        )
    rows.sort(key=lambda r: r["qic"])
    out = config.output_dir
    _write_table(
        os.path.join(out, "qic_compare.csv"),
        ["family", "link", "qic", "quasi_likelihood", "trace_penalty", "converged"],
        [[r["family"], r["link"], r["qic"], r["quasi_likelihood"], r["trace_penalty"], r["converged"]] for r in rows],
    )
    _write_json(
        os.path.join(out, "report.json"),
        {"command": "qic-compare", "config": asdict(config), "ranking": rows},
    )
    lines = ["model ranking by QIC:"] + [
        f"  {r['family']}/{r['link']}: QIC={_fmt2(r['qic'])}" for r in rows
    ]
    _write_summary(out, lines)
    return EXIT_NOT_CONVERGED if any_bad else EXIT_OK


def _run_simulate(config: RunConfig) -> int:
    scenarios = [
        Scenario(n_per_sequence=n, beta1=b1, replicates=config.replicates, seed=config.seed)
        for n in config.n_per_sequence
        for b1 in config.beta1
    ]
    summary = run_study(scenarios, models=config.models)
    out = config.output_dir
    _write_study_tables(out, summary, config)
    _write_json(
        os.path.join(out, "report.json"),
        {
            "command": "simulate",
            "config": asdict(config),
            "cells": [asdict(c) for c in summary.cells],
        },
    )
    return EXIT_OK


def _write_study_tables(out: str, summary: StudySummary, config: RunConfig) -> None:
    models = list(config.models)
    cov_rows, rmse_rows = [], []
    for c in summary.cells:
        rmse_rows.append(
            [c.model, c.component, c.beta1, c.n_per_sequence, c.rmse, c.rmse_se, c.n_used, c.n_failed]
        )
    for b1 in config.beta1:
        for n in config.n_per_sequence:
            for comp in ("treatment:B", "period:2", "period:3"):
                row = [comp, b1, n]
                for m in models:
                    try:
                        row.append(summary.cell(m, n, b1, comp).coverage)
                    except KeyError:
                        row.append(float("nan"))
                cov_rows.append(row)
    _write_table(
        os.path.join(out, "coverage.csv"),
        ["component", "beta1", "n_per_sequence"] + list(models),
        cov_rows,
    )
    _write_table(
        os.path.join(out, "rmse_series.csv"),
        ["model", "component", "beta1", "n_per_sequence", "rmse", "rmse_se", "n_used", "n_failed"],
        rmse_rows,
    )
    lines = ["coverage of 95% intervals (rows: component, beta1, n):"]
    for row in cov_rows:
        lines.append(
            f"  {row[0]:>12} b1={row[1]:<4} n={row[2]:<3} "
            + "  ".join(f"{m}={_fmt2(v)}" for m, v in zip(models, row[3:]))
        )
    _write_summary(out, lines)


def _write_summary(out: str, lines: list[str]) -> None:
    with open(os.path.join(out, "summary.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")


def run(config: RunConfig) -> int:
    """Execute one command; returns the process exit status."""
    os.makedirs(config.output_dir, exist_ok=True)
    if config.command in ("fit", "residuals"):
        return _run_fit(config, emit_model_tables=config.command == "fit")
    if config.command == "qic-compare":
        return _run_qic_compare(config)
    return _run_simulate(config)


# ---------------------------------------------------------------------------
# argument parsing


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON file with RunConfig fields")
    parser.add_argument("--output-dir", dest="output_dir")
    parser.add_argument("--seed", type=int)


def _add_model_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--family", choices=("gaussian", "poisson", "gamma", "binomial"))
    parser.add_argument("--link", choices=("identity", "log", "inverse", "logit"))
    parser.add_argument("--correlation", choices=("independence", "exchangeable", "ar1"))
    parser.add_argument("--spline-degree", dest="spline_degree", type=int)
    parser.add_argument("--basis-size", dest="basis_size", type=int)
    parser.add_argument("--no-splines", dest="no_splines", action="store_const", const=True)
    parser.add_argument("--terms", type=lambda s: tuple(s.split(",")))
    parser.add_argument("--carryover", action="store_const", const=True)
    parser.add_argument("--carryover-reference", dest="carryover_reference")
    parser.add_argument("--max-iterations", dest="max_iterations", type=int)
    parser.add_argument("--tolerance", type=float)
    parser.add_argument("--qq-sims", dest="qq_sims", type=int)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="crossgee",
        description="Semi-parametric GEE for crossover designs with repeated measures",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    for name in ("fit", "residuals"):
        p = sub.add_parser(name)
        p.add_argument("input", nargs="?")
        _add_common(p)
        _add_model_flags(p)

    p = sub.add_parser("qic-compare")
    p.add_argument("input", nargs="?")
    _add_common(p)
    _add_model_flags(p)
    p.add_argument(
        "--candidates",
        type=lambda s: tuple(s.split(",")),
        help="comma list of family[:link] specs to rank",
    )

    p = sub.add_parser("simulate")
    _add_common(p)
    p.add_argument("--n-per-sequence", dest="n_per_sequence", type=lambda s: tuple(int(v) for v in s.split(",")))
    p.add_argument("--beta1", type=lambda s: tuple(float(v) for v in s.split(",")))
    p.add_argument("--replicates", type=int)
    p.add_argument("--models", type=lambda s: tuple(s.split(",")))

    ns = parser.parse_args(argv)
    overrides = {k: v for k, v in vars(ns).items() if k not in ("command", "config")}

    try:
        file_config = {}
        if ns.config:
            with open(ns.config) as fh:
                file_config = json.load(fh)
        config = config_from_sources(ns.command, file_config, overrides)
        return run(config)
    except CrossgeeError as exc:
        print(f"crossgee: error: {exc}", file=sys.stderr)
        return EXIT_HARD_ERROR


if __name__ == "__main__":
    sys.exit(main())
