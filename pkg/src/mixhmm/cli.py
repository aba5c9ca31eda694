"""Command-line entry point: ingestion, configuration, and report emission.

Verbs:

* ``simulate``   -- generate a synthetic dataset (plus truth sidecar) from a
  declarative model file
* ``fit``        -- run the staged pipeline over a candidate grid, write the
  fit report, decoded states, and plot-ready density curves
* ``decode``     -- re-decode a dataset with a previously written fit report
* ``profile-ci`` -- profile-likelihood interval for one parameter

Exit codes: 0 success, 2 data error, 3 estimation failure, 4 config error.
All machine-readable numbers are serialized with 17 significant digits;
infinities appear as the strings "inf"/"-inf" in JSON.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from dataclasses import asdict
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import markov
from .errors import ConfigError, DataError, EstimationError, NumericalError
from .estimation import FitConfig, FitResult, RestartProvenance, select_model
from .inference import (
    ConfidenceInterval,
    decode_local,
    decode_viterbi,
    fisher_confidence_intervals,
    profile_ci,
)
from .obsmodel import (
    BETA_EPS,
    EmissionParams,
    EventObservation,
    FAMILY_PARAM_NAMES,
    Series,
    SeriesSet,
    log_density,
    normalize_schema,
    value_in_support,
)
from .params import ModelParams, ModelSpec
from .simulate import SimConfig, SimTruth, simulate

_EXIT_DATA, _EXIT_ESTIMATION, _EXIT_CONFIG = 2, 3, 4


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


# ---------------------------------------------------------------------------
# CSV ingestion / emission
# ---------------------------------------------------------------------------


def ingest(path, schema) -> SeriesSet:
    """Parse an observation CSV into a SeriesSet, validating as it goes.

    Expected header: series_id, event_index, one column per schema variable,
    exposed. Empty cells are missing values; event indices must be consecutive
    from 1 within each series; all hard errors name the offending row.
    """
    schema = normalize_schema(schema)
    names = [n for n, _ in schema]
    expected = ["series_id", "event_index"] + names + ["exposed"]
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such data file: {path}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        if header != expected:
            unknown = [c for c in header if c not in expected]
            if unknown:
                raise DataError(f"{path}: unknown column(s) {unknown}")
            raise DataError(
                f"{path}: header {header} does not match expected {expected}"
            )
        rows_by_series: Dict[str, List] = {}
        seen = set()
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(expected):
                raise DataError(f"{path} row {lineno}: expected "
                                f"{len(expected)} cells, got {len(row)}")
            sid = row[0]
            try:
                event_index = int(row[1])
            except ValueError:
                raise DataError(
                    f"{path} row {lineno}: bad event_index {row[1]!r}"
                ) from None
            key = (sid, event_index)
            if key in seen:
                raise DataError(
                    f"{path} row {lineno}: duplicate (series_id, event_index) "
                    f"{key}"
                )
            seen.add(key)
            values = np.empty(len(names))
            for p, cell in enumerate(row[2:-1]):
                if cell == "":
                    values[p] = np.nan
                    continue
                try:
                    x = float(cell)
                except ValueError:
                    raise DataError(
                        f"{path} row {lineno}: bad value {cell!r} for "
                        f"variable {names[p]!r}"
                    ) from None
                if not value_in_support(schema[p][1], x):
                    raise DataError(
                        f"{path} row {lineno}: variable {names[p]!r} value "
                        f"{cell} out of support for family {schema[p][1]!r}"
                    )
                values[p] = x
            if row[-1] not in ("0", "1"):
                raise DataError(
                    f"{path} row {lineno}: exposed must be 0 or 1, "
                    f"got {row[-1]!r}"
                )
            rows_by_series.setdefault(sid, []).append(
                (event_index, values, row[-1] == "1", lineno)
            )
    if not rows_by_series:
        raise DataError(f"{path}: no data rows")
    series = []
    for sid, rows in rows_by_series.items():
        rows.sort(key=lambda r: r[0])
        for want, (got, _, _, lineno) in enumerate(rows, start=1):
            if got != want:
                raise DataError(
                    f"{path} row {lineno}: series {sid!r} event_index {got} "
                    f"breaks the consecutive-from-1 ordering"
                )
        series.append(
            Series(sid, [EventObservation(v, z) for _, v, z, _ in rows])
        )
    return SeriesSet(series, schema)


def write_series_csv(data: SeriesSet, path) -> None:
    """Write a SeriesSet in the exact format `ingest` reads."""
    names = [n for n, _ in data.schema]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["series_id", "event_index"] + names + ["exposed"])
        for s in data.series:
            for d, e in enumerate(s.events, start=1):
                cells = [s.id, str(d)]
                cells += ["" if math.isnan(x) else _fmt(x) for x in e.values]
                cells.append("1" if e.covariate_flag else "0")
                writer.writerow(cells)


def write_truth_csv(data: SeriesSet, truth: SimTruth, path) -> None:
    """Latent-truth sidecar: per-event true state plus the series context."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["series_id", "event_index", "true_state", "true_context"])
        for w, s in enumerate(data.series):
            for d in range(len(s)):
                writer.writerow(
                    [s.id, str(d + 1), str(int(truth.states[w][d]) + 1),
                     str(int(truth.contexts[w]) + 1)]
                )


# ---------------------------------------------------------------------------
# Declarative configuration
# ---------------------------------------------------------------------------


def _load_json(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"no such config file: {path}")
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc


def _schema_from_config(entries) -> tuple:
    try:
        return normalize_schema([(e["name"], e["family"]) for e in entries])
    except (TypeError, KeyError) as exc:
        raise ConfigError(
            'schema entries must look like {"name": ..., "family": ...}'
        ) from exc
    except DataError as exc:
        raise ConfigError(str(exc)) from exc


def _spec_from_config(entry: dict, schema) -> ModelSpec:
    try:
        return ModelSpec(
            n_states=int(entry["n_states"]),
            n_contexts=int(entry["n_contexts"]),
            schema=schema,
            covariate_mode=entry.get("covariate_mode", "none"),
        )
    except KeyError as exc:
        raise ConfigError(f"candidate entry missing key {exc}") from exc


def _fit_config_from(config: dict, seed: Optional[int],
                     workers: Optional[int]) -> FitConfig:
    knobs = dict(config.get("fit", {}))
    if seed is not None:
        knobs["rng_seed"] = seed
    elif "seed" in config:
        knobs.setdefault("rng_seed", int(config["seed"]))
    if workers is not None:
        knobs["n_workers"] = workers
    try:
        return FitConfig(**knobs)
    except TypeError as exc:
        raise ConfigError(f"bad fit configuration: {exc}") from exc


def _emissions_from_config(entries, schema) -> EmissionParams:
    by_name = {}
    for e in entries:
        by_name[e["name"]] = e["params"]
    blocks = []
    for name, family in schema:
        if name not in by_name:
            raise ConfigError(f"no emission parameters for variable {name!r}")
        given = by_name[name]
        block = {}
        for key in FAMILY_PARAM_NAMES[family]:
            if key not in given:
                raise ConfigError(
                    f"variable {name!r}: missing {family} parameter {key!r}"
                )
            block[key] = np.asarray(given[key], dtype=float)
        blocks.append(block)
    return EmissionParams(schema, blocks)


def _params_from_config(p: dict, spec: ModelSpec) -> ModelParams:
    emissions = _emissions_from_config(p.get("emissions", []), spec.schema)
    if "alpha" in p:
        alpha = np.asarray(p["alpha"], dtype=float)
        if alpha.ndim == 2:
            alpha = alpha[None, :, :]
    elif "tpm" in p:
        tpms = np.asarray(p["tpm"], dtype=float)
        if tpms.ndim == 2:
            tpms = tpms[None, :, :]
        alpha = np.stack([markov.tpm_to_logits(t) for t in tpms])
    else:
        raise ConfigError('model parameters need either "alpha" or "tpm"')
    beta = None
    if "beta" in p and p["beta"] is not None:
        beta = np.asarray(p["beta"], dtype=float)
        if beta.ndim == 2:
            beta = beta[None, :, :]
    delta = np.asarray(p["delta"], dtype=float)
    pi = np.asarray(p.get("pi", [1.0]), dtype=float)
    params = ModelParams(emissions, alpha, beta, delta, pi)
    try:
        params.validate(spec)
    except ConfigError:
        raise
    return params


# ---------------------------------------------------------------------------
# Report emission
# ---------------------------------------------------------------------------


def _json_value(x):
    if isinstance(x, float):
        if math.isnan(x):
            return None
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return x
    return x


def _spec_dict(spec: ModelSpec) -> dict:
    return {
        "n_states": spec.n_states,
        "n_contexts": spec.n_contexts,
        "covariate_mode": spec.covariate_mode,
        "schema": [{"name": n, "family": f} for n, f in spec.schema],
    }


def _estimates_dict(fit: FitResult) -> dict:
    params = fit.params
    emissions = []
    for (name, family), block in zip(fit.spec.schema, params.emissions.blocks):
        emissions.append(
            {
                "name": name,
                "family": family,
                "params": {k: list(v) for k, v in block.items()},
            }
        )
    tpms = {}
    stationary = {}
    for k in range(fit.spec.n_contexts):
        baseline = params.tpm(k, exposed=False)
        tpms[f"k{k + 1}"] = {
            "baseline": baseline.tolist(),
            "exposed": params.tpm(k, exposed=True).tolist(),
        }
        try:
            stationary[f"k{k + 1}"] = markov.stationary_distribution(
                baseline
            ).tolist()
        except NumericalError:
            stationary[f"k{k + 1}"] = None
    return {
        "emissions": emissions,
        "alpha": params.alpha.tolist(),
        "beta": None if params.beta is None else params.beta.tolist(),
        "delta": params.delta.tolist(),
        "pi": params.pi.tolist(),
        "tpms": tpms,
        "stationary_baseline": stationary,
    }


def _interval_dict(ci: ConfidenceInterval) -> dict:
    d = asdict(ci)
    for key in ("estimate", "lower", "upper"):
        d[key] = _json_value(d[key])
    return d


def write_fit_report(path, selection, config: FitConfig,
                     intervals: Sequence[ConfidenceInterval]) -> None:
    best = selection.best
    report = {
        "generated_at": datetime.now(timezone.utc).isoformat(),
        "seed": config.rng_seed,
        "aic_table": [
            {
                "spec": _spec_dict(row.spec),
                "n_params": row.n_params,
                "loglik": _json_value(row.loglik),
                "aic": _json_value(row.aic),
                "delta_aic": _json_value(row.delta_aic),
                "converged": row.converged,
                "is_best": row.is_best,
                "error": row.error,
            }
            for row in selection.rows
        ],
        "best": {
            "spec": _spec_dict(best.spec),
            "n_params": best.n_params,
            "loglik": best.loglik,
            "aic": best.aic,
            "converged": best.converged,
            "provenance": asdict(best.provenance),
            "estimates": _estimates_dict(best),
            "confidence_intervals": [_interval_dict(ci) for ci in intervals],
        },
    }
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2)
        fh.write("\n")


def load_fit_report(path) -> FitResult:
    """Rebuild a FitResult from a fit report (estimates + spec + loglik)."""
    report = _load_json(path)
    best = report["best"]
    schema = _schema_from_config(best["spec"]["schema"])
    spec = _spec_from_config(best["spec"], schema)
    params = _params_from_config(best["estimates"], spec)
    from . import params as parms  # local import to avoid a cycle at startup

    theta = parms.pack(params, spec)
    prov = best.get("provenance", {})
    return FitResult(
        spec=spec,
        params=params,
        theta=theta,
        loglik=float(best["loglik"]),
        aic=float(best["aic"]),
        n_params=int(best["n_params"]),
        converged=bool(best["converged"]),
        provenance=RestartProvenance(
            prov.get("stage", "full"),
            int(prov.get("start_index", 0)),
            prov.get("jitter_index"),
        ),
    )


def write_decoded_csv(path, data: SeriesSet, decodes, viterbi=None) -> None:
    n_states = decodes[0].posterior_state_probs.shape[1]
    n_contexts = decodes[0].context_posterior.size
    header = ["series_id", "event_index"]
    header += [f"p_state{i + 1}" for i in range(n_states)]
    header += ["map_state"]
    header += [f"p_context{k + 1}" for k in range(n_contexts)]
    if viterbi is not None:
        header += ["viterbi_state"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for w, dec in enumerate(decodes):
            for d in range(dec.posterior_state_probs.shape[0]):
                row = [dec.series_id, str(d + 1)]
                row += [_fmt(x) for x in dec.posterior_state_probs[d]]
                row += [str(int(dec.map_states[d]) + 1)]
                row += [_fmt(x) for x in dec.context_posterior]
                if viterbi is not None:
                    row += [str(int(viterbi[w][d]) + 1)]
                writer.writerow(row)


def _density_grid(family: str, block) -> np.ndarray:
    if family == "gamma":
        hi = float(np.max(block["mean"] + 4.0 * block["sd"]))
        return np.linspace(hi / 400.0, hi, 200)
    if family == "poisson":
        hi = int(np.ceil(np.max(block["rate"]) + 4 * np.sqrt(np.max(block["rate"]))))
        return np.arange(0, max(hi, 5) + 1, dtype=float)
    if family == "vonmises":
        return np.linspace(-np.pi + 1e-9, np.pi, 181)
    return np.linspace(BETA_EPS, 1.0 - BETA_EPS, 201)


def write_density_curves_csv(path, fit: FitResult) -> None:
    """Plot-ready long-format state-dependent densities for every variable."""
    params = fit.params
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variable", "family", "state", "x", "density"])
        for p, (name, family) in enumerate(fit.spec.schema):
            grid = _density_grid(family, params.emissions.blocks[p])
            for i in range(fit.spec.n_states):
                for x in grid:
                    dens = math.exp(log_density(p, i, float(x), params.emissions))
                    writer.writerow(
                        [name, family, str(i + 1), _fmt(x), _fmt(dens)]
                    )


def write_aic_table_csv(path, selection) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["n_states", "n_contexts", "covariate_mode", "n_params",
             "loglik", "aic", "delta_aic", "converged", "is_best", "error"]
        )
        for row in selection.rows:
            writer.writerow(
                [
                    str(row.spec.n_states),
                    str(row.spec.n_contexts),
                    row.spec.covariate_mode,
                    str(row.n_params),
                    "" if row.loglik is None else _fmt(row.loglik),
                    "" if row.aic is None else _fmt(row.aic),
                    "" if row.delta_aic is None else _fmt(row.delta_aic),
                    "1" if row.converged else "0",
                    "1" if row.is_best else "0",
                    row.error or "",
                ]
            )


# ---------------------------------------------------------------------------
# Verbs
# ---------------------------------------------------------------------------


def run_simulate(config_path, out_dir, seed: Optional[int] = None) -> None:
    cfg = _load_json(config_path)
    schema = _schema_from_config(cfg.get("schema", []))
    spec = _spec_from_config(cfg, schema)
    params = _params_from_config(cfg.get("params", {}), spec)
    sim = SimConfig(
        spec=spec,
        params=params,
        lengths=cfg["lengths"],
        exposure_windows=cfg.get("exposure_windows"),
        missingness=cfg.get("missingness"),
        rng_seed=int(cfg.get("seed", 0)) if seed is None else seed,
        series_ids=cfg.get("series_ids"),
    )
    data, truth = simulate(sim)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_series_csv(data, out / "data.csv")
    write_truth_csv(data, truth, out / "truth.csv")


def run_fit(data_path, config_path, out_dir, seed: Optional[int] = None,
            workers: Optional[int] = None, viterbi: bool = False) -> None:
    """Fit the configured candidate grid and write all reports."""
    cfg = _load_json(config_path)
    schema = _schema_from_config(cfg.get("schema", []))
    data = ingest(data_path, schema)
    candidates = [
        _spec_from_config(entry, schema) for entry in cfg.get("candidates", [])
    ]
    if not candidates:
        raise ConfigError("config declares no candidate models")
    fit_config = _fit_config_from(cfg, seed, workers)
    base_index = cfg.get("base_candidate")
    selection = select_model(data, candidates, fit_config, base_index=base_index)

    intervals: List[ConfidenceInterval] = []
    if cfg.get("compute_intervals", True):
        level = float(cfg.get("confidence_level", 0.95))
        intervals = fisher_confidence_intervals(data, selection.best, level)
        for i, ci in enumerate(intervals):
            if ci.flag is not None and ci.method == "fisher":
                try:
                    intervals[i] = profile_ci(
                        data, selection.best, ci.parameter, level
                    )
                except (EstimationError, ConfigError):
                    pass  # keep the flagged Fisher interval

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_fit_report(out / "fit_report.json", selection, fit_config, intervals)
    write_aic_table_csv(out / "aic_table.csv", selection)
    decodes = decode_local(data, selection.best)
    paths = decode_viterbi(data, selection.best) if viterbi else None
    write_decoded_csv(out / "decoded_states.csv", data, decodes, paths)
    write_density_curves_csv(out / "density_curves.csv", selection.best)


def run_decode(data_path, fit_path, out_dir, viterbi: bool = False) -> None:
    fit = load_fit_report(fit_path)
    data = ingest(data_path, fit.spec.schema)
    decodes = decode_local(data, fit)
    paths = decode_viterbi(data, fit) if viterbi else None
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_decoded_csv(out / "decoded_states.csv", data, decodes, paths)


def run_profile_ci(data_path, fit_path, parameter, level: float,
                   out_path=None) -> dict:
    fit = load_fit_report(fit_path)
    data = ingest(data_path, fit.spec.schema)
    ci = profile_ci(data, fit, parameter, level)
    result = _interval_dict(ci)
    payload = json.dumps(result, indent=2)
    if out_path is not None:
        Path(out_path).write_text(payload + "\n")
    else:
        print(payload)
    return result


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems are config errors (exit 4)
        raise ConfigError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="mixhmm", description=__doc__)
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("simulate", help="generate synthetic data")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("fit", help="fit the configured candidate models")
    p.add_argument("--data", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--viterbi", action="store_true")

    p = sub.add_parser("decode", help="decode states with a saved fit report")
    p.add_argument("--data", required=True)
    p.add_argument("--fit", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--viterbi", action="store_true")

    p = sub.add_parser("profile-ci", help="profile-likelihood interval")
    p.add_argument("--data", required=True)
    p.add_argument("--fit", required=True)
    p.add_argument("--param", required=True)
    p.add_argument("--level", type=float, default=0.95)
    p.add_argument("--out", default=None)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.verb == "simulate":
            run_simulate(args.config, args.out, args.seed)
        elif args.verb == "fit":
            run_fit(args.data, args.config, args.out, args.seed,
                    args.workers, args.viterbi)
        elif args.verb == "decode":
            run_decode(args.data, args.fit, args.out, args.viterbi)
        elif args.verb == "profile-ci":
            run_profile_ci(args.data, args.fit, args.param, args.level,
                           args.out)
        return 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return _EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return _EXIT_DATA
    except (EstimationError, NumericalError) as exc:
        print(f"estimation error: {exc}", file=sys.stderr)
        return _EXIT_ESTIMATION


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
