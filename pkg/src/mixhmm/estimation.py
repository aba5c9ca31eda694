"""Staged maximum-likelihood estimation, AIC, and model selection.

The fit follows a three-part schedule:

I.   a single optimization of the one-context model seeded from moment-matched
     quantile groups, whose emission estimates seed everything later;
II.  many short optimizations of the Markov parameters only (emission
     parameters frozen, so the per-event density matrix is computed once),
     from random starting values, keeping the best few as survivors;
III. full optimizations (all parameters free) from every survivor, each
     followed by a handful of jittered re-optimizations.

Every stage is a deterministic function of (data, spec, config including the
seed); restarts draw their starting values from per-restart seed streams so a
parallel run ranks identically to a sequential one.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import optimize, special

from . import markov, params as parms
from .errors import ConfigError, EstimationError
from .likelihood import (
    PackedData,
    _forward,
    _mixture,
    emission_loglik_from_raw,
    emission_loglik_matrix,
)
from .obsmodel import FAMILY_PARAM_NAMES, EmissionParams, SeriesSet
from .params import ModelParams, ModelSpec, ParameterLayout

_STAGE2_STREAM = 2
_JITTER_STREAM = 3
_BAD_OBJECTIVE = 1e10


@dataclass
class FitConfig:
    """Optimization budget and tolerances for the staged fit."""

    n_random_starts: int = 15000
    n_survivors: int = 100
    n_jitters_per_survivor: int = 5
    jitter_scale: float = 0.1
    gradient_tolerance: float = 1e-6
    step_tolerance: float = 1e-8
    function_tolerance: float = 1e-10
    max_iterations: int = 500
    rng_seed: int = 0
    n_workers: int = 1
    state_order_variable: Optional[str] = None

    def __post_init__(self):
        if self.n_random_starts < 1 or self.n_survivors < 1:
            raise ConfigError("restart and survivor counts must be >= 1")
        if self.n_survivors > self.n_random_starts:
            raise ConfigError("n_survivors cannot exceed n_random_starts")
        if self.n_jitters_per_survivor < 0:
            raise ConfigError("n_jitters_per_survivor must be >= 0")
        if self.jitter_scale <= 0:
            raise ConfigError("jitter_scale must be positive")
        if self.rng_seed < 0:
            raise ConfigError("rng_seed must be a nonnegative integer")
        if self.n_workers < 1:
            raise ConfigError("n_workers must be >= 1")


@dataclass
class RestartProvenance:
    """Where the winning estimate came from."""

    stage: str  # "stage1", "full", or "jitter"
    start_index: int  # stage-II start index of the survivor
    jitter_index: Optional[int]  # None for the unjittered run


@dataclass
class Candidate:
    """One stage-II survivor: a full working vector and its log-likelihood."""

    theta: np.ndarray
    loglik: float
    start_index: int


@dataclass
class FitResult:
    """A maximized model: estimates, fit quality, and provenance."""

    spec: ModelSpec
    params: ModelParams
    theta: np.ndarray
    loglik: float
    aic: float
    n_params: int
    converged: bool
    provenance: RestartProvenance
    survivor_logliks: np.ndarray = field(default_factory=lambda: np.empty(0))


def compute_aic(loglik: float, n_params: int) -> float:
    """Akaike information criterion, -2 loglik + 2 n_params."""
    if n_params < 1:
        raise ConfigError("n_params must be >= 1")
    return -2.0 * loglik + 2.0 * n_params


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *key]))


# ---------------------------------------------------------------------------
# Fast objective plumbing (flat working vectors, no dataclass churn)
# ---------------------------------------------------------------------------


def _emission_logq(theta_em: np.ndarray, packed: PackedData,
                   spec: ModelSpec) -> np.ndarray:
    return emission_loglik_from_raw(packed, np.exp(theta_em), spec.n_states)


def _markov_arrays(theta_mk: np.ndarray, spec: ModelSpec):
    """alpha (K,N,N), beta (B,N,N) or None, delta (K,N), logpi (K,)."""
    n, K = spec.n_states, spec.n_contexts
    rows, cols = np.nonzero(~np.eye(n, dtype=bool))
    n_off = rows.size
    pos = 0
    alpha = np.zeros((K, n, n))
    alpha[:, rows, cols] = theta_mk[pos : pos + K * n_off].reshape(K, n_off)
    pos += K * n_off
    beta = None
    nb = spec.n_beta_blocks
    if nb:
        beta = np.zeros((nb, n, n))
        beta[:, rows, cols] = theta_mk[pos : pos + nb * n_off].reshape(nb, n_off)
        pos += nb * n_off
    dl = theta_mk[pos : pos + K * (n - 1)].reshape(K, n - 1)
    pos += K * (n - 1)
    full = np.concatenate([np.zeros((K, 1)), dl], axis=1)
    full -= full.max(axis=1, keepdims=True)
    e = np.exp(full)
    delta = e / e.sum(axis=1, keepdims=True)
    if K > 1:
        pl = np.concatenate([[0.0], theta_mk[pos:]])
        logpi = pl - special.logsumexp(pl)
    else:
        logpi = np.zeros(1)
    return alpha, beta, delta, logpi


def _tpms(alpha: np.ndarray, beta: Optional[np.ndarray]) -> np.ndarray:
    """(K, 2, N, N) stable row-softmax transition matrices for z in {0, 1}."""
    K = alpha.shape[0]
    if beta is None:
        exposed_logits = alpha
    elif beta.shape[0] == 1:
        exposed_logits = alpha + beta[0][None, :, :]
    else:
        exposed_logits = alpha + beta
    logits = np.stack([alpha, np.broadcast_to(exposed_logits, alpha.shape)], axis=1)
    shifted = logits - logits.max(axis=3, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=3, keepdims=True)


def _mixture_total(per: np.ndarray, logpi: np.ndarray) -> float:
    return float(_mixture(per, logpi))


def _neg_loglik_full(theta: np.ndarray, packed: PackedData, spec: ModelSpec,
                     layout: ParameterLayout) -> float:
    logq = _emission_logq(theta[layout.emission], packed, spec)
    alpha, beta, delta, logpi = _markov_arrays(theta[layout.markov_slice()], spec)
    tpms = _tpms(alpha, beta)
    out = np.empty((packed.n_series, spec.n_contexts))
    _forward(logq, packed.offsets, packed.exposed, tpms, delta, out)
    total = _mixture_total(out, logpi)
    return -total if math.isfinite(total) else _BAD_OBJECTIVE


def _neg_loglik_markov(theta_mk: np.ndarray, logq: np.ndarray,
                       packed: PackedData, spec: ModelSpec) -> float:
    alpha, beta, delta, logpi = _markov_arrays(theta_mk, spec)
    tpms = _tpms(alpha, beta)
    out = np.empty((packed.n_series, spec.n_contexts))
    _forward(logq, packed.offsets, packed.exposed, tpms, delta, out)
    total = _mixture_total(out, logpi)
    return -total if math.isfinite(total) else _BAD_OBJECTIVE


def _minimize(fun, x0, bounds, config: FitConfig, args=()):
    """L-BFGS-B with numerically estimated gradients; Nelder-Mead fallback."""
    x0 = np.asarray(x0, dtype=float)
    if x0.size == 0:
        return x0, float(fun(x0, *args)), True
    try:
        res = optimize.minimize(
            fun, x0, args=args, method="L-BFGS-B", bounds=bounds,
            options=dict(
                maxiter=config.max_iterations,
                ftol=config.function_tolerance,
                gtol=config.gradient_tolerance,
            ),
        )
    except (ValueError, FloatingPointError) as exc:
        res = optimize.OptimizeResult(
            x=x0, fun=float(fun(x0, *args)), success=False, message=str(exc)
        )
    best_x, best_f, converged = res.x, float(res.fun), bool(res.success)
    if not converged or best_f >= _BAD_OBJECTIVE:
        start = best_x if best_f < _BAD_OBJECTIVE else x0
        nm = optimize.minimize(
            fun, start, args=args, method="Nelder-Mead", bounds=bounds,
            options=dict(
                maxiter=max(2000, 200 * x0.size),
                xatol=config.step_tolerance,
                fatol=config.function_tolerance,
            ),
        )
        if float(nm.fun) < best_f:
            best_x, best_f, converged = nm.x, float(nm.fun), bool(nm.success)
    return np.asarray(best_x, dtype=float), best_f, converged


# ---------------------------------------------------------------------------
# Stage I: emission parameters from the one-context model
# ---------------------------------------------------------------------------


def _vonmises_kappa_from_resultant(r: float) -> float:
    # Fisher's standard approximation to A^{-1}(r); a starting value only.
    if r < 0.53:
        kappa = 2 * r + r**3 + 5 * r**5 / 6
    elif r < 0.85:
        kappa = -0.4 + 1.39 * r + 0.43 / (1 - r)
    else:
        kappa = 1.0 / max(r**3 - 4 * r**2 + 3 * r, 1e-3)
    return float(np.clip(kappa, 1e-3, 500.0))


def _moment_block(family: str, v: np.ndarray) -> Dict[str, float]:
    if family == "gamma":
        m = float(np.mean(v))
        s = float(np.std(v, ddof=1)) if v.size > 1 else 0.0
        if not np.isfinite(s) or s <= 0:
            s = max(0.1 * m, 1e-3)
        return {"mean": m, "sd": s}
    if family == "poisson":
        return {"rate": max(float(np.mean(v)), 1e-2)}
    if family == "vonmises":
        r = float(np.hypot(np.mean(np.cos(v)), np.mean(np.sin(v))))
        return {"kappa": _vonmises_kappa_from_resultant(min(r, 1 - 1e-9))}
    if family == "beta":
        v = np.clip(v, 1e-6, 1 - 1e-6)
        m = float(np.mean(v))
        var = float(np.var(v, ddof=1)) if v.size > 1 else 0.0
        common = m * (1 - m) / var - 1.0 if var > 0 else 0.0
        if common <= 0:
            a = b = 1.0
        else:
            a, b = m * common, (1 - m) * common
        return {"a": float(np.clip(a, 0.02, 500)), "b": float(np.clip(b, 0.02, 500))}
    raise ConfigError(f"unknown family {family!r}")


_FAMILY_DEFAULTS = {
    "gamma": {"mean": 1.0, "sd": 1.0},
    "poisson": {"rate": 1.0},
    "vonmises": {"kappa": 1.0},
    "beta": {"a": 1.0, "b": 1.0},
}


def initial_emissions(data: SeriesSet, n_states: int,
                      order_variable: Optional[str] = None) -> EmissionParams:
    """Moment-matched starting values from quantile groups of the data.

    Events are sorted by the ordering variable (first gamma-family variable
    by default) and split into state-sorted quantile groups; each group is
    moment-matched per variable. Deterministic and cheap.
    """
    values = np.vstack([s.values for s in data.series])
    n_events = values.shape[0]
    names = [n for n, _ in data.schema]
    if order_variable is not None:
        order_idx = data.variable_index(order_variable)
    else:
        gammas = [p for p, (_, f) in enumerate(data.schema) if f == "gamma"]
        order_idx = gammas[0] if gammas else 0
    key = values[:, order_idx]
    group = np.empty(n_events, dtype=int)
    present = ~np.isnan(key)
    order = np.argsort(key[present], kind="stable")
    bins = np.array_split(np.nonzero(present)[0][order], n_states)
    for g, members in enumerate(bins):
        group[members] = g
    # events missing the ordering variable: spread across groups evenly
    missing_idx = np.nonzero(~present)[0]
    group[missing_idx] = np.arange(missing_idx.size) % n_states

    blocks = []
    for p, (_, family) in enumerate(data.schema):
        col = values[:, p]
        pooled = col[~np.isnan(col)]
        per_state = {k: np.empty(n_states) for k in FAMILY_PARAM_NAMES[family]}
        for g in range(n_states):
            v = col[(group == g) & ~np.isnan(col)]
            if v.size == 0:
                v = pooled
            if v.size == 0:
                est = dict(_FAMILY_DEFAULTS[family])
            else:
                est = _moment_block(family, v)
            for k, val in est.items():
                per_state[k][g] = val
        blocks.append(per_state)
    return EmissionParams(data.schema, blocks)


def _stage1_start(data: SeriesSet, spec: ModelSpec,
                  config: FitConfig) -> np.ndarray:
    emissions = initial_emissions(data, spec.n_states, config.state_order_variable)
    N, K = spec.n_states, spec.n_contexts
    alpha = np.full((K, N, N), -2.0)
    for k in range(K):
        np.fill_diagonal(alpha[k], 0.0)
    beta = np.zeros((spec.n_beta_blocks, N, N)) if spec.n_beta_blocks else None
    delta = np.full((K, N), 1.0 / N)
    pi = np.full(K, 1.0 / K)
    return parms.pack(ModelParams(emissions, alpha, beta, delta, pi), spec)


def fit_stage1_emissions(data: SeriesSet, n_states: int,
                         config: FitConfig) -> FitResult:
    """Stage I: maximize the one-context (K=1) model from moment-based starts.

    The emission block of the result seeds stage II for every candidate spec
    with the same number of states.
    """
    spec = ModelSpec(n_states, 1, data.schema, "none")
    packed = PackedData.from_series_set(data)
    layout = ParameterLayout.for_spec(spec)
    x0 = _stage1_start(data, spec, config)
    x, f, converged = _minimize(
        _neg_loglik_full, x0, parms.working_bounds(spec), config,
        args=(packed, spec, layout),
    )
    fitted = parms.canonicalize(
        parms.unpack(x, spec), spec, config.state_order_variable
    )
    theta = parms.pack(fitted, spec)
    loglik = -_neg_loglik_full(theta, packed, spec, layout)
    return FitResult(
        spec=spec,
        params=fitted,
        theta=theta,
        loglik=loglik,
        aic=compute_aic(loglik, markov.count_free_parameters(spec)),
        n_params=markov.count_free_parameters(spec),
        converged=converged,
        provenance=RestartProvenance("stage1", 0, None),
    )


# ---------------------------------------------------------------------------
# Stage II: Markov parameters with frozen emissions
# ---------------------------------------------------------------------------


def _random_markov_start(spec: ModelSpec, rng: np.random.Generator) -> np.ndarray:
    """Random stage-II start: alpha ~ U(-4, 1), beta = 0, logits ~ U(-1, 1)."""
    N, K = spec.n_states, spec.n_contexts
    n_off = N * (N - 1)
    pieces = [
        rng.uniform(-4.0, 1.0, size=K * n_off),
        np.zeros(spec.n_beta_blocks * n_off),
        rng.uniform(-1.0, 1.0, size=K * (N - 1)),
        rng.uniform(-1.0, 1.0, size=K - 1),
    ]
    return np.concatenate(pieces)


def _markov_bounds(spec: ModelSpec):
    layout = ParameterLayout.for_spec(spec)
    full = parms.working_bounds(spec)
    return full[layout.emission.stop :]


def _stage2_chunk(payload) -> List[Tuple[int, float, np.ndarray, bool]]:
    packed, spec, logq, config, start, stop = payload
    bounds = _markov_bounds(spec)
    out = []
    for r in range(start, stop):
        rng = _rng(config.rng_seed, _STAGE2_STREAM, r)
        x0 = _random_markov_start(spec, rng)
        try:
            x, f, _ = _minimize(
                _neg_loglik_markov, x0, bounds, config, args=(logq, packed, spec)
            )
            ok = f < _BAD_OBJECTIVE and math.isfinite(f)
        except Exception:
            x, f, ok = x0, _BAD_OBJECTIVE, False
        out.append((r, -f, x, ok))
    return out


def fit_stage2_markov(data: SeriesSet, spec: ModelSpec,
                      frozen_emissions: EmissionParams,
                      config: FitConfig) -> List[Candidate]:
    """Stage II: rank random-restart fits of the Markov parameters only.

    Emission parameters stay frozen at the stage-I values, so the per-event
    density matrix is computed once and shared by every restart. Returns the
    ``config.n_survivors`` best candidates, sorted by decreasing likelihood
    (ties broken by start index); each carries the identical frozen emission
    block inside the full working vector.
    """
    frozen_emissions.validate()
    packed = PackedData.from_series_set(data)
    logq = emission_loglik_matrix(packed, frozen_emissions)
    layout = ParameterLayout.for_spec(spec)
    n_em = layout.emission.stop
    theta_em = np.empty(n_em)
    pos = 0
    for block in frozen_emissions.blocks:
        for arr in block.values():
            theta_em[pos : pos + spec.n_states] = np.log(arr)
            pos += spec.n_states

    if layout.size == n_em:  # single-state, single-context: nothing to search
        loglik = -_neg_loglik_markov(np.empty(0), logq, packed, spec)
        return [Candidate(theta_em.copy(), loglik, 0)]

    R = config.n_random_starts
    if config.n_workers > 1:
        n_chunks = min(R, config.n_workers * 4)
        edges = np.linspace(0, R, n_chunks + 1, dtype=int)
        payloads = [
            (packed, spec, logq, config, int(a), int(b))
            for a, b in zip(edges[:-1], edges[1:])
            if b > a
        ]
        with ProcessPoolExecutor(max_workers=config.n_workers) as ex:
            chunks = list(ex.map(_stage2_chunk, payloads))
        results = [item for chunk in chunks for item in chunk]
    else:
        results = _stage2_chunk((packed, spec, logq, config, 0, R))

    ok = [r for r in results if r[3]]
    if not ok:
        raise EstimationError("every stage-II restart failed")
    ok.sort(key=lambda r: (-r[1], r[0]))
    survivors = []
    for r, loglik, x_mk, _ in ok[: config.n_survivors]:
        survivors.append(Candidate(np.concatenate([theta_em, x_mk]), loglik, r))
    return survivors


# ---------------------------------------------------------------------------
# Stage III: full optimization with jittered re-runs
# ---------------------------------------------------------------------------


def _full_chunk(payload):
    packed, spec, config, survivors = payload
    layout = ParameterLayout.for_spec(spec)
    bounds = parms.working_bounds(spec)
    lower = np.array([-np.inf if b[0] is None else b[0] for b in bounds])
    out = []
    for cand in survivors:
        try:
            x, f, conv = _minimize(
                _neg_loglik_full, cand.theta, bounds, config,
                args=(packed, spec, layout),
            )
        except Exception:
            x, f, conv = cand.theta, _BAD_OBJECTIVE, False
        best = (-f, x, conv, RestartProvenance("full", cand.start_index, None))
        for j in range(config.n_jitters_per_survivor):
            rng = _rng(config.rng_seed, _JITTER_STREAM, cand.start_index, j)
            sd = config.jitter_scale * np.maximum(np.abs(x), 1.0)
            x0 = np.maximum(x + rng.normal(0.0, 1.0, x.size) * sd, lower)
            try:
                xj, fj, convj = _minimize(
                    _neg_loglik_full, x0, bounds, config,
                    args=(packed, spec, layout),
                )
            except Exception:
                continue
            if -fj > best[0]:
                best = (
                    -fj, xj, convj,
                    RestartProvenance("jitter", cand.start_index, j),
                )
        out.append(best)
    return out


def fit_full(data: SeriesSet, spec: ModelSpec, survivors: Sequence[Candidate],
             config: FitConfig) -> FitResult:
    """Stage III: full optimization from every survivor plus jittered re-runs.

    Returns the overall best fit with canonical state/context labels,
    provenance of the winning restart, and the per-survivor best
    log-likelihoods as a trace.
    """
    if not survivors:
        raise EstimationError("fit_full needs at least one survivor")
    packed = PackedData.from_series_set(data)
    layout = ParameterLayout.for_spec(spec)

    if config.n_workers > 1 and len(survivors) > 1:
        groups = np.array_split(np.arange(len(survivors)), config.n_workers * 2)
        payloads = [
            (packed, spec, config, [survivors[i] for i in g])
            for g in groups
            if g.size
        ]
        with ProcessPoolExecutor(max_workers=config.n_workers) as ex:
            chunks = list(ex.map(_full_chunk, payloads))
        per_survivor = [item for chunk in chunks for item in chunk]
    else:
        per_survivor = _full_chunk((packed, spec, config, list(survivors)))

    best = None
    for entry in per_survivor:
        if not math.isfinite(entry[0]):
            continue
        if best is None or entry[0] > best[0]:
            best = entry
    if best is None:
        raise EstimationError("every full-stage optimization failed")
    loglik_raw, x, converged, provenance = best

    fitted = parms.canonicalize(
        parms.unpack(x, spec), spec, config.state_order_variable
    )
    theta = parms.pack(fitted, spec)
    loglik = -_neg_loglik_full(theta, packed, spec, layout)
    n_params = markov.count_free_parameters(spec)
    return FitResult(
        spec=spec,
        params=fitted,
        theta=theta,
        loglik=loglik,
        aic=compute_aic(loglik, n_params),
        n_params=n_params,
        converged=converged,
        provenance=provenance,
        survivor_logliks=np.array([e[0] for e in per_survivor]),
    )


def fit_pipeline(data: SeriesSet, spec: ModelSpec, config: FitConfig,
                 stage1: Optional[FitResult] = None,
                 extra_survivors: Sequence[Candidate] = ()) -> FitResult:
    """Run stages I-III for one model specification."""
    if spec.schema != data.schema:
        raise ConfigError("model schema does not match the data schema")
    if stage1 is None:
        stage1 = fit_stage1_emissions(data, spec.n_states, config)
    survivors = fit_stage2_markov(data, spec, stage1.params.emissions, config)
    survivors = list(survivors) + list(extra_survivors)
    return fit_full(data, spec, survivors, config)


# ---------------------------------------------------------------------------
# Model selection
# ---------------------------------------------------------------------------


@dataclass
class SelectionRow:
    """One line of the model-comparison table."""

    spec: ModelSpec
    n_params: int
    loglik: Optional[float]
    aic: Optional[float]
    delta_aic: Optional[float]
    converged: bool
    is_best: bool = False
    error: Optional[str] = None


@dataclass
class SelectionResult:
    best: FitResult
    rows: List[SelectionRow]
    fits: List[Optional[FitResult]]


def _base_candidate_index(specs: Sequence[ModelSpec]) -> int:
    for i, s in enumerate(specs):
        if s.n_contexts == 1 and s.covariate_mode == "none":
            return i
    return 0


def select_model(data: SeriesSet, candidate_specs: Sequence[ModelSpec],
                 config: FitConfig,
                 base_index: Optional[int] = None) -> SelectionResult:
    """Fit every candidate through the full pipeline and pick the lowest AIC.

    The comparison table keeps the candidate order, reports the AIC difference
    against the base model (the first K=1 no-covariate candidate unless
    `base_index` says otherwise), and flags non-converged candidates, which
    are excluded from the arg-min.
    """
    if not candidate_specs:
        raise ConfigError("need at least one candidate spec")
    stage1_cache: Dict[int, FitResult] = {}
    fits: List[Optional[FitResult]] = []
    errors: List[Optional[str]] = []
    for spec in candidate_specs:
        if spec.n_states not in stage1_cache:
            stage1_cache[spec.n_states] = fit_stage1_emissions(
                data, spec.n_states, config
            )
        try:
            fits.append(
                fit_pipeline(data, spec, config, stage1=stage1_cache[spec.n_states])
            )
            errors.append(None)
        except EstimationError as exc:
            fits.append(None)
            errors.append(str(exc))

    if base_index is None:
        base_index = _base_candidate_index(candidate_specs)
    base_fit = fits[base_index]
    base_aic = base_fit.aic if base_fit is not None else None

    usable = [
        i for i, f in enumerate(fits) if f is not None and f.converged
    ]
    if not usable:
        usable = [i for i, f in enumerate(fits) if f is not None]
    if not usable:
        raise EstimationError("no candidate model could be fitted")
    best_index = min(usable, key=lambda i: fits[i].aic)

    rows = []
    for i, spec in enumerate(candidate_specs):
        f = fits[i]
        rows.append(
            SelectionRow(
                spec=spec,
                n_params=markov.count_free_parameters(spec),
                loglik=None if f is None else f.loglik,
                aic=None if f is None else f.aic,
                delta_aic=(
                    None if f is None or base_aic is None else f.aic - base_aic
                ),
                converged=False if f is None else f.converged,
                is_best=(i == best_index),
                error=errors[i],
            )
        )
    return SelectionResult(best=fits[best_index], rows=rows, fits=fits)
