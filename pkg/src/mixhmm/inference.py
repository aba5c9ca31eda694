"""Posterior computations on a fitted model.

Local decoding marginalises the per-context smoothing probabilities over the
posterior distribution of the context label,

    Pr(S_wd = j | X, z) = sum_k Pr(S_wd = j | context k, X, z) * w_k,
    w_k = L_k^(w) pi_k / L^(w),

with the inner term the standard scaled forward-backward smoother. Confidence
intervals come from the observed Fisher information (numerical Hessian at the
MLE, Wald intervals transformed to the natural scale) with a profile
likelihood fallback for parameters whose curvature is flagged.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import stats as sstats

from . import params as parms
from .errors import ConfigError, EstimationError, NumericalError
from .estimation import FitConfig, FitResult, _minimize, _neg_loglik_full
from .likelihood import PackedData, emission_loglik_matrix, mixture_loglik
from .obsmodel import SeriesSet
from .params import ModelSpec, ParameterLayout

_CURVATURE_RTOL = 1e-10


@dataclass
class DecodeResult:
    """Per-series posterior state probabilities and context posterior."""

    series_id: str
    posterior_state_probs: np.ndarray  # (D, N)
    map_states: np.ndarray  # (D,) 0-based argmax per event (ties -> lowest)
    context_posterior: np.ndarray  # (K,)


@dataclass
class ConfidenceInterval:
    """A natural-scale interval; endpoints may be +-inf."""

    parameter: str
    estimate: float
    lower: float
    upper: float
    method: str  # "fisher" or "profile"
    flag: Optional[str] = None


# ---------------------------------------------------------------------------
# Smoothing and local decoding
# ---------------------------------------------------------------------------


def _smooth_single_context(
    logq: np.ndarray, tpm_pair: Sequence[np.ndarray], exposed: np.ndarray,
    delta: np.ndarray,
) -> Tuple[np.ndarray, float]:
    """Scaled forward-backward smoothing for one series in one context.

    Returns the (D, N) smoothing probabilities and the series log-likelihood.
    """
    D, N = logq.shape
    shift = logq.max(axis=1)
    shift = np.where(np.isfinite(shift), shift, 0.0)
    q = np.exp(logq - shift[:, None])

    ahat = np.empty((D, N))
    scale = np.empty(D)
    a = delta * q[0]
    scale[0] = a.sum()
    ahat[0] = a / scale[0]
    for d in range(1, D):
        G = tpm_pair[int(exposed[d])]
        a = (ahat[d - 1] @ G) * q[d]
        scale[d] = a.sum()
        ahat[d] = a / scale[d]
    loglik = float(np.log(scale).sum() + shift.sum())

    bhat = np.empty((D, N))
    bhat[-1] = 1.0
    for d in range(D - 2, -1, -1):
        G = tpm_pair[int(exposed[d + 1])]
        bhat[d] = G @ (q[d + 1] * bhat[d + 1]) / scale[d + 1]
    return ahat * bhat, loglik


def context_posterior(series_logliks: np.ndarray, pi: np.ndarray) -> np.ndarray:
    """Posterior context probabilities L_k pi_k / L for one series."""
    pi = np.asarray(pi, dtype=float)
    if np.any(pi < 0) or abs(pi.sum() - 1.0) > 1e-8:
        raise ConfigError("pi must be a probability vector")
    with np.errstate(divide="ignore"):
        logw = np.asarray(series_logliks, dtype=float) + np.log(pi)
    logw -= logw.max()
    w = np.exp(logw)
    return w / w.sum()


def decode_local(data: SeriesSet, fit: FitResult) -> List[DecodeResult]:
    """Local decoding through the context mixture for every series."""
    params = fit.params
    packed = PackedData.from_series_set(data)
    logq_all = emission_loglik_matrix(packed, params.emissions)
    K, N = params.n_contexts, params.n_states
    tpm_pairs = [
        (params.tpm(k, exposed=False), params.tpm(k, exposed=True))
        for k in range(K)
    ]
    results = []
    for w, series in enumerate(data.series):
        sl = slice(packed.offsets[w], packed.offsets[w + 1])
        logq = logq_all[sl]
        exposed = packed.exposed[sl]
        smoothed = np.empty((K, logq.shape[0], N))
        logliks = np.empty(K)
        for k in range(K):
            smoothed[k], logliks[k] = _smooth_single_context(
                logq, tpm_pairs[k], exposed, params.delta[k]
            )
        weights = context_posterior(logliks, params.pi)
        probs = np.einsum("k,kdn->dn", weights, smoothed)
        if not np.all(np.isfinite(probs)):
            raise NumericalError(
                f"non-finite smoothing probabilities for series {series.id!r}"
            )
        results.append(
            DecodeResult(
                series_id=series.id,
                posterior_state_probs=probs,
                map_states=np.argmax(probs, axis=1),
                context_posterior=weights,
            )
        )
    return results


def decode_viterbi(data: SeriesSet, fit: FitResult) -> List[np.ndarray]:
    """Jointly most probable (context, state path) per series; returns paths.

    Off by default everywhere; local decoding is the primary output.
    """
    params = fit.params
    packed = PackedData.from_series_set(data)
    logq_all = emission_loglik_matrix(packed, params.emissions)
    K = params.n_contexts
    with np.errstate(divide="ignore"):
        log_tpms = [
            (
                np.log(params.tpm(k, exposed=False)),
                np.log(params.tpm(k, exposed=True)),
            )
            for k in range(K)
        ]
        log_delta = np.log(params.delta)
        log_pi = np.log(params.pi)
    paths = []
    for w in range(packed.n_series):
        sl = slice(packed.offsets[w], packed.offsets[w + 1])
        logq = logq_all[sl]
        exposed = packed.exposed[sl]
        D = logq.shape[0]
        best_score, best_path = -np.inf, None
        for k in range(K):
            score = log_pi[k] + log_delta[k] + logq[0]
            back = np.zeros((D, params.n_states), dtype=int)
            for d in range(1, D):
                cand = score[:, None] + log_tpms[k][int(exposed[d])]
                back[d] = np.argmax(cand, axis=0)
                score = cand[back[d], np.arange(params.n_states)] + logq[d]
            j = int(np.argmax(score))
            if score[j] > best_score:
                path = np.empty(D, dtype=int)
                path[-1] = j
                for d in range(D - 1, 0, -1):
                    path[d - 1] = back[d, path[d]]
                best_score, best_path = float(score[j]), path
        paths.append(best_path)
    return paths


# ---------------------------------------------------------------------------
# Observed-Fisher-information confidence intervals
# ---------------------------------------------------------------------------


def _hessian_central(fun, x: np.ndarray, rel_step: float = 1e-4) -> np.ndarray:
    """Dense central-difference Hessian with per-coordinate relative steps."""
    n = x.size
    h = rel_step * np.maximum(np.abs(x), 1.0)
    f0 = fun(x)
    H = np.empty((n, n))
    for i in range(n):
        ei = np.zeros(n)
        ei[i] = h[i]
        H[i, i] = (fun(x + ei) - 2.0 * f0 + fun(x - ei)) / h[i] ** 2
        for j in range(i + 1, n):
            ej = np.zeros(n)
            ej[j] = h[j]
            fpp = fun(x + ei + ej)
            fpm = fun(x + ei - ej)
            fmp = fun(x - ei + ej)
            fmm = fun(x - ei - ej)
            H[i, j] = H[j, i] = (fpp - fpm - fmp + fmm) / (4.0 * h[i] * h[j])
    return H


def _covariance_with_flags(H: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Pseudo-inverse covariance plus per-parameter curvature flags.

    Eigendirections with non-positive (or vanishing) curvature are dropped
    from the inverse; parameters loading on them are flagged.
    """
    Hs = 0.5 * (H + H.T)
    eigvals, eigvecs = np.linalg.eigh(Hs)
    floor = _CURVATURE_RTOL * max(float(eigvals.max()), 1.0)
    bad = eigvals <= floor
    flags = np.zeros(H.shape[0], dtype=bool)
    if bad.any():
        loading = np.abs(eigvecs[:, bad]).max(axis=1)
        flags = loading > 1e-3
    inv_vals = np.where(bad, 0.0, 1.0 / np.where(bad, 1.0, eigvals))
    cov = (eigvecs * inv_vals[None, :]) @ eigvecs.T
    flags |= np.diag(H) <= 0
    return cov, flags


def _simplex_jacobian(p: np.ndarray) -> np.ndarray:
    """d softmax([0, l]) / d l for the reference-cell logit map; (N, N-1)."""
    n = p.size
    J = np.empty((n, n - 1))
    for i in range(n):
        for j in range(n - 1):
            J[i, j] = p[i] * ((1.0 if i == j + 1 else 0.0) - p[j + 1])
    return J


def fisher_confidence_intervals(
    data: SeriesSet, fit: FitResult, level: float = 0.95
) -> List[ConfidenceInterval]:
    """Wald intervals from the observed Fisher information at the MLE.

    The Hessian of the negative log-likelihood is estimated by central
    differences in working space; working intervals are mapped to the natural
    scale by transforming the endpoints (log-scale parameters) or by the
    delta method (initial-distribution and mixture-weight entries, which are
    not scalar transforms of a single working parameter). Parameters with
    non-positive curvature are flagged rather than failing the whole call;
    route those to ``profile_ci``.
    """
    if not 0.0 < level < 1.0:
        raise ConfigError("level must be in (0, 1)")
    spec = fit.spec
    packed = PackedData.from_series_set(data)
    layout = ParameterLayout.for_spec(spec)
    theta = fit.theta

    def negloglik(x):
        return _neg_loglik_full(x, packed, spec, layout)

    H = _hessian_central(negloglik, theta)
    cov, flags = _covariance_with_flags(H)
    se = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    z = float(sstats.norm.ppf(0.5 * (1.0 + level)))
    names = parms.parameter_names(spec)

    out: List[ConfidenceInterval] = []
    for j in range(layout.size):
        name = names[j]
        flagged = bool(flags[j])
        lo_w = -np.inf if flagged else theta[j] - z * se[j]
        hi_w = np.inf if flagged else theta[j] + z * se[j]
        if j < layout.emission.stop:
            interval = ConfidenceInterval(
                name, float(np.exp(theta[j])), float(np.exp(lo_w)),
                float(np.exp(hi_w)), "fisher",
                "nonpositive curvature" if flagged else None,
            )
        elif j < layout.beta.stop:
            interval = ConfidenceInterval(
                name, float(theta[j]), float(lo_w), float(hi_w), "fisher",
                "nonpositive curvature" if flagged else None,
            )
        else:
            continue  # simplex-valued parameters are reported below
        out.append(interval)

    # delta-method intervals for the initial distributions and mixture weights
    K, N = spec.n_contexts, spec.n_states
    for k in range(K):
        sl = slice(layout.delta.start + k * (N - 1), layout.delta.start + (k + 1) * (N - 1))
        p = fit.params.delta[k]
        J = _simplex_jacobian(p)
        var = np.clip(np.diag(J @ cov[sl, sl] @ J.T), 0.0, None)
        block_flagged = bool(flags[sl].any())
        for i in range(N):
            half = z * float(np.sqrt(var[i]))
            out.append(
                ConfidenceInterval(
                    f"delta[k{k + 1}].{i + 1}", float(p[i]),
                    -np.inf if block_flagged else max(0.0, p[i] - half),
                    np.inf if block_flagged else min(1.0, p[i] + half),
                    "fisher",
                    "nonpositive curvature" if block_flagged else None,
                )
            )
    if K > 1:
        sl = layout.pi
        p = fit.params.pi
        J = _simplex_jacobian(p)
        var = np.clip(np.diag(J @ cov[sl, sl] @ J.T), 0.0, None)
        block_flagged = bool(flags[sl].any())
        for k in range(K):
            half = z * float(np.sqrt(var[k]))
            out.append(
                ConfidenceInterval(
                    f"pi[{k + 1}]", float(p[k]),
                    -np.inf if block_flagged else max(0.0, p[k] - half),
                    np.inf if block_flagged else min(1.0, p[k] + half),
                    "fisher",
                    "nonpositive curvature" if block_flagged else None,
                )
            )
    return out


# ---------------------------------------------------------------------------
# Profile likelihood
# ---------------------------------------------------------------------------


def _working_index(spec: ModelSpec, parameter: str) -> int:
    names = parms.parameter_names(spec)
    try:
        return names.index(parameter)
    except ValueError:
        raise ConfigError(
            f"unknown parameter {parameter!r}; working parameters are "
            f"{names}"
        ) from None


def _profile_direction(
    negloglik_reduced, theta: np.ndarray, j: int, step: float, sign: int,
    threshold: float, best_loglik: float, lower_bound: float,
    max_points: int, config: FitConfig, bounds_reduced,
):
    """Walk outward from the MLE until the profile drops below the threshold.

    Returns the crossing point (or +-inf when the bound / scan limit is hit
    first) plus the scanned (t, profile loglik) pairs.
    """
    reduced = np.delete(theta, j)
    prev_t, prev_l = theta[j], best_loglik
    trace = [(prev_t, prev_l)]
    failures = 0
    for m in range(1, max_points + 1):
        t = theta[j] + sign * m * step
        at_bound = sign < 0 and t <= lower_bound
        if at_bound:
            t = lower_bound
        try:
            x, f, _ = _minimize(
                negloglik_reduced, reduced, bounds_reduced, config, args=(t,)
            )
            lp = -f
            reduced = x
        except Exception:
            failures += 1
            if failures > max(2, max_points // 4):
                raise EstimationError(
                    "pervasive inner-optimization failures during profiling"
                )
            continue
        trace.append((t, lp))
        if lp < best_loglik - threshold:
            # linear interpolation of the crossing between the last two points
            frac = (prev_l - (best_loglik - threshold)) / (prev_l - lp)
            return prev_t + frac * (t - prev_t), trace
        prev_t, prev_l = t, lp
        if at_bound:
            break
    return sign * np.inf, trace


def profile_ci(
    data: SeriesSet, fit: FitResult, parameter: str, level: float = 0.95,
    config: Optional[FitConfig] = None, max_points: int = 60,
    step: Optional[float] = None,
) -> ConfidenceInterval:
    """Profile-likelihood interval for one working parameter.

    The parameter is scanned on a grid; all other parameters are re-maximized
    at each point (warm-started from the neighbouring solution). The interval
    is where the profile stays within chi2_1(level)/2 of the maximum; an
    endpoint is +-inf when the profile never crosses the threshold before the
    working-space bound or the scan limit.
    """
    if not 0.0 < level < 1.0:
        raise ConfigError("level must be in (0, 1)")
    spec = fit.spec
    j = _working_index(spec, parameter)
    packed = PackedData.from_series_set(data)
    layout = ParameterLayout.for_spec(spec)
    theta = fit.theta
    if config is None:
        config = FitConfig(max_iterations=300)

    bounds = parms.working_bounds(spec)
    lower_bound = bounds[j][0] if bounds[j][0] is not None else -np.inf
    bounds_reduced = [b for i, b in enumerate(bounds) if i != j]

    def negloglik_reduced(x_reduced, t):
        full = np.insert(x_reduced, j, t)
        return _neg_loglik_full(full, packed, spec, layout)

    threshold = float(sstats.chi2.ppf(level, df=1) / 2.0)
    if step is None:
        h = 1e-3 * max(abs(theta[j]), 1.0)
        f0 = _neg_loglik_full(theta, packed, spec, layout)
        up = theta.copy()
        up[j] += h
        dn = theta.copy()
        dn[j] -= h
        curv = (
            _neg_loglik_full(up, packed, spec, layout)
            - 2 * f0
            + _neg_loglik_full(dn, packed, spec, layout)
        ) / h**2
        se = 1.0 / np.sqrt(curv) if curv > 0 else max(abs(theta[j]), 1.0)
        step = float(np.clip(0.5 * se, 1e-3, 10.0 * max(abs(theta[j]), 1.0)))

    lower, _ = _profile_direction(
        negloglik_reduced, theta, j, step, -1, threshold, fit.loglik,
        lower_bound, max_points, config, bounds_reduced,
    )
    upper, _ = _profile_direction(
        negloglik_reduced, theta, j, step, +1, threshold, fit.loglik,
        lower_bound, max_points, config, bounds_reduced,
    )

    estimate = float(theta[j])
    if j < layout.emission.stop:  # log-scale working parameter
        return ConfidenceInterval(
            parameter, float(np.exp(estimate)), float(np.exp(lower)),
            float(np.exp(upper)), "profile",
        )
    return ConfidenceInterval(parameter, estimate, float(lower), float(upper),
                              "profile")
