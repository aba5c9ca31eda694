"""Exact model log-likelihood via the scaled forward algorithm.

Per series and context the likelihood is the matrix product

    delta_k Q(x_1) Gamma_k(z_2) Q(x_2) ... Gamma_k(z_D) Q(x_D) 1

with Q(x_d) the diagonal matrix of joint event densities and Gamma_k(z) the
exposure-appropriate transition matrix (the covariate value of the
destination event governs each transition). Per-step renormalisation plus a
per-event shift by the largest state log-density keeps every intermediate
finite for series up to at least 1e5 events.

All four emission families are exponential families in simple per-event
statistics, so each event's log-density is a short dot product between
statistics precomputed once per dataset (``PackedData``) and coefficients
derived from the current parameters. The accumulation runs variable by
variable, so a fully missing variable contributes exact zeros: the total
log-likelihood with a variable masked everywhere equals the total with that
variable dropped from the schema. The hot kernels are numba-compiled when
numba is available and run as plain Python otherwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, List, Optional

import numpy as np
from scipy import special

from . import markov
from .errors import NumericalError
from .obsmodel import (
    BETA_EPS,
    FAMILY_PARAM_NAMES,
    EmissionParams,
    Schema,
    Series,
    SeriesSet,
)

_LOG_2PI = math.log(2.0 * math.pi)
_FAMILY_CODES = {"gamma": 0, "poisson": 1, "vonmises": 2, "beta": 3}
# statistic columns per family, plus one presence column each
_STAT_COLUMNS = {"gamma": 2, "poisson": 2, "vonmises": 1, "beta": 2}


def _event_statistics(family: str, x: np.ndarray) -> np.ndarray:
    """Per-event sufficient statistics; rows for missing x are zeroed later."""
    if family == "gamma":
        return np.column_stack([np.log(x), x])
    if family == "poisson":
        return np.column_stack([x, -special.gammaln(x + 1.0)])
    if family == "vonmises":
        return np.cos(x)[:, None]
    if family == "beta":
        xc = np.clip(x, BETA_EPS, 1.0 - BETA_EPS)
        return np.column_stack([np.log(xc), np.log1p(-xc)])
    raise ValueError(f"unknown family {family!r}")


def _support_filler(family: str) -> float:
    # substituted at missing entries before computing statistics; the rows are
    # zeroed by the presence mask, this only avoids NaN/log warnings.
    return 0.5 if family in ("beta", "vonmises") else 1.0


@dataclass
class PackedData:
    """Flattened, statistic-level view of a SeriesSet, built once per task.

    ``stats[:, edges[p]:edges[p+1]]`` holds variable p's per-event statistics
    followed by its presence indicator; ``coef_kernel``-compatible metadata
    (family codes, parameter offsets, von Mises ordinals) describes how to
    turn a flat natural-parameter vector into matching coefficients.
    """

    schema: Schema
    series_ids: List[str]
    lengths: np.ndarray  # (W,)
    offsets: np.ndarray  # (W+1,)
    exposed: np.ndarray  # (total_events,) int64 in {0, 1}
    stats: np.ndarray  # (total_events, n_columns)
    edges: np.ndarray  # (P+1,) int64 column block boundaries
    fam_codes: np.ndarray  # (P,) int64
    par_offsets: np.ndarray  # (P+1,) int64 offsets into the flat param vector
    vm_ordinal: np.ndarray  # (P,) int64, running von Mises index or -1

    @classmethod
    def from_series_set(cls, data: SeriesSet) -> "PackedData":
        lengths = np.array([len(s) for s in data.series], dtype=np.int64)
        offsets = np.concatenate([[0], np.cumsum(lengths)]).astype(np.int64)
        values = np.vstack([s.values for s in data.series])
        exposed = np.concatenate([s.exposed for s in data.series]).astype(np.int64)

        blocks = []
        edges = [0]
        fam_codes = []
        par_offsets = [0]
        vm_ordinal = []
        n_vm = 0
        for p, (_, family) in enumerate(data.schema):
            x = values[:, p]
            present = (~np.isnan(x)).astype(float)
            filled = np.where(np.isnan(x), _support_filler(family), x)
            stats_p = _event_statistics(family, filled) * present[:, None]
            blocks.append(np.column_stack([stats_p, present]))
            edges.append(edges[-1] + blocks[-1].shape[1])
            fam_codes.append(_FAMILY_CODES[family])
            par_offsets.append(
                par_offsets[-1] + len(FAMILY_PARAM_NAMES[family])
            )
            vm_ordinal.append(n_vm if family == "vonmises" else -1)
            n_vm += family == "vonmises"
        return cls(
            schema=data.schema,
            series_ids=[s.id for s in data.series],
            lengths=lengths,
            offsets=offsets,
            exposed=exposed,
            stats=np.ascontiguousarray(np.hstack(blocks)),
            edges=np.array(edges, dtype=np.int64),
            fam_codes=np.array(fam_codes, dtype=np.int64),
            par_offsets=np.array(par_offsets, dtype=np.int64),
            vm_ordinal=np.array(vm_ordinal, dtype=np.int64),
        )

    @classmethod
    def from_series(cls, series: Series, schema: Schema) -> "PackedData":
        return cls.from_series_set(SeriesSet([series], schema))

    @property
    def n_series(self) -> int:
        return len(self.series_ids)

    @property
    def n_events(self) -> int:
        return int(self.offsets[-1])


# ---------------------------------------------------------------------------
# Kernels (numba-compiled when available, plain Python otherwise)
# ---------------------------------------------------------------------------


def _coef_kernel(raw, fam_codes, par_offsets, n_states, vm_ordinal,
                 vm_log_i0e, coefs):
    """Fill the per-variable coefficient blocks matching PackedData.stats.

    raw holds the natural emission parameters, per variable then per
    parameter then per state. Block rows: the statistic coefficients followed
    by the presence-column (log normalizing constant) row.
    """
    row = 0
    for p in range(fam_codes.shape[0]):
        base = par_offsets[p] * n_states
        code = fam_codes[p]
        if code == 0:  # gamma (mean, sd) -> shape/scale coefficients
            for i in range(n_states):
                mean = raw[base + i]
                sd = raw[base + n_states + i]
                shape = mean * mean / (sd * sd)
                scale = sd * sd / mean
                coefs[row, i] = shape - 1.0
                coefs[row + 1, i] = -1.0 / scale
                coefs[row + 2, i] = -shape * math.log(scale) - math.lgamma(shape)
            row += 3
        elif code == 1:  # poisson
            for i in range(n_states):
                rate = raw[base + i]
                coefs[row, i] = math.log(rate)
                coefs[row + 1, i] = 1.0
                coefs[row + 2, i] = -rate
            row += 3
        elif code == 2:  # von Mises, location fixed at 0
            for i in range(n_states):
                kappa = raw[base + i]
                coefs[row, i] = kappa
                coefs[row + 1, i] = (
                    -_LOG_2PI - kappa - vm_log_i0e[vm_ordinal[p], i]
                )
            row += 2
        else:  # beta
            for i in range(n_states):
                a = raw[base + i]
                b = raw[base + n_states + i]
                coefs[row, i] = a - 1.0
                coefs[row + 1, i] = b - 1.0
                coefs[row + 2, i] = (
                    math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                )
            row += 3


def _logq_kernel(stats, coefs, edges, out):
    """Event-by-state joint log densities, accumulated per variable block."""
    n_events = stats.shape[0]
    n_states = out.shape[1]
    n_blocks = edges.shape[0] - 1
    for d in range(n_events):
        for i in range(n_states):
            acc = 0.0
            for b in range(n_blocks):
                sub = 0.0
                for c in range(edges[b], edges[b + 1]):
                    sub += stats[d, c] * coefs[c, i]
                acc += sub
            out[d, i] = acc


def _forward_kernel(logq, offsets, exposed, tpms, delta, out):
    """Scaled forward pass for every (series, context) pair.

    logq: (total_events, N); tpms: (K, 2, N, N); delta: (K, N);
    out: (W, K) receives log L_k^(w).
    """
    n_series = offsets.shape[0] - 1
    n_contexts = delta.shape[0]
    n_states = delta.shape[1]
    phi = np.empty(n_states)
    nxt = np.empty(n_states)
    for w in range(n_series):
        start = offsets[w]
        stop = offsets[w + 1]
        for k in range(n_contexts):
            c = logq[start, 0]
            for i in range(1, n_states):
                if logq[start, i] > c:
                    c = logq[start, i]
            if c == -np.inf:
                out[w, k] = -np.inf
                continue
            tot = 0.0
            for i in range(n_states):
                phi[i] = delta[k, i] * np.exp(logq[start, i] - c)
                tot += phi[i]
            if not tot > 0.0:
                out[w, k] = -np.inf
                continue
            ll = c + np.log(tot)
            for i in range(n_states):
                phi[i] /= tot
            ok = True
            for d in range(start + 1, stop):
                z = exposed[d]
                c = logq[d, 0]
                for i in range(1, n_states):
                    if logq[d, i] > c:
                        c = logq[d, i]
                if c == -np.inf:
                    ok = False
                    break
                tot = 0.0
                for j in range(n_states):
                    acc = 0.0
                    for i in range(n_states):
                        acc += phi[i] * tpms[k, z, i, j]
                    v = acc * np.exp(logq[d, j] - c)
                    nxt[j] = v
                    tot += v
                if not tot > 0.0:
                    ok = False
                    break
                ll += c + np.log(tot)
                for j in range(n_states):
                    phi[j] = nxt[j] / tot
            out[w, k] = ll if ok else -np.inf
    return out


def _mixture_kernel(per, logpi):
    """sum_w log sum_k exp(per[w, k] + logpi[k]) without allocations."""
    total = 0.0
    for w in range(per.shape[0]):
        mx = -np.inf
        for k in range(per.shape[1]):
            v = per[w, k] + logpi[k]
            if v > mx:
                mx = v
        if mx == -np.inf:
            return -np.inf
        s = 0.0
        for k in range(per.shape[1]):
            s += np.exp(per[w, k] + logpi[k] - mx)
        total += mx + np.log(s)
    return total


try:  # pragma: no cover - exercised implicitly by every likelihood test
    from numba import njit

    _coef = njit(cache=True)(_coef_kernel)
    _logq_fill = njit(cache=True)(_logq_kernel)
    _forward = njit(cache=True)(_forward_kernel)
    _mixture = njit(cache=True)(_mixture_kernel)
except ImportError:  # pragma: no cover
    _coef = _coef_kernel
    _logq_fill = _logq_kernel
    _forward = _forward_kernel
    _mixture = _mixture_kernel


# ---------------------------------------------------------------------------
# Emission log-density matrix
# ---------------------------------------------------------------------------


def raw_emission_vector(emissions: EmissionParams) -> np.ndarray:
    """Natural emission parameters flattened in working-vector order."""
    return np.concatenate(
        [arr for block in emissions.blocks for arr in block.values()]
    )


def emission_loglik_from_raw(packed: PackedData, raw: np.ndarray,
                             n_states: int) -> np.ndarray:
    """(total_events, N) log-density matrix from a flat parameter vector."""
    n_vm = int((packed.fam_codes == _FAMILY_CODES["vonmises"]).sum())
    if n_vm:
        vm_slots = np.concatenate(
            [
                packed.par_offsets[p] * n_states + np.arange(n_states)
                for p in range(packed.fam_codes.size)
                if packed.fam_codes[p] == _FAMILY_CODES["vonmises"]
            ]
        )
        kappas = raw[vm_slots].reshape(n_vm, n_states)
        vm_log_i0e = np.log(special.i0e(kappas))
    else:
        vm_log_i0e = np.zeros((1, n_states))
    coefs = np.empty((packed.edges[-1], n_states))
    _coef(
        np.ascontiguousarray(raw, dtype=float),
        packed.fam_codes,
        packed.par_offsets,
        n_states,
        packed.vm_ordinal,
        vm_log_i0e,
        coefs,
    )
    out = np.empty((packed.stats.shape[0], n_states))
    _logq_fill(packed.stats, coefs, packed.edges, out)
    return out


def emission_loglik_matrix(packed: PackedData,
                           emissions: EmissionParams) -> np.ndarray:
    """(total_events, N) matrix of joint event log-densities per state."""
    return emission_loglik_from_raw(
        packed, raw_emission_vector(emissions), emissions.n_states
    )


# ---------------------------------------------------------------------------
# Likelihood
# ---------------------------------------------------------------------------


@dataclass
class ForwardResult:
    """Per-series, per-context log-likelihoods and the mixture total."""

    per_series_per_context: np.ndarray  # (W, K) log L_k^(w)
    total_loglik: float


def per_series_context_logliks(
    packed: PackedData, params, logq: Optional[np.ndarray] = None
) -> np.ndarray:
    """(W, K) matrix of log L_k^(w); `logq` may be supplied from a cache."""
    if logq is None:
        logq = emission_loglik_matrix(packed, params.emissions)
    covariate_mode = _covariate_mode_of(params)
    tpms = markov.tpms_for_all_contexts(params.alpha, params.beta, covariate_mode)
    out = np.empty((packed.n_series, params.n_contexts))
    _forward(
        np.ascontiguousarray(logq),
        packed.offsets,
        packed.exposed,
        np.ascontiguousarray(tpms),
        np.ascontiguousarray(params.delta),
        out,
    )
    return out


def _covariate_mode_of(params) -> str:
    if params.beta is None:
        return "none"
    return "common" if params.beta.shape[0] == 1 else "context"


def mixture_loglik(per_series: np.ndarray, pi: np.ndarray) -> float:
    """Combine per-context series log-likelihoods with the mixture weights."""
    with np.errstate(divide="ignore"):
        logpi = np.log(np.asarray(pi, dtype=float))
    return float(_mixture(np.ascontiguousarray(per_series), logpi))


def total_loglik(data, params) -> ForwardResult:
    """Exact mixed-model log-likelihood of a SeriesSet (or PackedData)."""
    packed = data if isinstance(data, PackedData) else PackedData.from_series_set(data)
    per = per_series_context_logliks(packed, params)
    return ForwardResult(per, mixture_loglik(per, params.pi))


def forward_loglik_one_series(series: Series, context: int, params) -> float:
    """log L_k^(w) for a single series conditioned on one context."""
    packed = PackedData.from_series(series, params.emissions.schema)
    per = per_series_context_logliks(packed, params)
    value = float(per[0, context])
    if np.isnan(value):
        raise NumericalError(f"non-finite forward value for series {series.id!r}")
    return value
