"""Model specification and the working-vector parameterisation.

All free parameters live in one flat real vector ("working space") so a
generic unconstrained optimizer can drive the fit:

* emission parameters, on the log scale (all are positive),
* transition logits alpha, one N(N-1) off-diagonal block per context,
* covariate-effect logits beta (absent / one shared block / one per context),
* initial-distribution logits, N-1 per context (state 1 is the reference),
* mixture-weight logits, K-1 (component 1 is the reference).

``pack``/``unpack`` are exact inverses on valid parameters. Working-space
bounds are unbounded except for beta, which is bounded below (see
``markov.BETA_LOWER_BOUND``).
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import markov
from .errors import ConfigError
from .obsmodel import FAMILY_PARAM_NAMES, EmissionParams, Schema, normalize_schema


@dataclass(frozen=True)
class ModelSpec:
    """Structural choices: state count, context count, covariate mode, schema."""

    n_states: int
    n_contexts: int
    schema: Schema
    covariate_mode: str = "none"

    def __post_init__(self):
        object.__setattr__(self, "schema", normalize_schema(self.schema))
        if self.n_states < 1:
            raise ConfigError("n_states must be >= 1")
        if self.n_contexts < 1:
            raise ConfigError("n_contexts must be >= 1")
        if self.covariate_mode not in markov.COVARIATE_MODES:
            raise ConfigError(
                f"covariate_mode must be one of {markov.COVARIATE_MODES}, "
                f"got {self.covariate_mode!r}"
            )

    @property
    def n_beta_blocks(self) -> int:
        if self.covariate_mode == "none":
            return 0
        return 1 if self.covariate_mode == "common" else self.n_contexts

    def label(self) -> str:
        return (
            f"N={self.n_states}, K={self.n_contexts}, "
            f"covariate={self.covariate_mode}"
        )


@dataclass
class ModelParams:
    """Constrained (natural-scale) parameters of a fully specified model."""

    emissions: EmissionParams
    alpha: np.ndarray  # (K, N, N), zero diagonal
    beta: Optional[np.ndarray]  # None, (1, N, N), or (K, N, N); zero diagonal
    delta: np.ndarray  # (K, N) initial distributions, rows sum to 1
    pi: np.ndarray  # (K,) mixture weights, sums to 1

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=float)
        self.delta = np.atleast_2d(np.asarray(self.delta, dtype=float))
        self.pi = np.atleast_1d(np.asarray(self.pi, dtype=float))
        if self.beta is not None:
            self.beta = np.asarray(self.beta, dtype=float)

    @property
    def n_states(self) -> int:
        return self.alpha.shape[1]

    @property
    def n_contexts(self) -> int:
        return self.alpha.shape[0]

    def tpm(self, context: int, exposed: bool = False) -> np.ndarray:
        beta_k = None
        if self.beta is not None:
            beta_k = self.beta[0] if self.beta.shape[0] == 1 else self.beta[context]
        return markov.tpm_from_logits(self.alpha[context], beta_k, z=exposed)

    def validate(self, spec: ModelSpec) -> None:
        N, K = spec.n_states, spec.n_contexts
        self.emissions.validate()
        if self.emissions.schema != spec.schema:
            raise ConfigError("emission schema does not match the model spec")
        if self.emissions.n_states != N:
            raise ConfigError("emission parameters disagree with n_states")
        if self.alpha.shape != (K, N, N):
            raise ConfigError(f"alpha must have shape {(K, N, N)}")
        if np.any(np.diagonal(self.alpha, axis1=1, axis2=2) != 0.0):
            raise ConfigError("alpha diagonals must be 0")
        expected_beta = spec.n_beta_blocks
        if expected_beta == 0:
            if self.beta is not None:
                raise ConfigError("beta must be None when covariate_mode='none'")
        else:
            if self.beta is None or self.beta.shape != (expected_beta, N, N):
                raise ConfigError(f"beta must have shape {(expected_beta, N, N)}")
            if np.any(np.diagonal(self.beta, axis1=1, axis2=2) != 0.0):
                raise ConfigError("beta diagonals must be 0")
        if self.delta.shape != (K, N):
            raise ConfigError(f"delta must have shape {(K, N)}")
        if np.any(self.delta < 0) or np.any(np.abs(self.delta.sum(axis=1) - 1) > 1e-8):
            raise ConfigError("each delta row must be a probability vector")
        if self.pi.shape != (K,):
            raise ConfigError(f"pi must have shape {(K,)}")
        if np.any(self.pi < 0) or abs(self.pi.sum() - 1) > 1e-8:
            raise ConfigError("pi must be a probability vector")


# ---------------------------------------------------------------------------
# Working-vector layout
# ---------------------------------------------------------------------------


def _offdiag_indices(n: int) -> Tuple[np.ndarray, np.ndarray]:
    rows, cols = np.nonzero(~np.eye(n, dtype=bool))
    return rows, cols


@dataclass(frozen=True)
class ParameterLayout:
    """Slices of the flat working vector for one ModelSpec."""

    spec: ModelSpec
    emission: slice
    alpha: slice
    beta: slice
    delta: slice
    pi: slice
    size: int

    @classmethod
    def for_spec(cls, spec: ModelSpec) -> "ParameterLayout":
        N, K = spec.n_states, spec.n_contexts
        n_em = markov.emission_parameter_count(spec.schema, N)
        n_alpha = K * N * (N - 1)
        n_beta = spec.n_beta_blocks * N * (N - 1)
        n_delta = K * (N - 1)
        n_pi = K - 1
        edges = np.cumsum([0, n_em, n_alpha, n_beta, n_delta, n_pi])
        return cls(
            spec=spec,
            emission=slice(edges[0], edges[1]),
            alpha=slice(edges[1], edges[2]),
            beta=slice(edges[2], edges[3]),
            delta=slice(edges[3], edges[4]),
            pi=slice(edges[4], edges[5]),
            size=int(edges[5]),
        )

    def markov_slice(self) -> slice:
        """Everything after the emission block (alpha, beta, delta, pi)."""
        return slice(self.emission.stop, self.size)


def parameter_names(spec: ModelSpec) -> List[str]:
    """Working-vector entry names, aligned with pack()/unpack().

    States and contexts are 1-based in names, e.g. ``depth.mean[2]``,
    ``alpha[k1].1->3``, ``beta.1->3`` (common mode), ``delta_logit[k2].3``,
    ``pi_logit[2]``.
    """
    N, K = spec.n_states, spec.n_contexts
    names: List[str] = []
    for var, family in spec.schema:
        for param in FAMILY_PARAM_NAMES[family]:
            names.extend(f"{var}.{param}[{i + 1}]" for i in range(N))
    rows, cols = _offdiag_indices(N)
    for k in range(K):
        names.extend(f"alpha[k{k + 1}].{i + 1}->{j + 1}" for i, j in zip(rows, cols))
    if spec.covariate_mode == "common":
        names.extend(f"beta.{i + 1}->{j + 1}" for i, j in zip(rows, cols))
    elif spec.covariate_mode == "context":
        for k in range(K):
            names.extend(
                f"beta[k{k + 1}].{i + 1}->{j + 1}" for i, j in zip(rows, cols)
            )
    for k in range(K):
        names.extend(f"delta_logit[k{k + 1}].{j + 2}" for j in range(N - 1))
    names.extend(f"pi_logit[{k + 2}]" for k in range(K - 1))
    return names


def working_bounds(spec: ModelSpec) -> List[Tuple[Optional[float], Optional[float]]]:
    """Optimizer box bounds: unbounded everywhere except beta's lower bound."""
    layout = ParameterLayout.for_spec(spec)
    bounds: List[Tuple[Optional[float], Optional[float]]] = [
        (None, None)
    ] * layout.size
    for i in range(layout.beta.start, layout.beta.stop):
        bounds[i] = (markov.BETA_LOWER_BOUND, None)
    return bounds


def pack(params: ModelParams, spec: ModelSpec) -> np.ndarray:
    """Map natural-scale parameters to the flat working vector."""
    params.validate(spec)
    N, K = spec.n_states, spec.n_contexts
    layout = ParameterLayout.for_spec(spec)
    theta = np.empty(layout.size)
    pos = 0
    for block in params.emissions.blocks:
        for arr in block.values():
            theta[pos : pos + N] = np.log(arr)
            pos += N
    rows, cols = _offdiag_indices(N)
    for k in range(K):
        theta[pos : pos + rows.size] = params.alpha[k][rows, cols]
        pos += rows.size
    for b in range(spec.n_beta_blocks):
        theta[pos : pos + rows.size] = params.beta[b][rows, cols]
        pos += rows.size
    for k in range(K):
        theta[pos : pos + N - 1] = markov.simplex_to_logits(params.delta[k])
        pos += N - 1
    if K > 1:
        theta[pos :] = markov.simplex_to_logits(params.pi)
    return theta


def unpack(theta: np.ndarray, spec: ModelSpec) -> ModelParams:
    """Map a flat working vector back to natural-scale parameters."""
    theta = np.asarray(theta, dtype=float)
    layout = ParameterLayout.for_spec(spec)
    if theta.shape != (layout.size,):
        raise ConfigError(
            f"working vector has length {theta.size}, expected {layout.size}"
        )
    N, K = spec.n_states, spec.n_contexts
    blocks = []
    pos = 0
    for _, family in spec.schema:
        block = {}
        for param in FAMILY_PARAM_NAMES[family]:
            block[param] = np.exp(theta[pos : pos + N])
            pos += N
        blocks.append(block)
    emissions = EmissionParams(spec.schema, blocks)
    rows, cols = _offdiag_indices(N)
    alpha = np.zeros((K, N, N))
    for k in range(K):
        alpha[k][rows, cols] = theta[pos : pos + rows.size]
        pos += rows.size
    beta = None
    if spec.n_beta_blocks:
        beta = np.zeros((spec.n_beta_blocks, N, N))
        for b in range(spec.n_beta_blocks):
            beta[b][rows, cols] = theta[pos : pos + rows.size]
            pos += rows.size
    delta = np.empty((K, N))
    for k in range(K):
        delta[k] = markov.logits_to_simplex(theta[pos : pos + N - 1])
        pos += N - 1
    pi = markov.logits_to_simplex(theta[pos:]) if K > 1 else np.ones(1)
    return ModelParams(emissions, alpha, beta, delta, pi)


# ---------------------------------------------------------------------------
# Canonical ordering (label switching)
# ---------------------------------------------------------------------------


def state_order_keys(params: ModelParams, spec: ModelSpec,
                     order_variable: Optional[str] = None) -> np.ndarray:
    """Per-state sort key used to fix the state labelling.

    Uses the fitted mean of the designated ordering variable; by default the
    first gamma-family variable in the schema, falling back to the first
    variable with a defined mean. Von Mises variables have no free mean and
    are never used.
    """
    names = [n for n, _ in spec.schema]
    candidates = list(names)
    if order_variable is not None:
        if order_variable not in names:
            raise ConfigError(f"no variable named {order_variable!r} in the schema")
        candidates = [order_variable]
    else:
        gammas = [n for n, f in spec.schema if f == "gamma"]
        if gammas:
            candidates = [gammas[0]] + [n for n in names if n != gammas[0]]
    for name in candidates:
        p = names.index(name)
        family = spec.schema[p][1]
        block = params.emissions.blocks[p]
        if family == "gamma":
            return np.asarray(block["mean"], dtype=float)
        if family == "poisson":
            return np.asarray(block["rate"], dtype=float)
        if family == "beta":
            return np.asarray(block["a"] / (block["a"] + block["b"]), dtype=float)
    # All variables are von Mises: keep the existing labelling.
    return np.arange(spec.n_states, dtype=float)


def permute_states(params: ModelParams, perm: Sequence[int]) -> ModelParams:
    """Relabel states so that new state i is old state perm[i]."""
    perm = np.asarray(perm, dtype=int)
    emissions = params.emissions.permute_states(perm)
    alpha = params.alpha[:, perm][:, :, perm].copy()
    beta = None if params.beta is None else params.beta[:, perm][:, :, perm].copy()
    delta = params.delta[:, perm].copy()
    return ModelParams(emissions, alpha, beta, delta, params.pi.copy())


def permute_contexts(params: ModelParams, perm: Sequence[int]) -> ModelParams:
    """Relabel contexts so that new context k is old context perm[k]."""
    perm = np.asarray(perm, dtype=int)
    alpha = params.alpha[perm].copy()
    beta = params.beta
    if beta is not None and beta.shape[0] > 1:
        beta = beta[perm].copy()
    elif beta is not None:
        beta = beta.copy()
    delta = params.delta[perm].copy()
    pi = params.pi[perm].copy()
    return ModelParams(params.emissions, alpha, beta, delta, pi)


def canonicalize(params: ModelParams, spec: ModelSpec,
                 order_variable: Optional[str] = None) -> ModelParams:
    """Fix label switching: states ascending by the ordering-variable mean,
    contexts descending by mixture weight. Leaves the likelihood unchanged.
    """
    keys = state_order_keys(params, spec, order_variable)
    state_perm = np.argsort(keys, kind="stable")
    out = permute_states(params, state_perm)
    context_perm = np.argsort(-out.pi, kind="stable")
    return permute_contexts(out, context_perm)


# ---------------------------------------------------------------------------
# Nesting embeddings (used to seed larger models with smaller-model optima)
# ---------------------------------------------------------------------------


def expand_contexts(params: ModelParams, spec: ModelSpec,
                    n_contexts: int) -> Tuple[ModelParams, ModelSpec]:
    """Embed a K-context model into K' > K contexts by duplicating context K.

    The duplicated contexts share the original context's dynamics, so the
    likelihood of the embedded model equals the original exactly (the mixture
    collapses: identical components make the weights irrelevant).
    """
    K = spec.n_contexts
    if n_contexts < K:
        raise ConfigError("can only expand to a larger number of contexts")
    reps = [1] * (K - 1) + [n_contexts - K + 1]
    alpha = np.repeat(params.alpha, reps, axis=0)
    beta = params.beta
    if beta is not None and beta.shape[0] > 1:
        beta = np.repeat(beta, reps, axis=0)
    delta = np.repeat(params.delta, reps, axis=0)
    # split the duplicated context's weight equally among its copies
    pi = np.repeat(params.pi, reps) / np.repeat(reps, reps)
    new_spec = replace(spec, n_contexts=n_contexts)
    return ModelParams(params.emissions, alpha, beta, delta, pi), new_spec


def promote_covariate_mode(params: ModelParams, spec: ModelSpec,
                           mode: str) -> Tuple[ModelParams, ModelSpec]:
    """Embed into a richer covariate mode (none -> common -> context).

    A missing effect becomes an all-zero block; a common block is copied to
    every context. The likelihood is unchanged exactly.
    """
    order = {m: i for i, m in enumerate(markov.COVARIATE_MODES)}
    if order[mode] < order[spec.covariate_mode]:
        raise ConfigError("can only promote to a richer covariate mode")
    K, N = spec.n_contexts, spec.n_states
    if mode == spec.covariate_mode:
        beta = None if params.beta is None else params.beta.copy()
    elif spec.covariate_mode == "none":
        n_blocks = 1 if mode == "common" else K
        beta = np.zeros((n_blocks, N, N))
    else:  # common -> context
        beta = np.repeat(params.beta, K, axis=0)
    new_spec = replace(spec, covariate_mode=mode)
    return (
        ModelParams(params.emissions, params.alpha.copy(), beta,
                    params.delta.copy(), params.pi.copy()),
        new_spec,
    )
