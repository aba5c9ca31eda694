"""Transition matrices, initial distributions, and parameter bookkeeping.

Transition probabilities follow a multinomial-logit parameterisation with the
diagonal as the reference cell: for row i,

    gamma_ij = exp(a_ij + b_ij * z) / (1 + sum_{l != i} exp(a_il + b_il * z))

with a_ii = b_ii = 0 fixed. z is the binary exposure covariate; the b block
is absent ("none"), shared across contexts ("common"), or per-context
("context"). Initial distributions and mixture weights use the same logit map
with the first state/component as the reference.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, NumericalError
from .obsmodel import FAMILY_PARAM_NAMES

COVARIATE_MODES = ("none", "common", "context")

# Lower bound for covariate-effect logits in the optimizer's working space.
# exp(-40) ~ 4e-18, i.e. effectively -inf at double precision: a transition
# suppressed to zero under exposure sits on a flat likelihood plateau and
# would otherwise diverge.
BETA_LOWER_BOUND = -40.0


def tpm_from_logits(alpha_block, beta_block=None, z: bool = False) -> np.ndarray:
    """Build one N x N stochastic matrix from off-diagonal logit blocks.

    Row-wise stable softmax over (alpha + beta * z) with the implicit diagonal
    logit 0; with z = False (or no beta block) this is the baseline logit map.
    """
    alpha = np.asarray(alpha_block, dtype=float)
    n = alpha.shape[0]
    if alpha.shape != (n, n):
        raise ConfigError("alpha block must be square")
    if np.any(np.diagonal(alpha) != 0.0):
        raise ConfigError("diagonal alpha entries must be 0")
    logits = alpha
    if beta_block is not None and z:
        beta = np.asarray(beta_block, dtype=float)
        if beta.shape != (n, n):
            raise ConfigError("beta block must match alpha's shape")
        if np.any(np.diagonal(beta) != 0.0):
            raise ConfigError("diagonal beta entries must be 0")
        logits = alpha + beta
    shifted = logits - logits.max(axis=1, keepdims=True)
    expl = np.exp(shifted)
    return expl / expl.sum(axis=1, keepdims=True)


def tpms_for_all_contexts(alpha, beta, covariate_mode: str) -> np.ndarray:
    """(K, 2, N, N) transition matrices for z = 0 and z = 1 in every context."""
    alpha = np.asarray(alpha, dtype=float)
    K = alpha.shape[0]
    out = np.empty((K, 2, alpha.shape[1], alpha.shape[2]))
    for k in range(K):
        beta_k = None
        if covariate_mode == "common":
            beta_k = beta[0]
        elif covariate_mode == "context":
            beta_k = beta[k]
        out[k, 0] = tpm_from_logits(alpha[k], beta_k, z=False)
        out[k, 1] = tpm_from_logits(alpha[k], beta_k, z=True)
    return out


def tpm_to_logits(tpm) -> np.ndarray:
    """Recover the off-diagonal logit matrix alpha_ij = log(g_ij / g_ii)."""
    tpm = np.asarray(tpm, dtype=float)
    if np.any(tpm <= 0):
        raise NumericalError("all transition probabilities must be positive")
    alpha = np.log(tpm / np.diagonal(tpm)[:, None])
    np.fill_diagonal(alpha, 0.0)
    return alpha


def simplex_to_logits(p, floor: float = 1e-12) -> np.ndarray:
    """Logits (reference = first entry) for a probability vector."""
    p = np.clip(np.asarray(p, dtype=float), floor, None)
    return np.log(p[1:] / p[0])


def logits_to_simplex(logits) -> np.ndarray:
    """Probability vector from reference-cell logits (first entry's logit 0)."""
    full = np.concatenate([[0.0], np.asarray(logits, dtype=float)])
    full -= full.max()
    e = np.exp(full)
    return e / e.sum()


def stationary_distribution(tpm, tol: float = 1e-9) -> np.ndarray:
    """Solve delta @ tpm = delta, sum(delta) = 1, delta >= 0.

    Solves the linear system (tpm^T - I with a normalization row) rather than
    an eigendecomposition, so the result is deterministic and real. Raises
    NumericalError when the chain is reducible/degenerate enough that the
    system is singular or the solution leaves the simplex beyond `tol`.
    """
    G = np.asarray(tpm, dtype=float)
    n = G.shape[0]
    if G.shape != (n, n):
        raise ConfigError("transition matrix must be square")
    if np.any(np.abs(G.sum(axis=1) - 1.0) > 1e-8):
        raise NumericalError("rows of the transition matrix must sum to 1")
    A = np.vstack([(G.T - np.eye(n))[:-1], np.ones(n)])
    b = np.zeros(n)
    b[-1] = 1.0
    try:
        delta = np.linalg.solve(A, b)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"singular stationary system: {exc}") from exc
    residual = float(np.max(np.abs(delta @ G - delta)))
    if not np.all(np.isfinite(delta)) or residual > tol or np.any(delta < -tol):
        raise NumericalError(
            f"no valid stationary distribution (residual {residual:.3g}, "
            f"min entry {delta.min():.3g}); the chain may be reducible"
        )
    delta = np.clip(delta, 0.0, None)
    return delta / delta.sum()


def emission_parameter_count(schema, n_states: int) -> int:
    """Free emission parameters: family parameter count times N, per variable."""
    return sum(len(FAMILY_PARAM_NAMES[family]) for _, family in schema) * n_states


def count_free_parameters(spec) -> int:
    """Total free parameters of a model specification.

    emission params + K * N(N-1) transition logits + K(N-1) initial-state
    logits + (K-1) mixture logits + covariate-effect logits (0, N(N-1), or
    K * N(N-1) depending on the mode).
    """
    N, K = spec.n_states, spec.n_contexts
    n = emission_parameter_count(spec.schema, N)
    n += K * N * (N - 1)
    n += K * (N - 1)
    n += K - 1
    if spec.covariate_mode == "common":
        n += N * (N - 1)
    elif spec.covariate_mode == "context":
        n += K * N * (N - 1)
    return n
