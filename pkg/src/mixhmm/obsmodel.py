"""Observation records and state-dependent emission distributions.

Observations are per-event vectors of P variables, each modelled by one of
four univariate families (conditionally independent given the latent state):

* ``gamma``    -- positive reals, parameterised by mean and sd
* ``poisson``  -- counts, parameterised by the rate
* ``vonmises`` -- angles in (-pi, pi], location fixed at 0, free concentration
* ``beta``     -- values in [0, 1] (boundary values are clamped by ``BETA_EPS``
  before density evaluation)

Missing values are represented by NaN and contribute a factor of 1 to every
joint density.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np
from scipy import special, stats

from .errors import DataError, SupportError

# Clamp applied to beta-family observations at the support boundary: circular
# variance is exactly 0 for straight-line headings, where the beta density is
# unbounded or zero.
BETA_EPS = 1e-6

FAMILIES = ("gamma", "poisson", "vonmises", "beta")

# Free parameters per family, in working-vector order. All are positive and
# are optimized on the log scale. The von Mises location is identically 0 and
# never estimated.
FAMILY_PARAM_NAMES: Dict[str, Tuple[str, ...]] = {
    "gamma": ("mean", "sd"),
    "poisson": ("rate",),
    "vonmises": ("kappa",),
    "beta": ("a", "b"),
}

Schema = Tuple[Tuple[str, str], ...]


def normalize_schema(schema: Sequence[Tuple[str, str]]) -> Schema:
    """Validate a (name, family) schema and return it as a tuple."""
    out = []
    seen = set()
    for entry in schema:
        name, family = entry
        if family not in FAMILIES:
            raise DataError(f"unknown family {family!r} for variable {name!r}")
        if name in seen:
            raise DataError(f"duplicate variable name {name!r} in schema")
        seen.add(name)
        out.append((str(name), str(family)))
    if not out:
        raise DataError("schema must declare at least one variable")
    return tuple(out)


@dataclass
class EventObservation:
    """One event: a length-P value vector (NaN = missing) and an exposure flag."""

    values: np.ndarray
    covariate_flag: bool = False

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 1:
            raise DataError("event values must be a 1-d vector")
        self.covariate_flag = bool(self.covariate_flag)


@dataclass
class Series:
    """An ordered observation sequence for one individual."""

    id: str
    events: List[EventObservation]

    def __post_init__(self):
        if len(self.events) == 0:
            raise DataError(f"series {self.id!r} has no events")

    def __len__(self) -> int:
        return len(self.events)

    @property
    def values(self) -> np.ndarray:
        """(D, P) value matrix with NaN for missing entries."""
        return np.stack([e.values for e in self.events])

    @property
    def exposed(self) -> np.ndarray:
        """(D,) boolean exposure flags."""
        return np.array([e.covariate_flag for e in self.events], dtype=bool)


@dataclass
class SeriesSet:
    """All observation series plus the shared variable schema."""

    series: List[Series]
    schema: Schema

    def __post_init__(self):
        self.schema = normalize_schema(self.schema)
        P = len(self.schema)
        for s in self.series:
            for d, e in enumerate(s.events):
                if e.values.shape != (P,):
                    raise DataError(
                        f"series {s.id!r} event {d + 1}: expected {P} values, "
                        f"got {e.values.shape}"
                    )

    @property
    def n_series(self) -> int:
        return len(self.series)

    @property
    def n_variables(self) -> int:
        return len(self.schema)

    @property
    def n_events(self) -> int:
        return sum(len(s) for s in self.series)

    def variable_index(self, name: str) -> int:
        for p, (n, _) in enumerate(self.schema):
            if n == name:
                return p
        raise KeyError(f"no variable named {name!r}")

    def validate_support(self) -> None:
        """Raise SupportError at the first present value outside its support."""
        for s in self.series:
            for d, e in enumerate(s.events):
                for p, (name, family) in enumerate(self.schema):
                    x = e.values[p]
                    if np.isnan(x):
                        continue
                    if not value_in_support(family, x):
                        raise SupportError(
                            f"series {s.id!r}, event {d + 1}, variable {name!r}: "
                            f"value {x!r} outside {family} support"
                        )

    def select_variables(self, names: Sequence[str]) -> "SeriesSet":
        """Project onto a subset of variables (schema order follows `names`)."""
        idx = [self.variable_index(n) for n in names]
        schema = tuple(self.schema[i] for i in idx)
        series = [
            Series(
                s.id,
                [EventObservation(e.values[idx], e.covariate_flag) for e in s.events],
            )
            for s in self.series
        ]
        return SeriesSet(series, schema)

    def drop_variable(self, name: str) -> "SeriesSet":
        keep = [n for n, _ in self.schema if n != name]
        if len(keep) == len(self.schema):
            raise KeyError(f"no variable named {name!r}")
        return self.select_variables(keep)

    def mask_variable(self, name: str) -> "SeriesSet":
        """Return a copy with the named variable missing in every event."""
        p = self.variable_index(name)
        series = []
        for s in self.series:
            events = []
            for e in s.events:
                v = e.values.copy()
                v[p] = np.nan
                events.append(EventObservation(v, e.covariate_flag))
            series.append(Series(s.id, events))
        return SeriesSet(series, self.schema)


def value_in_support(family: str, x: float) -> bool:
    """Whether a (present) value lies in the family's support."""
    if not np.isfinite(x):
        return False
    if family == "gamma":
        return x > 0
    if family == "poisson":
        return x >= 0 and float(x) == int(x)
    if family == "vonmises":
        return -np.pi < x <= np.pi
    if family == "beta":
        return 0.0 <= x <= 1.0
    raise DataError(f"unknown family {family!r}")


def gamma_mean_sd_to_shape_scale(mean: float, sd: float) -> Tuple[float, float]:
    """Convert a gamma (mean, sd) pair to the (shape, scale) parameterisation.

    shape = mean^2 / sd^2 and scale = sd^2 / mean, so that
    shape * scale = mean and shape * scale^2 = sd^2.
    """
    if mean <= 0 or sd <= 0:
        raise DataError(f"gamma mean and sd must be positive, got ({mean}, {sd})")
    return mean**2 / sd**2, sd**2 / mean


@dataclass
class EmissionParams:
    """State-dependent emission parameters for every variable in a schema.

    ``blocks[p]`` maps each parameter name of variable p's family to a
    length-N array over states, e.g. ``{"mean": array(N), "sd": array(N)}``.
    """

    schema: Schema
    blocks: List[Dict[str, np.ndarray]] = field(default_factory=list)

    def __post_init__(self):
        self.schema = normalize_schema(self.schema)
        if len(self.blocks) != len(self.schema):
            raise DataError(
                f"{len(self.blocks)} parameter blocks for {len(self.schema)} variables"
            )
        n_states = None
        for (name, family), block in zip(self.schema, self.blocks):
            expected = FAMILY_PARAM_NAMES[family]
            if tuple(block.keys()) != expected:
                raise DataError(
                    f"variable {name!r}: expected parameters {expected}, "
                    f"got {tuple(block.keys())}"
                )
            for key in expected:
                arr = np.asarray(block[key], dtype=float)
                block[key] = arr
                if arr.ndim != 1:
                    raise DataError(f"variable {name!r}: parameter {key} must be 1-d")
                if n_states is None:
                    n_states = arr.size
                elif arr.size != n_states:
                    raise DataError("inconsistent state counts across parameter arrays")

    @property
    def n_states(self) -> int:
        return next(iter(self.blocks[0].values())).size

    def validate(self) -> None:
        """Check the positivity constraints on every parameter."""
        for (name, _), block in zip(self.schema, self.blocks):
            for key, arr in block.items():
                if not np.all(np.isfinite(arr)) or np.any(arr <= 0):
                    raise DataError(
                        f"variable {name!r}: parameter {key} must be positive "
                        f"and finite, got {arr}"
                    )

    def permute_states(self, perm: Sequence[int]) -> "EmissionParams":
        """Reorder states so new state i is old state perm[i]."""
        perm = np.asarray(perm, dtype=int)
        blocks = [
            {key: arr[perm].copy() for key, arr in block.items()}
            for block in self.blocks
        ]
        return EmissionParams(self.schema, blocks)


def _clamp_beta(x):
    return np.clip(x, BETA_EPS, 1.0 - BETA_EPS)


def log_density(
    variable_index: int, state: int, value: float, params: EmissionParams
) -> float:
    """Log density/pmf of one variable's value given the latent state.

    Raises SupportError for values outside the family support (which is a
    different situation from a missing value; see ``event_log_density``).
    """
    name, family = params.schema[variable_index]
    block = params.blocks[variable_index]
    if not value_in_support(family, value):
        raise SupportError(
            f"variable {name!r}: value {value!r} outside {family} support"
        )
    if family == "gamma":
        shape, scale = gamma_mean_sd_to_shape_scale(
            block["mean"][state], block["sd"][state]
        )
        return float(stats.gamma.logpdf(value, a=shape, scale=scale))
    if family == "poisson":
        return float(stats.poisson.logpmf(int(value), block["rate"][state]))
    if family == "vonmises":
        kappa = block["kappa"][state]
        # log I0(kappa) via the exponentially scaled Bessel function: stable
        # for the large concentrations a near-degenerate state can produce.
        log_i0 = np.log(special.i0e(kappa)) + kappa
        return float(kappa * np.cos(value) - np.log(2 * np.pi) - log_i0)
    if family == "beta":
        x = _clamp_beta(value)
        return float(stats.beta.logpdf(x, block["a"][state], block["b"][state]))
    raise DataError(f"unknown family {family!r}")


def event_log_density(
    event: EventObservation, state: int, params: EmissionParams
) -> float:
    """Joint log density of one event given the state.

    Present variables multiply (contemporaneous conditional independence);
    missing variables contribute a factor of exactly 1. An event with every
    variable missing therefore has log density 0.
    """
    total = 0.0
    for p in range(len(params.schema)):
        x = event.values[p]
        if np.isnan(x):
            continue
        total += log_density(p, state, x, params)
    return total
