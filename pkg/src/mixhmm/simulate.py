"""Synthetic data generation from a fully specified model.

The generative mirror of the likelihood: per series draw a context from the
mixture weights, a first state from that context's initial distribution, then
iterate the exposure-appropriate transition matrix and draw each variable
from its state's family. The latent contexts and state paths are returned in
a separate truth record so fitting code can never consume them by accident.

Series are simulated independently, each from its own RNG stream derived from
the master seed (stream = seed + series index), so results are reproducible
under any execution order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ConfigError
from .obsmodel import EventObservation, Series, SeriesSet
from .params import ModelParams, ModelSpec

ExposureWindows = Sequence[Sequence[Tuple[int, int]]]
Missingness = Union[None, Dict[str, float], Sequence[np.ndarray]]


@dataclass
class SimConfig:
    """Everything needed to generate one synthetic SeriesSet.

    ``exposure_windows[w]`` lists half-open 0-based event-index ranges
    ``(start, stop)`` during which series w has the covariate on.
    ``missingness`` is either a per-variable masking probability (dict of
    variable name to probability) or an explicit list of per-series (D, P)
    boolean masks (True = missing).
    """

    spec: ModelSpec
    params: ModelParams
    lengths: Sequence[int]
    exposure_windows: Optional[ExposureWindows] = None
    missingness: Missingness = None
    rng_seed: int = 0
    series_ids: Optional[Sequence[str]] = None

    def __post_init__(self):
        self.lengths = [int(d) for d in self.lengths]
        if any(d < 1 for d in self.lengths):
            raise ConfigError("every series length must be >= 1")
        if self.exposure_windows is not None:
            if len(self.exposure_windows) != len(self.lengths):
                raise ConfigError("need one exposure-window list per series")
            for w, windows in enumerate(self.exposure_windows):
                for start, stop in windows:
                    if not (0 <= start < stop <= self.lengths[w]):
                        raise ConfigError(
                            f"series {w}: window ({start}, {stop}) outside "
                            f"[0, {self.lengths[w]})"
                        )
        if self.series_ids is not None and len(self.series_ids) != len(self.lengths):
            raise ConfigError("need one id per series")


@dataclass
class SimTruth:
    """Latent record for test oracles: true contexts and state paths."""

    contexts: np.ndarray  # (W,) 0-based context per series
    states: List[np.ndarray] = field(default_factory=list)  # (D_w,) 0-based


def _exposure_flags(config: SimConfig, w: int) -> np.ndarray:
    flags = np.zeros(config.lengths[w], dtype=bool)
    if config.exposure_windows is not None:
        for start, stop in config.exposure_windows[w]:
            flags[start:stop] = True
    return flags


def _draw_value(family: str, block, state: int, rng: np.random.Generator) -> float:
    if family == "gamma":
        mean, sd = block["mean"][state], block["sd"][state]
        shape = mean**2 / sd**2
        return float(rng.gamma(shape, sd**2 / mean))
    if family == "poisson":
        return float(rng.poisson(block["rate"][state]))
    if family == "vonmises":
        # numpy implements the Best-Fisher rejection sampler; fold the
        # closed endpoint -pi onto pi to match the (-pi, pi] support.
        x = float(rng.vonmises(0.0, block["kappa"][state]))
        return np.pi if x <= -np.pi else x
    if family == "beta":
        return float(rng.beta(block["a"][state], block["b"][state]))
    raise ConfigError(f"unknown family {family!r}")


def simulate(config: SimConfig) -> Tuple[SeriesSet, SimTruth]:
    """Generate a SeriesSet plus the latent truth record."""
    spec, params = config.spec, config.params
    params.validate(spec)
    n_series = len(config.lengths)
    schema = spec.schema
    P = len(schema)

    tpms = [
        [params.tpm(k, exposed=False), params.tpm(k, exposed=True)]
        for k in range(spec.n_contexts)
    ]

    series: List[Series] = []
    contexts = np.empty(n_series, dtype=int)
    paths: List[np.ndarray] = []
    for w in range(n_series):
        rng = np.random.default_rng(config.rng_seed + w)
        D = config.lengths[w]
        exposed = _exposure_flags(config, w)
        k = int(rng.choice(spec.n_contexts, p=params.pi))
        contexts[w] = k

        states = np.empty(D, dtype=int)
        states[0] = rng.choice(spec.n_states, p=params.delta[k])
        for d in range(1, D):
            row = tpms[k][int(exposed[d])][states[d - 1]]
            states[d] = rng.choice(spec.n_states, p=row)
        paths.append(states)

        values = np.empty((D, P))
        for d in range(D):
            for p in range(P):
                values[d, p] = _draw_value(
                    schema[p][1], params.emissions.blocks[p], states[d], rng
                )

        if config.missingness is not None:
            if isinstance(config.missingness, dict):
                for p, (name, _) in enumerate(schema):
                    prob = float(config.missingness.get(name, 0.0))
                    if prob > 0:
                        mask = rng.random((D,)) < prob
                        values[mask, p] = np.nan
            else:
                mask = np.asarray(config.missingness[w], dtype=bool)
                if mask.shape != (D, P):
                    raise ConfigError(
                        f"series {w}: missingness mask must have shape {(D, P)}"
                    )
                values[mask] = np.nan

        sid = (
            config.series_ids[w]
            if config.series_ids is not None
            else f"sim{w + 1:03d}"
        )
        events = [
            EventObservation(values[d], bool(exposed[d])) for d in range(D)
        ]
        series.append(Series(sid, events))

    return SeriesSet(series, schema), SimTruth(contexts, paths)
