"""Trajectory container shared by all environments.

A trajectory visits states s_0 .. s_T and then the terminal marker. The three
cached log-density sequences have length T+1: entries 0..T-1 are the
stochastic transitions and the last entry is the forced termination, whose
log-probability is 0 under the deterministic-horizon convention.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class Trajectory:
    states: list
    logp_prior: np.ndarray
    logp_model: np.ndarray
    logp_behavior: np.ndarray
    energy: float

    def __post_init__(self) -> None:
        self.logp_prior = np.asarray(self.logp_prior, dtype=np.float64)
        self.logp_model = np.asarray(self.logp_model, dtype=np.float64)
        self.logp_behavior = np.asarray(self.logp_behavior, dtype=np.float64)
        n = len(self.states)
        for name in ("logp_prior", "logp_model", "logp_behavior"):
            arr = getattr(self, name)
            if arr.shape != (n,):
                raise ValueError(f"{name} must have length {n} (states + terminal)")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite entries")
        if not np.isfinite(self.energy):
            raise ValueError("energy must be finite")

    @property
    def horizon(self) -> int:
        """Number of stochastic transitions (excludes the forced termination)."""
        return len(self.states) - 1

    @property
    def terminal(self):
        return self.states[-1]

    def total_logp_prior(self) -> float:
        return float(np.sum(self.logp_prior))

    def total_logp_model(self) -> float:
        return float(np.sum(self.logp_model))

    def total_logp_behavior(self) -> float:
        return float(np.sum(self.logp_behavior))
