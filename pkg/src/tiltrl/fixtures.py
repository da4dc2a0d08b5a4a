"""Deterministic reference fixtures used by tests, the verify suites and the
figure pipeline: the depth-2 branching-3 tabular env and the 25-mode mixture
diffusion env (5x5 grid on [-1, 1]^2, shared sigma = 0.04 * grid spacing,
10 refinement steps, cosine retained-signal schedule, target weights
proportional to 1..25).
"""

from __future__ import annotations

import numpy as np

from .gmm import Gmm, GmmDiffusionEnv, cosine_schedule
from .tabular import TabularEnv

T2B3_SEED = 20260401


def t2b3(alpha: float = 1.0) -> TabularEnv:
    """Depth-2, branching-3 tree (9 terminals) with seed-specified priors and
    energies."""
    rng = np.random.default_rng(T2B3_SEED)
    layers = [[0], [1, 2, 3], [4, 5, 6, 7, 8, 9, 10, 11, 12]]
    children: list[list[int]] = [[1, 2, 3]]
    log_prior: list[np.ndarray] = [np.log(rng.dirichlet(np.ones(3) * 3.0))]
    for i in range(3):
        children.append([4 + 3 * i, 5 + 3 * i, 6 + 3 * i])
        log_prior.append(np.log(rng.dirichlet(np.ones(3) * 3.0)))
    for _ in range(9):
        children.append([])
        log_prior.append(np.zeros(0))
    energy = np.zeros(13)
    energy[4:] = rng.uniform(0.0, 2.0, size=9)
    return TabularEnv(
        horizon=2,
        layers=layers,
        children=children,
        log_prior=log_prior,
        energy=energy,
        alpha=alpha,
    )


def grid_means(side: int = 5, lo: float = -1.0, hi: float = 1.0) -> np.ndarray:
    axis = np.linspace(lo, hi, side)
    xx, yy = np.meshgrid(axis, axis, indexing="xy")
    return np.stack([xx.ravel(), yy.ravel()], axis=1)


def gmm25_env(alpha: float = 1.0, steps: int = 10) -> GmmDiffusionEnv:
    means = grid_means()
    spacing = 0.5
    sigma = 0.04 * spacing
    k = means.shape[0]
    prior = Gmm(means=means, weights=np.full(k, 1.0 / k), sigma=sigma)
    target_weights = np.arange(1, k + 1, dtype=np.float64)
    target_weights = target_weights / target_weights.sum()
    return GmmDiffusionEnv(
        steps=steps,
        abar=cosine_schedule(steps),
        prior_gmm=prior,
        target_weights=target_weights,
        alpha=alpha,
    )
