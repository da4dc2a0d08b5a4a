"""Sample-based evaluation for the mixture env: nearest-mode histograms and
total-variation distances. Unassigned points (farther than 15 sigma from every
center) count against the model as unmatched mass.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .gmm import Gmm

UNASSIGNED_RADIUS_SIGMAS = 15.0  # 3 sigma * 5


@dataclass
class ModeHistogram:
    counts: np.ndarray      # per mode
    unassigned: int

    @property
    def total(self) -> int:
        return int(self.counts.sum()) + self.unassigned

    def normalized(self) -> np.ndarray:
        return self.counts / self.total

    def tv_against(self, weights: np.ndarray) -> float:
        """TV between the normalized histogram and a target weight vector;
        unassigned mass is added in full."""
        p = self.normalized()
        q = np.asarray(weights, dtype=np.float64)
        return 0.5 * float(np.abs(p - q).sum()) + 0.5 * self.unassigned / self.total

    def to_json_dict(self) -> dict:
        return {
            "schema": "tiltrl-mode-histogram/1",
            "counts": [int(c) for c in self.counts],
            "unassigned": self.unassigned,
        }


def mode_histogram(samples: np.ndarray, gmm: Gmm) -> ModeHistogram:
    """Nearest-center assignment in Euclidean distance; ties break to the
    lowest mode index."""
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    if samples.size == 0:
        raise ValueError("empty sample set")
    d2 = np.sum((samples[:, None, :] - gmm.means[None, :, :]) ** 2, axis=-1)
    nearest = np.argmin(d2, axis=1)  # argmin takes the first (lowest) index on ties
    dmin = np.sqrt(d2[np.arange(samples.shape[0]), nearest])
    ok = dmin <= UNASSIGNED_RADIUS_SIGMAS * gmm.sigma
    counts = np.bincount(nearest[ok], minlength=gmm.n_components)
    return ModeHistogram(counts=counts, unassigned=int((~ok).sum()))


def tv_distance(p: np.ndarray, q: np.ndarray) -> float:
    """0.5 * sum |p - q| on the probability simplex."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {q.shape}")
    for name, vec in (("p", p), ("q", q)):
        if abs(vec.sum() - 1.0) > 1e-9:
            raise ValueError(f"{name} does not sum to 1 (tol 1e-9)")
    return 0.5 * float(np.abs(p - q).sum())


def importance_log_z(env, rng: np.random.Generator, n: int = 1_000_000) -> float:
    """log E_prior[exp(-E/alpha)] by sampling the prior mixture directly."""
    from scipy.special import logsumexp

    x = env.prior_gmm.sample(rng, n)
    log_w = -np.asarray(env.energy(x)) / env.alpha
    return float(logsumexp(log_w) - np.log(n))


def logz_report(trained_scalar: float, env, rng: np.random.Generator | None = None,
                n: int = 1_000_000) -> dict:
    """Compare a trained log-normalizer estimate against a reference.

    Tabular envs get the exact enumerated reference; the mixture env gets a
    self-normalized importance-sampling reference from the prior.
    """
    from .tabular import TabularEnv

    if isinstance(env, TabularEnv):
        from .oracle import tilted_target

        _, reference = tilted_target(env)
    else:
        if rng is None:
            rng = np.random.default_rng(0)
        reference = importance_log_z(env, rng, n)
    return {
        "estimate": float(trained_scalar),
        "reference": float(reference),
        "abs_err": abs(float(trained_scalar) - float(reference)),
    }


def save_histogram_json(hist: ModeHistogram, path) -> None:
    with open(path, "w") as f:
        json.dump(hist.to_json_dict(), f, indent=2)


def write_samples_csv(samples: np.ndarray, path) -> None:
    """Samples as CSV with header x,y; 17 significant digits."""
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    with open(path, "w") as f:
        f.write("x,y\n")
        for row in samples:
            f.write(f"{row[0]:.17g},{row[1]:.17g}\n")


def read_samples_csv(path) -> np.ndarray:
    data = np.genfromtxt(path, delimiter=",", skip_header=1)
    return np.atleast_2d(data)
