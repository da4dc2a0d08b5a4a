"""Figure-data generation for the 25-mode mixture example: trains one model
per objective, dumps reference and model samples as CSV panels, and writes a
summary JSON with per-panel mode-weight total variation."""

from __future__ import annotations

import json
import os
from dataclasses import replace

import numpy as np

from .evalmetrics import mode_histogram, write_samples_csv
from .fixtures import gmm25_env
from .train import (
    DivergenceError,
    TrainConfig,
    make_policy,
    metrics_to_csv,
    rng_stream,
    sample_terminals,
    train,
)

N_PANEL_SAMPLES = 100_000

PANEL_TITLES = {
    "prior": "Prior",
    "target": "Tilted target",
    "rtb": "Relative trajectory balance",
    "reinforce_rtbpaper": "On-policy REINFORCE, exponentiated reward",
    "reinforce_kl": "Off-policy REINFORCE, corrected reward",
}

# (iterations, policy learning rate) stages; the second, lower-rate stage
# settles the mode weights after the first finds the modes.
DEFAULT_STAGES = {
    "rtb": [(8000, 1e-3), (4000, 2e-4)],
    "tpcl": [(8000, 1e-3), (4000, 2e-4)],
    "reinforce-kl": [(6000, 1e-3), (6000, 3e-4)],
    "reinforce-rtbpaper": [(8000, 1e-3)],
}


def _stages(objective: str,
            iterations: dict[str, int] | None) -> list[tuple[int, float]]:
    if iterations and objective in iterations:
        return [(iterations[objective], 1e-3)]
    return list(DEFAULT_STAGES[objective])


def _config(objective: str, seed: int, alpha: float,
            iterations: int, lr_policy: float) -> TrainConfig:
    return TrainConfig(
        objective=objective,
        alpha=alpha,
        lam=alpha,
        batch_size=64,
        iterations=iterations,
        lr_policy=lr_policy,
        lr_scalar=1e-1,
        epsilon=0.0,
        seed=seed,
        log_interval=250,
    )


def run_figure(out_dir, seed: int = 11, alpha: float = 1.0,
               n_samples: int = N_PANEL_SAMPLES,
               iterations: dict[str, int] | None = None) -> dict:
    """Train the four objectives on the 25-mode mixture and write the five
    sample panels plus summary.json into out_dir.

    Raises DivergenceError after writing whatever panels completed; the
    summary written so far stays on disk for inspection.
    """
    os.makedirs(out_dir, exist_ok=True)
    env = gmm25_env(alpha=alpha)
    target = env.target_gmm()
    panels: list[dict] = []
    summary = {
        "schema": "tiltrl-figure-summary/1",
        "seed": seed,
        "alpha": alpha,
        "n_samples": n_samples,
        "target_weights": [float(w) for w in env.target_weights],
        "panels": panels,
    }

    def add_panel(name: str, samples: np.ndarray) -> None:
        csv_name = f"{name}.csv"
        write_samples_csv(samples, os.path.join(out_dir, csv_name))
        hist = mode_histogram(samples, env.prior_gmm)
        panels.append(
            {
                "name": name,
                "csv": csv_name,
                "title": PANEL_TITLES[name],
                "mode_tv": hist.tv_against(env.target_weights),
                "mode_weights": [float(w) for w in hist.normalized()],
            }
        )
        _write_summary(out_dir, summary)

    ref_rng = rng_stream(seed, worker_id=2)
    add_panel("prior", env.prior_gmm.sample(ref_rng, n_samples))
    add_panel("target", target.sample(ref_rng, n_samples))

    for objective, panel_name in (
        ("rtb", "rtb"),
        ("tpcl", None),
        ("reinforce-rtbpaper", "reinforce_rtbpaper"),
        ("reinforce-kl", "reinforce_kl"),
    ):
        store = None
        all_metrics = []
        offset = 0
        for k, (n_iter, lr_policy) in enumerate(_stages(objective, iterations)):
            config = _config(objective, seed + 1000 * k, alpha, n_iter, lr_policy)
            try:
                store, metrics = train(config, env, store=store)
            except DivergenceError:
                _write_summary(out_dir, summary)
                raise
            all_metrics.extend(
                replace(row, iteration=row.iteration + offset) for row in metrics
            )
            offset += n_iter
        metrics_to_csv(all_metrics,
                       os.path.join(out_dir, f"metrics_{objective}.csv"))
        policy = make_policy(env, store, config)
        samples = sample_terminals(policy, env, store, n_samples,
                                   rng_stream(seed, worker_id=1))
        if panel_name is None:
            hist = mode_histogram(samples, env.prior_gmm)
            summary[f"{objective}_mode_tv"] = hist.tv_against(env.target_weights)
            _write_summary(out_dir, summary)
        else:
            add_panel(panel_name, samples)
    return summary


def _write_summary(out_dir, summary: dict) -> None:
    path = os.path.join(out_dir, "summary.json")
    tmp = path + ".tmp"
    with open(tmp, "w") as f:
        json.dump(summary, f, indent=2)
    os.replace(tmp, path)
