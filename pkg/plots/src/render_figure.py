"""Render a five-panel comparison figure from sampler CSV dumps.

Consumes only the documented artifact contract of the figure-data command:
five sample CSVs with an ``x,y`` header (prior.csv, target.csv, rtb.csv,
reinforce_rtbpaper.csv, reinforce_kl.csv) plus summary.json
(schema tiltrl-figure-summary/1) for panel titles, per-panel mode-weight
total variation, and the mode-weight bar chart.

Usage: render_figure <figure_dir> <out.png>
Exit codes: 0 on success, 1 on missing/unreadable inputs.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

PANEL_NAMES = ["prior", "target", "rtb", "reinforce_rtbpaper", "reinforce_kl"]
DEFAULT_TITLES = {
    "prior": "prior",
    "target": "target",
    "rtb": "rtb",
    "reinforce_rtbpaper": "reinforce_rtbpaper",
    "reinforce_kl": "reinforce_kl",
}


class InputError(Exception):
    pass


def load_samples(path: str) -> np.ndarray:
    """Read an x,y CSV; returns an (n, 2) array (n may be 0)."""
    if not os.path.exists(path):
        raise InputError(f"missing panel CSV: {path}")
    with open(path) as f:
        header = f.readline().strip()
        if header != "x,y":
            raise InputError(f"{path}: expected header 'x,y', got {header!r}")
        rows = [line.split(",") for line in f if line.strip()]
    if not rows:
        return np.empty((0, 2))
    return np.array(rows, dtype=np.float64)


def load_summary(figure_dir: str) -> dict:
    path = os.path.join(figure_dir, "summary.json")
    if not os.path.exists(path):
        return {}
    with open(path) as f:
        data = json.load(f)
    if data.get("schema") != "tiltrl-figure-summary/1":
        raise InputError(f"{path}: unsupported schema {data.get('schema')!r}")
    return data


def shared_limits(panels: dict[str, np.ndarray]) -> tuple[float, float]:
    pts = np.concatenate([p for p in panels.values() if p.size], axis=0)
    if pts.size == 0:
        return (-1.0, 1.0)
    lo = float(pts.min())
    hi = float(pts.max())
    pad = 0.05 * max(hi - lo, 1e-9)
    return lo - pad, hi + pad


def render(figure_dir: str, out_path: str) -> None:
    samples = {
        name: load_samples(os.path.join(figure_dir, f"{name}.csv"))
        for name in PANEL_NAMES
    }
    summary = load_summary(figure_dir)
    panel_meta = {p["name"]: p for p in summary.get("panels", [])}
    lo, hi = shared_limits(samples)

    fig, axes = plt.subplots(2, 3, figsize=(13.5, 8.5), constrained_layout=True)
    for ax, name in zip(axes.ravel(), PANEL_NAMES):
        meta = panel_meta.get(name, {})
        pts = samples[name]
        if pts.size:
            ax.scatter(pts[:, 0], pts[:, 1], s=0.5, alpha=0.2,
                       color="#1f4e79", rasterized=True, linewidths=0)
        else:
            ax.text(0.5, 0.5, "no samples", transform=ax.transAxes,
                    ha="center", va="center", fontsize=12, color="crimson")
        ax.set_xlim(lo, hi)
        ax.set_ylim(lo, hi)
        ax.set_aspect("equal")
        ax.set_title(meta.get("title", DEFAULT_TITLES[name]), fontsize=11)
        if "mode_tv" in meta:
            ax.text(0.02, 0.98, f"mode TV = {meta['mode_tv']:.3f}",
                    transform=ax.transAxes, ha="left", va="top", fontsize=9,
                    bbox=dict(boxstyle="round", facecolor="white", alpha=0.8))

    bar_ax = axes.ravel()[5]
    target_w = summary.get("target_weights")
    bars = [(panel_meta[n]["title"], panel_meta[n]["mode_weights"])
            for n in PANEL_NAMES
            if n in panel_meta and "mode_weights" in panel_meta[n]
            and n not in ("prior", "target")]
    if target_w is not None and bars:
        k = len(target_w)
        x = np.arange(k)
        width = 0.8 / len(bars)
        for i, (title, weights) in enumerate(bars):
            bar_ax.bar(x + (i - (len(bars) - 1) / 2) * width, weights,
                       width=width, label=title)
        bar_ax.plot(x, target_w, "k_", markersize=9, label="target")
        bar_ax.set_xlabel("mode index")
        bar_ax.set_ylabel("weight")
        bar_ax.set_title("mode weights", fontsize=11)
        bar_ax.legend(fontsize=7, loc="upper left")
    else:
        bar_ax.axis("off")
        bar_ax.text(0.5, 0.5, "no mode-weight data", transform=bar_ax.transAxes,
                    ha="center", va="center", fontsize=11, color="gray")

    fig.savefig(out_path, dpi=150)
    plt.close(fig)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="render_figure",
        description="Render the five-panel sampler comparison figure.",
    )
    parser.add_argument("figure_dir")
    parser.add_argument("out_png")
    args = parser.parse_args(argv)
    try:
        render(args.figure_dir, args.out_png)
    except (InputError, json.JSONDecodeError, OSError) as e:
        print(str(e), file=sys.stderr)
        return 1
    return 0


def main_cli() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_cli()
