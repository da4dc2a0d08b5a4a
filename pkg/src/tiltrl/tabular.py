"""Fully enumerable layered finite-horizon MDPs.

States are globally indexed ints arranged in layers 0..T; every state in
layer T transitions only to the terminal marker. Edges carry prior
log-probabilities; terminal states carry energies.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np


class MalformedEnvError(ValueError):
    """The layered-MDP invariants are violated."""


@dataclass(frozen=True)
class TabularEnv:
    horizon: int
    layers: list[list[int]]            # state ids per layer, 0..horizon
    children: list[list[int]]          # per state id; empty only at layer T
    log_prior: list[np.ndarray]        # per state id, aligned with children
    energy: np.ndarray                 # per state id (meaningful at layer T)
    alpha: float
    edge_offset: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if self.alpha <= 0:
            raise MalformedEnvError("alpha must be > 0")
        if len(self.layers) != self.horizon + 1:
            raise MalformedEnvError("layers must cover 0..horizon")
        if self.layers[0] != [0]:
            raise MalformedEnvError("layer 0 must be the single initial state 0")
        seen = [s for layer in self.layers for s in layer]
        if sorted(seen) != list(range(self.n_states)):
            raise MalformedEnvError("states must be 0..S-1 across layers")
        layer_of = np.empty(self.n_states, dtype=np.int64)
        for t, layer in enumerate(self.layers):
            for s in layer:
                layer_of[s] = t
        for s in range(self.n_states):
            ch = self.children[s]
            if layer_of[s] < self.horizon:
                if not ch:
                    raise MalformedEnvError(f"state {s} has no children before layer T")
                for c in ch:
                    if layer_of[c] != layer_of[s] + 1:
                        raise MalformedEnvError(f"edge {s}->{c} skips a layer")
                row = np.asarray(self.log_prior[s], dtype=np.float64)
                if row.shape != (len(ch),):
                    raise MalformedEnvError(f"prior row of state {s} misaligned")
                if abs(np.exp(row).sum() - 1.0) > 1e-9:
                    raise MalformedEnvError(f"prior row of state {s} not normalized")
            elif ch:
                raise MalformedEnvError(f"layer-T state {s} must only reach terminal")
        offsets = np.zeros(self.n_states + 1, dtype=np.int64)
        for s in range(self.n_states):
            offsets[s + 1] = offsets[s] + len(self.children[s])
        object.__setattr__(self, "edge_offset", offsets)

    @property
    def n_states(self) -> int:
        return sum(len(layer) for layer in self.layers)

    @property
    def n_edges(self) -> int:
        return int(self.edge_offset[-1])

    @property
    def terminal_states(self) -> list[int]:
        return list(self.layers[self.horizon])

    def terminal_energies(self) -> np.ndarray:
        return np.asarray([self.energy[s] for s in self.terminal_states])

    def edge_index(self, s: int, child_pos: int) -> int:
        return int(self.edge_offset[s]) + child_pos

    def child_pos(self, s: int, s_next: int) -> int:
        return self.children[s].index(s_next)


def tabular_enumerate(env: TabularEnv) -> list[tuple[list[int], float]]:
    """All complete root-to-terminal paths with their prior log-probabilities."""
    paths: list[tuple[list[int], float]] = []

    def rec(s: int, t: int, prefix: list[int], logp: float) -> None:
        if t == env.horizon:
            paths.append((prefix, logp))
            return
        row = env.log_prior[s]
        for pos, c in enumerate(env.children[s]):
            rec(c, t + 1, prefix + [c], logp + float(row[pos]))

    rec(0, 0, [0], 0.0)
    return paths


def random_env(
    rng: np.random.Generator,
    max_depth: int = 4,
    max_branch: int = 4,
    alpha: float | None = None,
    energy_scale: float = 2.0,
) -> TabularEnv:
    """Random layered tree-shaped env for property tests."""
    depth = int(rng.integers(1, max_depth + 1))
    layers: list[list[int]] = [[0]]
    children: list[list[int]] = [[]]
    log_prior: list[np.ndarray] = [np.zeros(0)]
    next_id = 1
    for t in range(depth):
        new_layer: list[int] = []
        for s in layers[t]:
            n_ch = int(rng.integers(1, max_branch + 1))
            ch = list(range(next_id, next_id + n_ch))
            next_id += n_ch
            new_layer.extend(ch)
            children[s] = ch
            p = rng.dirichlet(np.ones(n_ch) * 2.0)
            log_prior[s] = np.log(p)
            for _ in ch:
                children.append([])
                log_prior.append(np.zeros(0))
        layers.append(new_layer)
    energy = np.zeros(next_id)
    for s in layers[depth]:
        energy[s] = rng.uniform(0.0, energy_scale)
    if alpha is None:
        alpha = float(rng.uniform(0.1, 10.0))
    return TabularEnv(
        horizon=depth,
        layers=layers,
        children=children,
        log_prior=log_prior,
        energy=energy,
        alpha=alpha,
    )


def two_terminal_env(energies=(0.0, 2.0), prior=(0.5, 0.5), alpha: float = 1.0) -> TabularEnv:
    """Depth-1 env with two terminal children."""
    p = np.asarray(prior, dtype=np.float64)
    return TabularEnv(
        horizon=1,
        layers=[[0], [1, 2]],
        children=[[1, 2], [], []],
        log_prior=[np.log(p), np.zeros(0), np.zeros(0)],
        energy=np.array([0.0, float(energies[0]), float(energies[1])]),
        alpha=alpha,
    )


# --- JSON fixture schema (documented in README) ----------------------------

def to_json_dict(env: TabularEnv) -> dict:
    return {
        "schema": "tiltrl-tabular-env/1",
        "horizon": env.horizon,
        "layers": [list(layer) for layer in env.layers],
        "children": [list(ch) for ch in env.children],
        "log_prior": [list(map(float, row)) for row in env.log_prior],
        "energy": list(map(float, env.energy)),
        "alpha": env.alpha,
    }


def from_json_dict(data: dict) -> TabularEnv:
    if data.get("schema") != "tiltrl-tabular-env/1":
        raise ValueError(f"unsupported tabular env schema: {data.get('schema')!r}")
    return TabularEnv(
        horizon=int(data["horizon"]),
        layers=[list(map(int, layer)) for layer in data["layers"]],
        children=[list(map(int, ch)) for ch in data["children"]],
        log_prior=[np.asarray(row, dtype=np.float64) for row in data["log_prior"]],
        energy=np.asarray(data["energy"], dtype=np.float64),
        alpha=float(data["alpha"]),
    )


def save_json(env: TabularEnv, path) -> None:
    with open(path, "w") as f:
        json.dump(to_json_dict(env), f, indent=2)


def load_json(path) -> TabularEnv:
    with open(path) as f:
        return from_json_dict(json.load(f))
