"""Exact ground truth on tabular environments.

Backward-induction soft values with outcome-based reward (all reward at the
terminating transition, r(s_T, terminal) = -E(s_T)), the induced optimal
policy, terminal marginals, the energy-tilted target with its normalizer,
and the mis-specified target obtained when the scalar reward is
exponentiated before entering the tilt.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .tabular import TabularEnv, tabular_enumerate


@dataclass
class OracleTables:
    v_soft: np.ndarray                  # per state
    q_soft: list[np.ndarray]            # per state, aligned with children
    pi_star: list[np.ndarray]           # per state, probabilities over children
    tilted: np.ndarray                  # over terminal states (env order)
    wrong_tilted: np.ndarray            # over terminal states (env order)
    log_z: float


def soft_values(env: TabularEnv) -> tuple[np.ndarray, list[np.ndarray]]:
    """Entropy-regularized optimal values via backward induction.

    V(terminal marker) = 0, so for a layer-T state the only transition gives
    Q(s_T, terminal) = -E(s_T) and V(s_T) = -E(s_T) (a single forced child).
    """
    alpha = env.alpha
    v = np.zeros(env.n_states)
    q: list[np.ndarray] = [np.zeros(0)] * env.n_states
    for s in env.layers[env.horizon]:
        q[s] = np.array([-env.energy[s]])
        v[s] = -env.energy[s]
    for t in range(env.horizon - 1, -1, -1):
        for s in env.layers[t]:
            ch = env.children[s]
            qs = np.array([v[c] for c in ch])  # zero intermediate reward
            q[s] = qs
            v[s] = alpha * logsumexp(env.log_prior[s] + qs / alpha)
    return v, q


def optimal_policy(
    env: TabularEnv, v_soft: np.ndarray, q_soft: list[np.ndarray]
) -> list[np.ndarray]:
    """pi*(s'|s) = prior(s'|s) exp((Q(s,s') - V(s)) / alpha), per-state normalized."""
    pi: list[np.ndarray] = [np.zeros(0)] * env.n_states
    for t in range(env.horizon):
        for s in env.layers[t]:
            logp = env.log_prior[s] + (q_soft[s] - v_soft[s]) / env.alpha
            p = np.exp(logp)
            p = p / p.sum()
            pi[s] = p
    return pi


def terminal_marginal(env: TabularEnv, policy_table: list[np.ndarray]) -> np.ndarray:
    """Probability of ending at each terminal state (env terminal order)."""
    mass = np.zeros(env.n_states)
    mass[0] = 1.0
    for t in range(env.horizon):
        for s in env.layers[t]:
            for pos, c in enumerate(env.children[s]):
                mass[c] += mass[s] * policy_table[s][pos]
    out = np.array([mass[s] for s in env.terminal_states])
    return out


def tilted_target(env: TabularEnv) -> tuple[np.ndarray, float]:
    """Target proportional to prior-marginal * exp(-E/alpha), plus log normalizer."""
    prior_pi = [np.exp(env.log_prior[s]) if len(env.children[s]) else np.zeros(0)
                for s in range(env.n_states)]
    prior_marg = terminal_marginal(env, prior_pi)
    energies = env.terminal_energies()
    logits = np.log(prior_marg) - energies / env.alpha
    log_z = float(logsumexp(logits))
    return np.exp(logits - log_z), log_z


def wrong_tilted_target(env: TabularEnv) -> np.ndarray:
    """Target with the scalar reward exponentiated before tilting:
    proportional to prior-marginal * exp(exp(-E)/alpha)."""
    prior_pi = [np.exp(env.log_prior[s]) if len(env.children[s]) else np.zeros(0)
                for s in range(env.n_states)]
    prior_marg = terminal_marginal(env, prior_pi)
    energies = env.terminal_energies()
    logits = np.log(prior_marg) + np.exp(-energies) / env.alpha
    return np.exp(logits - logsumexp(logits))


def oracle_tables(env: TabularEnv) -> OracleTables:
    v, q = soft_values(env)
    pi = optimal_policy(env, v, q)
    tilted, log_z = tilted_target(env)
    return OracleTables(
        v_soft=v,
        q_soft=q,
        pi_star=pi,
        tilted=tilted,
        wrong_tilted=wrong_tilted_target(env),
        log_z=log_z,
    )


def kl_objective_value(env: TabularEnv, policy_table: list[np.ndarray]) -> float:
    """Exact J(pi) = E_pi[-E(s_T)] - alpha * E_pi[log(pi/prior)] by enumeration."""
    total = 0.0
    for path, _ in tabular_enumerate(env):
        logp = 0.0
        logq = 0.0
        for s, c in zip(path[:-1], path[1:]):
            pos = env.child_pos(s, c)
            logp += np.log(policy_table[s][pos])
            logq += float(env.log_prior[s][pos])
        p = np.exp(logp)
        total += p * (-env.energy[path[-1]] - env.alpha * (logp - logq))
    return float(total)


def kl_objective_gradient_logits(
    env: TabularEnv, logits: np.ndarray, alpha: float | None = None
) -> np.ndarray:
    """Analytic score-function gradient of J w.r.t. per-edge softmax logits.

    grad J = E_pi[(-E(s_T) - alpha * log(pi(tau)/prior(tau))) * grad log pi(tau)],
    computed exactly over the enumerated trajectory distribution.
    """
    if alpha is None:
        alpha = env.alpha
    policy = softmax_policy(env, logits)
    grad = np.zeros(env.n_edges)
    for path, _ in tabular_enumerate(env):
        logp = 0.0
        logq = 0.0
        score = np.zeros(env.n_edges)
        for s, c in zip(path[:-1], path[1:]):
            pos = env.child_pos(s, c)
            logp += np.log(policy[s][pos])
            logq += float(env.log_prior[s][pos])
            base = int(env.edge_offset[s])
            score[base + pos] += 1.0
            score[base : base + len(env.children[s])] -= policy[s]
        ret = -env.energy[path[-1]] - alpha * (logp - logq)
        grad += np.exp(logp) * ret * score
    return grad


def softmax_policy(env: TabularEnv, logits: np.ndarray) -> list[np.ndarray]:
    """Per-state softmax over the flat edge-logit vector."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.shape != (env.n_edges,):
        raise ValueError(f"expected {env.n_edges} edge logits, got {logits.shape}")
    out: list[np.ndarray] = [np.zeros(0)] * env.n_states
    for s in range(env.n_states):
        ch = env.children[s]
        if not ch:
            continue
        row = logits[env.edge_offset[s] : env.edge_offset[s] + len(ch)]
        row = row - row.max()
        p = np.exp(row)
        out[s] = p / p.sum()
    return out


def tables_to_json_dict(env: TabularEnv, tables: OracleTables) -> dict:
    return {
        "schema": "tiltrl-oracle-tables/1",
        "terminal_states": env.terminal_states,
        "v_soft": list(map(float, tables.v_soft)),
        "q_soft": [list(map(float, row)) for row in tables.q_soft],
        "pi_star": [list(map(float, row)) for row in tables.pi_star],
        "tilted": list(map(float, tables.tilted)),
        "wrong_tilted": list(map(float, tables.wrong_tilted)),
        "log_z": tables.log_z,
    }


def save_tables_json(env: TabularEnv, tables: OracleTables, path) -> None:
    with open(path, "w") as f:
        json.dump(tables_to_json_dict(env, tables), f, indent=2)
