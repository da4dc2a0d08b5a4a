"""Training losses: relative-trajectory-balance, the path-consistency form it
is proportional to, off-policy REINFORCE with the KL term folded into the
reward (with self-normalized importance weights), and the on-policy variant
with an exponentiated scalar reward and squared log-ratio penalty.

All losses are built on a single tape per batch; advantages and importance
weights enter as stop-gradient constants, matching the algorithm listings.
"""

from __future__ import annotations

import numpy as np
from .autodiff import BatchLoss, ParamStore, Tape, value_and_gradient
from .tabular import TabularEnv, tabular_enumerate
from .trajectory import Trajectory


def rtb_residual(traj: Trajectory, log_z: float, alpha: float) -> float:
    """log prod prior - log Z - log prod model - E/alpha (cached densities)."""
    if alpha <= 0:
        raise ValueError("alpha must be > 0")
    return (
        traj.total_logp_prior()
        - log_z
        - traj.total_logp_model()
        - traj.energy / alpha
    )


def tpcl_residual(traj: Trajectory, v0: float, alpha: float) -> float:
    """-v0 + sum of rewards + alpha * sum log(prior/model), with the outcome
    reward convention (sum of rewards = -E(s_T))."""
    if alpha <= 0:
        raise ValueError("alpha must be > 0")
    return (
        -v0
        - traj.energy
        + alpha * (traj.total_logp_prior() - traj.total_logp_model())
    )


def _require_batch(batch: list[Trajectory]) -> None:
    if not batch:
        raise ValueError("empty batch")


def _batch_model_logp(policy, store: ParamStore, batch: list[Trajectory]) -> np.ndarray:
    """Numeric log pi_phi(tau) under the current parameters.

    Uses the batched path when the policy provides one so values are
    bit-identical to sampling-time caches when the parameters are unchanged.
    """
    if hasattr(policy, "traj_logp_batch"):
        return policy.traj_logp_batch(store, batch)
    return np.array([policy.traj_logp(store, tr) for tr in batch])


def _model_logp_nodes(tape: Tape, policy, store: ParamStore,
                      batch: list[Trajectory]) -> list[int]:
    """One differentiable log pi_phi(tau) node per trajectory."""
    if hasattr(policy, "batch_logp_nodes"):
        return policy.batch_logp_nodes(tape, store, batch)
    return [policy.traj_logp_node(tape, store, tr) for tr in batch]


def snis_weights(log_ratios: np.ndarray, horizon: int) -> np.ndarray:
    """Self-normalized weights proportional to ratio^(1/horizon).

    Computed in log space with max subtraction; the horizon counts stochastic
    transitions only. Weights sum to exactly 1 (the largest weight absorbs
    the normalization roundoff).
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    log_w = np.asarray(log_ratios, dtype=np.float64) / horizon
    if not np.all(np.isfinite(log_w)):
        raise FloatingPointError(
            "non-finite SNIS log-ratios; normalize in log space"
        )
    log_w = log_w - log_w.max()
    w = np.exp(log_w)
    total = w.sum()
    if total <= 0.0 or not np.isfinite(total):
        raise FloatingPointError(
            "SNIS normalizer underflowed; normalize in log space"
        )
    w = w / total
    # absorb normalization roundoff into one of the largest weights; a single
    # index can cycle (pairwise summation rounds the correction away), so on
    # stall move to the next candidate, falling back to one-ulp nudges
    order = np.argsort(w)[::-1]
    for j in order:
        for _ in range(4):
            gap = 1.0 - w.sum()
            if gap == 0.0:
                return w
            if w[j] + gap != w[j]:
                w[j] += gap
            else:
                w[j] = np.nextafter(w[j], np.inf if gap > 0.0 else -np.inf)
    raise FloatingPointError("could not round SNIS weights to an exact sum")


def rtb_loss(policy, store: ParamStore, batch: list[Trajectory], alpha: float,
             logz_name: str = "log_z") -> BatchLoss:
    """0.5 * mean squared residual; gradient w.r.t. the policy and log Z."""
    _require_batch(batch)
    if alpha <= 0:
        raise ValueError("alpha must be > 0")
    tape = Tape()
    logz_node = tape.param(store.index_of(logz_name))
    residuals = np.empty(len(batch))
    sq_nodes = []
    log_z = float(store.get(logz_name)[0])
    model_nodes = _model_logp_nodes(tape, policy, store, batch)
    for i, traj in enumerate(batch):
        model_node = model_nodes[i]
        fixed = tape.const(traj.total_logp_prior() - traj.energy / alpha)
        delta = tape.sub(tape.sub(fixed, logz_node), model_node)
        sq_nodes.append(tape.square(delta))
        residuals[i] = rtb_residual(traj, log_z, alpha)
    total = tape.sum_nodes(sq_nodes)
    tape.mul(total, tape.const(0.5 / len(batch)))
    value, grad = value_and_gradient(tape, store)
    return BatchLoss(value=value, gradient=grad, per_trajectory_residuals=residuals)


def tpcl_loss(policy, store: ParamStore, batch: list[Trajectory], alpha: float,
              v0_name: str = "v0") -> BatchLoss:
    """0.5 * mean squared path-consistency residual with the scalar v0."""
    _require_batch(batch)
    if alpha <= 0:
        raise ValueError("alpha must be > 0")
    tape = Tape()
    v0_node = tape.param(store.index_of(v0_name))
    alpha_node = tape.const(alpha)
    residuals = np.empty(len(batch))
    sq_nodes = []
    v0 = float(store.get(v0_name)[0])
    model_nodes = _model_logp_nodes(tape, policy, store, batch)
    for i, traj in enumerate(batch):
        model_node = model_nodes[i]
        ratio = tape.sub(tape.const(traj.total_logp_prior()), model_node)
        delta = tape.sub(
            tape.add(tape.const(-traj.energy), tape.mul(alpha_node, ratio)),
            v0_node,
        )
        sq_nodes.append(tape.square(delta))
        residuals[i] = tpcl_residual(traj, v0, alpha)
    total = tape.sum_nodes(sq_nodes)
    tape.mul(total, tape.const(0.5 / len(batch)))
    value, grad = value_and_gradient(tape, store)
    return BatchLoss(value=value, gradient=grad, per_trajectory_residuals=residuals)


def reinforce_kl_offpolicy(policy, store: ParamStore, batch: list[Trajectory],
                           alpha: float) -> BatchLoss:
    """Off-policy score-function loss with the KL log-ratio folded into the
    reward and self-normalized importance weights.

    Rewards and weights re-evaluate log pi_phi at the current parameters; the
    weighted advantages enter the tape as stop-gradient constants.
    """
    _require_batch(batch)
    if alpha <= 0:
        raise ValueError("alpha must be > 0")
    n = len(batch)
    horizon = batch[0].horizon
    lp_model = _batch_model_logp(policy, store, batch)
    lp_prior = np.array([tr.total_logp_prior() for tr in batch])
    lp_behavior = np.array([tr.total_logp_behavior() for tr in batch])
    energies = np.array([tr.energy for tr in batch])
    rewards = -energies - alpha * (lp_model - lp_prior)
    advantages = rewards - rewards.mean()
    weights = snis_weights(lp_model - lp_behavior, horizon)
    tape = Tape()
    terms = []
    model_nodes = _model_logp_nodes(tape, policy, store, batch)
    for i in range(n):
        coeff = tape.sg(weights[i] * advantages[i])
        terms.append(tape.mul(coeff, model_nodes[i]))
    total = tape.sum_nodes(terms)
    tape.mul(total, tape.const(-1.0 / n))
    value, grad = value_and_gradient(tape, store)
    return BatchLoss(value=value, gradient=grad)


def reinforce_kl_rtbpaper(policy, store: ParamStore, batch: list[Trajectory],
                          lam: float) -> BatchLoss:
    """On-policy score-function loss with reward exp(-E) and a squared
    log-ratio penalty of strength lam."""
    _require_batch(batch)
    n = len(batch)
    rewards = np.exp(-np.array([tr.energy for tr in batch]))
    advantages = rewards - rewards.mean()
    tape = Tape()
    half_lam = tape.const(0.5 * lam)
    terms = []
    model_nodes = _model_logp_nodes(tape, policy, store, batch)
    for i, traj in enumerate(batch):
        model_node = model_nodes[i]
        score = tape.mul(tape.sg(-advantages[i]), model_node)
        ratio = tape.sub(model_node, tape.const(traj.total_logp_prior()))
        penalty = tape.mul(half_lam, tape.square(ratio))
        terms.append(tape.add(score, penalty))
    total = tape.sum_nodes(terms)
    tape.mul(total, tape.const(1.0 / n))
    value, grad = value_and_gradient(tape, store)
    return BatchLoss(value=value, gradient=grad)


def reinforce_kl_enumerated(policy, store: ParamStore, env: TabularEnv,
                            alpha: float) -> BatchLoss:
    """Exact expected score-function loss over the enumerated trajectory
    distribution (importance weights pi_phi/pi_b in closed form, baseline the
    exact mean reward). Gradient equals minus the analytic policy gradient of
    the KL-regularized objective."""
    trajs = []
    for path, logq in tabular_enumerate(env):
        steps = len(path) - 1
        lp = np.zeros(steps + 1)
        lp[:steps] = [
            env.log_prior[s][env.child_pos(s, c)]
            for s, c in zip(path[:-1], path[1:])
        ]
        trajs.append(
            Trajectory(
                states=path,
                logp_prior=lp,
                logp_model=lp.copy(),
                logp_behavior=lp.copy(),
                energy=float(env.energy[path[-1]]),
            )
        )
    lp_model = np.array([policy.traj_logp(store, tr) for tr in trajs])
    lp_prior = np.array([tr.total_logp_prior() for tr in trajs])
    p_model = np.exp(lp_model)
    energies = np.array([tr.energy for tr in trajs])
    rewards = -energies - alpha * (lp_model - lp_prior)
    baseline = float(np.sum(p_model * rewards))
    tape = Tape()
    terms = []
    for i, traj in enumerate(trajs):
        model_node = policy.traj_logp_node(tape, store, traj)
        coeff = tape.sg(-p_model[i] * (rewards[i] - baseline))
        terms.append(tape.mul(coeff, model_node))
    tape.sum_nodes(terms)
    value, grad = value_and_gradient(tape, store)
    return BatchLoss(value=value, gradient=grad)


def gradient_equivalence_check(policy, store: ParamStore, batch: list[Trajectory],
                               alpha: float, log_z: float,
                               baseline: float | None = None) -> float:
    """Max abs difference between alpha * (policy gradient of the squared
    trajectory-balance loss) and the score-function gradient with baseline b
    (default b = alpha * log Z) on the same batch.

    The trajectory-balance gradient here differentiates the residual only
    (no score term through the sampling distribution), which is exactly what
    the squared-loss tape computes on a fixed batch.
    """
    _require_batch(batch)
    n = len(batch)
    lp_model = _batch_model_logp(policy, store, batch)
    lp_prior = np.array([tr.total_logp_prior() for tr in batch])
    energies = np.array([tr.energy for tr in batch])
    if baseline is None:
        baseline = alpha * log_z

    tape_rtb = Tape()
    sq_nodes = []
    model_nodes = _model_logp_nodes(tape_rtb, policy, store, batch)
    for i, traj in enumerate(batch):
        model_node = model_nodes[i]
        fixed = tape_rtb.const(lp_prior[i] - energies[i] / alpha - log_z)
        sq_nodes.append(tape_rtb.square(tape_rtb.sub(fixed, model_node)))
    total = tape_rtb.sum_nodes(sq_nodes)
    tape_rtb.mul(total, tape_rtb.const(0.5 / n))
    _, grad_rtb = value_and_gradient(tape_rtb, store)

    rewards = -energies - alpha * (lp_model - lp_prior)
    tape_rl = Tape()
    terms = []
    model_nodes = _model_logp_nodes(tape_rl, policy, store, batch)
    for i in range(n):
        terms.append(tape_rl.mul(tape_rl.sg(rewards[i] - baseline), model_nodes[i]))
    total = tape_rl.sum_nodes(terms)
    tape_rl.mul(total, tape_rl.const(-1.0 / n))
    _, grad_rl = value_and_gradient(tape_rl, store)

    idx = policy_param_indices(policy, store)
    return float(np.max(np.abs(alpha * grad_rtb[idx] - grad_rl[idx])))


def policy_param_indices(policy, store: ParamStore) -> np.ndarray:
    """Global ParamStore indices of the policy's own parameters."""
    if hasattr(policy, "param_names"):
        names = policy.param_names()
    else:
        names = [policy.name]
    idx: list[int] = []
    for name in names:
        offset, length = store.slice_of(name)
        idx.extend(range(offset, offset + length))
    return np.asarray(idx, dtype=np.int64)
