"""Optimization loop for all four objectives on both environments.

Behavior trajectories are drawn from a transition-level mixture
(1 - eps) * pi_phi + eps * pi_prior with the mixture density cached exactly.
Runs are deterministic given the seed (counter-based RNG streams).
"""

from __future__ import annotations

import base64
import json
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from .autodiff import EvaluationError, ParamStore
from . import objectives
from .evalmetrics import mode_histogram, tv_distance
from .gmm import GmmDiffusionEnv
from .oracle import oracle_tables, terminal_marginal
from .policy import GmmPolicy, TabularPolicy
from .tabular import TabularEnv
from .trajectory import Trajectory

OBJECTIVES = ("rtb", "tpcl", "reinforce-kl", "reinforce-rtbpaper")


class ConfigError(ValueError):
    """Invalid training configuration; message names the offending field."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss; last good checkpoint was written."""

    def __init__(self, message: str, checkpoint_path=None):
        super().__init__(message)
        self.checkpoint_path = checkpoint_path


@dataclass
class TrainConfig:
    objective: str = "rtb"
    alpha: float = 1.0
    lam: float = 1.0                  # squared-penalty strength, rtbpaper only
    batch_size: int = 64
    iterations: int = 2000
    lr_policy: float = 1e-3
    lr_scalar: float = 1e-1
    epsilon: float = 0.2
    seed: int = 0
    log_interval: int = 50
    hidden: int = 24                  # GMM policy only
    optimizer: str = "adam"           # "adam" | "sgd" (sgd for paired-run checks)

    def validate(self) -> None:
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        if self.alpha <= 0:
            raise ConfigError(f"alpha must be > 0, got {self.alpha}")
        if self.batch_size < 2 and self.objective in ("reinforce-kl", "reinforce-rtbpaper"):
            raise ConfigError("batch_size must be >= 2 for score-function objectives")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.iterations < 1:
            raise ConfigError(f"iterations must be >= 1, got {self.iterations}")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ConfigError(f"epsilon must be in [0, 1], got {self.epsilon}")
        if self.lr_policy <= 0 or self.lr_scalar <= 0:
            raise ConfigError("learning rates must be > 0")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"optimizer must be adam or sgd, got {self.optimizer!r}")


@dataclass
class MetricsRow:
    iteration: int
    loss: float
    logz: float
    tv: float
    gradnorm: float
    seconds: float


# --- Adam -------------------------------------------------------------------

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(m=np.zeros(n), v=np.zeros(n))


def adam_step(params: ParamStore, grad: np.ndarray, state: AdamState,
              lr: float | np.ndarray, beta1: float = 0.9, beta2: float = 0.999,
              eps_hat: float = 1e-8) -> None:
    """In-place Adam update with bias correction."""
    if grad.shape != (params.size,):
        raise ValueError("gradient shape does not match parameter store")
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError("non-finite gradient in adam_step")
    state.t += 1
    state.m = beta1 * state.m + (1.0 - beta1) * grad
    state.v = beta2 * state.v + (1.0 - beta2) * grad * grad
    m_hat = state.m / (1.0 - beta1**state.t)
    v_hat = state.v / (1.0 - beta2**state.t)
    params._values -= lr * m_hat / (np.sqrt(v_hat) + eps_hat)


# --- behavior sampling ------------------------------------------------------

def rng_stream(run_seed: int, worker_id: int = 0, episode_id: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((run_seed, worker_id, episode_id)))


def behavior_sample(policy, env, store: ParamStore, epsilon: float, n: int,
                    rng: np.random.Generator) -> list[Trajectory]:
    """Draw n trajectories from the transition-level mixture of the learned
    policy with the prior, caching all three exact per-step log-densities."""
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError("epsilon must be in [0, 1]")
    if isinstance(env, TabularEnv):
        return _behavior_sample_tabular(policy, env, store, epsilon, n, rng)
    return _behavior_sample_gmm(policy, env, store, epsilon, n, rng)


def _mix_logp(logp_model: np.ndarray, logp_prior: np.ndarray, epsilon: float) -> np.ndarray:
    if epsilon == 0.0:
        return logp_model
    if epsilon == 1.0:
        return logp_prior
    return np.logaddexp(
        np.log1p(-epsilon) + logp_model, np.log(epsilon) + logp_prior
    )


def _behavior_sample_tabular(policy: TabularPolicy, env: TabularEnv, store,
                             epsilon: float, n: int, rng) -> list[Trajectory]:
    tables = policy.tables(store)
    trajs = []
    for _ in range(n):
        s = 0
        states = [0]
        lp_prior = np.zeros(env.horizon + 1)
        lp_model = np.zeros(env.horizon + 1)
        lp_behavior = np.zeros(env.horizon + 1)
        for t in range(env.horizon):
            prior_row = np.exp(env.log_prior[s])
            model_row = tables[s]
            mix = (1.0 - epsilon) * model_row + epsilon * prior_row
            pos = int(rng.choice(len(mix), p=mix / mix.sum()))
            lp_prior[t] = env.log_prior[s][pos]
            lp_model[t] = np.log(model_row[pos])
            if epsilon == 0.0:
                lp_behavior[t] = lp_model[t]
            elif epsilon == 1.0:
                lp_behavior[t] = lp_prior[t]
            else:
                lp_behavior[t] = np.log(mix[pos])
            s = env.children[s][pos]
            states.append(s)
        trajs.append(
            Trajectory(
                states=states,
                logp_prior=lp_prior,
                logp_model=lp_model,
                logp_behavior=lp_behavior,
                energy=float(env.energy[s]),
            )
        )
    return trajs


def _behavior_sample_gmm(policy: GmmPolicy, env: GmmDiffusionEnv, store,
                         epsilon: float, n: int, rng) -> list[Trajectory]:
    x = env.initial_sample(rng, n)
    points = [x]
    lp_prior = np.zeros((n, env.steps + 1))
    lp_model = np.zeros((n, env.steps + 1))
    lp_behavior = np.zeros((n, env.steps + 1))
    for t in range(env.steps):
        mean, logstd = policy.mean_logstd(store, x, t)
        _, kern = env.prior_step(x, t)
        use_prior = rng.random(n) < epsilon
        y_model = mean + np.exp(logstd) * rng.standard_normal((n, 2))
        y_prior = kern.sample(rng)
        y = np.where(use_prior[:, None], y_prior, y_model)
        z = (y - mean) / np.exp(logstd)
        from .gmm import LOG_2PI

        lp_model[:, t] = np.sum(-logstd - 0.5 * LOG_2PI - 0.5 * z**2, axis=1)
        lp_prior[:, t] = kern.logpdf(y)
        lp_behavior[:, t] = _mix_logp(lp_model[:, t], lp_prior[:, t], epsilon)
        x = y
        points.append(x)
    energies = np.asarray(env.energy(x))
    trajs = []
    for i in range(n):
        trajs.append(
            Trajectory(
                states=[p[i] for p in points],
                logp_prior=lp_prior[i],
                logp_model=lp_model[i],
                logp_behavior=lp_behavior[i],
                energy=float(energies[i]),
            )
        )
    return trajs


def sample_terminals(policy: GmmPolicy, env: GmmDiffusionEnv, store: ParamStore,
                     n: int, rng: np.random.Generator) -> np.ndarray:
    """Fast tape-free rollout of the learned sampler; returns (n, 2) points."""
    x = env.initial_sample(rng, n)
    for t in range(env.steps):
        mean, logstd = policy.mean_logstd(store, x, t)
        x = mean + np.exp(logstd) * rng.standard_normal((n, 2))
    return x


# --- training ---------------------------------------------------------------

SCALAR_NAMES = {"rtb": "log_z", "tpcl": "v0"}


def make_policy(env, store: ParamStore, config: TrainConfig):
    if isinstance(env, TabularEnv):
        return TabularPolicy(env, store)
    return GmmPolicy(env, store, hidden=config.hidden,
                     init_rng=np.random.default_rng(config.seed + 1))


def _lr_vector(store: ParamStore, policy, config: TrainConfig) -> np.ndarray:
    lr = np.full(store.size, config.lr_policy)
    for name in SCALAR_NAMES.values():
        if name in store.layout:
            off, length = store.slice_of(name)
            lr[off : off + length] = config.lr_scalar
    return lr


def _loss_for(config: TrainConfig, policy, store, batch):
    if config.objective == "rtb":
        return objectives.rtb_loss(policy, store, batch, config.alpha)
    if config.objective == "tpcl":
        return objectives.tpcl_loss(policy, store, batch, config.alpha)
    if config.objective == "reinforce-kl":
        return objectives.reinforce_kl_offpolicy(policy, store, batch, config.alpha)
    return objectives.reinforce_kl_rtbpaper(policy, store, batch, config.lam)


def _tv_metric(env, policy, store, config, rng) -> float:
    if isinstance(env, TabularEnv):
        tables = oracle_tables(env)
        model_marg = terminal_marginal(env, policy.tables(store))
        return tv_distance(model_marg, tables.tilted)
    samples = sample_terminals(policy, env, store, 2048, rng)
    hist = mode_histogram(samples, env.prior_gmm)
    return hist.tv_against(env.target_weights)


def train(config: TrainConfig, env, store: ParamStore | None = None,
          checkpoint_path=None) -> tuple[ParamStore, list[MetricsRow]]:
    """Run the configured objective; deterministic given config + seed."""
    config.validate()
    if store is None:
        store = ParamStore()
    policy = make_policy(env, store, config)
    scalar_name = SCALAR_NAMES.get(config.objective)
    if scalar_name is not None and scalar_name not in store.layout:
        store.add(scalar_name, 0.0)
    lr = _lr_vector(store, policy, config)
    state = AdamState.zeros(store.size)
    epsilon = 0.0 if config.objective == "reinforce-rtbpaper" else config.epsilon
    metrics: list[MetricsRow] = []
    eval_rng = rng_stream(config.seed, worker_id=1)
    t0 = time.perf_counter()
    last_good = store.copy()
    for it in range(1, config.iterations + 1):
        rng = rng_stream(config.seed, worker_id=0, episode_id=it)
        batch = behavior_sample(policy, env, store, epsilon, config.batch_size, rng)
        try:
            loss = _loss_for(config, policy, store, batch)
            finite = np.isfinite(loss.value) and np.all(np.isfinite(loss.gradient))
        except (EvaluationError, FloatingPointError):
            finite = False
        if not finite:
            if checkpoint_path is not None:
                save_checkpoint(last_good, checkpoint_path)
            raise DivergenceError(
                f"non-finite loss at iteration {it}", checkpoint_path
            )
        if config.optimizer == "adam":
            adam_step(store, loss.gradient, state, lr)
        else:
            store._values -= lr * loss.gradient
        last_good = store.copy()
        if it % config.log_interval == 0 or it == config.iterations:
            logz = _scalar_estimate(config, store)
            metrics.append(
                MetricsRow(
                    iteration=it,
                    loss=loss.value,
                    logz=logz,
                    tv=_tv_metric(env, policy, store, config, eval_rng),
                    gradnorm=float(np.linalg.norm(loss.gradient)),
                    seconds=time.perf_counter() - t0,
                )
            )
    if checkpoint_path is not None:
        save_checkpoint(store, checkpoint_path)
    return store, metrics


def _scalar_estimate(config: TrainConfig, store: ParamStore) -> float:
    if config.objective == "rtb":
        return float(store.get("log_z")[0])
    if config.objective == "tpcl":
        return float(store.get("v0")[0]) / config.alpha
    return float("nan")


# --- persistence ------------------------------------------------------------

def save_checkpoint(store: ParamStore, path) -> None:
    payload = {
        "schema": "tiltrl-checkpoint/1",
        "layout": {k: list(v) for k, v in store.layout.items()},
        "values_b64": base64.b64encode(store.values.tobytes()).decode("ascii"),
    }
    with open(path, "w") as f:
        json.dump(payload, f)


def load_checkpoint(path) -> ParamStore:
    with open(path) as f:
        payload = json.load(f)
    if payload.get("schema") != "tiltrl-checkpoint/1":
        raise ValueError("unsupported checkpoint schema")
    values = np.frombuffer(
        base64.b64decode(payload["values_b64"]), dtype=np.float64
    ).copy()
    store = ParamStore()
    for name, (offset, length) in sorted(
        payload["layout"].items(), key=lambda kv: kv[1][0]
    ):
        store.add(name, values[offset : offset + length])
    return store


def metrics_to_csv(metrics: list[MetricsRow], path) -> None:
    with open(path, "w") as f:
        f.write("iter,loss,logz,tv,gradnorm,seconds\n")
        for row in metrics:
            f.write(
                f"{row.iteration},{row.loss:.17g},{row.logz:.17g},"
                f"{row.tv:.17g},{row.gradnorm:.17g},{row.seconds:.17g}\n"
            )


def config_from_dict(data: dict) -> TrainConfig:
    if data.get("schema") not in ("tiltrl-config/1",):
        raise ConfigError(f"schema must be 'tiltrl-config/1', got {data.get('schema')!r}")
    known = {f for f in TrainConfig.__dataclass_fields__}
    kwargs = {}
    for key, value in data.items():
        if key in ("schema", "env"):
            continue
        if key == "lambda":
            key = "lam"
        if key not in known:
            raise ConfigError(f"unknown config field {key!r}")
        kwargs[key] = value
    config = TrainConfig(**kwargs)
    config.validate()
    return config


def config_to_dict(config: TrainConfig, env_spec: dict | None = None) -> dict:
    data = {"schema": "tiltrl-config/1", **asdict(config)}
    data["lambda"] = data.pop("lam")
    if env_spec is not None:
        data["env"] = env_spec
    return data
