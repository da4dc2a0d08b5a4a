"""Command-line entry point: `train` runs a configured objective and writes
run artifacts, `verify` executes the self-contained numerical check suites,
`figure` generates the five-panel sample dumps, and `oracle dump` writes the
exact tabular reference tables."""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys

import numpy as np

from . import gmm as gmm_mod
from . import objectives, tabular
from .autodiff import ParamStore
from .evalmetrics import tv_distance
from .fixtures import gmm25_env, t2b3
from .oracle import oracle_tables, save_tables_json, terminal_marginal
from .policy import TabularPolicy
from .tabular import random_env, tabular_enumerate, two_terminal_env
from .train import (
    ConfigError,
    DivergenceError,
    TrainConfig,
    behavior_sample,
    config_from_dict,
    make_policy,
    metrics_to_csv,
    train,
)

SUITES = ("equivalence", "oracle", "gradients", "wrong-reward")


# --- config / env loading ---------------------------------------------------

def _line_of(text: str, message: str) -> int:
    """Best-effort line anchor: first config line mentioning a field named in
    the error message."""
    for lineno, line in enumerate(text.splitlines(), start=1):
        for token in ("objective", "alpha", "lambda", "batch_size", "iterations",
                      "epsilon", "lr_policy", "lr_scalar", "optimizer", "seed",
                      "schema", "env"):
            if token in message and f'"{token}"' in line:
                return lineno
    return 1


def _env_from_spec(spec, default_alpha: float = 1.0):
    if not isinstance(spec, dict):
        raise ConfigError("env must be an object")
    if "fixture" in spec:
        name = spec["fixture"]
        alpha = float(spec.get("alpha", default_alpha))
        if name == "t2b3":
            return t2b3(alpha)
        if name == "two-terminal":
            return two_terminal_env(alpha=alpha)
        if name == "gmm25":
            return gmm25_env(alpha=alpha)
        raise ConfigError(f"unknown env fixture {name!r}")
    schema = spec.get("schema")
    if schema == "tiltrl-tabular-env/1":
        return tabular.from_json_dict(spec)
    if schema == "tiltrl-gmm-env/1":
        return gmm_mod.from_json_dict(spec)
    raise ConfigError(f"unrecognized env spec (schema {schema!r})")


# --- manifest ---------------------------------------------------------------

def _content_hash(out_dir: str, names: list[str]) -> str:
    h = hashlib.sha256()
    for name in sorted(names):
        h.update(name.encode())
        h.update(b"\0")
        with open(os.path.join(out_dir, name), "rb") as f:
            h.update(f.read())
        h.update(b"\0")
    return h.hexdigest()


def write_manifest(out_dir: str, config_path: str | None, config_snapshot: dict,
                   seed: int, artifacts: list[str]) -> None:
    """Atomic manifest write; every listed artifact must already exist."""
    for name in artifacts:
        if not os.path.exists(os.path.join(out_dir, name)):
            raise FileNotFoundError(f"manifest lists missing artifact {name!r}")
    payload = {
        "schema": "tiltrl-run-manifest/1",
        "config_path": config_path,
        "config": config_snapshot,
        "seed": seed,
        "out_dir": os.path.abspath(out_dir),
        "artifacts": sorted(artifacts),
        "content_hash": _content_hash(out_dir, artifacts),
    }
    path = os.path.join(out_dir, "manifest.json")
    tmp = path + ".tmp"
    with open(tmp, "w") as f:
        json.dump(payload, f, indent=2)
    os.replace(tmp, path)


# --- train ------------------------------------------------------------------

def cmd_train(config_path: str, out_dir: str, seed: int | None = None) -> int:
    try:
        with open(config_path) as f:
            text = f.read()
    except OSError as e:
        print(f"{config_path}: {e.strerror}", file=sys.stderr)
        return 1
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        print(f"{config_path}:{e.lineno}: {e.msg}", file=sys.stderr)
        return 1
    try:
        config = config_from_dict(data)
        if seed is not None:
            config.seed = seed
        if "env" not in data:
            raise ConfigError('missing required field "env"')
        env = _env_from_spec(data["env"], default_alpha=config.alpha)
        if getattr(env, "alpha", config.alpha) != config.alpha:
            raise ConfigError(
                f'env "alpha" ({env.alpha}) must match config alpha ({config.alpha})'
            )
    except ConfigError as e:
        print(f"{config_path}:{_line_of(text, str(e))}: {e}", file=sys.stderr)
        return 1
    os.makedirs(out_dir, exist_ok=True)
    checkpoint = os.path.join(out_dir, "checkpoint.json")
    snapshot = {**data, "seed": config.seed}
    try:
        store, metrics = train(config, env, checkpoint_path=checkpoint)
    except DivergenceError as e:
        print(f"diverged: {e}", file=sys.stderr)
        artifacts = [n for n in ("checkpoint.json",)
                     if os.path.exists(os.path.join(out_dir, n))]
        write_manifest(out_dir, config_path, snapshot, config.seed, artifacts)
        return 2
    metrics_to_csv(metrics, os.path.join(out_dir, "metrics.csv"))
    write_manifest(out_dir, config_path, snapshot, config.seed,
                   ["metrics.csv", "checkpoint.json"])
    return 0


# --- verify suites ----------------------------------------------------------

def _report(name: str, ok: bool, detail: str) -> bool:
    print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    return ok


def suite_equivalence(n_draws: int = 1000, seed: int = 0) -> list[tuple[str, bool, str]]:
    """Residual, loss, and gradient proportionality between the squared
    trajectory-balance loss and its path-consistency form."""
    rng = np.random.default_rng(seed)
    alphas = (0.3, 0.5, 1.0, 2.0, 2.7)
    worst_res = worst_loss = worst_grad = 0.0
    for i in range(n_draws):
        alpha = alphas[i % len(alphas)]
        env = random_env(rng, max_depth=3, max_branch=3, alpha=alpha)
        store = ParamStore()
        policy = TabularPolicy(env, store)
        store.set("logits", rng.normal(scale=0.8, size=env.n_edges))
        log_z = float(rng.normal())
        store.add("log_z", log_z)
        store.add("v0", alpha * log_z)
        batch = behavior_sample(policy, env, store, 0.3, 4, rng)
        r = objectives.rtb_loss(policy, store, batch, alpha)
        t = objectives.tpcl_loss(policy, store, batch, alpha)
        worst_res = max(worst_res, float(np.max(np.abs(
            t.per_trajectory_residuals - alpha * r.per_trajectory_residuals))))
        worst_loss = max(worst_loss,
                         abs(t.value - alpha**2 * r.value) / abs(r.value))
        idx = objectives.policy_param_indices(policy, store)
        grad_gap = float(np.max(np.abs(t.gradient[idx] - alpha**2 * r.gradient[idx])))
        grad_gap = max(grad_gap, abs(
            t.gradient[store.index_of("v0")]
            - alpha * r.gradient[store.index_of("log_z")]
        ))
        worst_grad = max(worst_grad, grad_gap)
    return [
        ("residual proportionality (alpha * residual)", worst_res < 1e-12,
         f"max |gap| = {worst_res:.3g} over {n_draws} draws (tol 1e-12)"),
        ("loss proportionality (alpha^2 * loss)", worst_loss < 1e-12,
         f"max rel gap = {worst_loss:.3g} (tol 1e-12)"),
        ("gradient mapping (alpha^2 policy, alpha scalar)", worst_grad < 1e-10,
         f"max |gap| = {worst_grad:.3g} (tol 1e-10)"),
    ]


def suite_oracle(n_envs: int = 200, seed: int = 1) -> list[tuple[str, bool, str]]:
    """Exact terminal marginal of the soft-optimal policy against the tilted
    target, and the enumerated partition function against exp(V(s0)/alpha)."""
    rng = np.random.default_rng(seed)
    worst_tv = worst_z = 0.0
    for _ in range(n_envs):
        env = random_env(rng, max_depth=4, max_branch=4)
        tables = oracle_tables(env)
        marg = terminal_marginal(env, tables.pi_star)
        worst_tv = max(worst_tv, tv_distance(marg, tables.tilted))
        z_enum = sum(
            np.exp(logq - env.energy[path[-1]] / env.alpha)
            for path, logq in tabular_enumerate(env)
        )
        z_soft = np.exp(tables.v_soft[0] / env.alpha)
        worst_z = max(worst_z, abs(z_soft - z_enum) / z_enum)
    return [
        ("optimal-policy terminal marginal equals tilted target",
         worst_tv < 1e-10, f"max TV = {worst_tv:.3g} over {n_envs} envs (tol 1e-10)"),
        ("exp(V(s0)/alpha) equals enumerated partition function",
         worst_z < 1e-12, f"max rel err = {worst_z:.3g} (tol 1e-12)"),
    ]


def _fd_rel_err(store: ParamStore, analytic: np.ndarray, f, eps: float = 1e-5) -> float:
    base = store.values.copy()
    worst = 0.0
    for i in range(base.size):
        v = base.copy()
        v[i] = base[i] + eps
        store.values = v
        up = f()
        v[i] = base[i] - eps
        store.values = v
        down = f()
        fd = (up - down) / (2 * eps)
        worst = max(worst, abs(analytic[i] - fd) / max(abs(analytic[i]), abs(fd), 1.0))
    store.values = base
    return worst


def suite_gradients(n_configs: int = 50, seed: int = 2) -> list[tuple[str, bool, str]]:
    """Score-function / squared-loss gradient equivalence, finite-difference
    hygiene for every objective, and exactness of the SNIS weights."""
    rng = np.random.default_rng(seed)
    checks: list[tuple[str, bool, str]] = []

    worst_match = 0.0
    n_separated = 0
    for _ in range(n_configs):
        alpha = float(rng.uniform(0.3, 3.0))
        env = random_env(rng, max_depth=4, max_branch=4, alpha=alpha)
        store = ParamStore()
        policy = TabularPolicy(env, store)
        store.set("logits", rng.normal(scale=0.8, size=env.n_edges))
        log_z = float(rng.normal())
        batch = behavior_sample(policy, env, store, 0.2, 8, rng)
        worst_match = max(worst_match, objectives.gradient_equivalence_check(
            policy, store, batch, alpha, log_z))
        shifted = objectives.gradient_equivalence_check(
            policy, store, batch, alpha, log_z, baseline=alpha * log_z + 1.0)
        if shifted > 1e-3:
            n_separated += 1
    checks.append((
        "score-function gradient at baseline alpha*logZ",
        worst_match < 1e-10,
        f"max |gap| = {worst_match:.3g} over {n_configs} configs (tol 1e-10)",
    ))
    checks.append((
        "baseline shift breaks the equivalence",
        n_separated >= int(0.9 * n_configs),
        f"{n_separated}/{n_configs} configs with gap > 1e-3 (need >= {int(0.9 * n_configs)})",
    ))

    worst_fd = 0.0
    for env in (t2b3(), two_terminal_env()):
        store = ParamStore()
        policy = TabularPolicy(env, store)
        store.set("logits", 0.5 * rng.normal(size=env.n_edges))
        store.add("log_z", 0.2)
        store.add("v0", 0.2)
        batch = behavior_sample(policy, env, store, 0.3, 8, rng)
        out = objectives.rtb_loss(policy, store, batch, env.alpha)
        worst_fd = max(worst_fd, _fd_rel_err(
            store, out.gradient,
            lambda: objectives.rtb_loss(policy, store, batch, env.alpha).value))
        out = objectives.tpcl_loss(policy, store, batch, env.alpha)
        worst_fd = max(worst_fd, _fd_rel_err(
            store, out.gradient,
            lambda: objectives.tpcl_loss(policy, store, batch, env.alpha).value))
        out = objectives.reinforce_kl_rtbpaper(policy, store, batch, 1.0)
        worst_fd = max(worst_fd, _fd_rel_err(
            store, out.gradient,
            lambda: objectives.reinforce_kl_rtbpaper(policy, store, batch, 1.0).value))
        # the off-policy loss differentiates log pi only; its stop-gradient
        # coefficients are frozen at the base point for the reference
        out = objectives.reinforce_kl_offpolicy(policy, store, batch, env.alpha)
        lp_model = np.array([policy.traj_logp(store, tr) for tr in batch])
        lp_prior = np.array([tr.total_logp_prior() for tr in batch])
        lp_behavior = np.array([tr.total_logp_behavior() for tr in batch])
        energies = np.array([tr.energy for tr in batch])
        rewards = -energies - env.alpha * (lp_model - lp_prior)
        coeff = objectives.snis_weights(
            lp_model - lp_behavior, batch[0].horizon
        ) * (rewards - rewards.mean())

        def frozen(policy=policy, store=store, batch=batch, coeff=coeff):
            lp = np.array([policy.traj_logp(store, tr) for tr in batch])
            return -np.sum(coeff * lp) / len(batch)

        worst_fd = max(worst_fd, _fd_rel_err(store, out.gradient, frozen))
    checks.append((
        "finite-difference check of every objective gradient",
        worst_fd < 1e-5,
        f"max rel err = {worst_fd:.3g} (eps 1e-5, tol 1e-5)",
    ))

    worst_sum = 0.0
    for _ in range(100):
        w = objectives.snis_weights(rng.normal(scale=20, size=64), 3)
        worst_sum = max(worst_sum, abs(w.sum() - 1.0))
    uniform = objectives.snis_weights(np.zeros(64), 3)
    exact_uniform = bool(np.all(uniform == 1.0 / 64.0))
    checks.append((
        "SNIS weights sum to 1 exactly; uniform on-policy",
        worst_sum == 0.0 and exact_uniform,
        f"max |sum - 1| = {worst_sum:.3g}; uniform at zero ratios: {exact_uniform}",
    ))
    return checks


def suite_wrong_reward(seed: int = 13) -> list[tuple[str, bool, str]]:
    """Two-terminal counterexample: the exponentiated-reward update converges
    to the wrong tilted distribution, the corrected reward to the right one."""
    env = two_terminal_env()
    tables = oracle_tables(env)
    wrong = tables.wrong_tilted

    def run(objective: str) -> np.ndarray:
        config = TrainConfig(objective=objective, alpha=1.0, lam=1.0,
                             batch_size=64, iterations=3000, lr_policy=5e-3,
                             lr_scalar=1e-1, epsilon=0.2, seed=seed,
                             log_interval=1000)
        store, _ = train(config, env)
        policy = make_policy(env, store, config)
        return terminal_marginal(env, policy.tables(store))

    marg_exp = run("reinforce-rtbpaper")
    tv_exp_wrong = tv_distance(marg_exp, wrong)
    tv_exp_correct = tv_distance(marg_exp, tables.tilted)
    marg_kl = run("reinforce-kl")
    tv_kl_correct = tv_distance(marg_kl, tables.tilted)
    return [
        ("exponentiated reward converges to the mis-tilted target",
         tv_exp_wrong < 0.02, f"TV = {tv_exp_wrong:.4f} (tol 0.02)"),
        ("exponentiated reward stays away from the correct target",
         tv_exp_correct > 0.15, f"TV = {tv_exp_correct:.4f} (need > 0.15)"),
        ("corrected reward converges to the correct target",
         tv_kl_correct < 0.02, f"TV = {tv_kl_correct:.4f} (tol 0.02)"),
    ]


def cmd_verify(suite: str) -> int:
    runners = {
        "equivalence": suite_equivalence,
        "oracle": suite_oracle,
        "gradients": suite_gradients,
        "wrong-reward": suite_wrong_reward,
    }
    if suite not in runners:
        print(f"unknown suite {suite!r}; choose from {', '.join(SUITES)}",
              file=sys.stderr)
        return 1
    ok = True
    for name, passed, detail in runners[suite]():
        ok &= _report(name, passed, detail)
    return 0 if ok else 1


# --- figure -----------------------------------------------------------------

def cmd_figure(out_dir: str, seed: int = 11) -> int:
    from .figures import run_figure

    try:
        summary = run_figure(out_dir, seed=seed)
    except DivergenceError as e:
        print(f"diverged: {e}", file=sys.stderr)
        return 2
    artifacts = [p["csv"] for p in summary["panels"]]
    artifacts += [n for n in os.listdir(out_dir)
                  if n.startswith("metrics_") and n.endswith(".csv")]
    artifacts.append("summary.json")
    write_manifest(out_dir, None, {"seed": seed}, seed, artifacts)
    for panel in summary["panels"]:
        print(f"{panel['name']}: mode TV = {panel['mode_tv']:.4f}")
    return 0


# --- oracle dump ------------------------------------------------------------

def cmd_oracle_dump(out_path: str, config_path: str | None = None) -> int:
    if config_path is None:
        env = t2b3()
    else:
        try:
            with open(config_path) as f:
                spec = json.load(f)
            env = _env_from_spec(spec.get("env", spec))
        except (OSError, json.JSONDecodeError, ConfigError) as e:
            print(f"{config_path}: {e}", file=sys.stderr)
            return 1
        if not isinstance(env, tabular.TabularEnv):
            print("oracle dump requires a tabular env", file=sys.stderr)
            return 1
    save_tables_json(env, oracle_tables(env), out_path)
    print(f"wrote {out_path}")
    return 0


# --- entry point ------------------------------------------------------------

def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="tiltrl",
        description="Train and verify samplers for energy-tilted targets.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run a training config")
    p_train.add_argument("--config", required=True)
    p_train.add_argument("--out", required=True)
    p_train.add_argument("--seed", type=int, default=None)

    p_verify = sub.add_parser("verify", help="run a numerical check suite")
    p_verify.add_argument("--suite", required=True, choices=SUITES)

    p_figure = sub.add_parser("figure", help="generate figure sample panels")
    p_figure.add_argument("--out", required=True)
    p_figure.add_argument("--seed", type=int, default=11)

    p_oracle = sub.add_parser("oracle", help="exact tabular reference tables")
    oracle_sub = p_oracle.add_subparsers(dest="action", required=True)
    p_dump = oracle_sub.add_parser("dump", help="write oracle tables JSON")
    p_dump.add_argument("--out", required=True)
    p_dump.add_argument("--config", default=None)

    args = parser.parse_args(argv)
    if args.command == "train":
        return cmd_train(args.config, args.out, args.seed)
    if args.command == "verify":
        return cmd_verify(args.suite)
    if args.command == "figure":
        return cmd_figure(args.out, args.seed)
    return cmd_oracle_dump(args.out, args.config)


if __name__ == "__main__":
    sys.exit(main())
