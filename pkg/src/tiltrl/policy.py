"""Learnable policies: per-edge softmax tables for tabular envs and a small
Gaussian-transition network for the mixture diffusion env.

Both expose the same two entry points used by the objectives:

- ``traj_logp(store, traj)``: numeric log pi_phi(tau) (numpy),
- ``traj_logp_node(tape, store, traj)``: the same quantity as a tape node,
  differentiable w.r.t. the policy parameters.

The numeric and tape paths follow identical formulas so their values agree to
floating-point roundoff.
"""

from __future__ import annotations

import numpy as np

from .autodiff import (
    OP_ADD,
    OP_CONST,
    OP_DIV,
    OP_EXP,
    OP_MUL,
    OP_NEG,
    OP_PARAM,
    OP_SQUARE,
    OP_SUB,
    OP_TANH,
    ParamStore,
    Tape,
)
from .gmm import LOG_2PI, GmmDiffusionEnv
from .oracle import softmax_policy
from .tabular import TabularEnv
from .trajectory import Trajectory

LOG_STD_MIN = float(np.log(1e-4))
LOG_STD_MAX = float(np.log(1.0))
_LS_MID = 0.5 * (LOG_STD_MIN + LOG_STD_MAX)
_LS_HALF = 0.5 * (LOG_STD_MAX - LOG_STD_MIN)


class TabularPolicy:
    """Softmax policy over children, one logit per env edge."""

    def __init__(self, env: TabularEnv, store: ParamStore, name: str = "logits",
                 init: np.ndarray | None = None) -> None:
        self.env = env
        self.name = name
        if init is None:
            init = np.zeros(env.n_edges)
        if name not in store.layout:
            store.add(name, init)
        self.offset, length = store.slice_of(name)
        if length != env.n_edges:
            raise ValueError(f"slice {name!r} must have one entry per edge")

    def tables(self, store: ParamStore) -> list[np.ndarray]:
        return softmax_policy(self.env, store.get(self.name))

    def step_logp(self, store: ParamStore, s: int, s_next: int) -> float:
        logits = store.get(self.name)
        env = self.env
        base = int(env.edge_offset[s])
        row = logits[base : base + len(env.children[s])]
        pos = env.child_pos(s, s_next)
        m = row.max()
        return float(row[pos] - (m + np.log(np.exp(row - m).sum())))

    def step_logp_node(self, tape: Tape, store: ParamStore, s: int, s_next: int) -> int:
        logits = store.get(self.name)
        env = self.env
        base = int(env.edge_offset[s])
        n_ch = len(env.children[s])
        row = logits[base : base + n_ch]
        m = float(row.max())  # constant shift keeps exp() in range
        m_node = tape.const(m)
        theta = [tape.param(self.offset + base + i) for i in range(n_ch)]
        exps = [tape.exp(tape.sub(th, m_node)) for th in theta]
        lse = tape.add(m_node, tape.log(tape.sum_nodes(exps)))
        pos = env.child_pos(s, s_next)
        return tape.sub(theta[pos], lse)

    def traj_logp(self, store: ParamStore, traj: Trajectory) -> float:
        total = 0.0
        for s, s_next in zip(traj.states[:-1], traj.states[1:]):
            total += self.step_logp(store, s, s_next)
        return total

    def traj_logp_node(self, tape: Tape, store: ParamStore, traj: Trajectory) -> int:
        nodes = [
            self.step_logp_node(tape, store, s, s_next)
            for s, s_next in zip(traj.states[:-1], traj.states[1:])
        ]
        return tape.sum_nodes(nodes)


class GmmPolicy:
    """Gaussian transition network for the mixture diffusion env.

    One hidden tanh layer plus a linear feature-to-output skip. The outputs
    are a mean offset from the current point and a pre-activation for the
    log-std, clamped to [log 1e-4, log 1] by a scaled tanh. Inputs are the
    current point, the analytic prior- and target-kernel drifts, the log
    posterior std of the step and the normalized time. The skip is
    initialized so the policy starts at the prior kernel's moment-matched
    mean and (approximately) its per-step variance; the optimal policy's
    drift is itself a feature, so training only has to re-blend the two
    drifts. With all output-side weights zeroed the transition degenerates to
    N(x_t, sigma_init^2 I) with sigma_init = exp((log 1e-4 + log 1) / 2).
    """

    N_FEATURES = 10

    def __init__(self, env: GmmDiffusionEnv, store: ParamStore, hidden: int = 24,
                 name: str = "policy", init_rng: np.random.Generator | None = None) -> None:
        self.env = env
        self.hidden = hidden
        self.name = name
        f = self.N_FEATURES
        if f"{name}.w1" not in store.layout:
            if init_rng is None:
                init_rng = np.random.default_rng(0)
            w1 = init_rng.normal(0.0, 1.0 / np.sqrt(f), size=(hidden, f))
            store.add(f"{name}.w1", w1.ravel())
            store.add(f"{name}.b1", np.zeros(hidden))
            store.add(f"{name}.w2", np.zeros(4 * hidden))  # (4, hidden), row-major
            a, c = self._logstd_fit(env)
            ws = np.zeros((4, f))                          # feature -> output skip
            ws[0, 2] = 1.0                                 # mean offset = prior drift
            ws[1, 3] = 1.0
            ws[2, 6] = a                                   # log-std tracks the step's
            ws[3, 6] = a                                   # posterior std at init
            store.add(f"{name}.ws", ws.ravel())
            store.add(f"{name}.b2", np.array([0.0, 0.0, c, c]))
        self.w1_off, _ = store.slice_of(f"{name}.w1")
        self.b1_off, _ = store.slice_of(f"{name}.b1")
        self.w2_off, _ = store.slice_of(f"{name}.w2")
        self.ws_off, _ = store.slice_of(f"{name}.ws")
        self.b2_off, _ = store.slice_of(f"{name}.b2")

    def _logstd_fit(self, env: GmmDiffusionEnv) -> tuple[float, float]:
        """Least-squares (gain, bias) mapping the kernel-scale feature through
        the tanh clamp so that log-std ~= the feature at initialization.

        Fitted on the feature values of representative points (the noised mode
        centers plus the origin) at every step.
        """
        pts = np.vstack([env.prior_gmm.means, np.zeros((1, 2))])
        ls = np.concatenate([
            self.features(np.sqrt(env.signal_level(t)) * pts, t)[:, 6]
            for t in range(env.steps)
        ])
        margin = 0.01 * _LS_HALF
        clipped = np.clip(ls, LOG_STD_MIN + margin, LOG_STD_MAX - margin)
        u = np.arctanh((clipped - _LS_MID) / _LS_HALF)
        a, c = np.polyfit(ls, u, 1)
        return float(a), float(c)

    def param_names(self) -> list[str]:
        return [f"{self.name}.{p}" for p in ("w1", "b1", "w2", "ws", "b2")]

    # --- features -----------------------------------------------------------

    def features(self, x: np.ndarray, t: int) -> np.ndarray:
        """Feature matrix (N, 8) for the transition at generation step t."""
        env = self.env
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        log_resp_p, means_p, post_var = env.reverse_kernel(x, t)
        # drift toward the *dominant* kernel component rather than the
        # posterior mean: where the kernel splits into well-separated sharp
        # modes, the posterior mean falls between them and a Gaussian centred
        # there has an unbounded density mismatch against the kernel
        rows = np.arange(x.shape[0])
        prior_mode = means_p[rows, np.argmax(log_resp_p, axis=1)]
        log_resp_t, means_t, _ = env.reverse_kernel(x, t, weights=env.target_weights)
        target_mode = means_t[rows, np.argmax(log_resp_t, axis=1)]
        n = x.shape[0]
        feats = np.empty((n, self.N_FEATURES))
        feats[:, 0:2] = x
        feats[:, 2:4] = prior_mode - x
        feats[:, 4:6] = target_mode - x
        feats[:, 6] = 0.5 * np.log(post_var)
        feats[:, 7] = t / env.steps
        feats[:, 8] = np.sin(2.0 * np.pi * t / env.steps)
        feats[:, 9] = np.cos(2.0 * np.pi * t / env.steps)
        return feats

    # --- numpy path ---------------------------------------------------------

    def _heads(self, store: ParamStore, feats: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        w1 = store.get(f"{self.name}.w1").reshape(self.hidden, self.N_FEATURES)
        b1 = store.get(f"{self.name}.b1")
        w2 = store.get(f"{self.name}.w2").reshape(4, self.hidden)
        ws = store.get(f"{self.name}.ws").reshape(4, self.N_FEATURES)
        b2 = store.get(f"{self.name}.b2")
        h = np.tanh(feats @ w1.T + b1)
        out = h @ w2.T + feats @ ws.T + b2
        return out[:, 0:2], out[:, 2:4]

    def mean_logstd(self, store: ParamStore, x: np.ndarray, t: int) -> tuple[np.ndarray, np.ndarray]:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        delta, u = self._heads(store, self.features(x, t))
        mean = x + delta
        logstd = _LS_MID + _LS_HALF * np.tanh(u)
        return mean, logstd

    def step_logpdf(self, store: ParamStore, x: np.ndarray, y: np.ndarray, t: int) -> np.ndarray:
        mean, logstd = self.mean_logstd(store, x, t)
        y = np.atleast_2d(np.asarray(y, dtype=np.float64))
        z = (y - mean) / np.exp(logstd)
        return np.sum(-logstd - 0.5 * LOG_2PI - 0.5 * z**2, axis=1)

    def step_sample(self, store: ParamStore, x: np.ndarray, t: int,
                    rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        mean, logstd = self.mean_logstd(store, x, t)
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(logstd))):
            raise FloatingPointError("non-finite network output in policy step")
        y = mean + np.exp(logstd) * rng.standard_normal(mean.shape)
        z = (y - mean) / np.exp(logstd)
        logp = np.sum(-logstd - 0.5 * LOG_2PI - 0.5 * z**2, axis=1)
        return y, logp

    def traj_logp(self, store: ParamStore, traj: Trajectory) -> float:
        total = 0.0
        for t in range(len(traj.states) - 1):
            x = np.asarray(traj.states[t])[None, :]
            y = np.asarray(traj.states[t + 1])[None, :]
            total += float(self.step_logpdf(store, x, y, t)[0])
        return total

    def traj_logp_batch(self, store: ParamStore, trajs: list[Trajectory]) -> np.ndarray:
        """Batched log pi_phi(tau), stacked per timestep.

        Uses the same batched array shapes as sampling so recomputed values
        are bit-identical to freshly sampled caches under unchanged params.
        """
        if not trajs:
            return np.zeros(0)
        steps = len(trajs[0].states) - 1
        total = np.zeros(len(trajs))
        for t in range(steps):
            x = np.stack([np.asarray(tr.states[t]) for tr in trajs])
            y = np.stack([np.asarray(tr.states[t + 1]) for tr in trajs])
            total += self.step_logpdf(store, x, y, t)
        return total

    # --- tape path ----------------------------------------------------------

    def step_logpdf_node(self, tape: Tape, store: ParamStore,
                         x: np.ndarray, y: np.ndarray, t: int) -> int:
        feats = self.features(np.asarray(x)[None, :], t)[0]
        h_nodes = []
        f = self.N_FEATURES
        for j in range(self.hidden):
            pre = tape.affine(
                range(self.w1_off + j * f, self.w1_off + (j + 1) * f),
                feats,
                bias_index=self.b1_off + j,
            )
            h_nodes.append(tape.tanh(pre))
        out_nodes = []
        for o in range(4):
            acc = tape.affine(
                range(self.ws_off + o * f, self.ws_off + (o + 1) * f),
                feats,
                bias_index=self.b2_off + o,
            )
            base = self.w2_off + o * self.hidden
            for j in range(self.hidden):
                acc = tape.add(acc, tape.mul(tape.param(base + j), h_nodes[j]))
            out_nodes.append(acc)
        half_log2pi = tape.const(0.5 * LOG_2PI)
        half = tape.const(0.5)
        terms = []
        for d in range(2):
            ls = tape.add(
                tape.const(_LS_MID),
                tape.mul(tape.const(_LS_HALF), tape.tanh(out_nodes[2 + d])),
            )
            mu = tape.add(tape.const(float(x[d])), out_nodes[d])
            z = tape.div(tape.sub(tape.const(float(y[d])), mu), tape.exp(ls))
            terms.append(
                tape.neg(tape.add(ls, tape.add(half_log2pi, tape.mul(half, tape.square(z)))))
            )
        return tape.add(terms[0], terms[1])

    def traj_logp_node(self, tape: Tape, store: ParamStore, traj: Trajectory) -> int:
        nodes = [
            self.step_logpdf_node(
                tape, store, np.asarray(traj.states[t]), np.asarray(traj.states[t + 1]), t
            )
            for t in range(len(traj.states) - 1)
        ]
        return tape.sum_nodes(nodes)

    # --- template fast path --------------------------------------------------
    #
    # The per-transition subgraph is structurally identical across the batch;
    # only the constant inputs (features, current and next point) change. A
    # prebuilt node block is stamped onto the tape per transition, which keeps
    # batch-loss construction out of per-node Python loops.

    def _template(self):
        if getattr(self, "_tmpl", None) is not None:
            return self._tmpl
        f, hidden = self.N_FEATURES, self.hidden
        kind: list[int] = []
        i0: list[int] = []
        i1: list[int] = []
        aux: list[float] = []
        ref0: list[bool] = []  # i0 is a node reference (needs base shift)
        ref1: list[bool] = []

        def emit(k, a=0, b=0, v=0.0, r0=False, r1=False):
            kind.append(k)
            i0.append(a)
            i1.append(b)
            aux.append(v)
            ref0.append(r0)
            ref1.append(r1)
            return len(kind) - 1

        f_pos = [emit(OP_CONST) for _ in range(f)]
        x_pos = [emit(OP_CONST) for _ in range(2)]
        y_pos = [emit(OP_CONST) for _ in range(2)]
        h_nodes = []
        for j in range(hidden):
            acc = -1
            for i in range(f):
                p = emit(OP_PARAM, self.w1_off + j * f + i)
                m = emit(OP_MUL, p, f_pos[i], r0=True, r1=True)
                acc = m if acc < 0 else emit(OP_ADD, acc, m, r0=True, r1=True)
            b = emit(OP_PARAM, self.b1_off + j)
            acc = emit(OP_ADD, acc, b, r0=True, r1=True)
            h_nodes.append(emit(OP_TANH, acc, r0=True))
        out_nodes = []
        for o in range(4):
            acc = emit(OP_PARAM, self.b2_off + o)
            for i in range(f):
                p = emit(OP_PARAM, self.ws_off + o * f + i)
                m = emit(OP_MUL, p, f_pos[i], r0=True, r1=True)
                acc = emit(OP_ADD, acc, m, r0=True, r1=True)
            base = self.w2_off + o * hidden
            for j in range(hidden):
                p = emit(OP_PARAM, base + j)
                m = emit(OP_MUL, p, h_nodes[j], r0=True, r1=True)
                acc = emit(OP_ADD, acc, m, r0=True, r1=True)
            out_nodes.append(acc)
        mid = emit(OP_CONST, v=_LS_MID)
        half_rng = emit(OP_CONST, v=_LS_HALF)
        half_log2pi = emit(OP_CONST, v=0.5 * LOG_2PI)
        half = emit(OP_CONST, v=0.5)
        terms = []
        for d in range(2):
            ls = emit(
                OP_ADD,
                mid,
                emit(OP_MUL, half_rng, emit(OP_TANH, out_nodes[2 + d], r0=True),
                     r0=True, r1=True),
                r0=True,
                r1=True,
            )
            mu = emit(OP_ADD, x_pos[d], out_nodes[d], r0=True, r1=True)
            diff = emit(OP_SUB, y_pos[d], mu, r0=True, r1=True)
            z = emit(OP_DIV, diff, emit(OP_EXP, ls, r0=True), r0=True, r1=True)
            inner = emit(
                OP_ADD,
                half_log2pi,
                emit(OP_MUL, half, emit(OP_SQUARE, z, r0=True), r0=True, r1=True),
                r0=True,
                r1=True,
            )
            terms.append(emit(OP_NEG, emit(OP_ADD, ls, inner, r0=True, r1=True), r0=True))
        emit(OP_ADD, terms[0], terms[1], r0=True, r1=True)
        self._tmpl = {
            "kind": np.asarray(kind, dtype=np.int8),
            "i0": np.asarray(i0, dtype=np.int64),
            "i1": np.asarray(i1, dtype=np.int64),
            "aux": np.asarray(aux, dtype=np.float64),
            "ref0": np.asarray(ref0, dtype=np.int64),
            "ref1": np.asarray(ref1, dtype=np.int64),
            "f_pos": np.asarray(f_pos, dtype=np.int64),
            "x_pos": np.asarray(x_pos, dtype=np.int64),
            "y_pos": np.asarray(y_pos, dtype=np.int64),
        }
        return self._tmpl

    def _stamp(self, tape: Tape, feats_row: np.ndarray, x: np.ndarray,
               y: np.ndarray) -> int:
        tmpl = self._template()
        base = len(tape)
        aux = tmpl["aux"].copy()
        aux[tmpl["f_pos"]] = feats_row
        aux[tmpl["x_pos"]] = x
        aux[tmpl["y_pos"]] = y
        tape.extend_block(
            tmpl["kind"],
            tmpl["i0"] + base * tmpl["ref0"],
            tmpl["i1"] + base * tmpl["ref1"],
            aux,
        )
        return len(tape) - 1

    def batch_logp_nodes(self, tape: Tape, store: ParamStore,
                         trajs: list[Trajectory]) -> list[int]:
        """One log pi_phi(tau) node per trajectory, with features batched per
        timestep and transitions stamped from the prebuilt template."""
        if not trajs:
            return []
        steps = len(trajs[0].states) - 1
        per_traj: list[list[int]] = [[] for _ in trajs]
        for t in range(steps):
            x = np.stack([np.asarray(tr.states[t]) for tr in trajs])
            y = np.stack([np.asarray(tr.states[t + 1]) for tr in trajs])
            feats = self.features(x, t)
            for i in range(len(trajs)):
                per_traj[i].append(self._stamp(tape, feats[i], x[i], y[i]))
        return [tape.sum_nodes(nodes) for nodes in per_traj]
