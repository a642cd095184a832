"""Reinforcement-learning device scheduling.

An LSTM runs over the device sequence and a shared fully connected head turns
each hidden state into a selection probability. Plans come from an
epsilon-greedy converter; parameters follow REINFORCE with a moving baseline.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from ..core import FrequencyVector, SchedulingPlan, update_frequency
from .base import Scheduler, SchedulerContext

log = logging.getLogger(__name__)

N_FEATURES = 4
POLICY_MAGIC = "fedsched-policy"
POLICY_VERSION = 1


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class PolicyNetwork:
    """LSTM over devices followed by a per-step logistic output."""

    PARAM_NAMES = ("Wx", "Wh", "b", "w_out", "b_out")

    def __init__(self, width: int = 32, n_features: int = N_FEATURES, rng=None, init_scale: float = 0.1):
        self.width = width
        self.n_features = n_features
        rng = np.random.default_rng(0) if rng is None else rng
        H, F = width, n_features
        u = lambda *shape: rng.uniform(-init_scale, init_scale, size=shape)  # noqa: E731
        self.params = {
            "Wx": u(4 * H, F),
            "Wh": u(4 * H, H),
            "b": u(4 * H),
            "w_out": u(H),
            "b_out": u(1),
        }

    @classmethod
    def zeros(cls, width: int = 32, n_features: int = N_FEATURES) -> "PolicyNetwork":
        net = cls(width, n_features)
        for p in net.params.values():
            p[...] = 0.0
        return net

    def copy(self) -> "PolicyNetwork":
        net = PolicyNetwork.zeros(self.width, self.n_features)
        net.set_flat(self.flat())
        return net

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def flat(self) -> np.ndarray:
        return np.concatenate([self.params[k].ravel() for k in self.PARAM_NAMES])

    def set_flat(self, vec) -> None:
        vec = np.asarray(vec, dtype=float)
        if vec.size != self.n_params:
            raise ValueError(f"expected {self.n_params} parameters, got {vec.size}")
        i = 0
        for k in self.PARAM_NAMES:
            p = self.params[k]
            p[...] = vec[i : i + p.size].reshape(p.shape)
            i += p.size

    def forward(self, X) -> tuple[np.ndarray, dict]:
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise ValueError(f"features must have shape (K, {self.n_features}), got {X.shape}")
        H = self.width
        P = self.params
        K = X.shape[0]
        pre_x = X @ P["Wx"].T + P["b"]
        gates = np.empty((K, 4 * H))
        cells = np.empty((K, H))
        hidden = np.empty((K, H))
        h = np.zeros(H)
        c = np.zeros(H)
        Wh = P["Wh"]
        for t in range(K):
            g = pre_x[t] + Wh @ h
            a = np.empty(4 * H)
            a[: 3 * H] = _sigmoid(g[: 3 * H])
            a[3 * H :] = np.tanh(g[3 * H :])
            c = a[H : 2 * H] * c + a[:H] * a[3 * H :]
            h = a[2 * H : 3 * H] * np.tanh(c)
            gates[t] = a
            cells[t] = c
            hidden[t] = h
        logits = hidden @ P["w_out"] + P["b_out"][0]
        probs = _sigmoid(logits)
        cache = {"X": X, "gates": gates, "cells": cells, "hidden": hidden, "probs": probs}
        return probs, cache

    def probabilities(self, X) -> np.ndarray:
        return self.forward(X)[0]

    def backward(self, cache: dict, d_logits) -> dict:
        """Gradients of sum_t d_logits[t] * logit_t with respect to every parameter."""
        H = self.width
        P = self.params
        X, gates, cells, hidden = cache["X"], cache["gates"], cache["cells"], cache["hidden"]
        K = X.shape[0]
        d_logits = np.asarray(d_logits, dtype=float)
        grads = {
            "w_out": hidden.T @ d_logits,
            "b_out": np.array([d_logits.sum()]),
        }
        dH = np.outer(d_logits, P["w_out"])
        dG = np.empty((K, 4 * H))
        dh_next = np.zeros(H)
        dc_next = np.zeros(H)
        WhT = P["Wh"].T
        for t in range(K - 1, -1, -1):
            a = gates[t]
            i, f, o, g = a[:H], a[H : 2 * H], a[2 * H : 3 * H], a[3 * H :]
            tc = np.tanh(cells[t])
            c_prev = cells[t - 1] if t > 0 else np.zeros(H)
            dh = dH[t] + dh_next
            dc = dh * o * (1.0 - tc * tc) + dc_next
            dg = dG[t]
            dg[:H] = dc * g * i * (1.0 - i)
            dg[H : 2 * H] = dc * c_prev * f * (1.0 - f)
            dg[2 * H : 3 * H] = dh * tc * o * (1.0 - o)
            dg[3 * H :] = dc * i * (1.0 - g * g)
            dc_next = dc * f
            dh_next = WhT @ dg
        h_prev = np.vstack([np.zeros((1, H)), hidden[:-1]])
        grads["Wx"] = dG.T @ X
        grads["Wh"] = dG.T @ h_prev
        grads["b"] = dG.sum(axis=0)
        return grads

    def flat_grad(self, grads: dict) -> np.ndarray:
        return np.concatenate([np.asarray(grads[k]).ravel() for k in self.PARAM_NAMES])

    def selection_log_prob(self, X, selected) -> float:
        probs = self.probabilities(X)
        return float(np.sum(np.log(probs[list(selected)])))

    def selection_log_prob_grad(self, X, selected) -> np.ndarray:
        """Flat gradient of the summed log-probability of the ``selected`` devices."""
        probs, cache = self.forward(X)
        weights = np.zeros(len(probs))
        weights[list(selected)] = 1.0
        return self.flat_grad(self.backward(cache, weights * (1.0 - probs)))


@dataclass
class RldsSettings:
    width: int = 32
    init_scale: float = 0.1
    epsilon: float = 0.3
    epsilon_decay: float = 0.99
    epsilon_min: float = 0.01
    epsilon_max: float = 1.0
    eta: float = 1e-3
    gamma_b: float = 0.1
    clip: float = 5.0
    pretrain_rounds: int = 0
    pretrain_plans: int = 8
    policy_file: str | None = None


@dataclass
class PolicyState:
    net: PolicyNetwork
    baseline: float = 0.0
    epsilon: float = 0.3
    eta: float = 1e-3
    gamma_b: float = 0.1
    epsilon_decay: float = 0.99
    epsilon_min: float = 0.01
    epsilon_max: float = 1.0
    clip: float = 5.0
    updates: int = 0
    skipped: int = 0

    def __post_init__(self):
        if not 0 <= self.epsilon <= 1:
            raise ValueError("epsilon must be in [0, 1]")
        if not self.eta >= 0:
            raise ValueError("eta must be >= 0")
        if not 0 < self.gamma_b <= 1:
            raise ValueError("gamma_b must be in (0, 1]")
        self.epsilon = min(max(self.epsilon, self.epsilon_min), self.epsilon_max)

    @classmethod
    def fresh(cls, settings: RldsSettings, rng=None) -> "PolicyState":
        net = PolicyNetwork(settings.width, N_FEATURES, rng=rng, init_scale=settings.init_scale)
        return cls(
            net=net,
            epsilon=settings.epsilon,
            eta=settings.eta,
            gamma_b=settings.gamma_b,
            epsilon_decay=settings.epsilon_decay,
            epsilon_min=settings.epsilon_min,
            epsilon_max=settings.epsilon_max,
            clip=settings.clip,
        )

    def decay_epsilon(self) -> None:
        self.epsilon = min(max(self.epsilon * self.epsilon_decay, self.epsilon_min), self.epsilon_max)


def _minmax(v: np.ndarray) -> np.ndarray:
    lo, hi = v.min(), v.max()
    if hi - lo <= 0:
        return np.zeros_like(v, dtype=float)
    return (v - lo) / (hi - lo)


def encode_state(ctx: SchedulerContext) -> np.ndarray:
    """One feature row per device: [expected time, available, job frequency, fleet frequency]."""
    K = ctx.n_devices
    times = ctx.exp_times.copy()
    finite = np.isfinite(times)
    norm_t = np.ones(K)
    if finite.any():
        norm_t[finite] = _minmax(times[finite])
    avail = np.zeros(K)
    avail[ctx.pool] = 1.0
    own = ctx.freqs.counts.astype(float)
    if ctx.all_freqs:
        fleet = np.sum([f.counts for f in ctx.all_freqs.values()], axis=0).astype(float)
    else:
        fleet = own
    return np.column_stack([norm_t, avail, _minmax(own), _minmax(fleet)])


def policy_forward(net: PolicyNetwork, features) -> np.ndarray:
    return net.probabilities(features)


def convert(probs, ctx: SchedulerContext, epsilon: float, rng=None) -> SchedulingPlan:
    """Epsilon-greedy: top-k free devices by probability, or a uniform random feasible plan."""
    rng = ctx.rng if rng is None else rng
    ctx.require_feasible()
    probs = np.asarray(probs, dtype=float)
    if rng.random() < epsilon:
        return ctx.make_plan(ctx.random_devices(rng))
    pool = ctx.pool
    order = np.lexsort((pool, -probs[pool]))
    return ctx.make_plan(pool[order[: ctx.size]])


def reward(ctx: SchedulerContext, plan: SchedulingPlan, times: Sequence[float] | None = None) -> float:
    """Negative total cost of the executed plan; ``times`` are realized per-member durations."""
    if times is None:
        own = float(ctx.own_costs(np.array([plan.devices]))[0])
    else:
        own = ctx.job.alpha * max(times) / ctx.time_scale + ctx.job.beta * ctx.breakdown(plan).fairness_term
    return -(own + ctx.others_cost)


def reinforce_update(state: PolicyState, batch) -> PolicyState:
    """Apply one REINFORCE step for ``batch`` of (plan, features, reward) tuples, in place."""
    batch = list(batch)
    if not batch:
        raise ValueError("reinforce_update needs at least one sample")
    n = len(batch)
    net = state.net
    rewards = np.array([float(rw) for _, _, rw in batch])
    # group by feature matrix so identical states share one forward/backward pass
    groups: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    for (plan, feats, rw) in batch:
        key = id(feats)
        if key not in groups:
            groups[key] = (feats, np.zeros(len(feats)))
        groups[key][1][list(plan)] += rw - state.baseline
    total = np.zeros(net.n_params)
    for feats, weights in groups.values():
        if not np.any(weights):
            continue
        probs, cache = net.forward(feats)
        total += net.flat_grad(net.backward(cache, weights * (1.0 - probs)))
    grad = total / n
    if not np.all(np.isfinite(grad)):
        state.skipped += 1
        log.warning("non-finite policy gradient (rewards=%s); update skipped", rewards.tolist())
    else:
        gnorm = float(np.linalg.norm(grad))
        if state.clip and gnorm > state.clip:
            grad *= state.clip / gnorm
        if state.eta != 0 and gnorm > 0:
            net.set_flat(net.flat() + state.eta * grad)
        state.updates += 1
    state.baseline = (1.0 - state.gamma_b) * state.baseline + state.gamma_b * rewards.mean()
    state.decay_epsilon()
    return state


@dataclass
class PretrainRecord:
    job: int
    round: int
    costs: list
    committed: tuple


def pretrain(
    states: Mapping[int, PolicyState],
    jobs,
    devices,
    n_plans: int,
    rounds: Mapping[int, int] | int,
    rng: np.random.Generator,
    time_scales: Mapping[int, float] | None = None,
) -> list[PretrainRecord]:
    """Cost-model rollouts that train every job's policy before the real run.

    Each pretraining round walks the jobs in id order; a job samples
    ``n_plans`` plans, updates its policy on their rewards and commits the
    cheapest plan to its frequency vector and to the occupied set.
    """
    if n_plans < 1:
        raise ValueError("n_plans must be >= 1")
    K = len(devices)
    caps = {m: rounds if isinstance(rounds, int) else rounds[m] for m in states}
    freqs = {j.id: FrequencyVector(K) for j in jobs}
    history = []
    for r in range(1, max(caps.values(), default=0) + 1):
        in_use: dict[int, SchedulingPlan] = {}
        occupied: set[int] = set()
        for job in jobs:
            m = job.id
            if m not in states or r > caps[m]:
                continue
            ctx = SchedulerContext(
                job=job, round=r, devices=devices,
                free=[d for d in range(K) if d not in occupied],
                freqs=freqs[m], rng=rng, other_plans=dict(in_use), jobs=jobs,
                all_freqs=freqs, rounds={j.id: r for j in jobs}, time_scales=time_scales,
            )
            if len(ctx.pool) < ctx.size:
                continue
            state = states[m]
            feats = encode_state(ctx)
            probs = policy_forward(state.net, feats)
            plans = [convert(probs, ctx, state.epsilon, rng) for _ in range(n_plans)]
            costs = ctx.total_costs(np.array([p.devices for p in plans]))
            reinforce_update(state, [(p, feats, -c) for p, c in zip(plans, costs)])
            best = plans[int(np.argmin(costs))]
            freqs[m] = update_frequency(freqs[m], best)
            in_use[m] = best
            occupied.update(best.devices)
            history.append(PretrainRecord(m, r, [float(c) for c in costs], best.devices))
    return history


def rlds_schedule(ctx: SchedulerContext, state: PolicyState) -> tuple[SchedulingPlan, np.ndarray]:
    feats = encode_state(ctx)
    probs = policy_forward(state.net, feats)
    return convert(probs, ctx, state.epsilon), feats


def save_policies(path, nets: Mapping[int, PolicyNetwork], n_devices: int) -> None:
    """Write policies as a versioned text header followed by one flat parameter row per job."""
    nets = dict(sorted(nets.items()))
    widths = {n.width for n in nets.values()}
    if len(widths) > 1:
        raise ValueError("all policies in one file must share the hidden width")
    width = widths.pop() if widths else 0
    lines = [
        f"{POLICY_MAGIC} {POLICY_VERSION}",
        f"width {width} devices {n_devices} features {N_FEATURES} jobs {len(nets)}",
    ]
    for m, net in nets.items():
        lines.append(f"{m} " + " ".join(repr(float(x)) for x in net.flat()))
    Path(path).write_text("\n".join(lines) + "\n")


def load_policies(path, n_devices: int | None = None) -> dict[int, PolicyNetwork]:
    text = Path(path).read_text().splitlines()
    head = text[0].split()
    if len(head) != 2 or head[0] != POLICY_MAGIC:
        raise ValueError(f"{path}: not a policy file")
    if int(head[1]) != POLICY_VERSION:
        raise ValueError(f"{path}: unsupported policy version {head[1]}")
    meta = text[1].split()
    fields = dict(zip(meta[::2], (int(v) for v in meta[1::2])))
    if fields["features"] != N_FEATURES:
        raise ValueError(f"{path}: policy expects {fields['features']} features, have {N_FEATURES}")
    if n_devices is not None and fields["devices"] != n_devices:
        raise ValueError(f"{path}: policy trained for {fields['devices']} devices, fleet has {n_devices}")
    nets = {}
    for line in text[2 : 2 + fields["jobs"]]:
        parts = line.split()
        net = PolicyNetwork.zeros(fields["width"], N_FEATURES)
        net.set_flat([float(x) for x in parts[1:]])
        nets[int(parts[0])] = net
    return nets


class RldsScheduler(Scheduler):
    name = "rlds"

    def __init__(self, settings: RldsSettings | None = None, seed: int = 0,
                 nets: Mapping[int, PolicyNetwork] | None = None):
        self.settings = settings or RldsSettings()
        self.seed = seed
        self.states: dict[int, PolicyState] = {}
        self._pending: dict[int, tuple[SchedulingPlan, np.ndarray]] = {}
        for m, net in (nets or {}).items():
            self.states[m] = PolicyState.fresh(self.settings)
            self.states[m].net = net.copy()

    def state(self, job: int) -> PolicyState:
        if job not in self.states:
            rng = np.random.default_rng([self.seed, 7919, job])
            self.states[job] = PolicyState.fresh(self.settings, rng)
        return self.states[job]

    def pretrain(self, jobs, devices, rounds, rng, time_scales=None):
        states = {j.id: self.state(j.id) for j in jobs}
        return pretrain(states, jobs, devices, self.settings.pretrain_plans, rounds, rng, time_scales)

    def schedule(self, ctx):
        plan, feats = rlds_schedule(ctx, self.state(ctx.job.id))
        self._pending[ctx.job.id] = (plan, feats)
        return plan

    def feedback(self, ctx, plan, outcome):
        pending = self._pending.pop(ctx.job.id, None)
        if pending is None or pending[0].devices != plan.devices:
            return
        reinforce_update(self.state(ctx.job.id), [(plan, pending[1], -outcome.total_cost)])
