"""Bayesian-optimization device scheduling: GP surrogate over plan indicators with EI acquisition."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.stats import norm

from ..core import SchedulingPlan
from .base import Scheduler, SchedulerContext

_SQRT5 = math.sqrt(5.0)


@dataclass
class Observation:
    plan_vector: np.ndarray
    cost: float


@dataclass
class GpPosterior:
    mean: float
    variance: float


def matern52(distance, lengthscale: float, signal_var: float):
    r = _SQRT5 * np.asarray(distance, dtype=float) / lengthscale
    return signal_var * (1.0 + r + r * r / 3.0) * np.exp(-r)


def matern_kernel(u, v, lengthscale: float, signal_var: float) -> float:
    """Matern-5/2 between two binary plan vectors, distance = sqrt(Hamming)."""
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    if u.shape != v.shape:
        raise ValueError(f"plan vectors differ in length: {u.shape} vs {v.shape}")
    if lengthscale <= 0 or signal_var <= 0:
        raise ValueError("lengthscale and signal_var must be positive")
    return float(matern52(math.sqrt(np.sum(u != v)), lengthscale, signal_var))


def gram(X1: np.ndarray, X2: np.ndarray, lengthscale: float, signal_var: float) -> np.ndarray:
    X1 = np.asarray(X1, dtype=float)
    X2 = np.asarray(X2, dtype=float)
    # for 0/1 vectors Hamming = |x|^2 + |y|^2 - 2 x.y
    ham = X1.sum(axis=1)[:, None] + X2.sum(axis=1)[None, :] - 2.0 * X1 @ X2.T
    return matern52(np.sqrt(np.maximum(ham, 0.0)), lengthscale, signal_var)


class GaussianProcess:
    """Zero-mean GP on centered costs; prior mean is the sample mean of the observed costs."""

    def __init__(self, lengthscale: float, signal_var: float | None = None, jitter: float | None = None):
        self.lengthscale = lengthscale
        self.signal_var = signal_var
        self.jitter = jitter

    def fit(self, X, y, max_retries: int = 3) -> "GaussianProcess":
        X = np.asarray(X, dtype=float)
        y = np.asarray(y, dtype=float)
        if len(y) < 1:
            raise ValueError("need at least one observation")
        self.X = X
        self.prior_mean = float(y.mean())
        signal_var = self.signal_var
        if signal_var is None:
            signal_var = float(y.var()) if len(y) > 1 else 0.0
            if not signal_var > 0:
                signal_var = 1e-12
        self.sv = signal_var
        jitter = self.jitter if self.jitter is not None else 1e-6 * signal_var
        if not jitter > 0:
            raise ValueError("noise jitter must be positive")
        K = gram(X, X, self.lengthscale, signal_var)
        for _ in range(max_retries + 1):
            try:
                self.chol = cho_factor(K + jitter * np.eye(len(y)), lower=True)
                break
            except np.linalg.LinAlgError:
                jitter *= 10.0
        else:
            raise np.linalg.LinAlgError("Cholesky failed after raising the jitter 3 times")
        self.noise = jitter
        self.weights = cho_solve(self.chol, y - self.prior_mean)
        return self

    def predict(self, Xq) -> tuple[np.ndarray, np.ndarray]:
        Xq = np.atleast_2d(np.asarray(Xq, dtype=float))
        Ks = gram(Xq, self.X, self.lengthscale, self.sv)
        mean = self.prior_mean + Ks @ self.weights
        v = cho_solve(self.chol, Ks.T)
        var = self.sv - np.einsum("ij,ji->i", Ks, v)
        return mean, np.maximum(var, 0.0)

    def posterior(self, xq) -> GpPosterior:
        mean, var = self.predict(xq)
        return GpPosterior(float(mean[0]), float(var[0]))


def gp_fit(observations, noise: float | None = None, lengthscale: float | None = None,
           noise_ratio: float = 1e-6) -> GaussianProcess:
    """Fit the surrogate; ``noise`` defaults to ``noise_ratio`` times the cost variance."""
    X = np.array([o.plan_vector for o in observations], dtype=float)
    y = np.array([o.cost for o in observations], dtype=float)
    if lengthscale is None:
        lengthscale = math.sqrt(max(1.0, X[0].sum()))
    gp = GaussianProcess(lengthscale, jitter=noise)
    if noise is None:
        sv = float(y.var()) if len(y) > 1 else 0.0
        gp.jitter = noise_ratio * (sv if sv > 0 else 1e-12)
    return gp.fit(X, y)


def expected_improvement(mean, variance, best):
    """EI for minimization; reduces to max(0, best - mean) where the variance is zero."""
    mean = np.asarray(mean, dtype=float)
    s = np.sqrt(np.maximum(np.asarray(variance, dtype=float), 0.0))
    gain = best - mean
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(s > 0, gain / np.where(s > 0, s, 1.0), 0.0)
    ei = np.where(s > 0, gain * norm.cdf(z) + s * norm.pdf(z), np.maximum(gain, 0.0))
    ei = np.maximum(ei, 0.0)
    return float(ei) if ei.ndim == 0 else ei


@dataclass
class BodsSettings:
    n_init: int = 8
    n_cand: int = 64
    window: int = 256
    # share of candidates drawn as swaps around the best observed plans
    local_share: float = 0.5
    max_swaps: int = 2
    # GP jitter relative to the observed cost variance
    noise_ratio: float = 1e-6


@dataclass
class BodsState:
    window: int = 256
    observations: deque = field(default_factory=deque)
    total_recorded: int = 0

    def __post_init__(self):
        self.observations = deque(self.observations, maxlen=self.window)

    def record(self, plan_vector: np.ndarray, cost: float) -> None:
        self.observations.append(Observation(np.asarray(plan_vector, dtype=float), float(cost)))
        self.total_recorded += 1


def _local_candidates(ctx: SchedulerContext, state: BodsState, n: int, max_swaps: int) -> list[np.ndarray]:
    pool = ctx.pool
    in_pool = np.zeros(ctx.n_devices, dtype=bool)
    in_pool[pool] = True
    ranked = sorted(state.observations, key=lambda o: o.cost)[: max(1, n)]
    out = []
    for i in range(n):
        base = np.flatnonzero(ranked[i % len(ranked)].plan_vector > 0.5)
        kept = base[in_pool[base]]
        if len(kept) > ctx.size:
            kept = ctx.rng.choice(kept, size=ctx.size, replace=False)
        outside = np.setdiff1d(pool, kept)
        n_drop = min(len(kept), int(ctx.rng.integers(1, max_swaps + 1)))
        if len(kept) == ctx.size and len(outside) > 0:
            kept = np.delete(kept, ctx.rng.choice(len(kept), size=n_drop, replace=False))
            outside = np.setdiff1d(pool, kept)
        fill = ctx.rng.choice(outside, size=ctx.size - len(kept), replace=False)
        out.append(np.sort(np.concatenate([kept, fill]).astype(np.int64)))
    return out


def bods_schedule(ctx: SchedulerContext, state: BodsState, settings: BodsSettings | None = None) -> SchedulingPlan:
    """Random plans while bootstrapping, afterwards the EI-maximizing candidate."""
    settings = settings or BodsSettings()
    ctx.require_feasible()
    if len(state.observations) < max(1, settings.n_init):
        return ctx.make_plan(ctx.random_devices())
    n_cand = max(1, settings.n_cand)
    n_local = int(n_cand * settings.local_share) if n_cand > 1 else 0
    cands = [ctx.random_devices() for _ in range(n_cand - n_local)]
    cands += _local_candidates(ctx, state, n_local, settings.max_swaps)
    if len(cands) == 1:
        return ctx.make_plan(cands[0])
    Xq = np.zeros((len(cands), ctx.n_devices))
    for i, c in enumerate(cands):
        Xq[i, c] = 1.0
    gp = gp_fit(state.observations, lengthscale=math.sqrt(ctx.size), noise_ratio=settings.noise_ratio)
    mean, var = gp.predict(Xq)
    best = min(o.cost for o in state.observations)
    ei = expected_improvement(mean, var, best)
    return ctx.make_plan(cands[int(np.argmax(ei))])


class BodsScheduler(Scheduler):
    name = "bods"

    def __init__(self, settings: BodsSettings | None = None):
        self.settings = settings or BodsSettings()
        self.states: dict[int, BodsState] = {}

    def state(self, job: int) -> BodsState:
        if job not in self.states:
            self.states[job] = BodsState(window=self.settings.window)
        return self.states[job]

    def schedule(self, ctx):
        return bods_schedule(ctx, self.state(ctx.job.id), self.settings)

    def feedback(self, ctx, plan, outcome):
        # other jobs' terms are the same for every candidate plan, so only this job's cost is kept
        self.state(ctx.job.id).record(plan.indicator(ctx.n_devices), outcome.own_cost)
