"""Thompson-sampling contextual bandit driven by the crossed random-effects
posterior, with periodic empirical-Bayes refits of the variance components.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np
from scipy.special import ndtr

from .em import ENGINES, BudgetExceeded, EmConfig, EmTrace, em_fit, make_estep
from .model import (Dataset, FeatureMap, InputError, NumericalError,
                    PosteriorSummary, Priors, VarianceComponents, prior_posterior)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ThetaPosterior:
    """N(mean, cov) for theta = [beta; u_i; v_t]."""

    mean: np.ndarray
    cov: np.ndarray
    user: int
    time: int


@dataclass
class DecisionRecord:
    step: int
    user: int  # external id
    time: int  # 1-based time index (study week)
    context: np.ndarray
    probs: np.ndarray  # after clipping
    action: int
    reward: float = float("nan")

    @property
    def pi(self) -> float:
        """P(action 1) for binary actions, else the chosen action's probability."""
        return float(self.probs[1] if len(self.probs) == 2 else self.probs[self.action])


def assemble_theta_posterior(post: PosteriorSummary, i: int, t: int,
                             vc: VarianceComponents | None = None) -> ThetaPosterior:
    """Joint posterior of [beta; u_i; v_t] (0-based i, t).

    A user or time beyond the fitted ranges has no data, so its effect is
    a-posteriori independent of everything else and keeps its prior
    N(0, Sigma_u) or N(0, Sigma_v).
    """
    vc = vc if vc is not None else post.vc
    if vc is None:
        raise InputError("posterior carries no variance components for the prior fallback")
    p, qu, qv = post.p, vc.q_u, vc.q_v
    known_u, known_v = 0 <= i < post.m, 0 <= t < post.t
    mu_u = post.mu_u[i] if known_u else np.zeros(qu)
    mu_v = post.mu_v[t] if known_v else np.zeros(qv)
    S_u = post.Sigma_u[i] if known_u else vc.Sigma_u
    S_v = post.Sigma_v[t] if known_v else vc.Sigma_v
    C_bu = post.Cov_beta_u[i] if known_u else np.zeros((p, qu))
    C_bv = post.Cov_beta_v[t] if known_v else np.zeros((p, qv))
    C_uv = post.Cov_u_v[i, t] if known_u and known_v else np.zeros((qu, qv))
    cov = np.block([[post.Sigma_beta, C_bu, C_bv],
                    [C_bu.T, S_u, C_uv],
                    [C_bv.T, C_uv.T, S_v]])
    return ThetaPosterior(np.concatenate([post.mu_beta, mu_u, mu_v]),
                          0.5 * (cov + cov.T), i, t)


def action_rows(fm: FeatureMap, context, K: int) -> np.ndarray:
    """(K, p + q_u + q_v) matrix whose row a is [z, z_u, z_v] at (context, a)."""
    X = np.repeat(np.atleast_2d(np.asarray(context, dtype=float)), K, axis=0)
    Z, Zu, Zv = fm.rows(X, np.arange(K))
    return np.hstack([Z, Zu, Zv])


def randomization_probability(tp: ThetaPosterior, fm: FeatureMap, context, K: int = 2,
                              n_draws: int = 10_000, rng=None) -> np.ndarray:
    """P(action a has the largest expected reward) under theta ~ N(mean, cov).

    Closed form for K = 2; Monte Carlo with ``n_draws`` draws otherwise
    (ties split evenly).
    """
    if K < 2:
        raise InputError(f"need at least two actions, got K={K}")
    rows = action_rows(fm, context, K)
    if K == 2:
        d = rows[1] - rows[0]
        m = float(d @ tp.mean)
        v = float(d @ tp.cov @ d)
        if v > 1e-300 * max(1.0, m * m):
            p1 = float(ndtr(m / np.sqrt(v)))
        else:
            p1 = 0.5 if m == 0 else float(m > 0)
        return np.array([1.0 - p1, p1])
    rng = rng if rng is not None else np.random.default_rng()
    L = np.linalg.cholesky(tp.cov + 1e-12 * np.eye(len(tp.mean)))
    theta = tp.mean + rng.standard_normal((n_draws, len(tp.mean))) @ L.T
    vals = theta @ rows.T
    best = vals == vals.max(axis=1, keepdims=True)
    return (best / best.sum(axis=1, keepdims=True)).mean(axis=0)


def clip_probs(probs: np.ndarray, clip: tuple[float, float] | None) -> np.ndarray:
    if clip is None:
        return probs
    lo, hi = clip
    if len(probs) == 2:
        p1 = min(max(probs[1], lo), hi)
        return np.array([1.0 - p1, p1])
    out = np.clip(probs, lo, hi)
    return out / out.sum()


# ---------------------------------------------------------------------------
# Online loop
# ---------------------------------------------------------------------------


class RewardEnvironment(Protocol):
    def reward(self, user: int, time: int, context: np.ndarray, action: int,
               rng: np.random.Generator) -> float: ...


@dataclass(frozen=True)
class Slot:
    """One decision time: the active users, their time index and contexts.

    ``week`` is the calendar period; hyperparameters are refit when it
    changes (and after the last slot).
    """

    week: int
    users: np.ndarray
    times: np.ndarray  # 1-based
    contexts: np.ndarray  # (n_active, context_dim)


@dataclass(frozen=True)
class TsConfig:
    engine: str = "streamlined"
    K: int = 2
    clip: tuple[float, float] | None = (0.05, 0.95)
    mc_draws: int = 10_000
    refit_every: int | None = None  # decisions between refits; None = each calendar week
    em: EmConfig = field(default_factory=lambda: EmConfig())
    init: VarianceComponents | None = None
    seed: int = 0

    def __post_init__(self):
        if self.engine not in ENGINES:
            raise ValueError(f"engine must be one of {ENGINES}, got {self.engine!r}")
        if self.clip is not None:
            lo, hi = self.clip
            if not 0 <= lo <= hi <= 1:
                raise ValueError(f"clip bounds must satisfy 0 <= lo <= hi <= 1, got {self.clip}")


@dataclass
class TsResult:
    decisions: list[DecisionRecord]
    refits: list[tuple[int, EmTrace]]  # (decisions so far, trace)
    vc: VarianceComponents
    posterior: PosteriorSummary

    def write_decisions(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "user", "time", "pi", "action", "reward"])
            for d in self.decisions:
                w.writerow([d.step, d.user, d.time, repr(d.pi), d.action, repr(float(d.reward))])

    def write_refits(self, path):
        with open(path, "w", newline="") as fh:
            w = None
            for k, (n, tr) in enumerate(self.refits):
                if w is None:
                    w = csv.writer(fh)
                    w.writerow(["refit", "n_decisions"] + tr.header())
                for rec in tr.records():
                    w.writerow([k, n] + [repr(float(v)) if isinstance(v, float) else v for v in rec])


class _History:
    """Accumulated design rows, with users relabelled 0.. in order of entry."""

    def __init__(self, fm: FeatureMap):
        self.fm = fm
        self.index: dict[int, int] = {}
        self.parts: list[tuple] = []
        self.t = 0

    def user_index(self, user) -> int:
        return self.index.get(int(user), len(self.index))

    def add(self, users, times, contexts, actions, rewards):
        idx = np.array([self.index.setdefault(int(u), len(self.index)) for u in users])
        Z, Zu, Zv = self.fm.rows(contexts, actions)
        self.parts.append((idx, np.asarray(times) - 1, Z, Zu, Zv, np.asarray(rewards, float)))
        self.t = max(self.t, int(np.max(times)))

    def dataset(self) -> Dataset | None:
        if not self.parts:
            return None
        cols = [np.concatenate(c) for c in zip(*self.parts)]
        return Dataset(*cols, m=len(self.index), t=self.t)


def run_ts_loop(env: RewardEnvironment, schedule: Sequence[Slot], priors: Priors,
                fm: FeatureMap, cfg: TsConfig | None = None) -> TsResult:
    """Run Thompson sampling over ``schedule``.

    After every slot the posterior is recomputed from all data with the
    current variance components. At the end of each calendar week (or every
    ``refit_every`` decisions) the components are refit by EM, warm-started
    at the previous estimate. A failed refit is logged and the previous
    estimate kept.
    """
    cfg = cfg or TsConfig()
    env_rng, act_rng, mc_rng = (np.random.default_rng(s)
                                for s in np.random.SeedSequence(cfg.seed).spawn(3))
    vc = cfg.init if cfg.init is not None else VarianceComponents.identity(fm.q_u, fm.q_v)
    post = prior_posterior(priors, vc, 0, 0)
    hist = _History(fm)
    decisions: list[DecisionRecord] = []
    refits: list[tuple[int, EmTrace]] = []
    since_refit = 0

    def refresh(data):
        return make_estep(cfg.engine, data, priors)(vc)[0]

    def refit(data):
        nonlocal vc
        try:
            fit = em_fit(data, priors, EmConfig(cfg.em.tol, cfg.em.max_iter, vc, cfg.em.time_budget),
                         engine=cfg.engine)
        except (NumericalError, BudgetExceeded, np.linalg.LinAlgError) as exc:
            log.warning("refit after %d decisions failed (%s); keeping previous estimate",
                        len(decisions), exc)
            return refresh(data)
        refits.append((len(decisions), fit.trace))
        vc = fit.vc
        return fit.posterior

    for k, slot in enumerate(schedule):
        acts, rewards = [], []
        for user, tau, x in zip(slot.users, slot.times, slot.contexts):
            tp = assemble_theta_posterior(post, hist.user_index(user), int(tau) - 1, vc)
            probs = clip_probs(randomization_probability(tp, fm, x, cfg.K, cfg.mc_draws, mc_rng),
                               cfg.clip)
            a = int(act_rng.choice(cfg.K, p=probs)) if cfg.K > 2 else int(act_rng.random() < probs[1])
            r = float(env.reward(int(user), int(tau), x, a, env_rng))
            decisions.append(DecisionRecord(len(decisions), int(user), int(tau),
                                            np.asarray(x), probs, a, r))
            acts.append(a)
            rewards.append(r)
        if len(acts):
            hist.add(slot.users, slot.times, slot.contexts, np.array(acts), rewards)
        since_refit += len(acts)
        data = hist.dataset()
        if data is None:
            continue
        last = k + 1 == len(schedule)
        if cfg.refit_every is not None:
            due = since_refit >= cfg.refit_every or last
        else:
            due = last or schedule[k + 1].week != slot.week
        if due:
            post = refit(data)
            since_refit = 0
        elif len(acts):
            post = refresh(data)
    return TsResult(decisions, refits, vc, post)
