"""Simulation studies: batch speed/accuracy assessment and a staggered-entry
mobile-health trial run with Thompson sampling.
"""

from __future__ import annotations

import csv
import logging
import os
import time as _time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .bandit import Slot, TsConfig, TsResult, action_rows, run_ts_loop
from .em import ENGINES, BudgetExceeded, EmConfig, dense_memory_bytes, em_fit
from .model import (Dataset, FeatureMap, InputError, NumericalError, Priors,
                    VarianceComponents, builtin_feature_map)

log = logging.getLogger(__name__)

BETA_TRUE = (0.58, 1.98)
SIGMA_U_TRUE = ((0.32, 0.09), (0.09, 0.42))
SIGMA_V_TRUE = ((0.30, 0.0), (0.0, 0.25))
SIGMA_EPS_SQ_TRUE = 0.3


@dataclass(frozen=True)
class GenConfig:
    m: int = 100
    t: int = 30
    n: int = 5
    beta_true: tuple = BETA_TRUE
    Sigma_u_true: tuple = SIGMA_U_TRUE
    Sigma_v_true: tuple = SIGMA_V_TRUE
    sigma_eps_sq_true: float = SIGMA_EPS_SQ_TRUE
    seed: int = 0

    def __post_init__(self):
        for name in ("m", "t", "n"):
            if int(getattr(self, name)) < 1:
                raise InputError(f"{name} must be a positive integer, got {getattr(self, name)}")
        if not self.sigma_eps_sq_true >= 0:
            raise InputError("sigma_eps_sq_true must be nonnegative")
        for name in ("Sigma_u_true", "Sigma_v_true"):
            S = np.asarray(getattr(self, name), dtype=float)
            if S.ndim != 2 or S.shape[0] != S.shape[1] or not np.allclose(S, S.T):
                raise InputError(f"{name} must be a symmetric square matrix")
            # PSD is enough for generation (the noiseless limit uses zeros)
            if np.linalg.eigvalsh(S).min() < -1e-12:
                raise InputError(f"{name} is not positive semidefinite")

    @property
    def truth(self) -> VarianceComponents:
        return VarianceComponents(self.sigma_eps_sq_true, np.asarray(self.Sigma_u_true),
                                  np.asarray(self.Sigma_v_true))

    def with_(self, **kw) -> "GenConfig":
        return GenConfig(**{**asdict(self), **kw})


def _mvn(rng, S, size):
    S = np.asarray(S, dtype=float)
    w, V = np.linalg.eigh(S)
    return rng.standard_normal((size, len(S))) @ (V * np.sqrt(np.clip(w, 0, None))).T


@dataclass(frozen=True)
class BatchDraw:
    """Raw columns of a simulated batch (0-based user/time) and the true effects."""

    user: np.ndarray
    time: np.ndarray
    replicate: np.ndarray
    X: np.ndarray
    A: np.ndarray
    y: np.ndarray
    u: np.ndarray
    v: np.ndarray
    m: int
    t: int

    def dataset(self, fm: FeatureMap) -> Dataset:
        Z, Zu, Zv = fm.rows(self.X, self.A)
        return Dataset(self.user, self.time, Z, Zu, Zv, self.y, self.m, self.t)


def draw_batch(gc: GenConfig, fm: FeatureMap | None = None) -> BatchDraw:
    """m users x t times x n replicates; x ~ U(0,1), binary action unused by
    the default "linear" feature map."""
    fm = fm or builtin_feature_map("linear")
    d = fm.context_dim or 1
    beta = np.asarray(gc.beta_true, dtype=float)
    if (len(beta), len(gc.Sigma_u_true), len(gc.Sigma_v_true)) != (fm.p, fm.q_u, fm.q_v):
        raise InputError(f"GenConfig dimensions do not match feature map {fm.name!r}")
    rng = np.random.default_rng(gc.seed)
    m, t, n = gc.m, gc.t, gc.n
    u = _mvn(rng, gc.Sigma_u_true, m)
    v = _mvn(rng, gc.Sigma_v_true, t)
    N = m * t * n
    user = np.repeat(np.arange(m), t * n)
    time = np.tile(np.repeat(np.arange(t), n), m)
    rep = np.tile(np.arange(n), m * t)
    X = rng.uniform(size=(N, d))
    A = rng.integers(0, 2, size=N)
    Z, Zu, Zv = fm.rows(X, A)
    eps = rng.standard_normal(N) * np.sqrt(gc.sigma_eps_sq_true)
    y = (Z @ beta + np.einsum("na,na->n", Zu, u[user])
         + np.einsum("nb,nb->n", Zv, v[time]) + eps)
    return BatchDraw(user, time, rep, X, A, y, u, v, m, t)


def generate_batch(gc: GenConfig, fm: FeatureMap | None = None) -> Dataset:
    fm = fm or builtin_feature_map("linear")
    return draw_batch(gc, fm).dataset(fm)


def random_instance(seed, m_max: int = 10, t_max: int = 6, dim_max: int = 2,
                    n_max: int = 3):
    """Small model-based instance with random sizes, design, and truth.

    Cells get 0..n_max replicates, design entries are standard normal and
    the responses follow the model with random SPD variance components and
    sigma_eps_sq ~ U(0.2, 2). Priors on beta are N(0, I).
    """
    rng = np.random.default_rng(seed)
    m, t = int(rng.integers(1, m_max + 1)), int(rng.integers(1, t_max + 1))
    p, qu, qv = (int(k) for k in rng.integers(1, dim_max + 1, size=3))
    counts = rng.integers(0, n_max + 1, size=(m, t))
    if counts.sum() == 0:
        counts[0, 0] = 1
    user, time = (np.repeat(ix.ravel(), counts.ravel())
                  for ix in np.meshgrid(np.arange(m), np.arange(t), indexing="ij"))
    N = len(user)

    def spd(q):
        G = rng.standard_normal((q, q))
        return G @ G.T / q + 0.1 * np.eye(q)

    Su, Sv = spd(qu), spd(qv)
    s2 = rng.uniform(0.2, 2.0)
    beta = rng.standard_normal(p)
    Z, Zu, Zv = (rng.standard_normal((N, k)) for k in (p, qu, qv))
    u, v = _mvn(rng, Su, m), _mvn(rng, Sv, t)
    y = (Z @ beta + np.einsum("na,na->n", Zu, u[user]) + np.einsum("nb,nb->n", Zv, v[time])
         + rng.standard_normal(N) * np.sqrt(s2))
    return Dataset(user, time, Z, Zu, Zv, y, m, t), Priors.default(p)


def available_workers() -> int:
    try:
        import psutil
        n = psutil.cpu_count(logical=False)
    except ImportError:  # pragma: no cover
        n = None
    return int(n or os.cpu_count() or 1)


def _pmap(fn, tasks, workers):
    """Ordered map, in a process pool when workers > 1."""
    tasks = list(tasks)
    if workers is None:
        workers = available_workers()
    if workers <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=min(workers, len(tasks))) as ex:
        return list(ex.map(fn, tasks))


# ---------------------------------------------------------------------------
# Batch speed / accuracy assessment
# ---------------------------------------------------------------------------


def _total_memory() -> int:
    try:
        return os.sysconf("SC_PAGE_SIZE") * os.sysconf("SC_PHYS_PAGES")
    except (ValueError, OSError, AttributeError):  # pragma: no cover
        return 8 << 30


@dataclass(frozen=True)
class SpeedConfig:
    sizes: tuple = (10, 50, 100)
    reps: int = 50
    engines: tuple = ENGINES
    gen: GenConfig = field(default_factory=GenConfig)
    tol: float = 1e-5
    max_iter: int = 100
    budget_seconds: float = 45 * 60.0
    memory_budget: float | None = None  # bytes for one naive fit; None = half of RAM
    seed: int = 0

    def __post_init__(self):
        bad = set(self.engines) - set(ENGINES)
        if bad:
            raise InputError(f"unknown engines {sorted(bad)}; choose from {ENGINES}")
        if int(self.reps) < 1:
            raise InputError("reps must be positive")


def rep_seed(base: int, m: int, rep: int) -> int:
    return int(np.random.SeedSequence([int(base), int(m), int(rep)]).generate_state(1)[0])


@dataclass
class SpeedCell:
    m: int
    datapoints: int
    engine: str
    rep: int
    seconds: float | None  # None = NA
    converged: bool | None
    n_iter: int | None
    vc: VarianceComponents | None
    note: str = ""


def _speed_task(args) -> list[SpeedCell]:
    cfg, m, rep = args
    gc = cfg.gen.with_(m=m, seed=rep_seed(cfg.seed, m, rep))
    data = generate_batch(gc)
    mem_cap = cfg.memory_budget if cfg.memory_budget is not None else _total_memory() / 2
    em_cfg = EmConfig(tol=cfg.tol, max_iter=cfg.max_iter, time_budget=cfg.budget_seconds)
    out = []
    for engine in cfg.engines:
        cell = SpeedCell(m, data.N, engine, rep, None, None, None, None)
        if engine == "naive" and dense_memory_bytes(data) > mem_cap:
            cell.note = "memory budget"
            out.append(cell)
            continue
        t0 = _time.perf_counter()
        try:
            fit = em_fit(data, Priors.default(data.p), em_cfg, engine=engine)
        except BudgetExceeded as exc:
            cell.note = str(exc)
        except (NumericalError, MemoryError, np.linalg.LinAlgError) as exc:
            cell.note = f"{type(exc).__name__}: {exc}"
        else:
            cell.seconds = _time.perf_counter() - t0
            cell.converged = fit.trace.converged
            cell.n_iter = fit.trace.n_iter
            cell.vc = fit.vc
        if cell.seconds is None:
            log.warning("m=%d rep=%d %s -> NA (%s)", m, rep, engine, cell.note)
        out.append(cell)
    return out


@dataclass
class SpeedResult:
    cfg: SpeedConfig
    cells: list[SpeedCell]

    def timings_rows(self):
        for c in self.cells:
            yield [c.m, c.datapoints, c.engine, c.rep,
                   "NA" if c.seconds is None else repr(c.seconds),
                   "NA" if c.converged is None else int(c.converged)]

    def abs_error_rows(self):
        truth = self.cfg.gen.truth.components()
        for c in self.cells:
            est = c.vc.components() if c.vc is not None else None
            for name, val in truth.items():
                err = "NA" if est is None else repr(abs(est[name] - val))
                yield [name, c.engine, c.rep, err, c.m]

    def summary_rows(self):
        """One row per (m, engine): mean and sd of seconds over non-NA reps."""
        for m in self.cfg.sizes:
            for e in self.cfg.engines:
                cells = [c for c in self.cells if c.m == m and c.engine == e]
                secs = np.array([c.seconds for c in cells if c.seconds is not None])
                dp = cells[0].datapoints if cells else m * self.cfg.gen.t * self.cfg.gen.n
                if len(secs):
                    sd = secs.std(ddof=1) if len(secs) > 1 else 0.0
                    yield [m, dp, e, repr(secs.mean()), repr(sd), len(secs), len(cells) - len(secs)]
                else:
                    yield [m, dp, e, "NA", "NA", 0, len(cells)]

    def write(self, out_dir):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write_csv(out / "timings.csv", ["m", "datapoints", "engine", "rep", "seconds", "converged"],
                   self.timings_rows())
        _write_csv(out / "abs_errors.csv", ["component", "engine", "rep", "abs_error", "m"],
                   self.abs_error_rows())
        _write_csv(out / "timing_summary.csv",
                   ["m", "datapoints", "engine", "mean_seconds", "sd_seconds", "n_ok", "n_na"],
                   self.summary_rows())


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def run_speed_assessment(cfg: SpeedConfig, workers: int | None = 1) -> SpeedResult:
    """Time both engines on the same simulated data for every (m, rep).

    Timing covers the fit call only. Cells over the wall-clock or memory
    budget are recorded as NA.
    """
    tasks = [(cfg, m, r) for m in cfg.sizes for r in range(cfg.reps)]
    cells = [c for chunk in _pmap(_speed_task, tasks, workers) for c in chunk]
    return SpeedResult(cfg, cells)


# ---------------------------------------------------------------------------
# Staggered-entry trial
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrialConfig:
    n_users: int = 32
    n_weeks: int = 10
    days_per_week: int = 7
    decisions_per_day: int = 5
    cohort_size: int = 4  # users entering per calendar week
    dropout_prob: float = 0.0  # weekly, after the first study week
    context_dim: int = 1
    clip: tuple | None = (0.05, 0.95)
    policy: str = "ts"  # or "oracle"
    tol: float = 1e-5
    max_iter: int = 100
    seed: int = 0

    def __post_init__(self):
        for name in ("n_users", "n_weeks", "days_per_week", "decisions_per_day", "cohort_size"):
            if int(getattr(self, name)) < 1:
                raise InputError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not 0 <= self.dropout_prob < 1:
            raise InputError("dropout_prob must lie in [0, 1)")
        if self.policy not in ("ts", "oracle"):
            raise InputError(f"policy must be 'ts' or 'oracle', got {self.policy!r}")

    def entry_week(self, user: int) -> int:
        """Calendar week (1-based) in which 1-based ``user`` enters."""
        return (user - 1) // self.cohort_size + 1

    @property
    def calendar_weeks(self) -> int:
        return self.entry_week(self.n_users) + self.n_weeks - 1


def trial_truth() -> GenConfig:
    """Default reward model for the trial: the batch-study values with the
    slope acting through action x context."""
    return GenConfig()


class TrialEnvironment:
    """Rewards from the crossed model with effects drawn at setup."""

    def __init__(self, fm: FeatureMap, truth: GenConfig, n_users: int, n_weeks: int, rng):
        self.fm = fm
        self.beta = np.asarray(truth.beta_true, dtype=float)
        self.u = _mvn(rng, truth.Sigma_u_true, n_users)
        self.v = _mvn(rng, truth.Sigma_v_true, n_weeks)
        self.sigma = float(np.sqrt(truth.sigma_eps_sq_true))

    def theta(self, user: int, time: int) -> np.ndarray:
        return np.concatenate([self.beta, self.u[user - 1], self.v[time - 1]])

    def means(self, user: int, time: int, context, K: int = 2) -> np.ndarray:
        return action_rows(self.fm, context, K) @ self.theta(user, time)

    def reward(self, user, time, context, action, rng) -> float:
        return float(self.means(user, time, context)[action] + self.sigma * rng.standard_normal())


def build_schedule(tc: TrialConfig, rng) -> list[Slot]:
    """Decision slots over calendar weeks; users enter in cohorts and may drop out."""
    users = np.arange(1, tc.n_users + 1)
    entry = np.array([tc.entry_week(u) for u in users])
    active_until = entry + tc.n_weeks - 1
    slots = []
    for w in range(1, tc.calendar_weeks + 1):
        if tc.dropout_prob > 0:
            started = (entry < w) & (active_until >= w)
            drop = started & (rng.random(tc.n_users) < tc.dropout_prob)
            active_until[drop] = w - 1
        act = users[(entry <= w) & (active_until >= w)]
        if len(act) == 0:
            continue
        times = w - entry[act - 1] + 1
        for _ in range(tc.days_per_week * tc.decisions_per_day):
            X = rng.uniform(size=(len(act), tc.context_dim))
            slots.append(Slot(w, act, times, X))
    return slots


@dataclass
class TrialResult:
    weekly_regret: np.ndarray  # index k = study week k + 1; NaN if no decisions
    regret: np.ndarray  # per decision
    study_week: np.ndarray  # per decision
    ts: TsResult | None


def run_mhealth_trial(tc: TrialConfig, truth: GenConfig | None = None,
                      engine: str = "streamlined") -> TrialResult:
    """One replication; regret is averaged by each user's study week."""
    truth = truth or trial_truth()
    fm = builtin_feature_map("interaction", tc.context_dim)
    setup_ss, ts_ss = np.random.SeedSequence(tc.seed).spawn(2)
    setup_rng = np.random.default_rng(setup_ss)
    env = TrialEnvironment(fm, truth, tc.n_users, tc.n_weeks, setup_rng)
    schedule = build_schedule(tc, setup_rng)
    ts_seed = int(ts_ss.generate_state(1)[0])

    if tc.policy == "oracle":
        regret, weeks = [], []
        for slot in schedule:
            for u, tau, x in zip(slot.users, slot.times, slot.contexts):
                mu = env.means(int(u), int(tau), x)
                regret.append(mu.max() - mu[int(np.argmax(mu))])
                weeks.append(int(tau))
        ts = None
    else:
        cfg = TsConfig(engine=engine, clip=tc.clip, seed=ts_seed,
                       em=EmConfig(tol=tc.tol, max_iter=tc.max_iter))
        ts = run_ts_loop(env, schedule, Priors.default(fm.p), fm, cfg)
        regret, weeks = [], []
        for d in ts.decisions:
            mu = env.means(d.user, d.time, d.context)
            regret.append(mu.max() - mu[d.action])
            weeks.append(d.time)
    regret, weeks = np.asarray(regret, dtype=float), np.asarray(weeks)
    weekly = np.full(tc.n_weeks, np.nan)
    for k in range(tc.n_weeks):
        sel = weeks == k + 1
        if np.any(sel):
            weekly[k] = regret[sel].mean()
    return TrialResult(weekly, regret, weeks, ts)


def _trial_task(args):
    tc, truth, engine = args
    res = run_mhealth_trial(tc, truth, engine)
    return res.weekly_regret


@dataclass
class RegretTable:
    engines: tuple
    reps: int
    curves: dict  # (engine, rep) -> weekly regret

    def rows(self):
        for e in self.engines:
            for r in range(self.reps):
                for k, val in enumerate(self.curves[e, r]):
                    yield [k + 1, e, r, "NA" if np.isnan(val) else repr(float(val))]

    def write(self, path):
        _write_csv(path, ["study_week", "engine", "rep", "mean_regret"], self.rows())


def run_trial_replications(tc: TrialConfig, engines=("streamlined",), reps: int = 10,
                           truth: GenConfig | None = None, workers: int | None = 1) -> RegretTable:
    """Replications r = 0..reps-1 use seed tc.seed + r; engines share seeds."""
    tasks = []
    for e in engines:
        for r in range(reps):
            tce = TrialConfig(**{**asdict(tc), "seed": tc.seed + r,
                                 "policy": "oracle" if e == "oracle" else tc.policy})
            tasks.append((tce, truth, e if e != "oracle" else "streamlined"))
    curves = _pmap(_trial_task, tasks, workers)
    keys = [(e, r) for e in engines for r in range(reps)]
    return RegretTable(tuple(engines), reps, dict(zip(keys, curves)))
