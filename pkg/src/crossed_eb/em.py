"""Empirical-Bayes fitting of the variance components by EM.

Two engines share the M-step and the convergence rule and differ only in the
E-step:

* ``naive``: dense posterior from the full normal equations, O((m + t)^3).
* ``streamlined``: the posterior is rewritten as a two-level sparse
  least-squares problem with users as groups, solved by :func:`stlsls`,
  O(m t^3).

Group i (a user) carries, in order, its data rows, p prior rows for beta,
t q_v prior rows for the time effects and q_u prior rows for u_i:

    b_i    = [ y_i / s ;  m^-1/2 W_b mu_beta ;  0 ;  0 ]
    B_i    = [ Z_i / s ,  Zv_i / s ;  m^-1/2 W_b , 0 ;  0 , m^-1/2 (I_t (x) W_v) ;  0 , 0 ]
    Bdot_i = [ Zu_i / s ;  0 ;  0 ;  W_u ]

with s = sigma_eps and W_S^T W_S = inv(S). Stacking all groups reproduces
B^T B = C^T R^-1 C + D and B^T b = C^T R^-1 y + o, so x1 = [beta; v_1..v_t]
and x2_i = u_i.
"""

from __future__ import annotations

import csv
import time as _time
from dataclasses import dataclass, field, replace
from typing import Iterator, NamedTuple

import numpy as np

from .model import (Dataset, NumericalError, PosteriorSummary, Priors,
                    VarianceComponents, _check_dims, _mll_from_parts,
                    assemble_dense_system, dense_factorize,
                    dense_marginal_log_likelihood, expected_complete_data_loglik,
                    expected_sq_residuals, inv_sqrt_factor, prior_cov_logdet,
                    split_theta_cov)
from .stlsls import GroupBatch, TwoLevelBlock, TwoLevelSolution, stlsls, stlsls_batched

ENGINES = ("naive", "streamlined")


class BudgetExceeded(RuntimeError):
    """A fit ran past its wall-clock budget."""


@dataclass(frozen=True)
class EmConfig:
    tol: float = 1e-5
    max_iter: int = 100
    init: VarianceComponents | None = None
    time_budget: float | None = None  # seconds; None = unlimited

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError(f"tol must be positive, got {self.tol}")
        if int(self.max_iter) < 1:
            raise ValueError(f"max_iter must be >= 1, got {self.max_iter}")


@dataclass(frozen=True)
class TraceRow:
    iteration: int
    vc: VarianceComponents
    ecll: float
    mll: float
    seconds: float


@dataclass
class EmTrace:
    rows: list[TraceRow] = field(default_factory=list)
    converged: bool = False

    def __len__(self):
        return len(self.rows)

    @property
    def n_iter(self) -> int:
        """Number of M-steps taken."""
        return max(len(self.rows) - 1, 0)

    @property
    def ecll(self) -> np.ndarray:
        return np.array([r.ecll for r in self.rows])

    @property
    def mll(self) -> np.ndarray:
        return np.array([r.mll for r in self.rows])

    def header(self) -> list[str]:
        names = list(self.rows[0].vc.components()) if self.rows else ["sigma_eps_sq"]
        return ["iter"] + names + ["ecll", "mll", "seconds"]

    def records(self):
        for r in self.rows:
            yield [r.iteration] + list(r.vc.components().values()) + [r.ecll, r.mll, r.seconds]

    def to_csv(self, path, prefix: dict | None = None):
        prefix = prefix or {}
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(list(prefix) + self.header())
            for rec in self.records():
                w.writerow(list(prefix.values()) + [_fmt(v) for v in rec])


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v


class EmFit(NamedTuple):
    vc: VarianceComponents
    posterior: PosteriorSummary
    trace: EmTrace


# ---------------------------------------------------------------------------
# M-step
# ---------------------------------------------------------------------------


def m_step(post: PosteriorSummary, data: Dataset, sq_resid=None) -> VarianceComponents:
    """Closed-form maximiser of the expected complete-data log-likelihood.

    sigma_eps_sq is the mean over observations of the expected squared
    residual, which includes the cross-covariance terms with a factor 2.
    """
    Mu = post.mu_u.T @ post.mu_u + post.Sigma_u.sum(axis=0)
    Mv = post.mu_v.T @ post.mu_v + post.Sigma_v.sum(axis=0)
    Su = Mu / post.m
    Sv = Mv / post.t
    if sq_resid is None:
        sq_resid = expected_sq_residuals(data, post)
    s2 = float(np.mean(sq_resid))
    return VarianceComponents(s2, 0.5 * (Su + Su.T), 0.5 * (Sv + Sv.T))


# ---------------------------------------------------------------------------
# Streamlined E-step
# ---------------------------------------------------------------------------


def iter_streamlined_blocks(data: Dataset, priors: Priors,
                            vc: VarianceComponents) -> Iterator[TwoLevelBlock]:
    """Yield the per-user blocks (b_i, B_i, Bdot_i); see module docstring."""
    _check_dims(data, priors, vc)
    p, qu, qv, m, t = data.p, data.q_u, data.q_v, data.m, data.t
    s = np.sqrt(vc.sigma_eps_sq)
    sm = 1.0 / np.sqrt(m)
    Wb = inv_sqrt_factor(priors.Sigma_beta, "Sigma_beta")
    Wu = inv_sqrt_factor(vc.Sigma_u, "Sigma_u")
    Wv = inv_sqrt_factor(vc.Sigma_v, "Sigma_v")
    pt = p + t * qv
    prior_B = np.zeros((p + t * qv + qu, pt))
    prior_B[:p, :p] = sm * Wb
    prior_B[p:p + t * qv, p:] = sm * np.kron(np.eye(t), Wv)
    prior_b = np.zeros(p + t * qv + qu)
    prior_b[:p] = sm * (Wb @ priors.mu_beta)
    prior_Bdot = np.zeros((p + t * qv + qu, qu))
    prior_Bdot[p + t * qv:] = Wu

    order, starts = data.by_user
    Z, Zu, Zv, y, tm = data.Z / s, data.Zu / s, data.Zv / s, data.y / s, data.time
    vcols = p + np.arange(qv)
    for i in range(m):
        idx = order[starts[i]:starts[i + 1]]
        ni = len(idx)
        B = np.zeros((ni, pt))
        B[:, :p] = Z[idx]
        B[np.arange(ni)[:, None], vcols + qv * tm[idx][:, None]] = Zv[idx]
        yield TwoLevelBlock(
            b=np.concatenate([y[idx], prior_b]),
            B=np.vstack([B, prior_B]),
            Bdot=np.vstack([Zu[idx], prior_Bdot]),
        )


def build_streamlined_blocks(data: Dataset, priors: Priors,
                             vc: VarianceComponents) -> list[TwoLevelBlock]:
    return list(iter_streamlined_blocks(data, priors, vc))


def extract_posterior(sol: TwoLevelSolution, p: int, q_u: int, q_v: int, t: int,
                      vc: VarianceComponents | None = None) -> PosteriorSummary:
    """Map the solver output onto posterior sub-blocks (users are the groups)."""
    m = sol.m
    A11 = sol.A11
    V = A11[p:, p:].reshape(t, q_v, t, q_v)
    iv = np.arange(t)
    return PosteriorSummary(
        mu_beta=sol.x1[:p].copy(),
        Sigma_beta=A11[:p, :p].copy(),
        mu_u=sol.x2.reshape(m, q_u).copy(),
        Sigma_u=sol.A22.copy(),
        Cov_beta_u=sol.A12[:, :p, :].copy(),
        mu_v=sol.x1[p:].reshape(t, q_v).copy(),
        Sigma_v=V[iv, :, iv, :].copy(),
        Cov_beta_v=A11[:p, p:].reshape(p, t, q_v).transpose(1, 0, 2).copy(),
        Cov_u_v=sol.A12[:, p:, :].reshape(m, t, q_v, q_u).transpose(0, 1, 3, 2).copy(),
        vc=vc,
    )


def streamlined_solve(data: Dataset, priors: Priors, vc: VarianceComponents) -> TwoLevelSolution:
    """STLSLS on the literal per-user blocks of :func:`iter_streamlined_blocks`."""
    return stlsls(iter_streamlined_blocks(data, priors, vc))


def _streamlined_mll(sol: TwoLevelSolution, data: Dataset, priors: Priors,
                     vc: VarianceComponents) -> float:
    return float(_mll_from_parts(data.N, vc.sigma_eps_sq,
                                 prior_cov_logdet(priors, vc, data.m, data.t),
                                 sol.logdet_A, sol.residual_sq))


class StreamlinedEStep:
    """Streamlined E-step with per-user data rows compressed once.

    Each user's data rows [Zu_i | Z_i | Zv_i | y_i] (N_i x k) are replaced by
    their k x k triangular QR factor when N_i > k. That is an orthogonal
    transform of the group's rows, so the least-squares problem, B^T B, B^T b
    and the residual are unchanged while each EM iteration costs O(m t^3)
    independent of the number of replicates.

    The beta and v prior rows carry no u columns, so they are passed to the
    solver once as shared rows instead of m^-1/2-scaled copies in every
    group; the normal equations are identical.
    """

    def __init__(self, data: Dataset, priors: Priors, compress: bool = True,
                 batch_size: int = 256):
        self.data, self.priors = data, priors
        self.batch_size = int(batch_size)
        self.compress = compress
        p, qu, qv, t = data.p, data.q_u, data.q_v, data.t
        self.k = qu + p + t * qv + 1
        self.rows, self.nd = self._data_rows()

    def _user_batches(self):
        m, bs = self.data.m, self.batch_size
        for a in range(0, m, bs):
            yield a, min(a + bs, m)

    def _data_rows(self):
        d = self.data
        p, qu, qv, k = d.p, d.q_u, d.q_v, self.k
        order, starts = d.by_user
        counts = np.diff(starts)
        nd = np.minimum(counts, k) if self.compress else counts.copy()
        rows = np.zeros((d.m, int(nd.max()), k))
        for a, b in self._user_batches():
            obs = order[starts[a]:starts[b]]
            gi = d.user[obs] - a
            ri = np.arange(len(obs)) - (starts[d.user[obs]] - starts[a])
            D = np.zeros((b - a, int(counts[a:b].max()), k))
            D[gi, ri, :qu] = d.Zu[obs]
            D[gi, ri, qu:qu + p] = d.Z[obs]
            D[gi[:, None], ri[:, None], qu + p + qv * d.time[obs][:, None] + np.arange(qv)] = d.Zv[obs]
            D[gi, ri, -1] = d.y[obs]
            big = counts[a:b] > k
            if self.compress and np.any(big):
                R = np.linalg.qr(D[big], mode="r")
                D[big] = 0.0
                D[big, :k] = R
            n = min(D.shape[1], rows.shape[1])
            rows[a:b, :n] = D[:, :n]
        return rows, nd

    def _shared_rows(self, vc: VarianceComponents) -> np.ndarray:
        # beta and v prior rows; Householder on Bdot never touches them
        d, pr = self.data, self.priors
        p, qv, t = d.p, d.q_v, d.t
        pt = p + t * qv
        Wb = inv_sqrt_factor(pr.Sigma_beta, "Sigma_beta")
        Wv = inv_sqrt_factor(vc.Sigma_v, "Sigma_v")
        S = np.zeros((pt, pt + 1))
        S[:p, :p] = Wb
        S[:p, pt] = Wb @ pr.mu_beta
        S[p:, p:pt] = np.kron(np.eye(t), Wv)
        return S

    def _batches(self, vc: VarianceComponents):
        d = self.data
        qu = d.q_u
        s = np.sqrt(vc.sigma_eps_sq)
        Wu = inv_sqrt_factor(vc.Sigma_u, "Sigma_u")
        for a, b in self._user_batches():
            nd = self.nd[a:b]
            kmax = int(nd.max())
            g = b - a
            Bd = np.zeros((g, kmax + qu, qu))
            W = np.zeros((g, kmax + qu, self.k - qu))
            Bd[:, :kmax] = self.rows[a:b, :kmax, :qu] / s
            W[:, :kmax] = self.rows[a:b, :kmax, qu:] / s
            if np.all(nd == kmax):
                Bd[:, kmax:] = Wu
            else:
                Bd[np.arange(g)[:, None], nd[:, None] + np.arange(qu)] = Wu
            yield GroupBatch(Bd, W, nd + qu)

    def solve(self, vc: VarianceComponents) -> TwoLevelSolution:
        _check_dims(self.data, self.priors, vc)
        return stlsls_batched(self._batches(vc), shared=self._shared_rows(vc))

    def __call__(self, vc: VarianceComponents):
        d = self.data
        sol = self.solve(vc)
        post = extract_posterior(sol, d.p, d.q_u, d.q_v, d.t, vc)
        return post, _streamlined_mll(sol, d, self.priors, vc)


def streamlined_estep(data, priors, vc):
    """(posterior, marginal log-likelihood) by the streamlined route."""
    return StreamlinedEStep(data, priors)(vc)


def naive_estep(data, priors, vc):
    """(posterior, marginal log-likelihood) from the dense normal equations."""
    f = dense_factorize(assemble_dense_system(data, priors, vc))
    s = f.system
    post = split_theta_cov(f.Sigma, f.mu, s.p, s.m, s.t, s.q_u, s.q_v, vc)
    return post, dense_marginal_log_likelihood(f, priors, vc)


def streamlined_posterior(data, priors, vc) -> PosteriorSummary:
    return streamlined_estep(data, priors, vc)[0]


def streamlined_marginal_log_likelihood(data, priors, vc) -> float:
    return streamlined_estep(data, priors, vc)[1]


def make_estep(engine: str, data: Dataset, priors: Priors):
    """Return vc -> (posterior, marginal log-likelihood) for ``engine``."""
    if engine == "streamlined":
        return StreamlinedEStep(data, priors)
    if engine == "naive":
        return lambda vc: naive_estep(data, priors, vc)
    raise ValueError(f"engine must be one of {ENGINES}, got {engine!r}")


def posterior(data, priors, vc, engine: str = "streamlined") -> PosteriorSummary:
    return make_estep(engine, data, priors)(vc)[0]


# ---------------------------------------------------------------------------
# EM driver
# ---------------------------------------------------------------------------


def default_init(data: Dataset) -> VarianceComponents:
    return VarianceComponents.identity(data.q_u, data.q_v)


def em_fit(data: Dataset, priors: Priors, cfg: EmConfig | None = None,
           engine: str = "streamlined") -> EmFit:
    """Alternate E- and M-steps until |L_k - L_{k-1}| < tol or max_iter M-steps.

    L_k is the expected complete-data log-likelihood at vc_k under the
    posterior computed with vc_k. Non-convergence is reported in the trace.
    """
    cfg = cfg or EmConfig()
    t0 = _time.perf_counter()
    estep = make_estep(engine, data, priors)
    vc = cfg.init if cfg.init is not None else default_init(data)
    trace = EmTrace()
    prev = None
    for it in range(int(cfg.max_iter) + 1):
        post, mll = estep(vc)
        sq = expected_sq_residuals(data, post)
        ecll = expected_complete_data_loglik(data, priors, vc, post, sq)
        trace.rows.append(TraceRow(it, vc, ecll, mll, _time.perf_counter() - t0))
        if prev is not None and abs(ecll - prev) < cfg.tol:
            trace.converged = True
            break
        if it == cfg.max_iter:
            break
        if cfg.time_budget is not None and _time.perf_counter() - t0 > cfg.time_budget:
            raise BudgetExceeded(f"{engine} fit exceeded {cfg.time_budget:.0f}s after {it} iterations")
        prev = ecll
        try:
            vc = m_step(post, data, sq)
        except NumericalError as exc:
            raise NumericalError(f"M-step at iteration {it}: {exc}") from None
    return EmFit(vc, post, trace)


def em_fit_naive(data, priors, cfg=None) -> EmFit:
    return em_fit(data, priors, cfg, engine="naive")


def em_fit_streamlined(data, priors, cfg=None) -> EmFit:
    return em_fit(data, priors, cfg, engine="streamlined")


def dense_memory_bytes(data: Dataset) -> int:
    """Rough peak memory of one naive E-step (C plus a few P x P arrays)."""
    P = data.n_params
    return 8 * (data.N * P + 4 * P * P)


def with_init(cfg: EmConfig, vc: VarianceComponents) -> EmConfig:
    return replace(cfg, init=vc)
