"""Crossed (user x time) random-effects reward model.

Reward for observation k of user i at time-since-treatment tau:

    y = z beta + z_u u_i + z_v v_tau + eps,   eps ~ N(0, sigma_eps_sq)
    beta ~ N(mu_beta, Sigma_beta),  u_i ~ N(0, Sigma_u),  v_tau ~ N(0, Sigma_v)

This module holds the domain types, design assembly and the dense reference
computations (posterior, marginal likelihood, expected complete-data
log-likelihood). The dense route forms the full (p + m q_u + t q_v) normal
equations and is only meant for small problems and as an oracle.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import linalg

LOG_2PI = float(np.log(2.0 * np.pi))


class InputError(ValueError):
    """Malformed or inconsistent user input."""


class NumericalError(ArithmeticError):
    """A matrix that must be positive definite / full rank is not."""


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


def chol_lower(S: np.ndarray, name: str) -> np.ndarray:
    """Lower Cholesky factor of an SPD matrix, raising NumericalError naming ``name``."""
    S = np.asarray(S, dtype=float)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise NumericalError(f"{name} must be square, got shape {S.shape}")
    if not np.allclose(S, S.T, rtol=1e-10, atol=1e-12):
        raise NumericalError(f"{name} is not symmetric")
    try:
        return linalg.cholesky(S, lower=True)
    except linalg.LinAlgError:
        raise NumericalError(f"{name} is not positive definite") from None


def inv_sqrt_factor(S: np.ndarray, name: str) -> np.ndarray:
    """Return W with W.T @ W = inv(S), via W = inv(L) for S = L L^T."""
    L = chol_lower(S, name)
    return linalg.solve_triangular(L, np.eye(len(L)), lower=True)


def spd_logdet(S: np.ndarray, name: str = "matrix") -> float:
    L = chol_lower(S, name)
    return 2.0 * float(np.sum(np.log(np.diag(L))))


# ---------------------------------------------------------------------------
# Feature maps
# ---------------------------------------------------------------------------

RowFn = Callable[[np.ndarray, int], tuple]
BatchFn = Callable[[np.ndarray, np.ndarray], tuple]


@dataclass(frozen=True)
class FeatureMap:
    """The maps (x, a) -> (z, z_u, z_v) for fixed, user and time effects.

    ``fn`` evaluates one observation. ``batch_fn`` is an optional vectorised
    equivalent taking (N, d) contexts and (N,) actions; when absent the
    per-row function is looped.
    """

    p: int
    q_u: int
    q_v: int
    fn: RowFn
    context_dim: int | None = None
    batch_fn: BatchFn | None = None
    name: str = "custom"

    def __post_init__(self):
        for label, d in (("p", self.p), ("q_u", self.q_u), ("q_v", self.q_v)):
            if int(d) < 1:
                raise InputError(f"feature dimension {label} must be positive, got {d}")

    def __call__(self, x, a: int):
        x = np.atleast_1d(np.asarray(x, dtype=float))
        if self.context_dim is not None and x.shape != (self.context_dim,):
            raise InputError(
                f"context has dimension {x.size}, feature map {self.name!r} expects {self.context_dim}"
            )
        z, zu, zv = self.fn(x, int(a))
        z, zu, zv = (np.asarray(r, dtype=float).reshape(-1) for r in (z, zu, zv))
        if (z.size, zu.size, zv.size) != (self.p, self.q_u, self.q_v):
            raise InputError(
                f"feature map {self.name!r} returned rows of length "
                f"{(z.size, zu.size, zv.size)}, declared {(self.p, self.q_u, self.q_v)}"
            )
        return z, zu, zv

    def rows(self, X, A):
        """Design rows for many observations: returns (Z, Zu, Zv) arrays."""
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        A = np.asarray(A, dtype=int)
        if self.context_dim is not None and X.shape[1] != self.context_dim:
            raise InputError(
                f"contexts have dimension {X.shape[1]}, feature map {self.name!r} expects {self.context_dim}"
            )
        if self.batch_fn is not None:
            Z, Zu, Zv = self.batch_fn(X, A)
            return (np.asarray(Z, float).reshape(len(X), self.p),
                    np.asarray(Zu, float).reshape(len(X), self.q_u),
                    np.asarray(Zv, float).reshape(len(X), self.q_v))
        out = [self(x, a) for x, a in zip(X, A)]
        if not out:
            return np.zeros((0, self.p)), np.zeros((0, self.q_u)), np.zeros((0, self.q_v))
        return tuple(np.vstack(col) for col in zip(*out))


def _intercept_map(d: int) -> FeatureMap:
    def fn(x, a):
        one = np.ones(1)
        return one, one, one

    def batch(X, A):
        one = np.ones((len(X), 1))
        return one, one, one

    return FeatureMap(1, 1, 1, fn, d, batch, "intercept")


def _interaction_map(d: int) -> FeatureMap:
    # [1, a*x_1, ..., a*x_d]: intercept plus treatment-by-context slopes
    def fn(x, a):
        r = np.concatenate(([1.0], a * x))
        return r, r, r

    def batch(X, A):
        R = np.hstack([np.ones((len(X), 1)), A[:, None] * X])
        return R, R, R

    return FeatureMap(d + 1, d + 1, d + 1, fn, d, batch, "interaction")


def _linear_map(d: int) -> FeatureMap:
    # [1, x_1, ..., x_d]; action ignored (batch speed study)
    def fn(x, a):
        r = np.concatenate(([1.0], x))
        return r, r, r

    def batch(X, A):
        R = np.hstack([np.ones((len(X), 1)), X])
        return R, R, R

    return FeatureMap(d + 1, d + 1, d + 1, fn, d, batch, "linear")


BUILTIN_FEATURE_MAPS = {
    "intercept": _intercept_map,
    "interaction": _interaction_map,
    "linear": _linear_map,
}


def builtin_feature_map(name: str, context_dim: int = 1) -> FeatureMap:
    try:
        return BUILTIN_FEATURE_MAPS[name](int(context_dim))
    except KeyError:
        raise InputError(
            f"unknown feature map {name!r}; choose from {sorted(BUILTIN_FEATURE_MAPS)}"
        ) from None


# ---------------------------------------------------------------------------
# Observations and datasets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Observation:
    """One record. ``user`` and ``time`` are 1-based; ``action`` is 0-based."""

    user: int
    time: int
    context: np.ndarray
    action: int
    reward: float
    replicate: int = 1

    def __post_init__(self):
        object.__setattr__(self, "context", _frozen(np.atleast_1d(self.context)))
        if self.user < 1 or self.time < 1:
            raise InputError(f"user/time indices are 1-based, got ({self.user}, {self.time})")
        if not np.isfinite(self.reward):
            raise InputError(f"reward must be finite, got {self.reward}")


def build_design_rows(fm: FeatureMap, obs: Observation):
    return fm(obs.context, obs.action)


@dataclass(frozen=True)
class Dataset:
    """Design rows and rewards for N observations of m users over t times.

    Indices are 0-based internally. Cells (i, tau) may hold any number of
    replicates, including none.
    """

    user: np.ndarray
    time: np.ndarray
    Z: np.ndarray
    Zu: np.ndarray
    Zv: np.ndarray
    y: np.ndarray
    m: int
    t: int

    def __post_init__(self):
        user = np.asarray(self.user, dtype=np.int64)
        time = np.asarray(self.time, dtype=np.int64)
        n = len(user)
        if n == 0:
            raise InputError("dataset needs at least one observation")
        Z = np.asarray(self.Z, dtype=float).reshape(n, -1)
        Zu = np.asarray(self.Zu, dtype=float).reshape(n, -1)
        Zv = np.asarray(self.Zv, dtype=float).reshape(n, -1)
        y = np.asarray(self.y, dtype=float).reshape(n)
        if len(time) != n:
            raise InputError("user and time index arrays differ in length")
        if user.min() < 0 or user.max() >= self.m:
            raise InputError(f"user indices must lie in 1..{self.m}")
        if time.min() < 0 or time.max() >= self.t:
            raise InputError(f"time indices must lie in 1..{self.t}")
        if not np.all(np.isfinite(y)):
            raise InputError("rewards must be finite")
        for name, val in (("user", user), ("time", time), ("Z", Z), ("Zu", Zu),
                          ("Zv", Zv), ("y", y)):
            val.setflags(write=False)
            object.__setattr__(self, name, val)

    @classmethod
    def from_observations(cls, observations: Sequence[Observation], fm: FeatureMap,
                          m: int | None = None, t: int | None = None) -> "Dataset":
        if len(observations) == 0:
            raise InputError("dataset needs at least one observation")
        X = np.array([o.context for o in observations], dtype=float)
        A = np.array([o.action for o in observations], dtype=int)
        Z, Zu, Zv = fm.rows(X, A)
        user = np.array([o.user for o in observations]) - 1
        time = np.array([o.time for o in observations]) - 1
        y = np.array([o.reward for o in observations], dtype=float)
        return cls(user, time, Z, Zu, Zv, y,
                   int(m if m is not None else user.max() + 1),
                   int(t if t is not None else time.max() + 1))

    @property
    def N(self) -> int:
        return len(self.y)

    @property
    def p(self) -> int:
        return self.Z.shape[1]

    @property
    def q_u(self) -> int:
        return self.Zu.shape[1]

    @property
    def q_v(self) -> int:
        return self.Zv.shape[1]

    @property
    def n_params(self) -> int:
        return self.p + self.m * self.q_u + self.t * self.q_v

    @cached_property
    def by_user(self):
        """(order, starts): observation indices sorted by user, and CSR-style offsets."""
        order = np.argsort(self.user, kind="stable")
        starts = np.searchsorted(self.user[order], np.arange(self.m + 1))
        return order, starts

    def take(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.user[idx], self.time[idx], self.Z[idx], self.Zu[idx],
                       self.Zv[idx], self.y[idx], self.m, self.t)


@dataclass(frozen=True)
class ObservationTable:
    """Columns of an observation file; ``user``/``time`` 1-based, ``action`` 0-based."""

    user: np.ndarray
    time: np.ndarray
    replicate: np.ndarray
    action: np.ndarray
    reward: np.ndarray
    X: np.ndarray  # (N, d)

    def __len__(self):
        return len(self.reward)

    @property
    def context_dim(self) -> int:
        return self.X.shape[1]

    def observations(self) -> list[Observation]:
        return [Observation(int(u), int(t), x, int(a), float(r), int(k))
                for u, t, k, a, r, x in zip(self.user, self.time, self.replicate,
                                            self.action, self.reward, self.X)]

    def dataset(self, fm: FeatureMap, m: int | None = None, t: int | None = None) -> Dataset:
        if len(self) == 0:
            raise InputError("dataset needs at least one observation")
        Z, Zu, Zv = fm.rows(self.X, self.action)
        return Dataset(self.user - 1, self.time - 1, Z, Zu, Zv, self.reward,
                       int(m if m is not None else self.user.max()),
                       int(t if t is not None else self.time.max()))


_REQUIRED = ["user", "time", "replicate", "action", "reward"]


def read_observation_table(path, allow_empty: bool = False) -> ObservationTable:
    """Read ``user,time,replicate,action,reward,x1,...,xd``; errors name the row."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise InputError(f"{path}: empty file") from None
        missing = [c for c in _REQUIRED if c not in header]
        if missing:
            raise InputError(f"{path}: header is missing column(s) {', '.join(missing)}")
        xcols = [j for j, h in enumerate(header) if h.startswith("x") and h[1:].isdigit()]
        xcols.sort(key=lambda j: int(header[j][1:]))
        ints = [header.index(c) for c in _REQUIRED[:4]]
        ri = header.index("reward")
        I, R, X = [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise InputError(f"{path}, row {lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                iv = [int(row[j]) for j in ints]
                r = float(row[ri])
                x = [float(row[j]) for j in xcols]
            except ValueError as exc:
                raise InputError(f"{path}, row {lineno}: {exc}") from None
            if iv[0] < 1 or iv[1] < 1:
                raise InputError(f"{path}, row {lineno}: user/time indices are 1-based")
            if iv[3] < 0:
                raise InputError(f"{path}, row {lineno}: action must be >= 0")
            if not (np.isfinite(r) and all(np.isfinite(x))):
                raise InputError(f"{path}, row {lineno}: reward and context must be finite")
            I.append(iv)
            R.append(r)
            X.append(x)
    if not R and not allow_empty:
        raise InputError(f"{path}: no observations")
    I = np.array(I, dtype=np.int64).reshape(-1, 4)
    return ObservationTable(I[:, 0], I[:, 1], I[:, 2], I[:, 3], np.array(R, dtype=float),
                            np.array(X, dtype=float).reshape(len(R), len(xcols)))


def read_observations_csv(path) -> list[Observation]:
    """Read ``user,time,replicate,action,reward,x1,...,xd`` (indices 1-based)."""
    return read_observation_table(path).observations()


def write_observation_table(path, tab: ObservationTable):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(_REQUIRED + [f"x{j + 1}" for j in range(tab.context_dim)])
        for u, t, k, a, r, x in zip(tab.user, tab.time, tab.replicate, tab.action,
                                    tab.reward, tab.X):
            w.writerow([u, t, k, a, repr(float(r))] + [repr(float(v)) for v in x])


def write_observations_csv(path, observations: Iterable[Observation]):
    observations = list(observations)
    d = len(observations[0].context) if observations else 0
    tab = ObservationTable(*(np.array([getattr(o, c) for o in observations], dtype=int)
                             for c in _REQUIRED[:4]),
                           np.array([o.reward for o in observations], dtype=float),
                           np.array([o.context for o in observations], dtype=float).reshape(-1, d))
    write_observation_table(path, tab)


# ---------------------------------------------------------------------------
# Hyperparameters and posterior
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Priors:
    mu_beta: np.ndarray
    Sigma_beta: np.ndarray

    def __post_init__(self):
        mu = _frozen(np.atleast_1d(self.mu_beta))
        S = _frozen(np.atleast_2d(self.Sigma_beta))
        if S.shape != (mu.size, mu.size):
            raise InputError(f"Sigma_beta shape {S.shape} does not match mu_beta length {mu.size}")
        chol_lower(S, "Sigma_beta")
        object.__setattr__(self, "mu_beta", mu)
        object.__setattr__(self, "Sigma_beta", S)

    @classmethod
    def default(cls, p: int, scale: float = 1.0) -> "Priors":
        return cls(np.zeros(p), scale * np.eye(p))

    @property
    def p(self) -> int:
        return self.mu_beta.size


@dataclass(frozen=True)
class VarianceComponents:
    sigma_eps_sq: float
    Sigma_u: np.ndarray
    Sigma_v: np.ndarray

    def __post_init__(self):
        s2 = float(self.sigma_eps_sq)
        if not (s2 > 0 and np.isfinite(s2)):
            raise NumericalError(f"sigma_eps_sq must be positive, got {s2}")
        object.__setattr__(self, "sigma_eps_sq", s2)
        for name in ("Sigma_u", "Sigma_v"):
            S = _frozen(np.atleast_2d(getattr(self, name)))
            chol_lower(S, name)
            object.__setattr__(self, name, S)

    @classmethod
    def identity(cls, q_u: int, q_v: int, sigma_eps_sq: float = 1.0) -> "VarianceComponents":
        return cls(sigma_eps_sq, np.eye(q_u), np.eye(q_v))

    @property
    def q_u(self) -> int:
        return self.Sigma_u.shape[0]

    @property
    def q_v(self) -> int:
        return self.Sigma_v.shape[0]

    def components(self) -> dict[str, float]:
        """Flat named view: sigma_eps_sq and the upper triangles of Sigma_u, Sigma_v."""
        out = {"sigma_eps_sq": self.sigma_eps_sq}
        for tag, S in (("u", self.Sigma_u), ("v", self.Sigma_v)):
            for a, b in zip(*np.triu_indices(len(S))):
                out[f"sigma_{tag}_{a + 1}{b + 1}"] = float(S[a, b])
        return out

    def to_dict(self) -> dict:
        return {"sigma_eps_sq": self.sigma_eps_sq,
                "Sigma_u": self.Sigma_u.tolist(),
                "Sigma_v": self.Sigma_v.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "VarianceComponents":
        return cls(d["sigma_eps_sq"], np.array(d["Sigma_u"]), np.array(d["Sigma_v"]))


@dataclass(frozen=True)
class PosteriorSummary:
    """Posterior mean and the covariance sub-blocks used by the M-step and by
    Thompson sampling. Arrays are indexed by 0-based user i and time tau.

    mu_u: (m, q_u); Sigma_u: (m, q_u, q_u); Cov_beta_u: (m, p, q_u)
    mu_v: (t, q_v); Sigma_v: (t, q_v, q_v); Cov_beta_v: (t, p, q_v)
    Cov_u_v: (m, t, q_u, q_v)
    """

    mu_beta: np.ndarray
    Sigma_beta: np.ndarray
    mu_u: np.ndarray
    Sigma_u: np.ndarray
    Cov_beta_u: np.ndarray
    mu_v: np.ndarray
    Sigma_v: np.ndarray
    Cov_beta_v: np.ndarray
    Cov_u_v: np.ndarray
    vc: VarianceComponents | None = field(default=None, compare=False)

    @property
    def m(self) -> int:
        return self.mu_u.shape[0]

    @property
    def t(self) -> int:
        return self.mu_v.shape[0]

    @property
    def p(self) -> int:
        return self.mu_beta.size

    def joint(self, i: int, tau: int):
        """Mean and covariance of [beta; u_i; v_tau]."""
        mean = np.concatenate([self.mu_beta, self.mu_u[i], self.mu_v[tau]])
        cov = np.block([
            [self.Sigma_beta, self.Cov_beta_u[i], self.Cov_beta_v[tau]],
            [self.Cov_beta_u[i].T, self.Sigma_u[i], self.Cov_u_v[i, tau]],
            [self.Cov_beta_v[tau].T, self.Cov_u_v[i, tau].T, self.Sigma_v[tau]],
        ])
        return mean, 0.5 * (cov + cov.T)

    def theta_mean(self) -> np.ndarray:
        """Stacked posterior mean [beta; u_1..u_m; v_1..v_t]."""
        return np.concatenate([self.mu_beta, self.mu_u.ravel(), self.mu_v.ravel()])

    def blocks(self) -> dict[str, np.ndarray]:
        names = ("mu_beta", "Sigma_beta", "mu_u", "Sigma_u", "Cov_beta_u",
                 "mu_v", "Sigma_v", "Cov_beta_v", "Cov_u_v")
        return {n: getattr(self, n) for n in names}


def prior_posterior(priors: Priors, vc: VarianceComponents, m: int, t: int) -> PosteriorSummary:
    """Posterior with no data: the prior itself."""
    p, qu, qv = priors.p, vc.q_u, vc.q_v
    return PosteriorSummary(
        mu_beta=priors.mu_beta.copy(), Sigma_beta=priors.Sigma_beta.copy(),
        mu_u=np.zeros((m, qu)), Sigma_u=np.broadcast_to(vc.Sigma_u, (m, qu, qu)).copy(),
        Cov_beta_u=np.zeros((m, p, qu)),
        mu_v=np.zeros((t, qv)), Sigma_v=np.broadcast_to(vc.Sigma_v, (t, qv, qv)).copy(),
        Cov_beta_v=np.zeros((t, p, qv)), Cov_u_v=np.zeros((m, t, qu, qv)), vc=vc)


# ---------------------------------------------------------------------------
# Dense route
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DenseSystem:
    """C, D, R = sigma_eps_sq * I (kept as a scalar), o and y of the normal equations

        (C^T R^-1 C + D) theta = C^T R^-1 y + o
    """

    C: np.ndarray
    D: np.ndarray
    sigma_eps_sq: float
    o: np.ndarray
    y: np.ndarray
    p: int
    m: int
    t: int
    q_u: int
    q_v: int

    @property
    def precision(self) -> np.ndarray:
        return self.C.T @ self.C / self.sigma_eps_sq + self.D

    @property
    def rhs(self) -> np.ndarray:
        return self.C.T @ self.y / self.sigma_eps_sq + self.o

    def R(self) -> np.ndarray:
        return self.sigma_eps_sq * np.eye(len(self.y))


def _check_dims(data: Dataset, priors: Priors, vc: VarianceComponents):
    if (data.p, data.q_u, data.q_v) != (priors.p, vc.q_u, vc.q_v):
        raise InputError(
            f"design dimensions (p, q_u, q_v) = {(data.p, data.q_u, data.q_v)} do not match "
            f"priors/variance components {(priors.p, vc.q_u, vc.q_v)}"
        )


def design_matrix(data: Dataset) -> np.ndarray:
    """C = [Z  Z^{uv}] as a dense N x (p + m q_u + t q_v) array."""
    N, p, qu, qv = data.N, data.p, data.q_u, data.q_v
    C = np.zeros((N, data.n_params))
    rows = np.arange(N)[:, None]
    C[:, :p] = data.Z
    C[rows, p + data.user[:, None] * qu + np.arange(qu)] = data.Zu
    C[rows, p + data.m * qu + data.time[:, None] * qv + np.arange(qv)] = data.Zv
    return C


def assemble_dense_system(data: Dataset, priors: Priors, vc: VarianceComponents) -> DenseSystem:
    _check_dims(data, priors, vc)
    p, qu, qv, m, t = data.p, data.q_u, data.q_v, data.m, data.t
    Sb_inv = linalg.cho_solve((chol_lower(priors.Sigma_beta, "Sigma_beta"), True), np.eye(p))
    Su_inv = linalg.cho_solve((chol_lower(vc.Sigma_u, "Sigma_u"), True), np.eye(qu))
    Sv_inv = linalg.cho_solve((chol_lower(vc.Sigma_v, "Sigma_v"), True), np.eye(qv))
    D = linalg.block_diag(Sb_inv, *([Su_inv] * m), *([Sv_inv] * t))
    o = np.zeros(data.n_params)
    o[:p] = Sb_inv @ priors.mu_beta
    return DenseSystem(design_matrix(data), D, vc.sigma_eps_sq, o, np.asarray(data.y),
                       p, m, t, qu, qv)


def split_theta_cov(Sigma: np.ndarray, mu: np.ndarray, p, m, t, qu, qv,
                    vc=None) -> PosteriorSummary:
    """Cut the full posterior (mu, Sigma) into PosteriorSummary sub-blocks."""
    ou, ov = p, p + m * qu
    U = Sigma[ou:ov, ou:ov].reshape(m, qu, m, qu)
    V = Sigma[ov:, ov:].reshape(t, qv, t, qv)
    iu, iv = np.arange(m), np.arange(t)
    return PosteriorSummary(
        mu_beta=mu[:p].copy(),
        Sigma_beta=Sigma[:p, :p].copy(),
        mu_u=mu[ou:ov].reshape(m, qu).copy(),
        Sigma_u=U[iu, :, iu, :].copy(),
        Cov_beta_u=Sigma[:p, ou:ov].reshape(p, m, qu).transpose(1, 0, 2).copy(),
        mu_v=mu[ov:].reshape(t, qv).copy(),
        Sigma_v=V[iv, :, iv, :].copy(),
        Cov_beta_v=Sigma[:p, ov:].reshape(p, t, qv).transpose(1, 0, 2).copy(),
        Cov_u_v=Sigma[ou:ov, ov:].reshape(m, qu, t, qv).transpose(0, 2, 1, 3).copy(),
        vc=vc,
    )


@dataclass
class DenseFactorization:
    """Cholesky of the posterior precision, kept for the likelihood."""

    system: DenseSystem
    chol: np.ndarray
    mu: np.ndarray
    Sigma: np.ndarray


def dense_factorize(system: DenseSystem) -> DenseFactorization:
    A = system.precision
    try:
        L = linalg.cholesky(A, lower=True)
    except linalg.LinAlgError:
        raise NumericalError("posterior precision C^T R^-1 C + D is not positive definite") from None
    Sigma = linalg.cho_solve((L, True), np.eye(len(A)))
    Sigma = 0.5 * (Sigma + Sigma.T)
    mu = linalg.cho_solve((L, True), system.rhs)
    return DenseFactorization(system, L, mu, Sigma)


def dense_posterior(system: DenseSystem, vc: VarianceComponents | None = None) -> PosteriorSummary:
    f = dense_factorize(system)
    s = system
    return split_theta_cov(f.Sigma, f.mu, s.p, s.m, s.t, s.q_u, s.q_v, vc)


def _mll_from_parts(N, sigma_eps_sq, logdet_prior_cov, logdet_precision, quad):
    return -0.5 * (N * LOG_2PI + N * np.log(sigma_eps_sq) + logdet_prior_cov
                   + logdet_precision + quad)


def prior_cov_logdet(priors: Priors, vc: VarianceComponents, m: int, t: int) -> float:
    """log |D^-1| = log|Sigma_beta| + m log|Sigma_u| + t log|Sigma_v|."""
    return (spd_logdet(priors.Sigma_beta, "Sigma_beta") + m * spd_logdet(vc.Sigma_u, "Sigma_u")
            + t * spd_logdet(vc.Sigma_v, "Sigma_v"))


def dense_marginal_log_likelihood(f: DenseFactorization, priors: Priors,
                                  vc: VarianceComponents) -> float:
    s = f.system
    theta0 = np.zeros_like(f.mu)
    theta0[:s.p] = priors.mu_beta
    r = s.y - s.C @ f.mu
    dt = f.mu - theta0
    quad = r @ r / s.sigma_eps_sq + dt @ s.D @ dt
    logdet_A = 2.0 * float(np.sum(np.log(np.diag(f.chol))))
    return float(_mll_from_parts(len(s.y), s.sigma_eps_sq,
                                 prior_cov_logdet(priors, vc, s.m, s.t), logdet_A, quad))


def marginal_log_likelihood(data: Dataset, priors: Priors, vc: VarianceComponents) -> float:
    """log p(y | Sigma) through the normal-equation Cholesky.

    y ~ N(Z mu_beta, C D^-1 C^T + sigma_eps_sq I); the determinant lemma and
    the penalised least-squares form of the quadratic avoid the N x N matrix.
    """
    system = assemble_dense_system(data, priors, vc)
    return dense_marginal_log_likelihood(dense_factorize(system), priors, vc)


def expected_sq_residuals(data: Dataset, post: PosteriorSummary) -> np.ndarray:
    """Per observation E[(y - z beta - z_u u_i - z_v v_tau)^2] under ``post``."""
    i, tau = data.user, data.time
    Z, Zu, Zv = data.Z, data.Zu, data.Zv
    r = (data.y - Z @ post.mu_beta
         - np.einsum("na,na->n", Zu, post.mu_u[i])
         - np.einsum("nb,nb->n", Zv, post.mu_v[tau]))
    var = (np.einsum("np,pq,nq->n", Z, post.Sigma_beta, Z)
           + np.einsum("na,nab,nb->n", Zu, post.Sigma_u[i], Zu)
           + np.einsum("na,nab,nb->n", Zv, post.Sigma_v[tau], Zv)
           + 2.0 * np.einsum("np,npa,na->n", Z, post.Cov_beta_u[i], Zu)
           + 2.0 * np.einsum("np,npb,nb->n", Z, post.Cov_beta_v[tau], Zv)
           + 2.0 * np.einsum("na,nab,nb->n", Zu, post.Cov_u_v[i, tau], Zv))
    return r * r + var


def _second_moment_sums(post: PosteriorSummary):
    Mu = post.mu_u.T @ post.mu_u + post.Sigma_u.sum(axis=0)
    Mv = post.mu_v.T @ post.mu_v + post.Sigma_v.sum(axis=0)
    return Mu, Mv


def expected_complete_data_loglik(data: Dataset, priors: Priors, vc: VarianceComponents,
                                  post: PosteriorSummary, sq_resid=None) -> float:
    """L(vc) = E[log p(y | theta, vc) + log p(theta | vc)] with theta ~ ``post``.

    ``sq_resid`` may pass in precomputed :func:`expected_sq_residuals`.
    """
    _check_dims(data, priors, vc)
    N, p, m, t = data.N, data.p, post.m, post.t
    s2 = vc.sigma_eps_sq
    if sq_resid is None:
        sq_resid = expected_sq_residuals(data, post)
    S = float(np.sum(sq_resid))
    ll_y = -0.5 * N * (LOG_2PI + np.log(s2)) - 0.5 * S / s2

    Lb = chol_lower(priors.Sigma_beta, "Sigma_beta")
    db = post.mu_beta - priors.mu_beta
    Mb = np.outer(db, db) + post.Sigma_beta
    ll_b = -0.5 * (p * LOG_2PI + spd_logdet(priors.Sigma_beta)
                   + np.trace(linalg.cho_solve((Lb, True), Mb)))

    Mu, Mv = _second_moment_sums(post)
    Lu = chol_lower(vc.Sigma_u, "Sigma_u")
    Lv = chol_lower(vc.Sigma_v, "Sigma_v")
    ll_u = -0.5 * (m * vc.q_u * LOG_2PI + m * spd_logdet(vc.Sigma_u)
                   + np.trace(linalg.cho_solve((Lu, True), Mu)))
    ll_v = -0.5 * (t * vc.q_v * LOG_2PI + t * spd_logdet(vc.Sigma_v)
                   + np.trace(linalg.cho_solve((Lv, True), Mv)))
    return float(ll_y + ll_b + ll_u + ll_v)
