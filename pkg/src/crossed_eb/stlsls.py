"""Two-level sparse least squares.

Solves min_x ||b - B x||^2 for

    B = [ B_1  Bdot_1               ]        b = [ b_1 ]
        [ B_2         Bdot_2        ]            [ b_2 ]
        [ ...                ...    ]            [ ... ]
        [ B_m                Bdot_m ]            [ b_m ]

with x = [x1; x2_1; ...; x2_m], and returns the sub-blocks A11, A12_i, A22_i
of inv(B^T B) that sit on the non-zero pattern of B^T B. Cost is linear in m.

Per group, Bdot_i is reduced by Householder reflections that are applied to
[B_i | b_i] directly (Q_i is never formed). The trailing rows of all groups
form the stacked matrix [Omega_4 | omega_3], which is reduced by a second QR.
That QR is accumulated chunk by chunk: QR([R_prev; new rows]) has the same R
as the QR of all rows stacked, so memory stays O(chunk) for large m.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass
from typing import Iterable, Iterator

import numpy as np
from scipy import linalg
from scipy.linalg import lapack

from .model import InputError, NumericalError

log = logging.getLogger(__name__)

_EPS = np.finfo(float).eps


@dataclass(frozen=True)
class TwoLevelBlock:
    b: np.ndarray      # (n_i,)
    B: np.ndarray      # (n_i, p)  shared columns
    Bdot: np.ndarray   # (n_i, q)  group-specific columns

    @property
    def n(self) -> int:
        return len(self.b)


@dataclass(frozen=True)
class TwoLevelSolution:
    x1: np.ndarray     # (p,)
    A11: np.ndarray    # (p, p)
    x2: np.ndarray     # (m, q)
    A22: np.ndarray    # (m, q, q)
    A12: np.ndarray    # (m, p, q)
    logdet_A: float    # log |B^T B|
    residual_sq: float  # min ||b - B x||^2

    @property
    def m(self) -> int:
        return self.x2.shape[0]

    def x(self) -> np.ndarray:
        return np.concatenate([self.x1, self.x2.ravel()])


@dataclass
class GroupBatch:
    """g groups stacked and zero-padded at the bottom to a common row count.

    Bdot: (g, n, q); W: (g, n, p + 1) holding [B_i | b_i]; sizes: (g,) true
    row counts.
    """

    Bdot: np.ndarray
    W: np.ndarray
    sizes: np.ndarray


def householder_qr_batch(Bdot: np.ndarray, W: np.ndarray) -> np.ndarray:
    """In-place Householder QR of a stack of tall blocks.

    Bdot: (g, n, q) is overwritten by [R; 0]; W: (g, n, k) is overwritten by
    Q^T W. Returns R: (g, q, q). Zero rows below row q stay zero throughout.
    """
    g, n, q = Bdot.shape
    for j in range(q):
        x = Bdot[:, j:, j]
        normx = np.sqrt(np.einsum("gn,gn->g", x, x))
        alpha = -np.copysign(normx, x[:, 0])
        v = x.copy()
        v[:, 0] -= alpha
        vv = np.einsum("gn,gn->g", v, v)
        beta = np.divide(2.0, vv, out=np.zeros(g), where=vv > 0)
        bv = beta[:, None] * v
        if j + 1 < q:
            T = Bdot[:, j:, j + 1:]
            T -= bv[:, :, None] * np.einsum("gn,gnk->gk", v, T)[:, None, :]
        Bdot[:, j:, j] = 0.0
        Bdot[:, j, j] = alpha
        Wj = W[:, j:, :]
        Wj -= bv[:, :, None] * np.einsum("gn,gnk->gk", v, Wj)[:, None, :]
    return np.triu(Bdot[:, :q, :])


def batched_upper_solve(R: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """Solve R X = Y for stacks of upper-triangular R (g, q, q), Y (g, q, k)."""
    q = R.shape[1]
    X = np.array(Y, dtype=float, copy=True)
    for r in range(q - 1, -1, -1):
        if r + 1 < q:
            X[:, r, :] -= np.einsum("gc,gck->gk", R[:, r, r + 1:], X[:, r + 1:, :])
        X[:, r, :] /= R[:, r, r][:, None]
    return X


def batched_upper_inv_T(R: np.ndarray) -> np.ndarray:
    """inv(R_i)^T for a stack of upper-triangular R_i, by triangular solves."""
    g, q, _ = R.shape
    return batched_upper_solve(R, np.broadcast_to(np.eye(q), (g, q, q))).transpose(0, 2, 1)


class StackedQR:
    """Running R factor of a tall matrix fed in row chunks.

    Reduction order is the feed order, so results are deterministic.
    """

    def __init__(self, ncols: int, chunk_rows: int = 512):
        self.ncols = ncols
        self.chunk_rows = max(int(chunk_rows), ncols)
        self.R = np.zeros((0, ncols))
        self._pending: list[np.ndarray] = []
        self._n_pending = 0

    def add(self, rows: np.ndarray):
        if len(rows) == 0:
            return
        self._pending.append(rows)
        self._n_pending += len(rows)
        if self._n_pending >= self.chunk_rows:
            self._reduce()

    def _reduce(self):
        rows = np.vstack([self.R] + self._pending)
        self._pending.clear()
        self._n_pending = 0
        for s in range(0, len(rows), self.chunk_rows):
            piece = rows[s:s + self.chunk_rows] if s == 0 else np.vstack([self.R, rows[s:s + self.chunk_rows]])
            self.R = _qr_r(piece)

    def result(self) -> np.ndarray:
        if self._pending:
            self._reduce()
        R = self.R
        if len(R) < self.ncols:
            R = np.vstack([R, np.zeros((self.ncols - len(R), self.ncols))])
        return R


def _qr_r(X: np.ndarray) -> np.ndarray:
    M, N = X.shape
    k = min(M, N)
    if k == 0:
        return np.zeros((0, N))
    a, _, info = lapack.dgeqrt(min(32, k), X)
    if info != 0:
        raise NumericalError(f"dgeqrt failed with info={info}")
    return np.triu(a[:k])


def _debug_enabled() -> bool:
    return os.environ.get("CROSSED_EB_DEBUG", "") not in ("", "0")


def pack_blocks(blocks: Iterable[TwoLevelBlock], batch_size: int = 128) -> Iterator[GroupBatch]:
    """Stack consecutive blocks into zero-padded GroupBatch arrays."""
    batch: list[TwoLevelBlock] = []
    offset = 0
    p = q = None

    def pack():
        g = len(batch)
        nmax = max(blk.n for blk in batch)
        Bd = np.zeros((g, nmax, q))
        W = np.zeros((g, nmax, p + 1))
        sizes = np.empty(g, dtype=int)
        for k, blk in enumerate(batch):
            n = blk.n
            sizes[k] = n
            Bd[k, :n] = blk.Bdot
            W[k, :n, :p] = blk.B
            W[k, :n, p] = blk.b
        return GroupBatch(Bd, W, sizes)

    for blk in blocks:
        if p is None:
            p, q = blk.B.shape[1], blk.Bdot.shape[1]
        gi = offset + len(batch)
        if np.ndim(blk.b) != 1 or blk.B.shape != (blk.n, p) or blk.Bdot.shape != (blk.n, q):
            raise InputError(
                f"group {gi}: block shapes b{np.shape(blk.b)}, B{blk.B.shape}, Bdot{blk.Bdot.shape} "
                f"inconsistent with p={p}, q={q}"
            )
        batch.append(blk)
        if len(batch) >= batch_size:
            yield pack()
            offset += len(batch)
            batch.clear()
    if batch:
        yield pack()


def stlsls(blocks: Iterable[TwoLevelBlock], batch_size: int = 128,
           chunk_rows: int = 512) -> TwoLevelSolution:
    """Solve the two-level sparse least-squares problem.

    ``blocks`` may be any iterable (e.g. a generator) and is consumed once.
    """
    return stlsls_batched(pack_blocks(blocks, batch_size), chunk_rows)


def stlsls_batched(batches: Iterable[GroupBatch], chunk_rows: int = 512,
                   shared: np.ndarray | None = None) -> TwoLevelSolution:
    """STLSLS over pre-stacked group batches (arrays are modified in place).

    ``shared`` optionally holds extra rows [B_0 | b_0] with no group-specific
    columns. They enter the stacked trailing QR directly; this is equivalent
    to spreading them over the groups, as m copies scaled by m^-1/2.
    """
    p = q = None
    acc = None
    R_groups, C1_groups, c1_groups = [], [], []
    logdet_groups = 0.0
    offset = 0
    for bt in batches:
        g, nmax, qq = bt.Bdot.shape
        if p is None:
            p, q = bt.W.shape[2] - 1, qq
            if p < 1 or q < 1:
                raise InputError("two-level blocks need p >= 1 and q >= 1 columns")
            acc = StackedQR(p + 1, chunk_rows)
            if shared is not None:
                if shared.ndim != 2 or shared.shape[1] != p + 1:
                    raise InputError(f"shared rows must have {p + 1} columns, got {shared.shape}")
                acc.add(shared)
        small = np.flatnonzero(bt.sizes < q)
        if len(small):
            raise InputError(f"group {offset + small[0]}: {bt.sizes[small[0]]} rows < q={q}")
        scale = np.sqrt(np.einsum("gnq,gnq->g", bt.Bdot, bt.Bdot))
        R = householder_qr_batch(bt.Bdot, bt.W)
        d = np.abs(np.diagonal(R, axis1=1, axis2=2))
        bad = np.flatnonzero(np.any(d <= 10 * nmax * _EPS * scale[:, None], axis=1) | (scale == 0))
        if len(bad):
            raise NumericalError(f"group {offset + bad[0]}: Bdot is rank deficient")
        logdet_groups += 2.0 * float(np.sum(np.log(d)))
        R_groups.append(R)
        C1_groups.append(bt.W[:, :q, :p].copy())
        c1_groups.append(bt.W[:, :q, p].copy())
        if nmax > q:
            if np.all(bt.sizes == nmax):
                acc.add(bt.W[:, q:, :].reshape(-1, p + 1))
            else:
                keep = np.arange(q, nmax)[None, :] < bt.sizes[:, None]
                acc.add(bt.W[:, q:, :][keep])
        offset += g
    if p is None:
        raise InputError("stlsls needs at least one group")

    Raug = acc.result()
    R = Raug[:p, :p]
    c = Raug[:p, p]
    dR = np.abs(np.diag(R))
    if np.any(dR <= 10 * p * _EPS * max(np.max(np.abs(R)), 1e-300)):
        raise NumericalError("stacked trailing block Omega_4 is rank deficient")
    if _debug_enabled():
        log.debug("stlsls: m=%d, cond(R) ~ %.3e", offset, np.linalg.cond(R))
    residual_sq = float(Raug[p, p] ** 2)
    x1 = linalg.solve_triangular(R, c)
    Rinv = linalg.solve_triangular(R, np.eye(p))
    A11 = Rinv @ Rinv.T

    Rg = np.concatenate(R_groups)
    C1 = np.concatenate(C1_groups)
    c1 = np.concatenate(c1_groups)
    RinvC1 = batched_upper_solve(Rg, C1)                          # (m, q, p)
    x2 = batched_upper_solve(Rg, (c1 - C1 @ x1)[:, :, None])[:, :, 0]
    A12 = -np.einsum("ab,gqb->gaq", A11, RinvC1)                  # (m, p, q)
    A22 = batched_upper_solve(Rg, batched_upper_inv_T(Rg) - C1 @ A12)
    A22 = 0.5 * (A22 + A22.transpose(0, 2, 1))
    logdet_A = logdet_groups + 2.0 * float(np.sum(np.log(dR)))
    return TwoLevelSolution(x1, 0.5 * (A11 + A11.T), x2, A22, A12, logdet_A, residual_sq)


def stlsls_residual(blocks, solution: TwoLevelSolution) -> float:
    """||b - B x||^2 for the stacked system."""
    total = 0.0
    for i, blk in enumerate(blocks):
        r = blk.b - blk.B @ solution.x1 - blk.Bdot @ solution.x2[i]
        total += float(r @ r)
    return total


def stlsls_gradient(blocks, solution: TwoLevelSolution) -> np.ndarray:
    """B^T (b - B x), stacked like x."""
    g1 = 0.0
    g2 = []
    for i, blk in enumerate(blocks):
        r = blk.b - blk.B @ solution.x1 - blk.Bdot @ solution.x2[i]
        g1 = g1 + blk.B.T @ r
        g2.append(blk.Bdot.T @ r)
    return np.concatenate([np.atleast_1d(g1)] + g2)


def dense_from_blocks(blocks):
    """Stacked (B, b) as dense arrays. For tests and small diagnostics."""
    blocks = list(blocks)
    m = len(blocks)
    p, q = blocks[0].B.shape[1], blocks[0].Bdot.shape[1]
    rows = sum(blk.n for blk in blocks)
    B = np.zeros((rows, p + m * q))
    b = np.zeros(rows)
    r0 = 0
    for i, blk in enumerate(blocks):
        r1 = r0 + blk.n
        B[r0:r1, :p] = blk.B
        B[r0:r1, p + i * q:p + (i + 1) * q] = blk.Bdot
        b[r0:r1] = blk.b
        r0 = r1
    return B, b
