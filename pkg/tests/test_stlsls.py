import csv
import time
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, strategies as st

from crossed_eb.model import InputError, NumericalError
from crossed_eb.stlsls import (StackedQR, TwoLevelBlock, dense_from_blocks, stlsls,
                               stlsls_gradient, stlsls_residual)

DATA = Path(__file__).parent / "data"


def random_blocks(rng, m, p, q, n_max=12):
    blocks = []
    for _ in range(m):
        n = int(rng.integers(q, n_max + 1))
        blocks.append(TwoLevelBlock(rng.standard_normal(n), rng.standard_normal((n, p)),
                                    rng.standard_normal((n, q))))
    return blocks


def dense_oracle(blocks):
    B, b = dense_from_blocks(blocks)
    A = np.linalg.inv(B.T @ B)
    return A @ B.T @ b, A


def assert_matches_oracle(blocks, sol, rtol=1e-10):
    x, A = dense_oracle(blocks)
    p, q = blocks[0].B.shape[1], blocks[0].Bdot.shape[1]

    def close(got, ref, what):
        err = np.linalg.norm(got - ref) / max(np.linalg.norm(ref), 1e-300)
        assert err <= rtol, f"{what}: relative error {err:.2e}"

    close(sol.x(), x, "x")
    close(sol.A11, A[:p, :p], "A11")
    for i in range(len(blocks)):
        sl = slice(p + i * q, p + (i + 1) * q)
        close(sol.A22[i], A[sl, sl], f"A22[{i}]")
        close(sol.A12[i], A[:p, sl], f"A12[{i}]")


def test_orthonormal_single_group():
    # Bdot = [I2; 0] and one unit row for the shared column, so B^T B = I3
    blk = TwoLevelBlock(np.array([3.0, 4.0, 5.0]), np.array([[0.0], [0.0], [1.0]]),
                        np.vstack([np.eye(2), np.zeros((1, 2))]))
    sol = stlsls([blk])
    np.testing.assert_allclose(sol.x2[0], [3.0, 4.0], atol=1e-14)
    np.testing.assert_allclose(sol.x1, [5.0], atol=1e-14)
    np.testing.assert_allclose(sol.A22[0], np.eye(2), atol=1e-14)
    np.testing.assert_allclose(sol.A12[0], 0.0, atol=1e-14)


def test_zero_shared_columns_are_rank_deficient():
    blk = TwoLevelBlock(np.array([3.0, 4.0]), np.zeros((2, 1)), np.eye(2))
    with pytest.raises(NumericalError, match="Omega_4"):
        stlsls([blk])


def test_identity_stack():
    # B columns are distinct unit vectors, so A = I and x = B^T b
    m, p, q = 3, 2, 2
    n = p + q
    blocks = []
    rng = np.random.default_rng(0)
    for i in range(m):
        B = np.zeros((n, p))
        Bd = np.zeros((n, q))
        Bd[:q] = np.eye(q)
        if i == 0:
            B[q:] = np.eye(p)
        blocks.append(TwoLevelBlock(rng.standard_normal(n), B, Bd))
    sol = stlsls(blocks)
    Bf, b = dense_from_blocks(blocks)
    np.testing.assert_allclose(sol.x(), Bf.T @ b, atol=1e-14)
    np.testing.assert_allclose(sol.A11, np.eye(p), atol=1e-14)
    np.testing.assert_allclose(sol.A22, np.broadcast_to(np.eye(q), (m, q, q)), atol=1e-14)
    np.testing.assert_allclose(sol.A12, 0.0, atol=1e-14)


def test_two_groups_scalar_blocks():
    rng = np.random.default_rng(1)
    blocks = [TwoLevelBlock(rng.standard_normal(4), rng.standard_normal((4, 1)),
                            rng.standard_normal((4, 1))) for _ in range(2)]
    assert_matches_oracle(blocks, stlsls(blocks))


@given(st.integers(0, 2**32 - 1), st.integers(1, 8), st.integers(1, 4), st.integers(1, 3))
def test_matches_dense_oracle(seed, m, p, q):
    rng = np.random.default_rng(seed)
    blocks = random_blocks(rng, m, p, q)
    Bf, _ = dense_from_blocks(blocks)
    if Bf.shape[0] < Bf.shape[1]:  # not enough rows in total for full column rank
        blocks.append(TwoLevelBlock(rng.standard_normal(p + q), rng.standard_normal((p + q, p)),
                                    rng.standard_normal((p + q, q))))
    sol = stlsls(blocks, batch_size=3, chunk_rows=8)
    assert_matches_oracle(blocks, sol)
    Bf, b = dense_from_blocks(blocks)
    assert sol.logdet_A == pytest.approx(np.linalg.slogdet(Bf.T @ Bf)[1], rel=1e-10, abs=1e-10)
    assert sol.residual_sq == pytest.approx(stlsls_residual(blocks, sol), rel=1e-8, abs=1e-12)


def test_exact_fit_has_zero_residual():
    rng = np.random.default_rng(3)
    blocks = random_blocks(rng, 4, 2, 2)
    Bf, _ = dense_from_blocks(blocks)
    x = rng.standard_normal(Bf.shape[1])
    b = Bf @ x
    r0 = 0
    fitted = []
    for blk in blocks:
        fitted.append(TwoLevelBlock(b[r0:r0 + blk.n], blk.B, blk.Bdot))
        r0 += blk.n
    sol = stlsls(fitted)
    assert stlsls_residual(fitted, sol) <= 1e-18
    np.testing.assert_allclose(sol.x(), x, rtol=1e-10)


def test_solution_beats_random_perturbations():
    rng = np.random.default_rng(4)
    blocks = random_blocks(rng, 5, 3, 2)
    sol = stlsls(blocks)
    best = stlsls_residual(blocks, sol)
    p, q = 3, 2
    for _ in range(1000):
        dx = 1e-3 * rng.standard_normal(p + 5 * q)
        pert = type(sol)(sol.x1 + dx[:p], sol.A11, sol.x2 + dx[p:].reshape(5, q),
                         sol.A22, sol.A12, sol.logdet_A, sol.residual_sq)
        assert stlsls_residual(blocks, pert) >= best


@given(st.integers(0, 2**32 - 1))
def test_gradient_vanishes(seed):
    rng = np.random.default_rng(seed)
    blocks = random_blocks(rng, 6, 3, 2)
    sol = stlsls(blocks)
    Bf, b = dense_from_blocks(blocks)
    assert np.linalg.norm(stlsls_gradient(blocks, sol)) <= 1e-8 * np.linalg.norm(Bf.T @ b)


def test_group_permutation_invariance():
    rng = np.random.default_rng(5)
    blocks = random_blocks(rng, 7, 3, 2)
    perm = rng.permutation(7)
    a = stlsls(blocks)
    b = stlsls([blocks[i] for i in perm])
    np.testing.assert_allclose(b.x1, a.x1, rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(b.x2, a.x2[perm], rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(b.A22, a.A22[perm], rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(b.A12, a.A12[perm], rtol=1e-10, atol=1e-12)


def test_batch_and_chunk_sizes_do_not_change_results():
    rng = np.random.default_rng(6)
    blocks = random_blocks(rng, 20, 4, 2)
    ref = stlsls(blocks, batch_size=128, chunk_rows=512)
    for bs, ch in ((1, 4), (3, 17), (7, 64)):
        got = stlsls(blocks, batch_size=bs, chunk_rows=ch)
        np.testing.assert_allclose(got.x(), ref.x(), rtol=1e-11, atol=1e-13)
        np.testing.assert_allclose(got.A22, ref.A22, rtol=1e-11, atol=1e-13)


def test_repeat_runs_are_bit_identical():
    blocks = random_blocks(np.random.default_rng(7), 10, 3, 2)
    a, b = stlsls(blocks), stlsls(blocks)
    assert np.array_equal(a.x(), b.x()) and np.array_equal(a.A12, b.A12)


def test_stacked_qr_matches_single_qr():
    rng = np.random.default_rng(8)
    X = rng.standard_normal((300, 6))
    acc = StackedQR(6, chunk_rows=16)
    for s in range(0, 300, 37):
        acc.add(X[s:s + 37])
    R = acc.result()
    np.testing.assert_allclose(R.T @ R, X.T @ X, rtol=1e-11)


def test_rank_deficient_group_is_named():
    rng = np.random.default_rng(9)
    blocks = random_blocks(rng, 3, 2, 2)
    bad = blocks[1]
    Bd = bad.Bdot.copy()
    Bd[:, 1] = 2 * Bd[:, 0]
    blocks[1] = TwoLevelBlock(bad.b, bad.B, Bd)
    with pytest.raises(NumericalError, match="group 1"):
        stlsls(blocks)


def test_short_group_rejected():
    blocks = [TwoLevelBlock(np.ones(1), np.ones((1, 1)), np.ones((1, 2)))]
    with pytest.raises(InputError, match="group 0"):
        stlsls(blocks)


def test_time_is_linear_in_groups():
    rng = np.random.default_rng(10)
    small = random_blocks(rng, 200, 4, 3, n_max=12)
    large = random_blocks(rng, 2000, 4, 3, n_max=12)

    def best(blocks):
        ts = []
        for _ in range(5):
            t0 = time.perf_counter()
            stlsls(blocks)
            ts.append(time.perf_counter() - t0)
        return min(ts)

    ratio = best(large) / best(small)
    assert ratio <= 15, ratio


def _read_fixture():
    with open(DATA / "stlsls_blocks.csv") as fh:
        rows = list(csv.reader(fh))
    head, body = rows[0], np.array(rows[1:], dtype=float)
    p = sum(h.startswith("B") and not h.startswith("Bdot") for h in head)
    blocks = []
    for g in np.unique(body[:, 0]):
        r = body[body[:, 0] == g]
        blocks.append(TwoLevelBlock(r[:, 1], r[:, 2:2 + p], r[:, 2 + p:]))
    return blocks


def test_csv_fixture():
    blocks = _read_fixture()
    sol = stlsls(blocks)
    with open(DATA / "stlsls_solution.csv") as fh:
        for rec in csv.DictReader(fh):
            i, j, v = int(rec["row"]), int(rec["col"]), float(rec["value"])
            g = int(rec["group"]) if rec["group"] else None
            got = {"x1": lambda: sol.x1[i], "A11": lambda: sol.A11[i, j],
                   "x2": lambda: sol.x2[g, i], "A22": lambda: sol.A22[g, i, j],
                   "A12": lambda: sol.A12[g, i, j]}[rec["name"]]()
            assert got == pytest.approx(v, rel=1e-10, abs=1e-12), rec
