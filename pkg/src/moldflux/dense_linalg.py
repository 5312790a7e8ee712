"""Dense solvers for the small P x P normal equations.

* LU factorisation with full (complete) pivoting.
* One-sided Jacobi SVD (Hestenes), vectorised over disjoint column pairs.
* Truncated-SVD solve ``z = sum_{i<=alpha} (u_i . c / s_i) v_i``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from .errors import InvalidArgument, SingularMatrix, SolverFailure

RANK_EPS = 1e-14


@dataclass
class LUFactors:
    """``K[row_perm][:, col_perm] = L @ U`` with unit-diagonal ``L``."""

    LU: np.ndarray
    row_perm: np.ndarray
    col_perm: np.ndarray

    @property
    def n(self) -> int:
        return self.LU.shape[0]

    def solve(self, c: np.ndarray) -> np.ndarray:
        c = np.asarray(c, dtype=float)
        y = solve_triangular(self.LU, c[self.row_perm], lower=True, unit_diagonal=True)
        x = solve_triangular(self.LU, y, lower=False)
        z = np.empty_like(x)
        z[self.col_perm] = x
        return z

    def condition_1norm(self, K: np.ndarray) -> float:
        inv = self.solve(np.eye(self.n))
        return float(np.linalg.norm(K, 1) * np.linalg.norm(inv, 1))


def lu_factor_full_pivot(K: np.ndarray, pivot_tol: float | None = None) -> LUFactors:
    """Gaussian elimination choosing the largest remaining entry as pivot.

    A pivot whose magnitude does not exceed ``pivot_tol * max|K|`` raises
    :class:`SingularMatrix`.  The default threshold is the smallest normal
    double, so only pivots that are zero in floating point stop the
    factorisation; nearly singular systems are still solved and the caller
    judges them from :meth:`LUFactors.condition_1norm`.
    """
    A = np.array(K, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise InvalidArgument("LU needs a square matrix")
    if not np.all(np.isfinite(A)):
        raise InvalidArgument("matrix has non-finite entries")
    n = A.shape[0]
    if pivot_tol is None:
        pivot_tol = np.finfo(float).tiny
    rows = np.arange(n)
    cols = np.arange(n)
    scale = np.abs(A).max() if n else 0.0
    if scale == 0.0:
        raise SingularMatrix("zero matrix", condition=np.inf)
    for k in range(n):
        sub = np.abs(A[k:, k:])
        i, j = np.unravel_index(np.argmax(sub), sub.shape)
        i += k
        j += k
        if sub[i - k, j - k] <= pivot_tol * scale:
            raise SingularMatrix(f"pivot {k} is numerically zero ({sub[i - k, j - k]:.3e})",
                                 condition=np.inf)
        if i != k:
            A[[k, i], :] = A[[i, k], :]
            rows[[k, i]] = rows[[i, k]]
        if j != k:
            A[:, [k, j]] = A[:, [j, k]]
            cols[[k, j]] = cols[[j, k]]
        A[k + 1:, k] /= A[k, k]
        A[k + 1:, k + 1:] -= np.outer(A[k + 1:, k], A[k, k + 1:])
    return LUFactors(A, rows, cols)


def lu_solve_full_pivot(K: np.ndarray, c: np.ndarray, with_condition: bool = False):
    """Solve ``K z = c``; optionally also return a 1-norm condition estimate."""
    f = lu_factor_full_pivot(K)
    z = f.solve(c)
    if with_condition:
        return z, f.condition_1norm(np.asarray(K, dtype=float))
    return z


@dataclass
class SvdResult:
    U: np.ndarray      # (m, r)
    sigma: np.ndarray  # (r,) decreasing, > RANK_EPS * sigma_1
    V: np.ndarray      # (n, r)
    sigma_all: np.ndarray

    @property
    def r(self) -> int:
        return self.sigma.size


def _round_robin(n: int):
    """Rounds of disjoint index pairs covering every pair once (circle method)."""
    m = n + (n % 2)
    idx = list(range(m))
    rounds = []
    for _ in range(m - 1):
        p = np.array([idx[i] for i in range(m // 2)])
        q = np.array([idx[m - 1 - i] for i in range(m // 2)])
        keep = (p < n) & (q < n)
        p, q = p[keep], q[keep]
        lo, hi = np.minimum(p, q), np.maximum(p, q)
        rounds.append((lo, hi))
        idx = [idx[0]] + [idx[-1]] + idx[1:-1]
    return rounds


def svd(K: np.ndarray, tol: float = 1e-15, max_sweeps: int = 60) -> SvdResult:
    """Thin SVD by one-sided Jacobi rotations on the columns of ``K``."""
    A = np.array(K, dtype=float)
    if A.ndim != 2:
        raise InvalidArgument("svd needs a 2-D array")
    m, n = A.shape
    transposed = m < n
    if transposed:
        A = A.T
        m, n = n, m
    U = A.copy()
    V = np.eye(n)
    rounds = _round_robin(n)
    # columns below this squared norm are rounding noise and are left alone
    floor = (np.finfo(float).eps * np.linalg.norm(A)) ** 2
    converged = n < 2
    for _ in range(max_sweeps):
        rotated = False
        for p, q in rounds:
            if p.size == 0:
                continue
            up, uq = U[:, p], U[:, q]
            alpha = np.einsum("ij,ij->j", up, up)
            beta = np.einsum("ij,ij->j", uq, uq)
            gamma = np.einsum("ij,ij->j", up, uq)
            act = np.abs(gamma) > tol * np.sqrt(alpha * beta)
            act &= (alpha > floor) & (beta > floor)
            if not act.any():
                continue
            rotated = True
            p, q = p[act], q[act]
            alpha, beta, gamma = alpha[act], beta[act], gamma[act]
            zeta = (beta - alpha) / (2.0 * gamma)
            t = np.sign(zeta) / (np.abs(zeta) + np.hypot(1.0, zeta))
            t[zeta == 0] = 1.0
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            for X in (U, V):
                xp, xq = X[:, p].copy(), X[:, q]
                X[:, p] = c * xp - s * xq
                X[:, q] = s * xp + c * xq
        if not rotated:
            converged = True
            break
    if not converged:
        raise SolverFailure("Jacobi SVD did not converge")
    sigma = np.linalg.norm(U, axis=0)
    order = np.argsort(-sigma, kind="stable")
    sigma, U, V = sigma[order], U[:, order], V[:, order]
    r = int(np.count_nonzero(sigma > RANK_EPS * sigma[0])) if sigma.size and sigma[0] > 0 else 0
    Ur = U[:, :r] / sigma[:r]
    Vr = V[:, :r]
    if transposed:
        Ur, Vr = Vr, Ur
    return SvdResult(U=Ur, sigma=sigma[:r].copy(), V=Vr, sigma_all=sigma)


def tsvd_solve(K: np.ndarray | SvdResult, c: np.ndarray, alpha: int) -> np.ndarray:
    """Truncated SVD solution keeping the ``alpha`` largest singular values."""
    s = K if isinstance(K, SvdResult) else svd(K)
    if int(alpha) != alpha or not 1 <= alpha <= s.r:
        raise InvalidArgument(f"alpha={alpha} must lie in 1..rank={s.r}")
    a = int(alpha)
    coef = (s.U[:, :a].T @ np.asarray(c, dtype=float)) / s.sigma[:a]
    return s.V[:, :a] @ coef


def spectrum_gap_alpha(sigma: np.ndarray, min_keep: int = 1) -> int:
    """Truncation index at the largest drop ``log(s_i / s_{i+1})`` of the spectrum."""
    sigma = np.asarray(sigma, dtype=float)
    sigma = sigma[sigma > 0]
    if sigma.size <= 1:
        return int(sigma.size)
    ratios = np.log(sigma[:-1] / sigma[1:])
    ratios[: max(min_keep, 1) - 1] = -np.inf
    return int(np.argmax(ratios)) + 1


def write_spectrum_csv(path, sigma: np.ndarray) -> None:
    with open(path, "w") as fh:
        fh.write("i,sigma,sigma_rel\n")
        s0 = sigma[0] if len(sigma) else 1.0
        for i, s in enumerate(sigma, 1):
            fh.write(f"{i},{s:.17e},{s / s0:.17e}\n")
