"""Epsilon-SVR with an RBF kernel, solved by SMO.

The dual is written over 2l variables beta = [alpha; alpha*] with labels
y = [+1...; -1...]:

    min 1/2 beta' Q beta + p' beta   s.t.  y' beta = 0,  0 <= beta <= C

where Q_st = y_s y_t K(x_s, x_t), p = [eps - z; eps + z].  Working pairs are
picked with second-order information (maximal violating pair on the first
index, largest guaranteed decrease on the second).
"""

from __future__ import annotations

import itertools
import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

logger = logging.getLogger(__name__)

TAU = 1e-12
DEFAULT_C_GRID = (0.1, 1.0, 10.0)
DEFAULT_EPS_GRID = (0.01, 0.05, 0.1)


class SvrConvergenceError(RuntimeError):
    def __init__(self, iterations: int, violation: float):
        self.iterations = iterations
        self.violation = violation
        super().__init__(f"SMO did not converge in {iterations} iterations (KKT violation {violation:.3e})")


def rbf_kernel(A: np.ndarray, B: np.ndarray, gamma: float) -> np.ndarray:
    sq = (A * A).sum(axis=1)[:, None] + (B * B).sum(axis=1)[None, :] - 2.0 * A @ B.T
    return np.exp(-gamma * np.maximum(sq, 0.0))


def default_gamma(X: np.ndarray) -> float:
    v = float(np.var(X))
    return 1.0 / (X.shape[1] * v) if v > 0 else 1.0


class _KernelRows:
    """Kernel rows on demand with a small LRU; full matrix when it fits."""

    def __init__(self, X: np.ndarray, gamma: float, cache_rows: int = 512, full_limit: int = 3000):
        self.X, self.gamma = X, gamma
        self.full = rbf_kernel(X, X, gamma) if len(X) <= full_limit else None
        self.cache: OrderedDict[int, np.ndarray] = OrderedDict()
        self.cache_rows = cache_rows
        self.diag = np.ones(len(X))

    def row(self, i: int) -> np.ndarray:
        if self.full is not None:
            return self.full[i]
        r = self.cache.get(i)
        if r is not None:
            self.cache.move_to_end(i)
            return r
        r = rbf_kernel(self.X[i : i + 1], self.X, self.gamma)[0]
        self.cache[i] = r
        if len(self.cache) > self.cache_rows:
            self.cache.popitem(last=False)
        return r


@dataclass
class SvrModel:
    support_vectors: np.ndarray
    dual_coef: np.ndarray
    bias: float
    gamma: float
    C: float
    epsilon: float
    iterations: int = 0
    kkt_violation: float = 0.0
    objective: float = 0.0
    history: list[float] = field(default_factory=list)

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if len(self.dual_coef) == 0:
            return np.full(len(X), self.bias)
        return rbf_kernel(X, self.support_vectors, self.gamma) @ self.dual_coef + self.bias


def predict(model: SvrModel, x: np.ndarray) -> float | np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = model.predict(x)
    return float(out[0]) if x.ndim == 1 else out


def dual_objective(beta: np.ndarray, K: np.ndarray, z: np.ndarray, epsilon: float) -> float:
    """1/2 beta' Q beta + p' beta for the stacked dual."""
    coef = beta[: len(z)] - beta[len(z) :]
    return float(0.5 * coef @ K @ coef + epsilon * beta.sum() - z @ coef)


def fit(
    X: np.ndarray,
    y: np.ndarray,
    C: float = 1.0,
    epsilon: float = 0.1,
    gamma: float | None = None,
    tol: float = 1e-3,
    max_iter: int = 1_000_000,
    track_objective: bool = False,
    return_dual: bool = False,
):
    """Solve the epsilon-insensitive dual with SMO until the maximal KKT violation is below ``tol``."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    z = np.asarray(y, dtype=np.float64).reshape(-1)
    l = len(z)
    if l < 1 or len(X) != l:
        raise ValueError(f"need matching non-empty X and y, got {len(X)} and {l}")
    if C <= 0 or epsilon < 0:
        raise ValueError(f"need C > 0 and epsilon >= 0, got C={C}, epsilon={epsilon}")
    gamma = default_gamma(X) if gamma is None else gamma
    if gamma <= 0:
        raise ValueError(f"gamma must be > 0, got {gamma}")

    kr = _KernelRows(X, gamma)
    n = 2 * l
    sgn = np.concatenate([np.ones(l), -np.ones(l)])
    beta = np.zeros(n)
    p_lin = np.concatenate([epsilon - z, epsilon + z])
    G = p_lin.copy()
    QD = np.ones(n)  # RBF diagonal is 1 and y_s^2 = 1
    idx_mod = np.concatenate([np.arange(l), np.arange(l)])

    def q_row(s: int) -> np.ndarray:
        k = kr.row(s % l)
        return sgn[s] * sgn * k[idx_mod]

    history = []
    it = 0
    violation = np.inf
    while it < max_iter:
        up = ((sgn > 0) & (beta < C)) | ((sgn < 0) & (beta > 0))
        low = ((sgn > 0) & (beta > 0)) | ((sgn < 0) & (beta < C))
        yg = -sgn * G
        if not up.any() or not low.any():
            violation = 0.0
            break
        i = int(np.flatnonzero(up)[np.argmax(yg[up])])
        gmax = yg[i]
        gmin = yg[low].min()
        violation = gmax - gmin
        if violation < tol:
            break
        Qi = q_row(i)
        cand = low & (yg < gmax)
        b = gmax - yg[cand]
        a = QD[i] + QD[cand] - 2.0 * sgn[i] * sgn[cand] * Qi[cand]
        a = np.where(a > 0, a, TAU)
        j = int(np.flatnonzero(cand)[np.argmin(-(b * b) / a)])
        Qj = q_row(j)
        oi, oj = beta[i], beta[j]
        if sgn[i] != sgn[j]:
            quad = QD[i] + QD[j] + 2.0 * Qi[j]
            quad = quad if quad > 0 else TAU
            delta = (-G[i] - G[j]) / quad
            diff = oi - oj
            bi, bj = oi + delta, oj + delta
            if diff > 0:
                if bj < 0:
                    bj, bi = 0.0, diff
            elif bi < 0:
                bi, bj = 0.0, -diff
            if diff > 0:
                if bi > C:
                    bi, bj = C, C - diff
            elif bj > C:
                bj, bi = C, C + diff
        else:
            quad = QD[i] + QD[j] - 2.0 * Qi[j]
            quad = quad if quad > 0 else TAU
            delta = (G[i] - G[j]) / quad
            total = oi + oj
            bi, bj = oi - delta, oj + delta
            if total > C:
                if bi > C:
                    bi, bj = C, total - C
            elif bj < 0:
                bj, bi = 0.0, total
            if total > C:
                if bj > C:
                    bj, bi = C, total - C
            elif bi < 0:
                bi, bj = 0.0, total
        beta[i], beta[j] = bi, bj
        G += Qi * (bi - oi) + Qj * (bj - oj)
        it += 1
        if track_objective:
            # G - p = Q beta
            history.append(0.5 * float(beta @ (G - p_lin)) + float(p_lin @ beta))
    else:
        raise SvrConvergenceError(it, float(violation))

    # bias from free variables, or the midpoint of the feasible interval
    yg = sgn * G
    free = (beta > 0) & (beta < C)
    if free.any():
        rho = float(yg[free].mean())
    else:
        at_ub = beta >= C
        ub_mask = (at_ub & (sgn < 0)) | (~at_ub & (sgn > 0))
        lb_mask = (at_ub & (sgn > 0)) | (~at_ub & (sgn < 0))
        ub = yg[ub_mask].min() if ub_mask.any() else np.inf
        lb = yg[lb_mask].max() if lb_mask.any() else -np.inf
        rho = float((ub + lb) / 2.0)
    coef = beta[:l] - beta[l:]
    sv = np.flatnonzero(coef != 0)
    obj = 0.5 * float(beta @ (G - p_lin)) + float(p_lin @ beta)
    model = SvrModel(X[sv].copy(), coef[sv].copy(), -rho, gamma, C, epsilon, it, float(max(violation, 0.0)), obj, history)
    if return_dual:
        return model, beta
    return model


# ---------------------------------------------------------------------------
# grid search
# ---------------------------------------------------------------------------


@dataclass
class GridCell:
    C: float
    epsilon: float
    gamma: float
    mse: float


def _tie_key(cell: GridCell) -> tuple:
    # lower MSE, then smaller C, larger epsilon, smaller gamma
    return (cell.mse, cell.C, -cell.epsilon, cell.gamma)


def grid_search(
    X_train: np.ndarray,
    y_train: np.ndarray,
    X_val: np.ndarray,
    y_val: np.ndarray,
    C_grid: Sequence[float] = DEFAULT_C_GRID,
    eps_grid: Sequence[float] = DEFAULT_EPS_GRID,
    gamma_grid: Sequence[float] | None = None,
    tol: float = 1e-3,
    max_iter: int = 1_000_000,
) -> tuple[GridCell, list[GridCell]]:
    """Exhaustive search over (C, epsilon, gamma) by validation MSE."""
    if not C_grid or not eps_grid or (gamma_grid is not None and not gamma_grid):
        raise ValueError("grids must be non-empty")
    gammas = list(gamma_grid) if gamma_grid is not None else [default_gamma(X_train)]
    cells = []
    for C, eps, g in itertools.product(C_grid, eps_grid, gammas):
        m = fit(X_train, y_train, C, eps, g, tol, max_iter=max_iter)
        err = float(np.mean((m.predict(X_val) - y_val) ** 2))
        cells.append(GridCell(float(C), float(eps), float(g), err))
    return min(cells, key=_tie_key), cells


@dataclass
class MultiOutputSvr:
    models: list[SvrModel]

    def predict(self, X: np.ndarray) -> np.ndarray:
        return np.stack([m.predict(X) for m in self.models], axis=1)


def fit_multi(
    X_train: np.ndarray,
    Y_train: np.ndarray,
    X_val: np.ndarray,
    Y_val: np.ndarray,
    C_grid: Sequence[float] = DEFAULT_C_GRID,
    eps_grid: Sequence[float] = DEFAULT_EPS_GRID,
    gamma_grid: Sequence[float] | None = None,
    tol: float = 1e-3,
    max_iter: int = 1_000_000,
) -> tuple[MultiOutputSvr, list[GridCell]]:
    """One grid-searched regressor per output column; windows are flattened."""
    Xt = X_train.reshape(len(X_train), -1)
    Xv = X_val.reshape(len(X_val), -1)
    models, best_cells = [], []
    for k in range(Y_train.shape[1]):
        best, _ = grid_search(Xt, Y_train[:, k], Xv, Y_val[:, k], C_grid, eps_grid, gamma_grid, tol, max_iter)
        models.append(fit(Xt, Y_train[:, k], best.C, best.epsilon, best.gamma, tol, max_iter=max_iter))
        best_cells.append(best)
    return MultiOutputSvr(models), best_cells


# ---------------------------------------------------------------------------
# reference solver
# ---------------------------------------------------------------------------


def _project(v: np.ndarray, sgn: np.ndarray, C: float) -> np.ndarray:
    """Euclidean projection onto {0 <= b <= C, sgn'b = 0} by bisection on the multiplier."""
    lo, hi = -np.abs(v).max() - C - 1.0, np.abs(v).max() + C + 1.0
    while hi - lo > 1e-15 * max(1.0, abs(lo), abs(hi)):
        mid = 0.5 * (lo + hi)
        if mid == lo or mid == hi:
            break
        if sgn @ np.clip(v - mid * sgn, 0.0, C) > 0:
            lo = mid
        else:
            hi = mid
    return np.clip(v - 0.5 * (lo + hi) * sgn, 0.0, C)


def projected_gradient_dual(
    X: np.ndarray, y: np.ndarray, C: float, epsilon: float, gamma: float, iters: int = 20000, tol: float = 1e-14
) -> tuple[np.ndarray, float]:
    """Accelerated projected gradient on the same dual; slow but independent of SMO."""
    z = np.asarray(y, dtype=np.float64)
    l = len(z)
    K = rbf_kernel(X, X, gamma)
    sgn = np.concatenate([np.ones(l), -np.ones(l)])
    Q = np.outer(sgn, sgn) * np.block([[K, K], [K, K]])
    p = np.concatenate([epsilon - z, epsilon + z])
    L = np.linalg.eigvalsh(Q).max()
    step = 1.0 / L
    b = np.zeros(2 * l)
    w, t = b.copy(), 1.0
    for _ in range(iters):
        nb = _project(w - step * (Q @ w + p), sgn, C)
        nt = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        w = nb + (t - 1.0) / nt * (nb - b)
        moved = np.abs(nb - b).max()
        b, t = nb, nt
        if moved < tol:
            break
    return b, float(0.5 * b @ Q @ b + p @ b)
