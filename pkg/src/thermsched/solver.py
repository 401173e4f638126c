"""Small dense optimization routines for the planning controllers.

Problem sizes here are tiny (tens of variables and rows), so a textbook
two-phase tableau simplex and a fixed-budget projected-gradient loop are
both adequate and keep the package dependency-free.  Determinism matters
more than speed: Bland's rule for the simplex, fixed iteration budgets and
a deterministic backtracking schedule for the gradient loop.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Tuple

import numpy as np

_TOL = 1e-9


@dataclass
class LpResult:
    x: np.ndarray
    objective: float
    status: str  # "optimal" | "infeasible" | "unbounded" | "iteration_limit"
    iterations: int

    @property
    def ok(self) -> bool:
        return self.status == "optimal"


def _simplex(tableau: np.ndarray, basis: np.ndarray, max_iter: int) -> Tuple[str, int]:
    """Run Bland-rule pivots in place on [A | b] with cost row last.

    The cost row holds reduced costs; basis[i] is the basic column of row i.
    Returns (status, iterations).
    """
    m = tableau.shape[0] - 1
    for it in range(max_iter):
        negative = np.flatnonzero(tableau[-1, :-1] < -_TOL)
        if negative.size == 0:
            return "optimal", it
        entering = int(negative[0])
        col = tableau[:m, entering]
        rows = np.flatnonzero(col > _TOL)
        if rows.size == 0:
            return "unbounded", it
        ratios = tableau[rows, -1] / col[rows]
        near = rows[ratios <= ratios.min() + _TOL]
        leaving = int(near[np.argmin(basis[near])])
        pivot = tableau[leaving, entering]
        tableau[leaving] /= pivot
        factor = tableau[:, entering].copy()
        factor[leaving] = 0.0
        tableau -= np.outer(factor, tableau[leaving])
        basis[leaving] = entering
    return "iteration_limit", max_iter


def solve_lp(
    c: np.ndarray,
    a_eq: Optional[np.ndarray] = None,
    b_eq: Optional[np.ndarray] = None,
    a_ub: Optional[np.ndarray] = None,
    b_ub: Optional[np.ndarray] = None,
    max_iter: int = 2000,
    basis0: Optional[np.ndarray] = None,
) -> LpResult:
    """Minimize c.x subject to a_eq x = b_eq, a_ub x <= b_ub, x >= 0.

    Two-phase dense simplex.  Inequalities gain slack variables; phase 1
    drives artificial variables out of the basis, phase 2 optimizes the real
    objective.  Suited to problems with tens of rows and columns.

    basis0 optionally names one basic column per row (equality rows first,
    then inequality rows; slack columns sit after the structural ones).
    When those columns form an identity on rows with nonnegative right-hand
    sides, phase 1 is skipped entirely; otherwise the hint is ignored.
    """
    c = np.asarray(c, dtype=float)
    n = c.shape[0]
    rows = []
    rhs = []
    n_ub = 0 if a_ub is None else np.asarray(a_ub).shape[0]
    if a_eq is not None:
        a_eq = np.asarray(a_eq, dtype=float)
        for i in range(a_eq.shape[0]):
            rows.append(np.concatenate([a_eq[i], np.zeros(n_ub)]))
            rhs.append(float(b_eq[i]))
    if a_ub is not None:
        a_ub = np.asarray(a_ub, dtype=float)
        for i in range(n_ub):
            slack = np.zeros(n_ub)
            slack[i] = 1.0
            rows.append(np.concatenate([a_ub[i], slack]))
            rhs.append(float(b_ub[i]))
    if not rows:
        # unconstrained besides x >= 0: optimum is 0 unless a cost is negative
        if np.any(c < -_TOL):
            return LpResult(np.zeros(n), 0.0, "unbounded", 0)
        return LpResult(np.zeros(n), 0.0, "optimal", 0)

    a = np.stack(rows)
    b = np.asarray(rhs, dtype=float)
    neg = b < 0
    a[neg] *= -1.0
    b[neg] *= -1.0
    m, total = a.shape  # total = n + n_ub

    if basis0 is not None and not np.any(neg):
        basis = np.asarray(basis0, dtype=np.int64)
        ident = (
            basis.shape == (m,)
            and np.all(basis >= 0)
            and np.all(basis < total)
            and np.allclose(a[:, basis], np.eye(m), atol=1e-12)
        )
        if ident:
            tableau = np.zeros((m + 1, total + 1))
            tableau[:m, :total] = a
            tableau[:m, -1] = b
            cost_full = np.concatenate([c, np.zeros(n_ub)])
            tableau[-1, :-1] = cost_full
            basis = basis.copy()
            for i in range(m):
                if abs(tableau[-1, basis[i]]) > 0:
                    tableau[-1] -= tableau[-1, basis[i]] * tableau[i]
            status, its = _simplex(tableau, basis, max_iter)
            x = np.zeros(total)
            for i in range(m):
                x[basis[i]] = tableau[i, -1]
            sol = x[:n]
            if status != "optimal":
                return LpResult(sol, float(c @ sol), status, its)
            return LpResult(sol, float(c @ sol), "optimal", its)

    # phase 1: artificial basis
    tableau = np.zeros((m + 1, total + m + 1))
    tableau[:m, :total] = a
    tableau[:m, total : total + m] = np.eye(m)
    tableau[:m, -1] = b
    basis = np.arange(total, total + m)
    # phase-1 reduced costs: minimize sum of artificials
    tableau[-1, :total] = -a.sum(axis=0)
    tableau[-1, -1] = -b.sum()
    status, it1 = _simplex(tableau, basis, max_iter)
    if status == "iteration_limit":
        return LpResult(np.zeros(n), np.inf, status, it1)
    if -tableau[-1, -1] > 1e-7:
        return LpResult(np.zeros(n), np.inf, "infeasible", it1)

    # pivot any artificial still basic (at zero) out where possible
    for i in range(m):
        if basis[i] >= total:
            for j in range(total):
                if abs(tableau[i, j]) > _TOL:
                    pivot = tableau[i, j]
                    tableau[i] /= pivot
                    for k in range(m + 1):
                        if k != i and abs(tableau[k, j]) > 0:
                            tableau[k] -= tableau[k, j] * tableau[i]
                    basis[i] = j
                    break

    # phase 2: real objective on the feasible tableau, artificials frozen
    keep = [i for i in range(m) if basis[i] < total]
    redundant = [i for i in range(m) if basis[i] >= total]
    if redundant:
        # rows whose artificial could not leave are linearly dependent; drop
        sel = keep + [m]
        tableau = np.delete(tableau[sel], np.s_[total : total + m], axis=1)
        basis = basis[keep]
        m = len(keep)
    else:
        tableau = np.delete(tableau, np.s_[total : total + m], axis=1)

    cost_full = np.concatenate([c, np.zeros(tableau.shape[1] - 1 - n)])
    tableau[-1, :-1] = cost_full
    tableau[-1, -1] = 0.0
    for i in range(m):
        bj = basis[i]
        if abs(tableau[-1, bj]) > 0:
            tableau[-1] -= tableau[-1, bj] * tableau[i]
    status, it2 = _simplex(tableau, basis, max_iter)
    x = np.zeros(tableau.shape[1] - 1)
    for i in range(m):
        x[basis[i]] = tableau[i, -1]
    sol = x[:n]
    if status != "optimal":
        return LpResult(sol, float(c @ sol), status, it1 + it2)
    return LpResult(sol, float(c @ sol), "optimal", it1 + it2)


def projected_gradient(
    x0: np.ndarray,
    value: Callable[[np.ndarray], float],
    gradient: Callable[[np.ndarray], np.ndarray],
    project: Callable[[np.ndarray], np.ndarray],
    iterations: int = 20,
    step0: float = 1.0,
    backtracks: int = 10,
    value_many: Optional[Callable[[np.ndarray], np.ndarray]] = None,
) -> Tuple[np.ndarray, float]:
    """Fixed-budget projected gradient descent with backtracking.

    Each iteration tries step0 * 0.5^k until the projected move improves the
    objective; if no candidate improves, the iterate stands.  Entirely
    deterministic for deterministic value/gradient callables.

    value_many, if given, evaluates a (k, n) stack of candidates in one call;
    the backtracking line search then costs one batched evaluation per
    iteration instead of up to `backtracks` scalar ones.  The accepted
    candidate (first improving step) is identical either way.
    """
    x = project(np.asarray(x0, dtype=float))
    fx = value(x)
    if not np.isfinite(fx):
        return x, fx
    for _ in range(iterations):
        g = gradient(x)
        if not np.all(np.isfinite(g)):
            break
        norm = float(np.linalg.norm(g))
        if norm < 1e-12:
            break
        improved = False
        if value_many is not None:
            cands = np.stack(
                [
                    project(x - (step0 * (0.5**k) / norm) * g)
                    for k in range(backtracks)
                ]
            )
            fs = value_many(cands)
            for k in range(backtracks):
                if np.isfinite(fs[k]) and fs[k] < fx - 1e-15:
                    x, fx = cands[k], float(fs[k])
                    improved = True
                    break
        else:
            for k in range(backtracks):
                cand = project(x - (step0 * (0.5**k) / norm) * g)
                fc = value(cand)
                if np.isfinite(fc) and fc < fx - 1e-15:
                    x, fx = cand, fc
                    improved = True
                    break
        if not improved:
            break
    return x, fx
