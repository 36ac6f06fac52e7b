"""Minimum-cost bipartite assignment with a deterministic tie-break."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .errors import MatchingError


@dataclass
class MatchResult:
    pairs: list  # (prediction index, GT index), sorted by prediction
    unmatched: list = field(default_factory=list)  # prediction indices left to background
    cost: float = 0.0

    @property
    def pred_indices(self):
        return np.array([p for p, _ in self.pairs], dtype=np.int64)

    @property
    def gt_indices(self):
        return np.array([g for _, g in self.pairs], dtype=np.int64)

    def pred_to_gt(self, n_pred):
        out = np.full(n_pred, -1, dtype=np.int64)
        for p, g in self.pairs:
            out[p] = g
        return out


@njit(cache=True)
def _hungarian_square(a):
    """Shortest augmenting path Hungarian method on a square matrix.

    Returns (row_to_col, u, v) with feasible dual potentials:
    a[i, j] - u[i] - v[j] >= 0, equality on assigned pairs.
    """
    n = a.shape[0]
    inf = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.int64)
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, inf)
        used = np.zeros(n + 1, dtype=np.bool_)
        while True:
            used[j0] = True
            i0 = p[j0]
            delta = inf
            j1 = 0
            for j in range(1, n + 1):
                if not used[j]:
                    cur = a[i0 - 1, j - 1] - u[i0] - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    row_to_col = np.empty(n, dtype=np.int64)
    for j in range(1, n + 1):
        row_to_col[p[j] - 1] = j - 1
    return row_to_col, u[1:], v[1:]


def _lexicographic_fix(tight, row_to_col, n_rows, n_cols):
    """Among perfect matchings of the tight graph pick the lexicographically smallest
    list of real (row, col) pairs, keeping the current matching where no choice exists."""
    k = tight.shape[0]
    col_to_row = np.empty(k, dtype=np.int64)
    col_to_row[row_to_col] = np.arange(k)
    fixed = np.zeros(k, dtype=bool)

    def rank(c):
        return c if c < n_cols else n_cols  # dummy columns are interchangeable and last

    for i in range(n_rows):
        cur = row_to_col[i]
        cands = [j for j in np.nonzero(tight[i])[0] if j < n_cols and rank(j) < rank(cur)]
        for j in sorted(cands):
            r = col_to_row[j]
            if fixed[r]:
                continue
            # tentatively give j to i; r must reach the freed column ``cur``
            seen = set()
            path = _augment(r, cur, tight, col_to_row, fixed, i, j, seen)
            if path is not None:
                for row, col in path:
                    row_to_col[row] = col
                    col_to_row[col] = row
                row_to_col[i] = j
                col_to_row[j] = i
                break
        fixed[i] = True
    return row_to_col


def _augment(start, target, tight, col_to_row, fixed, banned_row, banned_col, seen):
    stack = [(start, iter(np.nonzero(tight[start])[0]), [])]
    seen.add(start)
    while stack:
        row, cols, path = stack[-1]
        advanced = False
        for c in cols:
            if c == banned_col:
                continue
            if c == target:
                return path + [(row, c)]
            mate = col_to_row[c]
            if mate == banned_row or fixed[mate] or mate in seen:
                continue
            seen.add(mate)
            stack.append((mate, iter(np.nonzero(tight[mate])[0]), path + [(row, c)]))
            advanced = True
            break
        if not advanced:
            stack.pop()
    return None


def hungarian(cost) -> MatchResult:
    """Optimal one-to-one assignment of size ``min(n_pred, n_gt)``.

    Rows are predictions, columns ground truths. Among optimal assignments
    the one with the lexicographically smallest (pred, GT) pair list wins.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise MatchingError(f"cost matrix must be 2-D, got shape {cost.shape}")
    n, m = cost.shape
    if not np.all(np.isfinite(cost)):
        raise MatchingError("cost matrix contains NaN or infinite entries")
    if n == 0 or m == 0:
        return MatchResult([], list(range(n)), 0.0)
    k = max(n, m)
    sq = np.zeros((k, k))
    sq[:n, :m] = cost
    row_to_col, u, v = _hungarian_square(sq)
    reduced = sq - u[:, None] - v[None, :]
    tol = 1e-9 * (1.0 + np.abs(cost).max())
    tight = reduced <= tol
    row_to_col = _lexicographic_fix(tight, row_to_col.copy(), n, m)
    pairs = [(i, int(row_to_col[i])) for i in range(n) if row_to_col[i] < m]
    matched = {p for p, _ in pairs}
    total = float(sum(cost[p, g] for p, g in pairs))
    return MatchResult(pairs, [i for i in range(n) if i not in matched], total)
