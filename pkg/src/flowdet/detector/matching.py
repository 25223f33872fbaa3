"""Minimum-cost bipartite assignment between queries and targets."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class MatchResult:
    pairs: list[tuple[int, int]] = field(default_factory=list)  # (query, target), sorted by query
    total_cost: float = 0.0

    @property
    def queries(self) -> np.ndarray:
        return np.array([p[0] for p in self.pairs], dtype=np.int64)

    @property
    def targets(self) -> np.ndarray:
        return np.array([p[1] for p in self.pairs], dtype=np.int64)


def _assign(cost: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Shortest augmenting path with potentials for an n x m matrix, n <= m.

    Returns the column assigned to each row and the final row/column
    potentials, which satisfy cost - u - v >= 0 with equality on the
    assignment.
    """
    n, m = cost.shape
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    owner = np.zeros(m + 1, dtype=np.int64)  # owner[j] = 1-based row holding column j, 0 = free
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        owner[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            cur = cost[i0 - 1] - u[i0] - v[1:]
            free = ~used[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            u[owner[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1
    rows = np.full(n, -1, dtype=np.int64)
    for j in range(1, m + 1):
        if owner[j]:
            rows[owner[j] - 1] = j - 1
    return rows, u[1:], v[1:]


def _lexicographic(tight: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Lexicographically smallest perfect matching inside the tight-edge graph.

    Every perfect matching of ``tight`` is a minimum-cost assignment, so this
    only chooses among optima. Row by row, the smallest column that still
    admits a completion is taken; completions are found by re-routing the
    rows below along an alternating path.
    """
    n = len(cols)
    cols = cols.copy()
    owner = np.empty(n, dtype=np.int64)
    owner[cols] = np.arange(n)
    adj = [np.flatnonzero(tight[i]) for i in range(n)]

    def reroute(row, goal, banned, first, seen):
        for c in adj[row]:
            if c == banned or seen[c]:
                continue
            seen[c] = True
            if c == goal:
                return [(row, c)]
            nxt = owner[c]
            if nxt > first:
                sub = reroute(nxt, goal, banned, first, seen)
                if sub:
                    return [(row, c)] + sub
        return None

    for i in range(n):
        for j in adj[i]:
            if j >= cols[i]:
                break
            r = owner[j]
            if r < i:
                continue
            path = reroute(r, cols[i], j, i, np.zeros(n, dtype=bool))
            if path:
                cols[i], owner[j] = j, i
                for row, c in path:
                    cols[row], owner[c] = c, row
                break
    return cols


def hungarian_match(cost) -> MatchResult:
    """Minimum total cost one-to-one assignment for a Q x T cost matrix.

    Rectangular inputs leave max(Q, T) - min(Q, T) rows or columns unmatched.
    Among equal-cost optima the pair list that is lexicographically smallest
    (lowest query first, then lowest target) wins.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError(f"cost must be 2-D, got shape {cost.shape}")
    q, t = cost.shape
    if q == 0 or t == 0:
        return MatchResult([], 0.0)
    if not np.isfinite(cost).all():
        raise ValueError("cost matrix contains non-finite entries")
    # Solve the thin orientation, then view it as a square problem padded
    # with zero-cost dummies. Columns never matched keep potential 0 and
    # matched ones only decrease, so zero dummy potentials stay feasible.
    n = max(q, t)
    if q <= t:
        cols, u, v = _assign(cost)
        row_pot, col_pot = np.concatenate([u, np.zeros(n - q)]), v
        cols = np.concatenate([cols, np.setdiff1d(np.arange(t), cols)])
    else:
        owner, u, v = _assign(cost.T)
        row_pot, col_pot = v, np.concatenate([u, np.zeros(n - t)])
        cols = np.full(n, -1, dtype=np.int64)
        cols[owner] = np.arange(t)
        cols[cols < 0] = np.arange(t, n)
    square = np.zeros((n, n))
    square[:q, :t] = cost
    tight = square - row_pot[:, None] - col_pot[None] <= 1e-9 * max(1.0, float(np.abs(cost).max()))
    if tight.sum() > n:  # several optima exist
        cols = _lexicographic(tight, cols)
    pairs = [(i, int(cols[i])) for i in range(q) if cols[i] < t]
    total = float(sum(cost[i, j] for i, j in pairs))
    return MatchResult(pairs, total)
