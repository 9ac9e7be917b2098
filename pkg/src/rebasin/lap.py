"""Exact linear assignment via the shortest-augmenting-path method, O(n^3),
with deterministic tie-breaking.

Among all optimal assignments the lexicographically smallest permutation is
returned, found by restricting to tight edges of the optimal dual potentials
and extracting the lex-minimal perfect matching.
"""
import sys
from dataclasses import dataclass

import numpy as np


@dataclass
class Assignment:
    perm: np.ndarray        # perm[i] = column assigned to row i
    objective: float
    sense: str


def _shortest_path_solve(cost):
    """Returns (col_to_row, u, v) for the minimize sense."""
    n = cost.shape[0]
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.full(n + 1, -1, dtype=np.int64)   # p[j] = row matched to column j
    way = np.full(n + 1, -1, dtype=np.int64)

    for i in range(n):
        p[n] = i
        j0 = n
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            cur = cost[i0, :n] - u[i0] - v[:n]
            free = ~used[:n]
            better = free & (cur < minv[:n])
            minv[:n] = np.where(better, cur, minv[:n])
            way[:n][better] = j0
            cand = np.where(free, minv[:n], np.inf)
            j1 = int(np.argmin(cand))
            delta = cand[j1]
            used_idx = np.flatnonzero(used)
            u[p[used_idx]] += delta
            v[used_idx] -= delta
            minv[~used] -= delta
            j0 = j1
            if p[j0] == -1:
                break
        while j0 != n:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    return p[:n], u[:n], v[:n]


def _lex_min_matching(tight, row_to_col):
    """Lexicographically smallest perfect matching inside a bipartite graph
    that is known to contain one (row_to_col)."""
    n = len(row_to_col)
    match_row = row_to_col.copy()
    match_col = np.full(n, -1, dtype=np.int64)
    match_col[match_row] = np.arange(n)
    locked = np.zeros(n, dtype=bool)
    adj = [np.flatnonzero(tight[i]) for i in range(n)]

    if n > 900:
        sys.setrecursionlimit(max(sys.getrecursionlimit(), 4 * n))

    def augment(r, visited):
        for c in adj[r]:
            if locked[c] or visited[c]:
                continue
            visited[c] = True
            if match_col[c] == -1 or augment(match_col[c], visited):
                match_row[r] = c
                match_col[c] = r
                return True
        return False

    for i in range(n):
        cur = match_row[i]
        for c in adj[i]:
            if locked[c]:
                continue
            if c >= cur:
                break  # current assignment is already the best available
            # tentatively steal column c; its owner must rematch elsewhere
            owner = match_col[c]
            match_row[i] = c
            match_col[c] = i
            match_col[cur] = -1
            match_row[owner] = -1
            visited = np.zeros(n, dtype=bool)
            visited[c] = True
            if augment(owner, visited):
                break
            # roll back
            match_row[i] = cur
            match_col[cur] = i
            match_row[owner] = c
            match_col[c] = owner
        locked[match_row[i]] = True
    return match_row


def solve_lap(cost, sense="minimize"):
    """Optimal assignment of rows to columns of a square cost matrix."""
    if sense not in ("minimize", "maximize"):
        raise ValueError(f"sense must be minimize or maximize, got {sense!r}")
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1] or cost.shape[0] == 0:
        raise ValueError(f"cost must be a nonempty square matrix, got {cost.shape}")
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix contains non-finite entries")

    work = cost if sense == "minimize" else -cost
    col_to_row, u, v = _shortest_path_solve(work)
    row_to_col = np.empty_like(col_to_row)
    row_to_col[col_to_row] = np.arange(len(col_to_row))

    tol = 1e-9 * max(1.0, float(np.abs(work).max()))
    tight = (work - u[:, None] - v[None, :]) <= tol
    perm = _lex_min_matching(tight, row_to_col)

    objective = float(cost[np.arange(len(perm)), perm].sum())
    return Assignment(perm=perm, objective=objective, sense=sense)
