"""K-best 2-D assignment (Murty's algorithm) on top of scipy's LAP solver.

Cost matrices are rectangular with rows = items that must all be assigned
and columns usable at most once.  Entries >= BIG_COST are treated as
forbidden; the matrix must stay feasible (every row needs one allowed
column), which callers guarantee by construction.
"""

from __future__ import annotations

import heapq
import itertools

import numpy as np
from scipy.optimize import linear_sum_assignment

BIG_COST = 1e9


def _solve(cost: np.ndarray) -> tuple[np.ndarray, float] | None:
    """Best assignment of every row to a distinct column, or None if the
    cheapest one still uses a forbidden entry."""
    rows, cols = linear_sum_assignment(cost)
    total = float(cost[rows, cols].sum())
    if np.any(cost[rows, cols] >= BIG_COST):
        return None
    assign = np.empty(cost.shape[0], dtype=np.int64)
    assign[rows] = cols
    return assign, total


def k_best_assignments(cost: np.ndarray, k: int,
                       max_cost_gap: float | None = None
                       ) -> tuple[list[np.ndarray], np.ndarray]:
    """Up to k cheapest assignments in nondecreasing cost order.

    `max_cost_gap` stops the enumeration once a solution costs more than
    best + gap; with hypothesis-weight pruning at threshold w this is
    lossless for gap = -log(w).

    Returns (assignments, costs); each assignment maps row index to the
    chosen column index.
    """
    if cost.ndim != 2:
        raise ValueError("cost matrix must be 2-D")
    n_rows = cost.shape[0]
    if n_rows == 0:
        return [np.zeros(0, dtype=np.int64)], np.zeros(1)
    if k < 1:
        raise ValueError("k must be >= 1")

    first = _solve(cost)
    if first is None:
        raise ValueError("assignment problem infeasible")

    solutions: list[np.ndarray] = []
    costs: list[float] = []
    counter = itertools.count()
    # queue entries: (cost, tiebreak, assignment, problem matrix)
    queue: list = [(first[1], next(counter), first[0], cost.copy())]

    while queue and len(solutions) < k:
        total, _, assign, problem = heapq.heappop(queue)
        if max_cost_gap is not None and costs and total > costs[0] + max_cost_gap:
            break
        solutions.append(assign)
        costs.append(total)

        # Murty partition: child q forbids assignment q and forces 0..q-1.
        forced = problem
        for q in range(n_rows):
            child = forced.copy()
            child[q, assign[q]] = BIG_COST
            sol = _solve(child)
            if sol is not None and sol[1] < BIG_COST:
                heapq.heappush(queue, (sol[1], next(counter), sol[0], child))
            if q < n_rows - 1:
                # force row q to its column for the remaining children
                forced = forced.copy()
                row_backup = forced[q, assign[q]]
                forced[q, :] = BIG_COST
                forced[:, assign[q]] = BIG_COST
                forced[q, assign[q]] = row_backup

    return solutions, np.array(costs)
