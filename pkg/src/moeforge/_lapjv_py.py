"""Pure numpy fallback for the assignment kernel.

Shortest augmenting path solve (Jonker-Volgenant style) with dual
variables, one Dijkstra sweep per row. The inner column scan is
vectorized but keeps the exact arithmetic order and tie handling of the
compiled kernel, so both backends return identical arrays.
"""

from __future__ import annotations

import numpy as np


def solve(cost: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return (col4row, u, v) for a square float64 cost matrix.

    col4row[i] is the column assigned to row i; u, v are optimal duals
    satisfying complementary slackness on the returned assignment.
    """
    n = cost.shape[0]
    u = np.zeros(n)
    v = np.zeros(n)
    path = np.full(n, -1, dtype=np.intp)
    col4row = np.full(n, -1, dtype=np.intp)
    row4col = np.full(n, -1, dtype=np.intp)
    spc = np.empty(n)
    remaining = np.empty(n, dtype=np.intp)

    for cur_row in range(n):
        spc[:] = np.inf
        # reversed fill makes a constant cost matrix resolve to the identity
        remaining[:] = np.arange(n - 1, -1, -1)
        num_remaining = n
        min_val = 0.0
        i = cur_row
        sink = -1
        sr_rows = []
        sc_cols = []
        while sink == -1:
            sr_rows.append(i)
            rem = remaining[:num_remaining]
            r = ((min_val + cost[i, rem]) - u[i]) - v[rem]
            better = r < spc[rem]
            upd = rem[better]
            path[upd] = i
            spc[upd] = r[better]
            vals = spc[rem]
            lowest = vals.min()
            if np.isinf(lowest):
                raise ValueError("cost matrix is infeasible")
            tied = np.nonzero(vals == lowest)[0]
            open_tied = tied[row4col[rem[tied]] == -1]
            # prefer an unassigned sink among ties, matching the scalar scan
            index = open_tied[-1] if open_tied.size else tied[0]
            min_val = lowest
            j = remaining[index]
            if row4col[j] == -1:
                sink = j
            else:
                i = row4col[j]
            sc_cols.append(j)
            num_remaining -= 1
            remaining[index] = remaining[num_remaining]

        u[cur_row] = u[cur_row] + min_val
        rows = np.array([x for x in sr_rows if x != cur_row], dtype=np.intp)
        if rows.size:
            u[rows] = u[rows] + (min_val - spc[col4row[rows]])
        cols = np.asarray(sc_cols, dtype=np.intp)
        v[cols] = v[cols] - (min_val - spc[cols])

        j = sink
        while True:
            i = path[j]
            row4col[j] = i
            col4row[i], j = j, col4row[i]
            if i == cur_row:
                break
    return col4row, u, v
