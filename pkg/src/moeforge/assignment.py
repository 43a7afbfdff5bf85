"""Exact square linear assignment with a deterministic tie rule.

solve_square minimizes sum(cost[j, p[j]]) over permutations p and, among
all optimal permutations, returns the lexicographically smallest. The
O(n^3) augmenting path solve runs in a compiled kernel when the extension
built, or in an algorithm-identical numpy fallback otherwise; both
backends produce the same permutation and duals bit for bit. The
lexicographic guarantee comes from a refinement pass over the tight-edge
graph certified by the duals: every optimal assignment lives on edges
with zero reduced cost, so feasibility of "row j takes column k" reduces
to reachability along alternating paths.

brute_force_min is the independent oracle: it enumerates permutations in
lexicographic order and takes the first minimum, which encodes the same
tie rule by construction.
"""

from __future__ import annotations

import itertools

import numpy as np

from . import _lapjv_py

try:
    from . import _lapjv as _compiled
except ImportError:  # extension not built; numpy fallback serves
    _compiled = None

HAVE_COMPILED = _compiled is not None

BRUTE_FORCE_MAX_N = 8

_perm_tables: dict[int, np.ndarray] = {}


def active_backend() -> str:
    return "compiled" if HAVE_COMPILED else "python"


def _validated(cost: np.ndarray) -> np.ndarray:
    cost = np.asarray(cost)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise ValueError(f"cost matrix must be square, got shape {cost.shape}")
    if cost.shape[0] == 0:
        raise ValueError("cost matrix is empty")
    if not np.isfinite(cost).all():
        raise ValueError("cost matrix contains non-finite entries")
    return np.ascontiguousarray(cost, dtype=np.float64)


def _solve_raw(cost: np.ndarray, backend: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if backend == "auto":
        backend = active_backend()
    if backend == "python":
        return _lapjv_py.solve(cost)
    if backend == "compiled":
        if _compiled is None:
            raise RuntimeError("compiled assignment kernel is not built")
        n = cost.shape[0]
        u = np.zeros(n)
        v = np.zeros(n)
        path = np.full(n, -1, dtype=np.intp)
        col4row = np.full(n, -1, dtype=np.intp)
        row4col = np.full(n, -1, dtype=np.intp)
        spc = np.empty(n)
        remaining = np.empty(n, dtype=np.intp)
        sr = np.zeros(n, dtype=np.uint8)
        sc = np.zeros(n, dtype=np.uint8)
        rc = _compiled.solve(cost, u, v, path, col4row, row4col, spc, remaining, sr, sc)
        if rc != 0:
            raise ValueError("cost matrix is infeasible")
        return col4row, u, v
    raise ValueError(f"unknown backend {backend!r}")


def _lex_refine(cost: np.ndarray, col4row: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Rewrite an optimal assignment into the lexicographically smallest one.

    Greedy per row: try tight columns in ascending order and accept the
    first one that still extends to a perfect matching of the remaining
    tight graph, rotating the current matching along the certifying
    alternating path. Rows with a single tight column short-circuit, so
    the generic unique-optimum case costs one mask reduction.
    """
    n = cost.shape[0]
    reduced = cost - u[:, None] - v[None, :]
    tol = 1e-9 * max(1.0, float(np.abs(cost).max()))
    tight_mask = reduced <= tol
    tight_mask[np.arange(n), col4row] = True
    if np.all(tight_mask.sum(axis=1) == 1):
        return col4row.astype(np.int64)

    tight = [np.nonzero(tight_mask[j])[0] for j in range(n)]
    match = col4row.astype(np.int64).copy()
    row_of = np.empty(n, dtype=np.int64)
    row_of[match] = np.arange(n)
    alive = np.ones(n, dtype=bool)

    for j in range(n):
        for k in tight[j]:
            if not alive[k]:
                continue
            if k == match[j]:
                break
            # alternating path search: arcs c -> c2 where row_of[c] is tight on c2
            target = match[j]
            parent = {int(k): -1}
            stack = [int(k)]
            found = False
            while stack:
                c = stack.pop()
                if c == target:
                    found = True
                    break
                for c2 in tight[row_of[c]]:
                    c2 = int(c2)
                    if alive[c2] and c2 not in parent:
                        parent[c2] = c
                        stack.append(c2)
            if not found:
                continue
            c = target
            while parent[c] != -1:
                prev = parent[c]
                rr = row_of[prev]
                match[rr] = c
                row_of[c] = rr
                c = prev
            match[j] = k
            row_of[k] = j
            break
        alive[match[j]] = False
    return match


def solve_square(cost: np.ndarray, backend: str = "auto") -> tuple[np.ndarray, float]:
    """Optimal assignment p (lexicographically smallest) and its total cost."""
    c = _validated(cost)
    col4row, u, v = _solve_raw(c, backend)
    p = _lex_refine(c, col4row, u, v)
    total = float(c[np.arange(c.shape[0]), p].sum())
    return p, total


def _perm_table(n: int) -> np.ndarray:
    if n not in _perm_tables:
        _perm_tables[n] = np.array(list(itertools.permutations(range(n))), dtype=np.int64)
    return _perm_tables[n]


def brute_force_min(cost: np.ndarray) -> tuple[np.ndarray, float]:
    """Exhaustive oracle for small n; first minimum in lexicographic order."""
    c = _validated(cost)
    n = c.shape[0]
    if n > BRUTE_FORCE_MAX_N:
        raise ValueError(f"brute force capped at n = {BRUTE_FORCE_MAX_N}, got {n}")
    perms = _perm_table(n)
    totals = c[np.arange(n), perms].sum(axis=1)
    best = int(np.argmin(totals))
    return perms[best].copy(), float(totals[best])
