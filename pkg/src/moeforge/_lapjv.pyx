# cython: boundscheck=False, wraparound=False, initializedcheck=False, cdivision=True
"""Compiled assignment kernel: shortest augmenting path with duals.

Scalar twin of _lapjv_py.solve; the caller allocates every work array.
Returns 0 on success, -1 if the matrix is infeasible.
"""

from libc.math cimport INFINITY


def solve(double[:, ::1] cost,
          double[::1] u,
          double[::1] v,
          Py_ssize_t[::1] path,
          Py_ssize_t[::1] col4row,
          Py_ssize_t[::1] row4col,
          double[::1] spc,
          Py_ssize_t[::1] remaining,
          unsigned char[::1] sr,
          unsigned char[::1] sc):
    cdef Py_ssize_t n = cost.shape[0]
    cdef Py_ssize_t cur_row, i, j, it, index, num_remaining, sink, tmp
    cdef double min_val, lowest, r

    for cur_row in range(n):
        for it in range(n):
            sr[it] = 0
            sc[it] = 0
            spc[it] = INFINITY
            # reversed fill makes a constant cost matrix resolve to the identity
            remaining[it] = n - it - 1
        num_remaining = n
        min_val = 0.0
        i = cur_row
        sink = -1
        while sink == -1:
            sr[i] = 1
            index = -1
            lowest = INFINITY
            for it in range(num_remaining):
                j = remaining[it]
                r = ((min_val + cost[i, j]) - u[i]) - v[j]
                if r < spc[j]:
                    path[j] = i
                    spc[j] = r
                # prefer an unassigned sink among ties
                if spc[j] < lowest or (spc[j] == lowest and row4col[j] == -1):
                    lowest = spc[j]
                    index = it
            min_val = lowest
            if min_val == INFINITY:
                return -1
            j = remaining[index]
            if row4col[j] == -1:
                sink = j
            else:
                i = row4col[j]
            sc[j] = 1
            num_remaining -= 1
            remaining[index] = remaining[num_remaining]

        u[cur_row] = u[cur_row] + min_val
        for it in range(n):
            if sr[it] and it != cur_row:
                u[it] = u[it] + (min_val - spc[col4row[it]])
        for it in range(n):
            if sc[it]:
                v[it] = v[it] - (min_val - spc[it])

        j = sink
        while True:
            i = path[j]
            row4col[j] = i
            tmp = col4row[i]
            col4row[i] = j
            j = tmp
            if i == cur_row:
                break
    return 0
