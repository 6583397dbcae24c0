"""Independent reference implementations used only to check the package.

These are deliberately naive (quadratic DP, memoized exhaustive recursion,
direct matrix arithmetic) and were written against the definitions, not
against the package code, then frozen.
"""

from __future__ import annotations

import functools

import numpy as np


def levenshtein_dp(a, b) -> int:
    """Plain full-matrix edit distance, unit costs."""
    m, n = len(a), len(b)
    d = [[0] * (n + 1) for _ in range(m + 1)]
    for i in range(m + 1):
        d[i][0] = i
    for j in range(n + 1):
        d[0][j] = j
    for i in range(1, m + 1):
        for j in range(1, n + 1):
            d[i][j] = min(
                d[i - 1][j] + 1,
                d[i][j - 1] + 1,
                d[i - 1][j - 1] + (a[i - 1] != b[j - 1]),
            )
    return d[m][n]


# Trees are nested tuples: (tag, text, (child, ...)).

def tree_size(t) -> int:
    return 1 + sum(tree_size(c) for c in t[2])


def _forest_size(f) -> int:
    return sum(tree_size(t) for t in f)


def _rename(a, b, text_cost) -> float:
    if a[0] != b[0]:
        return 1.0
    return text_cost(a[1], b[1])


def forest_edit_distance(f1, f2, text_cost) -> float:
    """Minimal edit script cost between ordered forests.

    Exhaustive recursion over the three edit choices at the rightmost
    roots (delete, insert, match), memoized.  Exact for any size; only
    practical for small trees, which is the point of an oracle.
    """

    @functools.lru_cache(maxsize=None)
    def go(g1, g2) -> float:
        if not g1 and not g2:
            return 0.0
        if not g1:
            return float(_forest_size(g2))
        if not g2:
            return float(_forest_size(g1))
        t1, t2 = g1[-1], g2[-1]
        return min(
            1 + go(g1[:-1] + t1[2], g2),
            1 + go(g1, g2[:-1] + t2[2]),
            _rename(t1, t2, text_cost) + go(t1[2], t2[2])
            + go(g1[:-1], g2[:-1]),
        )

    return go(tuple(f1), tuple(f2))


def tree_edit_distance_oracle(t1, t2, text_cost) -> float:
    return forest_edit_distance((t1,), (t2,), text_cost)


def normalized_text_cost(a: str, b: str) -> float:
    if not a and not b:
        return 0.0
    return levenshtein_dp(a, b) / max(len(a), len(b))


def project_points(matrix, points) -> np.ndarray:
    """Apply a 3x3 homography to (x, y) points by direct arithmetic."""
    h = np.asarray(matrix, dtype=np.float64)
    out = []
    for x, y in points:
        v = h @ np.array([x, y, 1.0])
        out.append((v[0] / v[2], v[1] / v[2]))
    return np.array(out)
