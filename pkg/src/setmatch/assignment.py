"""Exact rectangular linear assignment with deterministic tie-breaking.

Matrices here are plain float64 arrays with N rows (prediction slots) and
M <= N columns (targets); a solution is an injective column-to-row mapping
``s`` with ``s[j]`` the row matched to column j.  Everything in this module
operates on detached numeric values only; gradients never flow through the
solver itself.

``solve_rectangular`` wraps scipy's shortest-augmenting-path core and then
canonicalises ties so the returned mapping is the lexicographically smallest
optimal one.  ``brute_force_assignment`` is the independent enumeration
oracle with the same tie-break.
"""

from __future__ import annotations

import itertools
import math
from typing import NamedTuple

import numpy as np
from scipy.optimize import linear_sum_assignment

__all__ = [
    "AssignmentSolution",
    "DegeneracyResult",
    "ASSIGNMENT_CONSTRAINTS",
    "solve_rectangular",
    "brute_force_assignment",
    "pad_square",
    "is_degenerate",
    "mapping_cost",
    "read_cost_matrix",
    "parse_cost_matrix",
    "format_solution",
]

# The matching polytope, described rather than materialised: stacking the
# cost matrix column by column into a vector c, a feasible 0/1 selector u
# must pick exactly one row per column and at most one column per row.  The
# optimal selector is recoverable from AssignmentSolution.mapping, so no
# explicit constraint matrices are ever built.
ASSIGNMENT_CONSTRAINTS = (
    "minimise c . u over 0/1 selectors u of cost-matrix entries, subject to: "
    "each column has exactly one selected entry; each row has at most one "
    "selected entry"
)

_ENUMERATION_LIMIT = 9


class AssignmentSolution(NamedTuple):
    """Injective matching of all M columns to distinct rows."""

    mapping: tuple[int, ...]  # mapping[j] = row assigned to column j
    total_cost: float
    matched: tuple[int, ...]  # rows used by the mapping, ascending
    unmatched: tuple[int, ...]  # remaining rows, ascending


class DegeneracyResult(NamedTuple):
    degenerate: bool
    alternate: tuple[int, ...] | None  # a second mapping within tolerance, if any


def _as_cost_matrix(cost) -> np.ndarray:
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2:
        raise ValueError("cost matrix must be two-dimensional")
    n, m = c.shape
    if m > n:
        raise ValueError(f"more columns than rows ({m} > {n}): every target needs its own row")
    if not np.all(np.isfinite(c)):
        raise ValueError("cost matrix entries must be finite")
    return c


def mapping_cost(cost, mapping) -> float:
    """Total cost of a mapping, recomputed as an exactly-rounded sum in column order."""
    c = np.asarray(cost, dtype=np.float64)
    return math.fsum(float(c[r, j]) for j, r in enumerate(mapping))


def _solution(cost: np.ndarray, mapping) -> AssignmentSolution:
    n = cost.shape[0]
    mapping = tuple(int(r) for r in mapping)
    matched = tuple(sorted(mapping))
    unmatched = tuple(r for r in range(n) if r not in set(mapping))
    return AssignmentSolution(mapping, mapping_cost(cost, mapping), matched, unmatched)


def _core_solve(cost: np.ndarray) -> list[int]:
    """Optimal mapping from scipy, without the lexicographic guarantee."""
    rows, cols = linear_sum_assignment(cost)
    s = [0] * cost.shape[1]
    for r, j in zip(rows, cols):
        s[j] = int(r)
    return s


def solve_rectangular(cost) -> AssignmentSolution:
    """Minimum-cost injective mapping of every column to a distinct row.

    Ties are broken deterministically: among all optimal mappings the
    lexicographically smallest vector ``s`` is returned.  The canonical form
    is obtained by fixing columns left to right at the smallest row that
    still admits an optimal completion; candidate totals are compared with
    exactly-rounded sums so genuinely tied mappings compare equal.
    """
    c = _as_cost_matrix(cost)
    n, m = c.shape
    if m == 0:
        return AssignmentSolution((), 0.0, (), tuple(range(n)))
    cur = _core_solve(c)
    total = mapping_cost(c, cur)
    used: set[int] = set()
    for j in range(m):
        for r in range(n):
            if r == cur[j]:
                break
            if r in used:
                continue
            rest_rows = [q for q in range(n) if q not in used and q != r]
            if j + 1 < m:
                sub = c[np.ix_(rest_rows, range(j + 1, m))]
                sub_s = _core_solve(sub)
                tail = [rest_rows[q] for q in sub_s]
            else:
                tail = []
            cand = cur[:j] + [r] + tail
            cand_total = mapping_cost(c, cand)
            if cand_total <= total:
                cur = cand
                total = cand_total
                break
        used.add(cur[j])
    return _solution(c, cur)


def brute_force_assignment(cost) -> AssignmentSolution:
    """Exhaustive minimum over all injective mappings; the oracle for the solver.

    Enumerates mappings in lexicographic order and keeps the strictly best
    one, which yields the same tie-break as :func:`solve_rectangular`.
    """
    c = _as_cost_matrix(cost)
    n, m = c.shape
    if n > _ENUMERATION_LIMIT:
        raise ValueError(f"enumeration limited to {_ENUMERATION_LIMIT} rows, got {n}")
    if m == 0:
        return AssignmentSolution((), 0.0, (), tuple(range(n)))
    best = None
    best_cost = math.inf
    for perm in itertools.permutations(range(n), m):
        t = mapping_cost(c, perm)
        if t < best_cost:
            best_cost = t
            best = perm
    assert best is not None
    return _solution(c, best)


def pad_square(cost, epsilon: float, seed: int) -> np.ndarray:
    """Append N-M columns of near-zero random values to make the matrix square.

    The original columns are preserved bit-exactly; padding entries are drawn
    i.i.d. uniform from [0, epsilon) with a generator seeded by ``seed``.
    Solving the padded square problem and restricting to the real columns
    reproduces the rectangular solution whenever the optimum's cost gap is
    large relative to ``epsilon``.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    c = _as_cost_matrix(cost)
    n, m = c.shape
    if n == m:
        return c.copy()
    rng = np.random.default_rng(seed)
    pad = rng.uniform(0.0, epsilon, size=(n, n - m))
    return np.concatenate([c, pad], axis=1)


def is_degenerate(cost, tolerance: float = 1e-9, seed: int = 0) -> DegeneracyResult:
    """Whether a second mapping exists within ``tolerance`` of the optimal cost.

    Up to the enumeration limit this is exact.  For larger matrices it falls
    back to a heuristic: re-solve under 16 random per-row constant shifts of
    magnitude tolerance/10 and report degenerate if any mapping changes.  The
    heuristic can miss ties between mappings that use the same set of rows,
    since a per-row shift moves their totals identically.
    """
    c = _as_cost_matrix(cost)
    n, m = c.shape
    if m == 0:
        return DegeneracyResult(False, None)
    if n <= _ENUMERATION_LIMIT:
        best = brute_force_assignment(c)
        limit = best.total_cost + tolerance
        for perm in itertools.permutations(range(n), m):
            if perm == best.mapping:
                continue
            if mapping_cost(c, perm) <= limit:
                return DegeneracyResult(True, perm)
        return DegeneracyResult(False, None)
    base = solve_rectangular(c).mapping
    rng = np.random.default_rng(seed)
    scale = tolerance / 10.0
    for _ in range(16):
        shift = rng.uniform(-scale, scale, size=(n, 1))
        trial = tuple(_core_solve(c + shift))
        if trial != base:
            return DegeneracyResult(True, trial)
    return DegeneracyResult(False, None)


# ---------------------------------------------------------------------------
# cost-matrix text format
# ---------------------------------------------------------------------------


def parse_cost_matrix(text: str) -> np.ndarray:
    """Parse the plain-text cost format.

    First meaningful line is ``N M``, followed by N lines of M decimal
    numbers.  Lines starting with ``#`` are comments; blank lines are
    ignored.  Errors carry the 1-based line number.
    """
    rows: list[list[float]] = []
    header: tuple[int, int] | None = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if header is None:
            if len(parts) != 2:
                raise ValueError(f"line {lineno}: expected header 'N M'")
            try:
                n, m = int(parts[0]), int(parts[1])
            except ValueError:
                raise ValueError(f"line {lineno}: expected header 'N M'") from None
            if n < 0 or m < 0:
                raise ValueError(f"line {lineno}: dimensions must be non-negative")
            header = (n, m)
            continue
        n, m = header
        if len(rows) >= n:
            raise ValueError(f"line {lineno}: expected only {n} data rows")
        if len(parts) != m:
            raise ValueError(f"line {lineno}: expected {m} values, got {len(parts)}")
        try:
            rows.append([float(p) for p in parts])
        except ValueError:
            raise ValueError(f"line {lineno}: malformed number") from None
    if header is None:
        raise ValueError("line 1: empty input, expected header 'N M'")
    n, m = header
    if m == 0:
        return _as_cost_matrix(np.zeros((n, 0)))
    if len(rows) != n:
        raise ValueError(f"expected {n} data rows, got {len(rows)}")
    c = np.array(rows, dtype=np.float64).reshape(n, m)
    return _as_cost_matrix(c)


def read_cost_matrix(path) -> np.ndarray:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_cost_matrix(fh.read())


def format_solution(solution: AssignmentSolution) -> str:
    """Render a solution as ``cost <value>`` plus one ``j s(j)`` line per column."""
    lines = [f"cost {solution.total_cost:.12g}"]
    lines.extend(f"{j} {r}" for j, r in enumerate(solution.mapping))
    return "\n".join(lines)
