"""Walkthrough: exact rectangular assignment and its enumeration oracle.

Run: python demos/demo_matching.py
"""

import numpy as np

from setmatch import brute_force_assignment, is_degenerate, pad_square, solve_rectangular
from setmatch.assignment import mapping_cost

# Three prediction slots compete for two targets.  The solver returns an
# injective column-to-row mapping: s[j] is the row matched to target j.
cost = np.array(
    [
        [5.0, 9.0],
        [1.0, 3.0],
        [2.0, 2.0],
    ]
)
sol = solve_rectangular(cost)
print("cost matrix:\n", cost)
print("mapping:", sol.mapping, "total cost:", sol.total_cost)
print("matched rows:", sol.matched, "unmatched rows:", sol.unmatched)

# The brute-force oracle enumerates all N! / (N - M)! injective mappings and
# must agree exactly, including the lexicographic tie-break.
oracle = brute_force_assignment(cost)
assert oracle.mapping == sol.mapping and oracle.total_cost == sol.total_cost
print("oracle agrees:", oracle.mapping)

# Ties are broken toward the lexicographically smallest mapping vector.
tied = np.array([[0.0, 1.0], [0.0, 1.0]])
print("\ntied matrix mapping:", solve_rectangular(tied).mapping)
print("degenerate?", is_degenerate(tied).degenerate, "alternate:", is_degenerate(tied).alternate)

# Rectangular problems can also be squared up with near-zero random padding;
# restricted to the real columns, the square solution reproduces the
# rectangular one whenever the optimum is not razor thin.
padded = pad_square(cost, epsilon=1e-9, seed=0)
square = solve_rectangular(padded)
print("\npadded to", padded.shape, "square mapping:", square.mapping)
restricted = square.mapping[:2]
print(
    "restricted mapping:", restricted,
    "cost drift:", abs(mapping_cost(cost, restricted) - sol.total_cost),
)
