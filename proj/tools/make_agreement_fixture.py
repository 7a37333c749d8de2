#!/usr/bin/env python3
"""Builds the synthetic two-judge score table used by the agreement fixture.

Solves for integer cell counts n[a][b] (a, b in 1..5) with
  sum n = 20000, mean a = 2.9, mean b = 3.5, population std of (a - b) = 1.31
exactly. 20000 is the smallest count that works: sum (a-b)^2 = 2.0761 n must be
an integer and has the parity of sum a + sum b. Both judges get variance 1.619
so the correlation comes out near 0.47. Deterministic (integer program, no randomness).
Prints the {a, b, count} list as JSON.
"""

import json
import sys

import numpy as np
from scipy.optimize import Bounds, LinearConstraint, milp

N = 20000
SUM_A = 58000
SUM_B = 70000
SUM_A2 = 200580  # N * (1.619 + 2.9^2)
SUM_B2 = 277380  # N * (1.619 + 3.5^2)
SUM_D2 = 41522  # N * (1.31^2 + 0.6^2)


def main():
    cells = [(a, b) for a in range(1, 6) for b in range(1, 6)]
    rows = [
        [1 for _ in cells],
        [a for a, _ in cells],
        [b for _, b in cells],
        [a * a for a, _ in cells],
        [b * b for _, b in cells],
        [(a - b) ** 2 for a, b in cells],
    ]
    rhs = [N, SUM_A, SUM_B, SUM_A2, SUM_B2, SUM_D2]
    # spread mass: prefer solutions that keep every cell populated
    cost = np.array([1.0 / (1 + abs(a - b)) for a, b in cells])
    res = milp(
        c=-cost,
        constraints=LinearConstraint(np.array(rows, dtype=float), rhs, rhs),
        integrality=np.ones(len(cells)),
        bounds=Bounds(np.full(len(cells), 20.0), np.full(len(cells), N)),
    )
    if res.x is None:
        sys.exit("no exact solution: " + res.message)
    counts = [int(round(v)) for v in res.x]
    check = [sum(r[i] * counts[i] for i in range(len(cells))) for r in rows]
    if check != rhs:
        sys.exit("rounding broke the constraints")
    out = [{"a": a, "b": b, "count": c} for (a, b), c in zip(cells, counts) if c]
    json.dump(out, sys.stdout)
    sys.stdout.write("\n")


if __name__ == "__main__":
    main()
