"""Regenerates crates/core/fixtures/uct_reference.csv.

Each row holds UCT inputs (total reward Q, visits N, parent visits N_p,
exploration c) and Q/N + c*sqrt(ln(N_p)/N) evaluated with mpmath at 50
significant digits. Inputs are converted from their exact binary64 values.
"""

import csv
import random
import sys
from pathlib import Path

import mpmath

mpmath.mp.dps = 50

OUT = Path(__file__).resolve().parent.parent / "crates/core/fixtures/uct_reference.csv"


def uct(q, n, n_parent, c):
    q, c = mpmath.mpf(q), mpmath.mpf(c)
    n, n_parent = mpmath.mpf(n), mpmath.mpf(n_parent)
    return q / n + c * mpmath.sqrt(mpmath.log(n_parent) / n)


def cases(rng):
    fixed = [
        (1.0, 1, 1, 0.0),
        (0.0, 1, 1, 3.0),
        (1.5, 3, 10, 1.41421),
        (0.5, 1, 2, 2.0 ** 0.5),
        (7.25, 10, 10, 2.0 ** 0.5),
    ]
    yield from fixed
    for _ in range(995):
        n = rng.choice([1, 2, 3, rng.randint(1, 50), rng.randint(1, 10**6)])
        n_parent = n + rng.choice([0, 1, rng.randint(0, 100), rng.randint(0, 10**9)])
        q = rng.random() * n
        c = rng.choice([0.0, 2.0 ** 0.5, rng.uniform(0.0, 5.0)])
        yield q, n, n_parent, c


def main():
    rng = random.Random(20240601)
    with OUT.open("w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["total_reward", "visits", "parent_visits", "exploration", "expected"])
        for q, n, n_parent, c in cases(rng):
            w.writerow([repr(float(q)), n, n_parent, repr(float(c)), mpmath.nstr(uct(q, n, n_parent, c), 30)])
    print(f"wrote {OUT}", file=sys.stderr)


if __name__ == "__main__":
    main()
