"""Independent reference implementations used by the tests."""

from __future__ import annotations

import math

import numpy as np
from scipy.optimize import linprog


def transport_emd(a, b) -> float:
    """Earth mover's distance as a transportation LP between two empirical distributions."""
    na, nb = len(a), len(b)
    cost = np.array([[abs(x - y) for y in b] for x in a], dtype=float).ravel()
    a_eq = []
    b_eq = []
    for i in range(na):
        row = np.zeros(na * nb)
        row[i * nb : (i + 1) * nb] = 1
        a_eq.append(row)
        b_eq.append(1 / na)
    for j in range(nb):
        row = np.zeros(na * nb)
        row[j::nb] = 1
        a_eq.append(row)
        b_eq.append(1 / nb)
    res = linprog(cost, A_eq=np.array(a_eq), b_eq=np.array(b_eq), bounds=(0, None), method="highs")
    assert res.success, res.message
    return float(res.fun)


def transport_emd_normalized(a, b) -> float:
    pooled = list(a) + list(b)
    span = max(pooled) - min(pooled)
    return 0.0 if span == 0 else transport_emd(a, b) / span


def kl_direct(p, q) -> float:
    return sum(pi * math.log(pi / qi) for pi, qi in zip(p, q) if pi > 0)
