"""Independent reference implementations used by the unit and acceptance tests."""

import math

import numpy as np


def fid_eig(mu1, s1, mu2, s2):
    """Frechet distance via the (non-symmetric) eigenvalues of s1 @ s2.

    The eigenvalues of a product of two PSD matrices are real and
    non-negative, so tr((s1 s2)^(1/2)) is the sum of their square roots.
    """
    vals = np.linalg.eigvals(np.asarray(s1) @ np.asarray(s2))
    tr_sqrt = np.sqrt(np.clip(vals.real, 0, None)).sum()
    d = np.asarray(mu1) - np.asarray(mu2)
    return float(d @ d + np.trace(s1) + np.trace(s2) - 2 * tr_sqrt)


def prd_sum(p, q, lambdas):
    """alpha and beta by explicit summation over bins for each slope."""
    alpha, beta = [], []
    for lam in lambdas:
        a = b = 0.0
        for pi, qi in zip(p, q):
            a += min(lam * pi, qi)
            b += min(pi, qi / lam)
        alpha.append(a)
        beta.append(b)
    return np.array(alpha), np.array(beta)


def brute_nearest(z, points):
    """Exhaustive double loop; strict < keeps the lowest index on ties."""
    out = []
    for q in z:
        best, best_d = -1, math.inf
        for m, p in enumerate(points):
            d = sum((float(a) - float(b)) ** 2 for a, b in zip(q, p))
            if d < best_d:
                best, best_d = m, d
        out.append(best)
    return out


def random_spd(rng, d, scale=1.0):
    a = rng.normal(size=(d, d)) * scale
    return a @ a.T + 1e-3 * np.eye(d)
