"""Naive reference implementations used as test oracles.

Each one follows the textbook definition with explicit loops and shares no
code with the package beyond the fitted GPS models.
"""

import math

import numpy as np

from medmatch.gps import ClusterGps, design_matrix, gps_density


def naive_minmax(values):
    lo, hi = min(values), max(values)
    if hi == lo:
        return [0.0 for _ in values]
    return [(v - lo) / (hi - lo) for v in values]


def _unit_gps(gps, data):
    """Per unit: a memoised function w -> GPS density via single-row density calls."""
    cache = {}

    def density(j, w):
        if (j, w) not in cache:
            model = gps.models[data.cluster_id[j]] if isinstance(gps, ClusterGps) else gps
            feats = design_matrix(data, model.feature_spec, model.cluster_levels)[j]
            cache[(j, w)] = gps_density(model, w, feats)
        return cache[(j, w)]

    return [lambda w, j=j: density(j, w) for j in range(len(data))]


def brute_force_matches(data, gps, method, delta, weight, metric="l1", caliper="half"):
    """Exhaustive minimisation of the matching target over all (j, l, j') triples.

    Returns {(j, l): j'} for matched cells and the number of unmatched cells.
    """
    w = [float(x) for x in data.exposure]
    lo, hi = min(w), max(w)
    n_levels = max(1, math.ceil((hi - lo) / delta - 1e-9)) if delta < hi - lo else 1
    levels = [lo + (l + 0.5) * delta for l in range(n_levels)]
    radius = delta / 2 if caliper == "half" else delta
    dens = _unit_gps(gps, data)
    u_star = naive_minmax([float(x) for x in data.u])
    ranks = list(data.id_rank)
    by_id = sorted(range(len(w)), key=lambda j: ranks[j])

    def dist(a, b):
        return abs(a - b) if metric == "l1" else (a - b) ** 2

    matches, unmatched = {}, 0
    for l, wl in enumerate(levels):
        for j in range(len(w)):
            if method == "within":
                pool = [k for k in by_id if data.cluster_id[k] == data.cluster_id[j]]
            else:
                pool = by_id
            cands = [k for k in pool if abs(w[k] - wl) <= radius]
            if not cands:
                unmatched += 1
                continue
            targets_e = [dens[t](wl) for t in pool]
            obs_e = [dens[k](w[k]) for k in pool]
            e_lo = min(targets_e + obs_e)
            e_hi = max(targets_e + obs_e)

            def norm(v):
                return 0.0 if e_hi == e_lo else (v - e_lo) / (e_hi - e_lo)

            def wnorm(v):
                return 0.0 if hi == lo else (v - lo) / (hi - lo)

            best, arg = math.inf, None
            for k in cands:
                dg = dist(norm(dens[j](wl)), norm(dens[k](w[k])))
                if method == "medmatch":
                    da = dist(u_star[j], u_star[k])
                else:
                    da = dist(wnorm(wl), wnorm(w[k]))
                cost = weight * dg + (1 - weight) * da
                if cost < best:
                    best, arg = cost, k
            matches[(j, l)] = arg
    return matches, unmatched


def naive_pearson_abs(x, y):
    n = len(x)
    mx = sum(x) / n
    my = sum(y) / n
    sxy = sum((a - mx) * (b - my) for a, b in zip(x, y))
    sxx = sum((a - mx) ** 2 for a in x)
    syy = sum((b - my) ** 2 for b in y)
    if sxx == 0 or syy == 0:
        return 0.0
    return abs(sxy) / math.sqrt(sxx * syy)


def naive_ks(a, b):
    """sup over all pooled points of |F_a(t) - F_b(t)| by direct counting."""
    best = 0.0
    for t in list(a) + list(b):
        fa = sum(1 for v in a if v <= t) / len(a)
        fb = sum(1 for v in b if v <= t) / len(b)
        best = max(best, abs(fa - fb))
    return best


def naive_ess(counts):
    s = sum(counts)
    s2 = sum(c * c for c in counts)
    return s * s / s2


def naive_local_linear(x, y, t, h):
    """Weighted least squares of y on (1, x - t) with Gaussian weights, solved directly."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    k = np.exp(-0.5 * ((x - t) / h) ** 2)
    design = np.column_stack([np.ones_like(x), x - t])
    a = design.T @ (k[:, None] * design)
    b = design.T @ (k * y)
    return float(np.linalg.solve(a, b)[0])


def naive_loocv(x, y, h):
    """Mean squared error of predicting each row from a fit without that row."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    errs = []
    for i in range(len(x)):
        keep = np.arange(len(x)) != i
        errs.append((y[i] - naive_local_linear(x[keep], y[keep], x[i], h)) ** 2)
    return sum(errs) / len(errs)
