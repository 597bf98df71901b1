"""Independent numerical oracles used by the test suite.

Everything here recomputes expected values from first principles (quadrature,
Monte Carlo, band geometry) without touching the package's closed forms, so
the tests compare two genuinely separate routes to each number.
"""

from __future__ import annotations

import math

import numpy as np
from scipy import integrate


# --- log densities, written independently of the package ---

def gaussian_logpdf(sigma):
    c = math.log(sigma * math.sqrt(2.0 * math.pi))
    return lambda x: -np.square(x) / (2.0 * sigma**2) - c


def laplace_logpdf(b):
    c = math.log(2.0 * b)
    return lambda x: -np.abs(x) / b - c


def staircase_logpdf(delta, lam, nu):
    log_y = math.log1p(-math.exp(-lam)) - math.log(2.0 * delta * (nu + math.exp(-lam) * (1.0 - nu)))

    def logpdf(x):
        ax = np.abs(np.asarray(x, dtype=float))
        rho = np.floor(ax / delta)
        inner = (ax - rho * delta) < nu * delta
        return np.where(inner, -rho * lam, -(rho + 1.0) * lam) + log_y

    return logpdf


def staircase_knots(delta, nu, lo, hi):
    """Discontinuity locations of the shifted-pair staircase integrand.

    Edges of the band structure and its shift coincide up to 1 ulp, so the
    list is deduplicated with a width tolerance; zero-width slivers would
    otherwise poison the segmented quadrature.
    """
    n = int(math.ceil(max(abs(lo), abs(hi)) / delta)) + 2
    base = []
    for r in range(n):
        base.extend((r * delta, (r + nu) * delta))
    edges = np.array(base)
    all_edges = np.concatenate([edges, -edges, edges + delta, -edges + delta])
    all_edges = np.sort(all_edges[(all_edges > lo) & (all_edges < hi)])
    keep = np.concatenate([[True], np.diff(all_edges) > 1e-9 * delta])
    return all_edges[keep]


def renyi_divergence_quad(logpdf, delta, alpha, lo, hi, knots=()):
    """D_alpha(P || P(. - delta)) by segmented quadrature of the log integrand.

    The integrand is rescaled by its maximum (found on a dense scan) so the
    result is overflow-free for any parameter range.
    """
    def logf(x):
        return alpha * logpdf(x) + (1.0 - alpha) * logpdf(x - delta)

    scan = np.linspace(lo, hi, 40001)
    shift = float(np.max(logf(scan)))

    pts = np.unique(np.concatenate([[lo, hi, 0.0, delta], np.asarray(knots, dtype=float)]))
    pts = pts[(pts >= lo) & (pts <= hi)]
    total = 0.0
    for a, b in zip(pts[:-1], pts[1:]):
        if b - a < 1e-12 * (1.0 + abs(a)):
            continue
        val, _ = integrate.quad(lambda x: math.exp(float(logf(x)) - shift), a, b, limit=100)
        total += val
    return (shift + math.log(total)) / (alpha - 1.0)


def staircase_band_edges_and_cdf(density_fn, delta, nu, tail_mass=1e-12):
    """Piecewise-linear CDF knots of a symmetric staircase density.

    Evaluates the density only pointwise (at piece midpoints); exact because
    the density is constant on each piece.
    """
    edges = [0.0]
    masses = []
    r = 0
    half = 0.0
    while half < 0.5 - tail_mass and r < 100000:
        for lo_off, hi_off in ((r, r + nu), (r + nu, r + 1.0)):
            lo, hi = lo_off * delta, hi_off * delta
            mid = 0.5 * (lo + hi)
            masses.append(float(density_fn(mid)) * (hi - lo))
            edges.append(hi)
            half += masses[-1]
        r += 1
    pos_edges = np.array(edges)
    pos_cdf = 0.5 + np.concatenate([[0.0], np.cumsum(masses)])
    x = np.concatenate([-pos_edges[::-1], pos_edges[1:]])
    cdf = np.concatenate([(1.0 - pos_cdf)[::-1], pos_cdf[1:]])
    return x, np.clip(cdf, 0.0, 1.0)


def ks_statistic(samples, cdf_x, cdf_y):
    s = np.sort(np.asarray(samples))
    model = np.interp(s, cdf_x, cdf_y)
    n = s.size
    ecdf_hi = np.arange(1, n + 1) / n
    ecdf_lo = np.arange(0, n) / n
    return float(max(np.max(np.abs(ecdf_hi - model)), np.max(np.abs(model - ecdf_lo))))


def central_difference_gradient(fn, w, h=1e-6):
    w = np.asarray(w, dtype=float)
    grad = np.zeros_like(w)
    for i in range(w.size):
        up, down = w.copy(), w.copy()
        up[i] += h
        down[i] -= h
        grad[i] = (fn(up) - fn(down)) / (2.0 * h)
    return grad


class QuadraticBowl:
    """Loss oracle ``||w - center||^2`` satisfying the LossModel contract."""

    def __init__(self, center):
        self.center = np.asarray(center, dtype=float)

    def loss(self, w, shard=None):
        return float(np.sum((np.asarray(w) - self.center) ** 2))

    def gradient(self, w, shard=None):
        return 2.0 * (np.asarray(w, dtype=float) - self.center)


def curve_loss_monte_carlo(spec, loss_fn, n=10_000, seed=123):
    """E_{p~U(0,1)} loss(phi(p)) estimated on a fixed uniform sample."""
    from dpfed.mode_connectivity import curve_point

    rng = np.random.default_rng(seed)
    return float(np.mean([loss_fn(curve_point(spec, float(p))) for p in rng.random(n)]))
