"""Independent numerical oracles used to pin expected values in tests.

These deliberately avoid the library's own code paths: Renyi divergences of
the subsampled Gaussian mechanism are computed by adaptive quadrature in
arbitrary precision (mpmath), not by the series expansion the accountant
uses, and gradients are checked against central finite differences.
"""

from __future__ import annotations

import mpmath as mp
import numpy as np

mp.mp.dps = 40


def quadrature_rdp(q: float, sigma: float, alpha: float) -> float:
    """Renyi divergence of order alpha for the subsampled Gaussian mechanism.

    Integrates E_{x ~ N(0, sigma^2)}[((1-q) + q * exp((2x-1)/(2 sigma^2)))^alpha]
    directly and returns log(A_alpha) / (alpha - 1).
    """
    q_ = mp.mpf(q)
    sigma_ = mp.mpf(sigma)
    alpha_ = mp.mpf(alpha)
    if q_ == 1:
        return float(alpha_ / (2 * sigma_**2))

    def integrand(x):
        ratio = (1 - q_) + q_ * mp.e ** ((2 * x - 1) / (2 * sigma_**2))
        pdf = mp.e ** (-(x**2) / (2 * sigma_**2)) / (sigma_ * mp.sqrt(2 * mp.pi))
        return pdf * ratio**alpha_

    # Split at the Gaussian centers so mpmath resolves both bumps.
    width = 60 * sigma_
    a = float(-width)
    b = float(1 + width)
    val = mp.quad(integrand, [a, 0, 0.5, 1, b])
    return float(mp.log(val) / (alpha_ - 1))


def epsilon_from_rdp_curve(orders, rdp, delta: float):
    """Tight RDP -> (epsilon, delta) conversion, minimized over orders."""
    best = mp.inf
    best_order = None
    d = mp.mpf(delta)
    for a, r in zip(orders, rdp):
        a = mp.mpf(a)
        r = mp.mpf(r)
        if not mp.isfinite(r):
            continue
        eps = r + mp.log1p(-1 / a) - (mp.log(d) + mp.log(a)) / (a - 1)
        if eps < best:
            best = eps
            best_order = float(a)
    return max(float(best), 0.0), best_order


def quadrature_epsilon(q, sigma, steps, delta, orders):
    rdp = [steps * quadrature_rdp(q, sigma, a) for a in orders]
    return epsilon_from_rdp_curve(orders, rdp, delta)


def quadrature_calibrate(target_eps, delta, q, steps, orders,
                         lo=0.3, hi=50.0, tol=1e-4):
    """Bisect for the noise multiplier meeting target_eps, oracle-side."""
    f = lambda s: quadrature_epsilon(q, s, steps, delta, orders)[0]
    if f(hi) > target_eps:
        raise ValueError("target unreachable at sigma=hi")
    if f(lo) < target_eps:
        raise ValueError("target already met at sigma=lo")
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if f(mid) > target_eps:
            lo = mid
        else:
            hi = mid
    return hi


def finite_difference_gradient(f, x: np.ndarray, step: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of scalar f at x, coordinate by coordinate."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.ravel()
    out = g.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f(x)
        flat[i] = orig - step
        lo = f(x)
        flat[i] = orig
        out[i] = (hi - lo) / (2 * step)
    return g


def finite_difference_jacobian(f, x: np.ndarray, step: float = 1e-4) -> np.ndarray:
    """Central-difference Jacobian of vector-valued f, shape (len(f(x)), x.size)."""
    base = np.asarray(f(x), dtype=np.float64)
    jac = np.zeros((base.size, x.size))
    flat = x.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = np.asarray(f(x), dtype=np.float64)
        flat[i] = orig - step
        lo = np.asarray(f(x), dtype=np.float64)
        flat[i] = orig
        jac[:, i] = (hi - lo).ravel() / (2 * step)
    return jac
