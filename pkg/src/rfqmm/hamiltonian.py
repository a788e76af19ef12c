"""Exact quote optimization kernels for logistic fill intensities.

Quoting a spread d against a reservation level p earns Lambda(d) * (d - p)
per unit time.  For the logistic intensity the supremum over d >= -floor has
a scalar first-order condition which, after substituting x = alpha + beta*d,
reads

    x - exp(-x) = c,      c = beta*p + alpha + 1.

The left side is strictly increasing and concave, so Newton started at or
below the root converges monotonically from below; every iterate is kept
inside a bracketing interval with a bisection fallback.  The bracket is
[x0, x0 + exp(-x0)] with x0 = c for c >= 0 and x0 = -log1p(-c) otherwise,
which is cheap and always valid.

Derived quantities at the optimizer d*(p):

    H(p)  = Lambda(d*) * (d* - p)        (positive, decreasing, convex)
    H'(p) = -Lambda(d*)                  (so |H'| <= Lambda(-floor))

Below the clamp point, where the unconstrained optimizer would violate the
floor, H is affine with slope -Lambda(-floor).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import LogisticIntensity

# quote tolerance of the scalar solve
QUOTE_TOL = 1e-12
_MAX_ITER = 80


def solve_offset_equation(c, x0=None):
    """Solve x - exp(-x) = c elementwise.

    ``x0`` optionally warm-starts the iteration; it is projected into the
    bracket before use.  Shapes broadcast like numpy ufuncs.
    """
    c = np.asarray(c, dtype=float)
    scalar = c.ndim == 0
    c = np.atleast_1d(c)
    lo = np.where(c >= 0.0, c, -np.log1p(-np.minimum(c, 0.0)))
    hi = lo + np.exp(-lo)
    if x0 is None:
        x = lo.copy()
    else:
        x = np.clip(np.broadcast_to(np.asarray(x0, dtype=float), c.shape), lo, hi).copy()
    # converged entries freeze so each element's iterate sequence (and hence
    # its bits) is independent of what else shares the batch
    active = np.ones(c.shape, dtype=bool)
    for _ in range(_MAX_ITER):
        ex = np.exp(-x)
        f = x - ex - c
        below = f < 0.0
        np.copyto(lo, x, where=below & active)
        np.copyto(hi, x, where=~below & active)
        step = f / (1.0 + ex)
        x_new = x - step
        outside = (x_new < lo) | (x_new > hi)
        np.copyto(x_new, 0.5 * (lo + hi), where=outside)
        converged = np.abs(x_new - x) <= 1e-13 * (1.0 + np.abs(x_new))
        np.copyto(x, x_new, where=active)
        active &= ~converged
        if not active.any():
            break
    return float(x[0]) if scalar else x


def batch_quote_kernel(p, lam, alpha, beta, floor, x0=None):
    """Vectorized optimizer and envelope for per-element intensity parameters.

    Returns ``(delta, value, slope, x)`` where ``delta`` maximizes
    Lambda(d) * (d - p) over d >= -floor, ``value``/``slope`` are the envelope
    and its derivative in p, and ``x`` is the internal root for warm starts.
    All of ``p, lam, alpha, beta`` broadcast elementwise.
    """
    p = np.asarray(p, dtype=float)
    c = beta * p + alpha + 1.0
    x = solve_offset_equation(c, x0=x0)
    delta = np.maximum((x - alpha) / beta, -floor)
    u = alpha + beta * delta
    # Lambda(delta) without overflow for large u
    lam_d = lam / (1.0 + np.exp(np.minimum(u, 700.0)))
    value = lam_d * (delta - p)
    slope = -lam_d
    return delta, value, slope, x


@dataclass(frozen=True)
class HamiltonianOps:
    """Quote optimizer bound to one intensity curve and one quote floor.

    ``lipschitz_bound`` is Lambda(-floor), the uniform bound on the envelope
    slope; the explicit solver's step budget is built from it.
    """

    intensity: LogisticIntensity
    quote_floor: float
    lipschitz_bound: float = field(init=False)

    def __post_init__(self):
        if self.quote_floor <= 0.0:
            raise ValueError(f"quote floor must be positive, got {self.quote_floor}")
        object.__setattr__(self, "lipschitz_bound", float(self.intensity(-self.quote_floor)))

    def _kernel(self, p, x0=None):
        lam = self.intensity
        return batch_quote_kernel(p, lam.lambda_rfq, lam.alpha, lam.beta, self.quote_floor, x0=x0)

    def unconstrained_quote(self, p):
        """Optimizer ignoring the floor (the root of the first-order condition)."""
        lam = self.intensity
        x = solve_offset_equation(lam.beta * np.asarray(p, dtype=float) + lam.alpha + 1.0)
        return (x - lam.alpha) / lam.beta

    def delta_star(self, p):
        """Floor-clamped optimal quote."""
        return self._kernel(p)[0]

    def hamiltonian(self, p):
        """Envelope value sup_{d >= -floor} Lambda(d) * (d - p)."""
        return self._kernel(p)[1]

    def hamiltonian_derivative(self, p):
        """Envelope slope, equal to -Lambda(delta_star(p))."""
        return self._kernel(p)[2]
