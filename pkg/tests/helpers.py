"""Shared builders for test markets.

Two reference scenarios recur across the suite: a 2-asset market with one
liquid and one less liquid bond, and a 30-asset market split into two blocks
of 15 assets with high within-block correlation.  Builders default to those
parameterizations; individual tests override what they need.
"""

from __future__ import annotations

import numpy as np

from rfqmm.model import (
    AssetSpec,
    GammaSpec,
    LogisticIntensity,
    MarketSpec,
    RiskPenalty,
    SizeDistribution,
)

# size atoms and weights used by the reference scenarios
REFERENCE_SIZES = (6250.0, 12500.0, 18750.0, 25000.0)
REFERENCE_PROBS = (0.53, 0.35, 0.10, 0.02)

REFERENCE_GAMMA = GammaSpec(shape=4.0, rate=4.0e-4)


def make_intensity(lam: float = 30.0, alpha: float = 0.7, beta: float = 30.0) -> LogisticIntensity:
    return LogisticIntensity(lambda_rfq=lam, alpha=alpha, beta=beta)


def make_sizes(sizes=REFERENCE_SIZES, probs=REFERENCE_PROBS) -> SizeDistribution:
    return SizeDistribution(sizes=tuple(sizes), probabilities=tuple(probs))


def make_asset(
    asset_id: str = "A0",
    sigma: float = 1.2,
    lam: float = 30.0,
    alpha: float = 0.7,
    beta: float = 30.0,
    sizes: SizeDistribution | None = None,
    s0: float = 100.0,
) -> AssetSpec:
    intensity = make_intensity(lam, alpha, beta)
    dist = sizes if sizes is not None else make_sizes()
    return AssetSpec(
        asset_id=asset_id,
        s0=s0,
        sigma=sigma,
        bid_intensity=intensity,
        ask_intensity=intensity,
        bid_sizes=dist,
        ask_sizes=dist,
    )


def make_market_2asset(
    horizon: float = 12.0,
    gamma: float = 8.0e-7,
    risk_limit: float = 2.4e10,
    rho: float = 0.9,
    lam: float = 30.0,
    sigmas=(1.2, 0.6),
    quote_floor: float = 1.0,
    penalty: RiskPenalty | None = None,
) -> MarketSpec:
    assets = tuple(
        make_asset(asset_id=f"A{i}", sigma=s, lam=lam) for i, s in enumerate(sigmas)
    )
    correlation = np.array([[1.0, rho], [rho, 1.0]])
    pen = penalty if penalty is not None else RiskPenalty(running_form="quadratic", gamma=gamma)
    return MarketSpec(
        assets=assets,
        correlation=correlation,
        horizon=horizon,
        risk_limit=risk_limit,
        penalty=pen,
        quote_floor=quote_floor,
    )


def block_correlation(sizes=(15, 15), within=(0.9, 0.9), across: float = 0.2) -> np.ndarray:
    d = sum(sizes)
    rho = np.full((d, d), across)
    start = 0
    for n, w in zip(sizes, within):
        rho[start : start + n, start : start + n] = w
        start += n
    np.fill_diagonal(rho, 1.0)
    return rho


def make_market_30asset(
    horizon: float = 2.0,
    gamma: float = 8.0e-7,
    risk_limit: float = 5.0e10,
    lam: float = 10.0,
) -> MarketSpec:
    assets = tuple(
        make_asset(asset_id=f"A{i}", sigma=1.2 if i < 15 else 0.6, lam=lam) for i in range(30)
    )
    return MarketSpec(
        assets=assets,
        correlation=block_correlation(),
        horizon=horizon,
        risk_limit=risk_limit,
        penalty=RiskPenalty(running_form="quadratic", gamma=gamma),
    )


def rk4_lattice_reference(market, grid, n_steps: int) -> np.ndarray:
    """Classical RK4 integration of the single-asset lattice dynamics.

    Only valid when every size atom is an integer multiple of the grid
    spacing, so shifted reads land exactly on nodes.  Independent of the
    production stepper: plain index shifts, fixed-step RK4.
    """
    from rfqmm.hamiltonian import HamiltonianOps

    assert grid.ndim == 1
    asset = market.assets[0]
    nodes = grid.axes[0]
    n = nodes.shape[0]
    spacing = grid.spacing[0]
    risk = nodes**2 * asset.sigma**2
    drain = np.asarray(market.penalty.running(risk), dtype=float)
    ops = {
        side: HamiltonianOps(intensity=asset.intensity(side), quote_floor=market.quote_floor)
        for side in ("bid", "ask")
    }

    def rhs(theta):
        out = -drain.copy()
        for side, sign in (("bid", 1), ("ask", -1)):
            dist = asset.sizes(side)
            for z, p in zip(dist.sizes, dist.probabilities):
                m = int(round(z / spacing))
                assert abs(z / spacing - m) < 1e-9, "atom off the lattice"
                shifted = np.arange(n) + sign * m
                ok = (shifted >= 0) & (shifted < n)
                values = theta[np.clip(shifted, 0, n - 1)]
                h = ops[side].hamiltonian((theta - values) / z)
                out = out + np.where(ok, p * z * h, 0.0)
        return out

    theta = -np.asarray(market.penalty.terminal(risk), dtype=float)
    dt = market.horizon / n_steps
    for _ in range(n_steps):
        k1 = rhs(theta)
        k2 = rhs(theta + 0.5 * dt * k1)
        k3 = rhs(theta + 0.5 * dt * k2)
        k4 = rhs(theta + dt * k3)
        theta = theta + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    return theta


def make_market_1asset(
    sigma: float = 1.2,
    horizon: float = 1.0,
    gamma: float = 0.0,
    risk_limit: float = 1.0e18,
    lam: float = 30.0,
    sizes: SizeDistribution | None = None,
    terminal_form: str = "zero",
    zeta: float = 0.0,
) -> MarketSpec:
    return MarketSpec(
        assets=(make_asset(asset_id="A0", sigma=sigma, lam=lam, sizes=sizes),),
        correlation=np.array([[1.0]]),
        horizon=horizon,
        risk_limit=risk_limit,
        penalty=RiskPenalty(
            running_form="quadratic", gamma=gamma, terminal_form=terminal_form, zeta=zeta
        ),
    )
