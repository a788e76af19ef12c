"""Executable quotes on top of a solved value surface.

The quoting rule prices a bid (ask) for ``z`` units of asset ``i`` off the
per-unit value change the fill would cause: ``p = (theta(f) - theta(f'))/z``
with ``f' = f + z*e_i`` for a bid and ``f - z*e_i`` for an ask, where ``e_i``
is the factor image of one unit of the asset.  The offset that maximises
expected spread revenue against that reservation level is then
``delta_star(p)`` from the envelope kernel.

Two situations yield no quote at all: the shifted factor point would leave
the grid box, or the post-trade inventory would breach the quadratic risk
limit.  Both are reported as refusals rather than as very wide quotes so
that downstream consumers can treat them as zero fill probability.

Admissible inventories always map inside the box: ``f = B'q`` satisfies
``f'Vf = q'(Sigma - R)q <= q'Sigma q`` for a positive semidefinite residual,
so a risk-admissible ``q`` cannot trigger the out-of-domain error below.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import IO, Optional, Sequence

import numpy as np

from .errors import OutOfDomainError, ValidationError
from .factors import FactorModel
from .hamiltonian import batch_quote_kernel, solve_offset_equation
from .model import SIDES, LogisticIntensity, MarketSpec
from .solver import ValueSurface

REASON_OK = "ok"
REASON_BOX = "factor_out_of_grid"
REASON_RISK = "risk_limit"

_RISK_SLACK = 1.0 + 1e-12


def myopic_quote(intensity: LogisticIntensity, quote_floor: float = 1.0) -> float:
    """Inventory-blind offset maximising instantaneous expected revenue.

    This is ``delta_star`` at zero reservation level; the arrival rate
    cancels out of the first-order condition, so only the shape parameters
    matter.
    """
    x = solve_offset_equation(intensity.alpha + 1.0)
    return max((x - intensity.alpha) / intensity.beta, -quote_floor)


@dataclass(frozen=True)
class QuoteResult:
    """One priced (or refused) RFQ answer."""

    delta: float
    reason: str
    reservation: float

    @property
    def refused(self) -> bool:
        return self.reason != REASON_OK


def _check_asset_side(market: MarketSpec, asset: int, side: str, size: float) -> None:
    if not 0 <= asset < market.n_assets:
        raise ValidationError(f"asset index {asset} out of range for {market.n_assets} assets")
    if side not in SIDES:
        raise ValidationError(f"side must be one of {SIDES}, got {side!r}")
    if not size > 0.0:
        raise ValidationError(f"trade size must be positive, got {size}")


def optimal_quote(
    surface: ValueSurface,
    market: MarketSpec,
    q,
    asset: int,
    side: str,
    size: float,
    t: float = 0.0,
) -> QuoteResult:
    """Feedback quote for one RFQ at inventory ``q``.

    Raises OutOfDomainError when the current factor point is outside the
    grid box (the model has nothing to say there); returns a refusal marker
    when only the post-trade state is bad.
    """
    _check_asset_side(market, asset, side, size)
    q = np.asarray(q, dtype=float).reshape(1, -1)
    if q.shape[1] != market.n_assets:
        raise ValidationError(
            f"inventory has {q.shape[1]} components, market has {market.n_assets} assets"
        )
    delta, reason, reservation = _surface_quote_arrays(
        surface, market, q, asset, side, size, t
    )
    return QuoteResult(float(delta[0]), reason[0], float(reservation[0]))


def _surface_quote_arrays(
    surface: ValueSurface,
    market: MarketSpec,
    inventories: np.ndarray,
    asset: int,
    side: str,
    size: float,
    t,
    sq: Optional[np.ndarray] = None,
    risk: Optional[np.ndarray] = None,
):
    """Vectorised core shared by the scalar call and the policy objects.

    ``sq`` (inventories @ Sigma) and ``risk`` (current q'Sigma q) may be
    passed in by callers that maintain them incrementally; both are
    recomputed otherwise.
    """
    fm = surface.factor_model
    grid = surface.grid
    n = inventories.shape[0]
    points = fm.factor_coordinates(inventories)
    if not np.all(grid.contains(points)):
        raise OutOfDomainError("factor point outside the grid box; state is out of domain")

    sign = 1.0 if side == "bid" else -1.0
    shifted = points + (sign * size) * fm.shift_directions[asset]
    inside = grid.contains(shifted)

    sigma = market.covariance
    if sq is None:
        sq_asset = inventories @ sigma[:, asset]
    else:
        sq_asset = sq[:, asset]
    if risk is None:
        risk = np.einsum("nd,dn->n", inventories, sigma @ inventories.T)
    post_risk = risk + 2.0 * sign * size * sq_asset + size * size * sigma[asset, asset]
    ok = inside & (post_risk <= market.risk_limit * _RISK_SLACK)

    value_now = _values_at(surface, t, points)
    value_shifted = np.where(inside, _values_at(surface, t, shifted, allow_outside=True), 0.0)
    reservation = np.where(ok, (value_now - value_shifted) / size, 0.0)

    intensity = market.assets[asset].intensity(side)
    delta, _, _, _ = batch_quote_kernel(
        reservation,
        intensity.lambda_rfq,
        intensity.alpha,
        intensity.beta,
        market.quote_floor,
    )
    delta = np.where(ok, delta, np.nan)
    reservation = np.where(ok, reservation, np.nan)
    reason = np.full(n, REASON_OK, dtype=object)
    reason[~inside] = REASON_BOX
    reason[inside & ~ok] = REASON_RISK
    return delta, reason, reservation


def _values_at(surface: ValueSurface, t, points: np.ndarray, allow_outside: bool = False):
    mode = "nan" if allow_outside else "raise"
    t_arr = np.asarray(t, dtype=float)
    if t_arr.ndim == 0:
        return surface.value_many(float(t_arr), points, out_of_box=mode)
    # per-row times: group rows by the stored slice they resolve to
    indices = np.array([surface.slice_index(tv) for tv in t_arr])
    out = np.empty(points.shape[0], dtype=float)
    for k in np.unique(indices):
        rows = indices == k
        out[rows] = surface.value_many(
            float(surface.times[k]), points[rows], out_of_box=mode
        )
    return out


@dataclass(frozen=True, eq=False)
class MyopicPolicy:
    """Always answers the same offset per (asset, side); ignores inventory.

    The constants are precomputed at construction, so quoting is a table
    lookup.  The policy itself never refuses; risk limits are enforced by
    whoever executes the fills.
    """

    market: MarketSpec
    kind: str = "myopic"
    _table: dict = field(init=False, repr=False, default_factory=dict)
    _array: np.ndarray = field(init=False, repr=False, default=None)

    def __post_init__(self):
        table = {
            (i, side): myopic_quote(self.market.assets[i].intensity(side), self.market.quote_floor)
            for i in range(self.market.n_assets)
            for side in SIDES
        }
        object.__setattr__(self, "_table", table)
        arr = np.array(
            [[table[(i, side)] for side in SIDES] for i in range(self.market.n_assets)]
        )
        object.__setattr__(self, "_array", arr)

    def quote_batch(self, t, inventories, asset, side, size, sq=None, risk=None):
        n = np.asarray(inventories).shape[0]
        return np.full(n, self._table[(asset, side)]), np.full(n, REASON_OK, dtype=object)

    def quote_rows(self, t, inventories, asset_ix, side_ix, sizes, sq=None, risk=None):
        delta = self._array[asset_ix, side_ix]
        return delta, np.ones(delta.shape, dtype=bool)


@dataclass(frozen=True, eq=False)
class SurfacePolicy:
    """Feedback quotes read off a solved surface.

    With an ``adjuster`` attached (see the residual-correction module) the
    reservation level is shifted by the first-order correction before the
    envelope kernel runs, and the policy reports itself as the adjusted
    kind.
    """

    surface: ValueSurface
    market: MarketSpec
    adjuster: Optional[object] = None

    @property
    def kind(self) -> str:
        return "surface" if self.adjuster is None else "surface_mc_adjusted"

    def quote_rows(self, t, inventories, asset_ix, side_ix, sizes, sq=None, risk=None):
        """Per-row (asset, side, size) quoting for the event loop.

        Returns ``(delta, ok)``; ``delta`` is NaN where the policy refuses.
        """
        inventories = np.asarray(inventories, dtype=float)
        n = inventories.shape[0]
        fm = self.surface.factor_model
        grid = self.surface.grid
        points = fm.factor_coordinates(inventories)
        if not np.all(grid.contains(points)):
            raise OutOfDomainError("factor point outside the grid box; state is out of domain")
        signs = np.where(side_ix == 0, 1.0, -1.0)
        shifted = points + (signs * sizes)[:, None] * fm.shift_directions[asset_ix]
        inside = grid.contains(shifted)

        sigma = self.market.covariance
        if sq is None:
            own = np.einsum("nd,dn->n", inventories, sigma[:, asset_ix])
        else:
            own = sq[np.arange(n), asset_ix]
        if risk is None:
            risk = np.einsum("nd,dn->n", inventories, sigma @ inventories.T)
        post_risk = risk + 2.0 * signs * sizes * own + sizes * sizes * np.diag(sigma)[asset_ix]
        ok = inside & (post_risk <= self.market.risk_limit * _RISK_SLACK)

        value_now = _values_at(self.surface, t, points)
        value_shifted = np.where(
            inside, _values_at(self.surface, t, shifted, allow_outside=True), 0.0
        )
        reservation = np.where(ok, (value_now - value_shifted) / sizes, 0.0)
        if self.adjuster is not None:
            reservation = reservation + self._row_shifts(
                t, inventories, asset_ix, side_ix, sizes
            )
        lam, alpha, beta = self._params()
        delta, _, _, _ = batch_quote_kernel(
            reservation,
            lam[asset_ix, side_ix],
            alpha[asset_ix, side_ix],
            beta[asset_ix, side_ix],
            self.market.quote_floor,
        )
        return np.where(ok, delta, np.nan), ok

    def _params(self):
        cached = getattr(self, "_param_arrays", None)
        if cached is None:
            d = self.market.n_assets
            lam = np.empty((d, 2))
            alpha = np.empty((d, 2))
            beta = np.empty((d, 2))
            for i in range(d):
                for s, side in enumerate(SIDES):
                    intensity = self.market.assets[i].intensity(side)
                    lam[i, s] = intensity.lambda_rfq
                    alpha[i, s] = intensity.alpha
                    beta[i, s] = intensity.beta
            cached = (lam, alpha, beta)
            object.__setattr__(self, "_param_arrays", cached)
        return cached

    def _row_shifts(self, t, inventories, asset_ix, side_ix, sizes):
        out = np.zeros(inventories.shape[0])
        keys = np.stack([asset_ix, side_ix], axis=1)
        for asset, s in np.unique(keys, axis=0):
            for z in np.unique(sizes[(asset_ix == asset) & (side_ix == s)]):
                rows = (asset_ix == asset) & (side_ix == s) & (sizes == z)
                out[rows] = self.adjuster.reservation_shift(
                    t, inventories[rows], int(asset), SIDES[s], float(z)
                )
        return out

    def _batch(self, t, inventories, asset, side, size, sq=None, risk=None):
        inventories = np.asarray(inventories, dtype=float)
        delta, reason, reservation = _surface_quote_arrays(
            self.surface, self.market, inventories, asset, side, size, t, sq, risk
        )
        if self.adjuster is None:
            return delta, reason, reservation
        ok = reason == REASON_OK
        shift = self.adjuster.reservation_shift(t, inventories, asset, side, size)
        adjusted = np.where(ok, reservation + shift, 0.0)
        intensity = self.market.assets[asset].intensity(side)
        delta_adj, _, _, _ = batch_quote_kernel(
            adjusted,
            intensity.lambda_rfq,
            intensity.alpha,
            intensity.beta,
            self.market.quote_floor,
        )
        return (
            np.where(ok, delta_adj, np.nan),
            reason,
            np.where(ok, adjusted, np.nan),
        )

    def quote_batch(self, t, inventories, asset, side, size, sq=None, risk=None):
        delta, reason, _ = self._batch(t, inventories, asset, side, size, sq, risk)
        return delta, reason

    def quote(self, q, asset, side, size, t: float = 0.0) -> QuoteResult:
        q = np.asarray(q, dtype=float).reshape(1, -1)
        delta, reason, reservation = self._batch(t, q, asset, side, size)
        return QuoteResult(float(delta[0]), reason[0], float(reservation[0]))


QUOTE_TABLE_BASE_COLUMNS = ("asset", "side", "size", "delta", "reason")


def quote_table(
    surface: ValueSurface,
    market: MarketSpec,
    inventories,
    sizes: Optional[Sequence[float]] = None,
    t: float = 0.0,
):
    """Materialise quotes over a set of inventories.

    Rows follow the input inventory order, then asset index, then side
    (bid before ask), then increasing size, so the output is deterministic.
    Each row is ``(q tuple, asset id, side, size, delta or None, reason)``.
    """
    inventories = np.atleast_2d(np.asarray(inventories, dtype=float))
    rows = []
    for q in inventories:
        for i, spec in enumerate(market.assets):
            for side in SIDES:
                atoms = sizes if sizes is not None else spec.sizes(side).sizes
                for z in atoms:
                    res = optimal_quote(surface, market, q, i, side, float(z), t=t)
                    rows.append(
                        (
                            tuple(q),
                            spec.asset_id,
                            side,
                            float(z),
                            None if res.refused else res.delta,
                            res.reason,
                        )
                    )
    return rows


def write_quote_table(fp: IO[str], rows, n_assets: int) -> None:
    """CSV emission with a refusal encoded as an empty delta plus a reason."""
    writer = csv.writer(fp, lineterminator="\n")
    header = [f"q{j + 1}" for j in range(n_assets)] + list(QUOTE_TABLE_BASE_COLUMNS)
    writer.writerow(header)
    for q, asset_id, side, size, delta, reason in rows:
        writer.writerow(
            [repr(float(c)) for c in q]
            + [asset_id, side, repr(size), "" if delta is None else repr(delta), reason]
        )
