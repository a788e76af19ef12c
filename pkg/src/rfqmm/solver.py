"""Backward construction of the value surface on a factor grid.

The market maker's certainty-equivalent value theta(t, f) lives on a uniform
rectangular grid in factor coordinates f.  Stepping backward from the
horizon, each explicit Euler update adds

    dt * ( -running_penalty(f' V f)
           + sum over assets i, sides, size atoms z with weight p_z of
             p_z * z * envelope( (theta(t, f) - theta(t, f_shift)) / z ) )

where f_shift = f + z * e_i for a bid and f - z * e_i for an ask (e_i is the
factor displacement of one unit of asset i) and ``envelope`` is the quote
optimization kernel of the matching intensity curve.  Shifted points are read
by multilinear interpolation; where a shifted point leaves the bounding box
the whole term is dropped (``drop_term``), which preserves monotonicity of
the scheme.

The scheme is monotone, hence stable, when dt times the sum over assets and
sides of the intensity at the quote floor stays below 1; the default budget
is 0.9 and violating it is a hard error rather than a warning.

All nodes of the rectangle are evolved, including those outside the
admissible risk ellipsoid; the ellipsoid only matters to consumers (quote
refusal, CSV flags).  Updates read exclusively the previous time slice, so
the sweep is deterministic regardless of evaluation order.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from .errors import OutOfDomainError, SolverError, StabilityError, ValidationError
from .factors import FactorModel
from .hamiltonian import batch_quote_kernel
from .model import MarketSpec

#: relative slack when testing grid-box membership
BOX_TOL = 1e-9

_FORMAT_VERSION = 1


@dataclass(frozen=True, eq=False)
class FactorGrid:
    """Uniform rectangular grid in factor coordinates.

    Axis j spans [-half_widths[j], +half_widths[j]] with an odd node count so
    the origin is always a node.  ``factor_cov`` is the (possibly
    non-diagonal) covariance of the factor coordinates; it defines the risk
    level f' V f attached to every node and the admissibility mask
    f' V f <= risk_limit.
    """

    factor_cov: np.ndarray
    half_widths: np.ndarray
    nodes_per_axis: tuple[int, ...]
    risk_limit: float

    def __post_init__(self):
        v = np.asarray(self.factor_cov, dtype=float)
        half = np.asarray(self.half_widths, dtype=float)
        k = half.shape[0]
        if not 1 <= k <= 3:
            raise ValidationError(f"factor grids support 1 to 3 dimensions, got {k}")
        if v.shape != (k, k):
            raise ValidationError(f"factor covariance shape {v.shape} does not match {k} axes")
        if len(self.nodes_per_axis) != k:
            raise ValidationError(
                f"{len(self.nodes_per_axis)} node counts for {k} axes"
            )
        for n in self.nodes_per_axis:
            if n < 3 or n % 2 == 0:
                raise ValidationError(f"nodes per axis must be odd and >= 3, got {n}")
        if np.any(half <= 0.0):
            raise ValidationError(f"half widths must be positive, got {half.tolist()}")
        if self.risk_limit <= 0.0:
            raise ValidationError(f"risk limit must be positive, got {self.risk_limit}")
        v = 0.5 * (v + v.T)
        v.setflags(write=False)
        half.setflags(write=False)
        object.__setattr__(self, "factor_cov", v)
        object.__setattr__(self, "half_widths", half)
        object.__setattr__(self, "nodes_per_axis", tuple(int(n) for n in self.nodes_per_axis))

    @classmethod
    def from_factor_model(
        cls, factor_model: FactorModel, risk_limit: float, nodes_per_axis
    ) -> "FactorGrid":
        """Box circumscribing the admissible ellipsoid f' V f <= risk_limit.

        The extent of that ellipsoid along axis j is sqrt(risk_limit *
        inv(V)_jj), which reduces to sqrt(risk_limit / V_jj) when V is
        diagonal.  The diagonal branch keeps the reciprocal exact so grids
        built from eigen factor models are bit-reproducible.
        """
        v = np.asarray(factor_model.factor_cov, dtype=float)
        diag = np.diag(v)
        if np.any(diag <= 0.0):
            raise ValidationError(f"factor variances must be positive, got {diag.tolist()}")
        if np.count_nonzero(v - np.diag(diag)) == 0:
            half = np.sqrt(risk_limit / diag)
        else:
            try:
                inv_diag = np.diag(np.linalg.inv(v))
            except np.linalg.LinAlgError as exc:
                raise ValidationError(f"factor covariance is singular: {exc}") from exc
            if np.any(inv_diag <= 0.0):
                raise ValidationError(
                    "factor covariance must be positive definite to box the "
                    f"admissible region, inverse diagonal {inv_diag.tolist()}"
                )
            half = np.sqrt(risk_limit * inv_diag)
        k = diag.shape[0]
        if isinstance(nodes_per_axis, int):
            nodes_per_axis = (nodes_per_axis,) * k
        return cls(
            factor_cov=factor_model.factor_cov,
            half_widths=half,
            nodes_per_axis=tuple(nodes_per_axis),
            risk_limit=risk_limit,
        )

    @property
    def ndim(self) -> int:
        return len(self.nodes_per_axis)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.nodes_per_axis

    @property
    def n_nodes(self) -> int:
        return int(np.prod(self.nodes_per_axis))

    @property
    def spacing(self) -> np.ndarray:
        return 2.0 * self.half_widths / (np.array(self.nodes_per_axis) - 1)

    @property
    def axes(self) -> tuple[np.ndarray, ...]:
        return tuple(
            np.linspace(-a, a, n) for a, n in zip(self.half_widths, self.nodes_per_axis)
        )

    def node_coordinates(self) -> np.ndarray:
        """All nodes as an (n_nodes, ndim) array in C order."""
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def risk_levels(self) -> np.ndarray:
        """f' V f at every node, flat in C order."""
        nodes = self.node_coordinates()
        return np.einsum("nj,jk,nk->n", nodes, self.factor_cov, nodes)

    def admissible_mask(self) -> np.ndarray:
        return self.risk_levels() <= self.risk_limit * (1.0 + 1e-12)

    def contains(self, points) -> np.ndarray:
        """Which query points lie inside the bounding box (with slack)."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        slack = BOX_TOL * self.half_widths
        return np.all(np.abs(pts) <= self.half_widths + slack, axis=1)

    def interpolation_indices(self, points):
        """Per-point flat corner indices and weights for multilinear reads.

        Returns ``(corners, weights, inside)`` with shapes (2^k, m), (2^k, m)
        and (m,).  Points outside the box get weight columns of zeros and
        ``inside`` False; callers choose between raising and masking.
        """
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        m, k = pts.shape
        if k != self.ndim:
            raise ValidationError(f"query dimension {k} does not match grid dimension {self.ndim}")
        ns = self.nodes_per_axis
        spacing = self.spacing
        inside = self.contains(pts)
        los, ws = [], []
        for j in range(k):
            u = (pts[:, j] + self.half_widths[j]) / spacing[j]
            u = np.clip(u, 0.0, ns[j] - 1.0)
            lo = np.minimum(np.floor(u), ns[j] - 2).astype(np.int64)
            los.append(lo)
            ws.append(u - lo)
        strides = np.array([int(np.prod(ns[j + 1 :])) for j in range(k)], dtype=np.int64)
        n_corners = 1 << k
        corners = np.empty((n_corners, m), dtype=np.int64)
        weights = np.empty((n_corners, m), dtype=float)
        for c, bits in enumerate(itertools.product((0, 1), repeat=k)):
            idx = np.zeros(m, dtype=np.int64)
            w = np.ones(m, dtype=float)
            for j, b in enumerate(bits):
                idx += (los[j] + b) * strides[j]
                w *= ws[j] if b else 1.0 - ws[j]
            corners[c] = idx
            weights[c] = np.where(inside, w, 0.0)
        return corners, weights, inside


@dataclass(frozen=True)
class SolverConfig:
    """Knobs of the backward sweep.

    ``dt`` requests a step in days; None takes the largest stable step.
    ``snapshot_times`` asks for extra stored slices at the given times (the
    nearest computed slice is kept), useful for inspecting stationarity
    without paying for ``all_slices`` storage.
    """

    dt: float | None = None
    stability_budget: float = 0.9
    store_policy: Literal["final_slice_only", "all_slices"] = "final_slice_only"
    snapshot_times: tuple[float, ...] = ()
    out_of_grid_rule: Literal["drop_term"] = "drop_term"

    def __post_init__(self):
        if not 0.0 < self.stability_budget <= 1.0:
            raise ValidationError(
                f"stability budget must be in (0, 1], got {self.stability_budget}"
            )
        if self.store_policy not in ("final_slice_only", "all_slices"):
            raise ValidationError(f"unknown store policy {self.store_policy!r}")
        if self.out_of_grid_rule != "drop_term":
            raise ValidationError(
                f"unsupported out-of-grid rule {self.out_of_grid_rule!r}; "
                "only 'drop_term' preserves monotonicity of the explicit scheme"
            )
        if self.dt is not None and self.dt <= 0.0:
            raise ValidationError(f"dt must be positive, got {self.dt}")
        for s in self.snapshot_times:
            if s < 0.0:
                raise ValidationError(f"snapshot times must be nonnegative, got {s}")


@dataclass(eq=False)
class ValueSurface:
    """Stored slices of the value surface plus interpolation access."""

    grid: FactorGrid
    factor_model: FactorModel
    times: np.ndarray  # stored slice times, ascending, in days
    values: np.ndarray  # (n_stored,) + grid.shape
    horizon: float
    dt: float
    n_steps: int
    intensity_budget: float  # sum of intensities at the quote floor
    config_hash: str = ""

    def slice_index(self, t: float) -> int:
        """Nearest stored slice; earlier one on ties."""
        return int(np.argmin(np.abs(self.times - t)))

    def slice_values(self, t: float) -> np.ndarray:
        return self.values[self.slice_index(t)]

    def value_many(self, t: float, points, out_of_box: str = "raise") -> np.ndarray:
        """Multilinear interpolation of the nearest stored slice.

        ``out_of_box`` is either "raise" or "nan"; the NaN marker is what the
        quote engine turns into refusals.
        """
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        corners, weights, inside = self.grid.interpolation_indices(pts)
        if not inside.all():
            if out_of_box == "raise":
                bad = pts[~inside][0]
                raise OutOfDomainError(
                    f"factor point {bad.tolist()} lies outside the grid box "
                    f"(half widths {self.grid.half_widths.tolist()})"
                )
            if out_of_box != "nan":
                raise ValueError(f"unknown out_of_box mode {out_of_box!r}")
        flat = self.slice_values(t).ravel()
        # fixed-order corner accumulation: einsum picks different reduction
        # kernels for different batch sizes, which perturbs the last ulp and
        # would make a quote depend on what shares its batch
        products = weights * flat[corners]
        out = products[0].copy()
        for c in range(1, products.shape[0]):
            out += products[c]
        if not inside.all():
            out = np.where(inside, out, np.nan)
        return out

    def value(self, t: float, point) -> float:
        return float(self.value_many(t, np.atleast_2d(np.asarray(point, dtype=float)))[0])

    def value_at_origin(self, t: float = 0.0) -> float:
        return self.value(t, np.zeros(self.grid.ndim))

    def to_csv(self, fp, t: float = 0.0) -> None:
        """Write the slice nearest ``t`` as CSV, C-ordered nodes."""
        import csv

        k = self.grid.ndim
        writer = csv.writer(fp, lineterminator="\n")
        writer.writerow([f"f{j + 1}" for j in range(k)] + ["value", "admissible"])
        nodes = self.grid.node_coordinates()
        flat = self.slice_values(t).ravel()
        admissible = self.grid.admissible_mask()
        for row, val, ok in zip(nodes, flat, admissible):
            writer.writerow([repr(float(x)) for x in row] + [repr(float(val)), int(ok)])

    def save(self, path, config_hash: str | None = None) -> None:
        fm = self.factor_model
        meta = {
            "format_version": _FORMAT_VERSION,
            "config_hash": config_hash if config_hash is not None else self.config_hash,
        }
        np.savez_compressed(
            path,
            meta=json.dumps(meta, sort_keys=True),
            times=self.times,
            values=self.values,
            horizon=self.horizon,
            dt=self.dt,
            n_steps=self.n_steps,
            intensity_budget=self.intensity_budget,
            grid_factor_cov=self.grid.factor_cov,
            grid_half_widths=self.grid.half_widths,
            grid_nodes=np.array(self.grid.nodes_per_axis),
            grid_risk_limit=self.grid.risk_limit,
            fm_covariance=fm.covariance,
            fm_loadings=fm.loadings,
            fm_factor_cov=fm.factor_cov,
            fm_residual_cov=fm.residual_cov,
            fm_eigenvalues=fm.eigenvalues,
        )

    @classmethod
    def load(cls, path) -> "ValueSurface":
        with np.load(path, allow_pickle=False) as data:
            meta = json.loads(str(data["meta"]))
            if meta.get("format_version") != _FORMAT_VERSION:
                raise ValidationError(
                    f"surface cache {path} has format {meta.get('format_version')}, "
                    f"this build reads format {_FORMAT_VERSION}"
                )
            grid = FactorGrid(
                factor_cov=data["grid_factor_cov"],
                half_widths=data["grid_half_widths"],
                nodes_per_axis=tuple(int(n) for n in data["grid_nodes"]),
                risk_limit=float(data["grid_risk_limit"]),
            )
            fm = FactorModel(
                covariance=data["fm_covariance"],
                loadings=data["fm_loadings"],
                factor_cov=data["fm_factor_cov"],
                residual_cov=data["fm_residual_cov"],
                eigenvalues=data["fm_eigenvalues"],
            )
            return cls(
                grid=grid,
                factor_model=fm,
                times=data["times"],
                values=data["values"],
                horizon=float(data["horizon"]),
                dt=float(data["dt"]),
                n_steps=int(data["n_steps"]),
                intensity_budget=float(data["intensity_budget"]),
                config_hash=meta.get("config_hash", ""),
            )


def _build_shift_stencils(market: MarketSpec, factor_model: FactorModel, grid: FactorGrid):
    """Precompute, per (asset, side, size atom), the interpolation stencil.

    Shift offsets are constant per row on a uniform grid, so the stencil for
    "read theta at every node displaced by s" reduces to per-axis integer
    bases and fractional weights, broadcast to flat corner indices.
    """
    ns = grid.nodes_per_axis
    k = grid.ndim
    spacing = grid.spacing
    strides = np.array([int(np.prod(ns[j + 1 :])) for j in range(k)], dtype=np.int64)
    n = grid.n_nodes
    n_corners = 1 << k

    rows = []
    for i, asset in enumerate(market.assets):
        direction = factor_model.shift_directions[i]
        for side, sign in (("bid", 1.0), ("ask", -1.0)):
            lam = asset.intensity(side)
            dist = asset.sizes(side)
            for z, pz in zip(dist.sizes, dist.probabilities):
                shift = sign * z * direction
                rows.append((lam, z, pz, shift))

    g = len(rows)
    idx = np.empty((g, n_corners, n), dtype=np.int32)
    wgt = np.empty((g, n_corners, n), dtype=float)
    valid = np.empty((g, n), dtype=bool)
    lam_arr = np.empty((g, 1))
    alpha_arr = np.empty((g, 1))
    beta_arr = np.empty((g, 1))
    z_arr = np.empty((g, 1))
    zp_arr = np.empty(g)

    for r, (lam, z, pz, shift) in enumerate(rows):
        offs = shift / spacing
        los, ws, valids = [], [], []
        for j in range(k):
            gpos = np.arange(ns[j], dtype=float) + offs[j]
            ok = (gpos >= -BOX_TOL) & (gpos <= ns[j] - 1 + BOX_TOL)
            gc = np.clip(gpos, 0.0, ns[j] - 1.0)
            lo = np.minimum(np.floor(gc), ns[j] - 2).astype(np.int64)
            los.append(lo)
            ws.append(gc - lo)
            valids.append(ok)
        shape_j = [
            (ns[j],) + (1,) * (k - 1 - j) for j in range(k)
        ]  # broadcast shapes per axis
        v = np.ones(ns, dtype=bool)
        for j in range(k):
            v &= valids[j].reshape((1,) * j + shape_j[j])
        valid[r] = v.ravel()
        for c, bits in enumerate(itertools.product((0, 1), repeat=k)):
            flat_idx = np.zeros(ns, dtype=np.int64)
            flat_w = np.ones(ns, dtype=float)
            for j, b in enumerate(bits):
                axis_idx = (los[j] + b) * strides[j]
                axis_w = ws[j] if b else 1.0 - ws[j]
                bshape = (1,) * j + shape_j[j]
                flat_idx = flat_idx + axis_idx.reshape(bshape)
                flat_w = flat_w * axis_w.reshape(bshape)
            idx[r, c] = flat_idx.ravel().astype(np.int32)
            wgt[r, c] = flat_w.ravel()
        lam_arr[r, 0] = lam.lambda_rfq
        alpha_arr[r, 0] = lam.alpha
        beta_arr[r, 0] = lam.beta
        z_arr[r, 0] = z
        zp_arr[r] = z * pz

    return idx, wgt, valid, lam_arr, alpha_arr, beta_arr, z_arr, zp_arr


def solve(
    market: MarketSpec,
    factor_model: FactorModel,
    grid: FactorGrid,
    config: SolverConfig | None = None,
) -> ValueSurface:
    """Run the backward sweep and return the stored slices."""
    cfg = config if config is not None else SolverConfig()
    if factor_model.n_factors != grid.ndim:
        raise ValidationError(
            f"grid has {grid.ndim} axes but the factor model keeps "
            f"{factor_model.n_factors} factors"
        )
    if factor_model.n_assets != market.n_assets:
        raise ValidationError(
            f"factor model covers {factor_model.n_assets} assets, market has {market.n_assets}"
        )

    budget = market.intensity_sum_at_floor()
    if budget <= 0.0 and cfg.dt is None:
        raise ValidationError(
            "all arrival rates are zero, so no stability bound exists; give an explicit dt"
        )
    dt_max = cfg.stability_budget / budget if budget > 0.0 else math.inf
    requested = cfg.dt if cfg.dt is not None else dt_max
    if requested > dt_max * (1.0 + 1e-12):
        raise StabilityError(
            f"dt={requested:.6g} violates the stability budget: "
            f"dt * sum_of_floor_intensities = {requested * budget:.4f} > "
            f"{cfg.stability_budget}; required dt <= {dt_max:.6g} days"
        )
    n_steps = max(1, int(math.ceil(market.horizon / requested - 1e-12)))
    dt = market.horizon / n_steps

    risk = grid.risk_levels()
    theta = -np.asarray(market.penalty.terminal(risk), dtype=float)
    drain = np.asarray(market.penalty.running(risk), dtype=float)

    idx, wgt, valid, lam_arr, alpha_arr, beta_arr, z_arr, zp_arr = _build_shift_stencils(
        market, factor_model, grid
    )
    inv_z = 1.0 / z_arr
    floor = market.quote_floor

    # slice bookkeeping: after step m (1-based) theta is the slice at
    # t = horizon - m * dt
    store_all = cfg.store_policy == "all_slices"
    snapshot_steps = {}
    for s in cfg.snapshot_times:
        m = int(round((market.horizon - s) / dt))
        if 0 <= m <= n_steps:
            snapshot_steps.setdefault(m, market.horizon - m * dt)

    stored: list[tuple[float, np.ndarray]] = []
    if store_all or 0 in snapshot_steps:
        stored.append((market.horizon, theta.copy()))

    x_warm = None
    for m in range(1, n_steps + 1):
        t_m = 0.0 if m == n_steps else market.horizon - m * dt
        gathered = theta[idx]  # (rows, corners, nodes)
        interp = np.einsum("rcn,rcn->rn", wgt, gathered)
        p = (theta[None, :] - interp) * inv_z
        p[~valid] = 0.0
        _, ham, _, x_warm = batch_quote_kernel(
            p, lam_arr, alpha_arr, beta_arr, floor, x0=x_warm
        )
        ham[~valid] = 0.0
        theta = theta + dt * (-drain + zp_arr @ ham)
        if not np.isfinite(theta).all():
            raise SolverError(
                f"non-finite values after step {m} of {n_steps} (slice t={t_m:.6g} days); "
                "check penalty scales and grid extents"
            )
        if store_all or m in snapshot_steps:
            stored.append((t_m, theta.copy()))

    if not stored or stored[-1][0] > 0.0:
        stored.append((0.0, theta.copy()))

    stored.sort(key=lambda pair: pair[0])
    times = np.array([t for t, _ in stored])
    values = np.stack([v.reshape(grid.shape) for _, v in stored])
    return ValueSurface(
        grid=grid,
        factor_model=factor_model,
        times=times,
        values=values,
        horizon=market.horizon,
        dt=dt,
        n_steps=n_steps,
        intensity_budget=budget,
    )
