"""Pre-drawn randomness for the RFQ simulator.

Every (asset, side, size-atom) combination is one arrival bucket with the
constant rate ``lambda_rfq * p_atom``.  A path's randomness is drawn up
front in a fixed order so that the stream a policy consumes does not depend
on the policy itself:

    1. one Poisson count per bucket (single vectorised call),
    2. per bucket, in table order: arrival times (uniform on [0, T]), then
       one thinning uniform per arrival,
    3. the market shocks, one draw per inter-arrival interval (``d`` draws
       per interval when full price paths are requested).

Arrivals are materialised whether or not a quote ends up filled, so two
policies simulated from the same seed see identical arrival times, identical
thinning uniforms and identical market shocks: common-random-number
comparisons are exact.

Path ``i`` of a run seeded with ``seed`` uses the generator
``PCG64(SeedSequence(seed, spawn_key=(i,)))``; paths are independent and
any contiguous subset of paths is reproducible in isolation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import SIDES, MarketSpec

BID, ASK = 0, 1
SIDE_SIGNS = (1.0, -1.0)  # a filled bid buys, a filled ask sells


@dataclass(frozen=True)
class BucketTable:
    """Flat view of every arrival bucket, ordered asset, then side, then size."""

    asset: np.ndarray
    side: np.ndarray
    size: np.ndarray
    arrival_rate: np.ndarray
    lam: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray

    @classmethod
    def from_market(cls, market: MarketSpec) -> "BucketTable":
        asset, side, size, rate, lam, alpha, beta = [], [], [], [], [], [], []
        for i, spec in enumerate(market.assets):
            for s, side_name in enumerate(SIDES):
                intensity = spec.intensity(side_name)
                dist = spec.sizes(side_name)
                for z, p in zip(dist.sizes, dist.probabilities):
                    asset.append(i)
                    side.append(s)
                    size.append(z)
                    rate.append(intensity.lambda_rfq * p)
                    lam.append(intensity.lambda_rfq)
                    alpha.append(intensity.alpha)
                    beta.append(intensity.beta)
        return cls(
            asset=np.array(asset, dtype=np.int64),
            side=np.array(side, dtype=np.int64),
            size=np.array(size, dtype=float),
            arrival_rate=np.array(rate, dtype=float),
            lam=np.array(lam, dtype=float),
            alpha=np.array(alpha, dtype=float),
            beta=np.array(beta, dtype=float),
        )

    def __len__(self) -> int:
        return self.asset.size

    def label(self, b: int, market: MarketSpec) -> str:
        return (
            f"{market.assets[self.asset[b]].asset_id}"
            f":{SIDES[self.side[b]]}:{self.size[b]:g}"
        )


def path_generator(seed: int, path: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(path,))))


@dataclass(frozen=True)
class PathEvents:
    """One path's arrivals, time-sorted, plus its market shocks.

    ``normals`` has ``n_events + 1`` rows (one per inter-arrival interval,
    including the final stub to the horizon); it is a matrix of per-asset
    shocks in price-path mode and a vector otherwise.
    """

    times: np.ndarray
    bucket: np.ndarray
    thin: np.ndarray
    normals: np.ndarray

    @property
    def n_events(self) -> int:
        return self.times.size


def draw_path_events(
    buckets: BucketTable,
    horizon: float,
    rng: np.random.Generator,
    price_dims: int = 0,
) -> PathEvents:
    counts = rng.poisson(buckets.arrival_rate * horizon)
    times, bucket_ix, thin = [], [], []
    for b, n in enumerate(counts):
        times.append(rng.uniform(0.0, horizon, size=n))
        thin.append(rng.uniform(0.0, 1.0, size=n))
        bucket_ix.append(np.full(n, b, dtype=np.int64))
    times = np.concatenate(times) if times else np.empty(0)
    thin = np.concatenate(thin) if thin else np.empty(0)
    bucket_ix = np.concatenate(bucket_ix) if bucket_ix else np.empty(0, dtype=np.int64)
    order = np.argsort(times, kind="stable")
    n_events = times.size
    if price_dims:
        normals = rng.standard_normal((n_events + 1) * price_dims).reshape(
            n_events + 1, price_dims
        )
    else:
        normals = rng.standard_normal(n_events + 1)
    return PathEvents(
        times=times[order], bucket=bucket_ix[order], thin=thin[order], normals=normals
    )
