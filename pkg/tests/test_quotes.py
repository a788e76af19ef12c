"""Quote engine: myopic baseline, feedback quotes, refusal rules, table
export and the policy objects the simulator drives."""

import io

import numpy as np
import pytest

from helpers import (
    make_intensity,
    make_market_1asset,
    make_market_2asset,
    make_sizes,
    rk4_lattice_reference,
)
from rfqmm.errors import OutOfDomainError, ValidationError
from rfqmm.factors import build_factor_model
from rfqmm.hamiltonian import HamiltonianOps
from rfqmm.quotes import (
    REASON_BOX,
    REASON_OK,
    REASON_RISK,
    MyopicPolicy,
    QuoteResult,
    SurfacePolicy,
    myopic_quote,
    optimal_quote,
    quote_table,
    write_quote_table,
)
from rfqmm.solver import FactorGrid, SolverConfig, solve

MYOPIC_REFERENCE = 0.038541882843364745  # frozen root of x - exp(-x) = 1.7, mapped back


@pytest.fixture(scope="module")
def short_setup():
    market = make_market_2asset(horizon=1.5)
    fm = build_factor_model(market.covariance, 2)
    grid = FactorGrid.from_factor_model(fm, market.risk_limit, 41)
    surface = solve(market, fm, grid)
    return market, fm, grid, surface


class TestMyopic:
    def test_reference_value(self):
        assert myopic_quote(make_intensity(30.0, 0.7, 30.0)) == pytest.approx(
            MYOPIC_REFERENCE, abs=1e-12
        )

    def test_arrival_rate_cancels(self):
        base = myopic_quote(make_intensity(30.0, 0.7, 30.0))
        for lam in (10.0, 1.0, 3000.0):
            assert myopic_quote(make_intensity(lam, 0.7, 30.0)) == pytest.approx(
                base, abs=1e-14
            )

    def test_matches_grid_search(self):
        intensity = make_intensity(12.0, -0.4, 55.0)
        grid = np.arange(-1.0, 1.0, 1e-6)
        revenue = grid * intensity.fill_probability(grid)
        best = grid[np.argmax(revenue)]
        assert myopic_quote(intensity) == pytest.approx(best, abs=2e-6)

    def test_policy_is_a_constant_table(self):
        market = make_market_2asset()
        policy = MyopicPolicy(market)
        assert policy.kind == "myopic"
        q = np.zeros((7, 2))
        delta, reason = policy.quote_batch(0.0, q, 1, "ask", 12500.0)
        assert np.all(delta == delta[0])
        assert np.all(reason == REASON_OK)
        # inventory-blind by construction
        q2 = np.full((7, 2), 9.9e4)
        delta2, _ = policy.quote_batch(0.0, q2, 1, "ask", 12500.0)
        np.testing.assert_array_equal(delta, delta2)


class TestOptimalQuote:
    def test_zero_inventory_bid_equals_ask(self, short_setup):
        market, _, _, surface = short_setup
        for asset in (0, 1):
            for z in (6250.0, 25000.0):
                bid = optimal_quote(surface, market, [0.0, 0.0], asset, "bid", z)
                ask = optimal_quote(surface, market, [0.0, 0.0], asset, "ask", z)
                assert not bid.refused and not ask.refused
                assert bid.delta == pytest.approx(ask.delta, abs=1e-9)

    def test_bid_ask_antisymmetry(self, short_setup):
        market, _, _, surface = short_setup
        rng = np.random.default_rng(5)
        qs = rng.uniform(-1.0, 1.0, size=(25, 2)) * 40000.0
        for q in qs:
            bid = optimal_quote(surface, market, q, 0, "bid", 12500.0)
            ask = optimal_quote(surface, market, -q, 0, "ask", 12500.0)
            assert bid.delta == pytest.approx(ask.delta, abs=1e-9)

    def test_bid_skews_away_from_long_inventory(self, short_setup):
        market, _, _, surface = short_setup
        line = np.linspace(-60000.0, 60000.0, 13)
        deltas = [
            optimal_quote(surface, market, [q1, 0.0], 0, "bid", 6250.0).delta
            for q1 in line
        ]
        diffs = np.diff(deltas)
        assert np.all(diffs >= -1e-12)
        assert diffs.max() > 1e-4  # strictly skewing somewhere, not flat

    def test_larger_size_quotes_more_conservatively(self, short_setup):
        market, _, _, surface = short_setup
        deltas = [
            optimal_quote(surface, market, [20000.0, 0.0], 0, "bid", z).delta
            for z in (6250.0, 12500.0, 18750.0, 25000.0)
        ]
        assert np.all(np.diff(deltas) > 0.0)

    def test_quotes_respect_floor(self, short_setup):
        market, _, _, surface = short_setup
        rng = np.random.default_rng(9)
        qs = rng.uniform(-1.0, 1.0, size=(50, 2)) * 80000.0
        for q in qs:
            res = optimal_quote(surface, market, q, 1, "ask", 18750.0)
            if not res.refused:
                assert res.delta >= -market.quote_floor

    def test_matches_one_dimensional_oracle(self):
        sizes = make_sizes(sizes=(10000.0, 20000.0), probs=(0.7, 0.3))
        market = make_market_1asset(
            sigma=1.2,
            horizon=1.0,
            gamma=8e-7,
            risk_limit=(10 * 10000.0) ** 2 * 1.44,
            lam=30.0,
            sizes=sizes,
        )
        fm = build_factor_model(market.covariance, 1)
        grid = FactorGrid.from_factor_model(fm, market.risk_limit, 21)
        surface = solve(market, fm, grid, SolverConfig(dt=0.002))
        reference = rk4_lattice_reference(market, grid, n_steps=4000)
        ops = HamiltonianOps(market.assets[0].intensity("bid"), market.quote_floor)
        nodes = grid.axes[0]
        z = 10000.0
        for j in range(5, 16):  # interior nodes, step of one base atom
            p_ref = (reference[j] - reference[j + 1]) / z
            want = ops.delta_star(p_ref)
            got = optimal_quote(surface, market, [nodes[j]], 0, "bid", z)
            assert not got.refused
            assert got.delta == pytest.approx(want, abs=1e-3)

    def test_input_validation(self, short_setup):
        market, _, _, surface = short_setup
        with pytest.raises(ValidationError, match="asset index"):
            optimal_quote(surface, market, [0.0, 0.0], 7, "bid", 100.0)
        with pytest.raises(ValidationError, match="side"):
            optimal_quote(surface, market, [0.0, 0.0], 0, "buy", 100.0)
        with pytest.raises(ValidationError, match="size"):
            optimal_quote(surface, market, [0.0, 0.0], 0, "bid", 0.0)
        with pytest.raises(ValidationError, match="components"):
            optimal_quote(surface, market, [0.0, 0.0, 1.0], 0, "bid", 100.0)


class TestRefusals:
    @staticmethod
    def hot_state(fm, grid):
        # admissible (risk 0.94 B) but close enough to the ellipsoid that a
        # large buy breaches the limit while staying inside the box
        f = np.array([0.8, 0.55]) * grid.half_widths
        return fm.loadings @ f

    def test_risk_limit_refusal(self, short_setup):
        market, fm, grid, surface = short_setup
        q = self.hot_state(fm, grid)
        assert q @ market.covariance @ q <= market.risk_limit
        res = optimal_quote(surface, market, q, 0, "bid", 25000.0)
        assert res.refused
        assert res.reason == REASON_RISK
        assert np.isnan(res.delta)

    def test_box_refusal(self, short_setup):
        market, fm, _, surface = short_setup
        f = np.array([surface.grid.half_widths[0] * 0.999, 0.0])
        q = fm.loadings @ f
        res = optimal_quote(surface, market, q, 0, "bid", 25000.0)
        assert res.refused
        assert res.reason == REASON_BOX

    def test_risk_reducing_trade_is_quoted_from_hot_state(self, short_setup):
        market, fm, grid, surface = short_setup
        q = self.hot_state(fm, grid)  # positive factor exposure, so sell
        res = optimal_quote(surface, market, q, 0, "ask", 25000.0)
        assert not res.refused

    def test_out_of_domain_state_raises(self, short_setup):
        market, fm, _, surface = short_setup
        f = np.array([surface.grid.half_widths[0] * 1.1, 0.0])
        q = fm.loadings @ f
        with pytest.raises(OutOfDomainError):
            optimal_quote(surface, market, q, 0, "bid", 6250.0)


class TestPolicies:
    def test_surface_policy_matches_scalar_calls(self, short_setup):
        market, _, _, surface = short_setup
        policy = SurfacePolicy(surface, market)
        assert policy.kind == "surface"
        rng = np.random.default_rng(2)
        qs = rng.uniform(-1.0, 1.0, size=(30, 2)) * 50000.0
        delta, reason = policy.quote_batch(0.0, qs, 1, "bid", 12500.0)
        for row, q in enumerate(qs):
            res = optimal_quote(surface, market, q, 1, "bid", 12500.0)
            assert reason[row] == res.reason
            if res.refused:
                assert np.isnan(delta[row])
            else:
                assert delta[row] == res.delta

    def test_cached_risk_inputs_change_nothing(self, short_setup):
        market, _, _, surface = short_setup
        policy = SurfacePolicy(surface, market)
        rng = np.random.default_rng(4)
        qs = rng.uniform(-1.0, 1.0, size=(20, 2)) * 50000.0
        sq = qs @ market.covariance
        risk = np.einsum("nd,nd->n", sq, qs)
        base = policy.quote_batch(0.0, qs, 0, "ask", 6250.0)
        cached = policy.quote_batch(0.0, qs, 0, "ask", 6250.0, sq=sq, risk=risk)
        np.testing.assert_array_equal(base[0], cached[0])

    def test_adjusted_kind_shifts_the_reservation(self, short_setup):
        market, _, _, surface = short_setup

        class Bump:
            def reservation_shift(self, t, inventories, asset, side, size):
                return np.full(np.asarray(inventories).shape[0], 0.01)

        plain = SurfacePolicy(surface, market)
        bumped = SurfacePolicy(surface, market, adjuster=Bump())
        assert bumped.kind == "surface_mc_adjusted"
        qs = np.array([[0.0, 0.0], [15000.0, -5000.0]])
        d0, _ = plain.quote_batch(0.0, qs, 0, "bid", 6250.0)
        d1, _ = bumped.quote_batch(0.0, qs, 0, "bid", 6250.0)
        # a higher reservation level widens the quote
        assert np.all(d1 > d0)
        assert np.all(d1 >= -market.quote_floor)

    def test_per_row_times_group_to_slices(self):
        market = make_market_2asset(horizon=0.05)
        fm = build_factor_model(market.covariance, 2)
        grid = FactorGrid.from_factor_model(fm, market.risk_limit, 21)
        surface = solve(market, fm, grid, SolverConfig(store_policy="all_slices"))
        policy = SurfacePolicy(surface, market)
        qs = np.array([[0.0, 0.0], [10000.0, 0.0], [0.0, 5000.0]])
        times = np.array([0.0, market.horizon, 0.0])
        mixed, _ = policy.quote_batch(times, qs, 0, "bid", 6250.0)
        at0, _ = policy.quote_batch(0.0, qs, 0, "bid", 6250.0)
        atT, _ = policy.quote_batch(market.horizon, qs, 0, "bid", 6250.0)
        assert mixed[0] == at0[0]
        assert mixed[1] == atT[1]
        assert mixed[2] == at0[2]


class TestQuoteTable:
    def test_single_row_matches_direct_call(self, short_setup):
        market, _, _, surface = short_setup
        rows = quote_table(surface, market, [[10000.0, -5000.0]], sizes=[12500.0])
        assert len(rows) == 4  # 2 assets x 2 sides
        for q, asset_id, side, size, delta, reason in rows:
            i = int(asset_id[1:])
            res = optimal_quote(surface, market, list(q), i, side, size)
            assert delta == res.delta
            assert reason == res.reason

    def test_default_sizes_come_from_the_market(self, short_setup):
        market, _, _, surface = short_setup
        rows = quote_table(surface, market, [[0.0, 0.0]])
        assert len(rows) == 2 * 2 * 4
        sizes = [r[3] for r in rows[:4]]
        assert sizes == sorted(sizes)

    def test_empty_size_list_gives_empty_table(self, short_setup):
        market, _, _, surface = short_setup
        assert quote_table(surface, market, [[0.0, 0.0]], sizes=[]) == []

    def test_csv_round_trip(self, short_setup):
        market, fm, _, surface = short_setup
        hot = fm.loadings @ (0.9 * surface.grid.half_widths)
        rows = quote_table(surface, market, [[0.0, 0.0], hot], sizes=[6250.0])
        buf = io.StringIO()
        write_quote_table(buf, rows, market.n_assets)
        lines = buf.getvalue().splitlines()
        assert lines[0] == "q1,q2,asset,side,size,delta,reason"
        assert len(lines) == 1 + len(rows)
        refused = [ln for ln in lines[1:] if ln.endswith(REASON_RISK)]
        assert refused
        for ln in refused:
            assert ",," in ln  # empty delta field
        quoted = [ln for ln in lines[1:] if ln.endswith(REASON_OK)]
        assert quoted
        # emission is deterministic
        buf2 = io.StringIO()
        write_quote_table(buf2, rows, market.n_assets)
        assert buf.getvalue() == buf2.getvalue()

    def test_result_dataclass_flags(self):
        ok = QuoteResult(delta=0.02, reason=REASON_OK, reservation=0.0)
        bad = QuoteResult(delta=float("nan"), reason=REASON_RISK, reservation=float("nan"))
        assert not ok.refused
        assert bad.refused
