import math

import numpy as np
import pytest
from scipy import stats

from eecmdp.errors import ConfigError, DomainError, MonteCarloError, NumericalError
from eecmdp.fsmc import build_fsmc
from eecmdp.phy import (CACHE_MAGIC, LinkBudget, action_levels, build_reward_tables,
                        dbm_to_watts, ee_reward, instantaneous_rate, make_power_grid,
                        monte_carlo_reward, monte_carlo_state, read_table_cache,
                        representative_reward, sample_channel, sinr, state_rng,
                        write_table_cache, zf_receiver)

BETAS = np.array([[[2e-3], [4e-5]], [[6e-5], [1e-3]]])


def small_budget(antennas=8, betas=BETAS, noise=1e-6):
    return LinkBudget(betas, antennas, noise, np.full(betas.shape[0], 0.01))


def cn(rng, shape):
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / math.sqrt(2)


def test_dbm_conversion():
    assert dbm_to_watts(30.0) == pytest.approx(1.0)
    assert dbm_to_watts(-101.0) == pytest.approx(10 ** -13.1, rel=1e-12)


@pytest.mark.parametrize("spacing", ["log", "linear"])
def test_power_grid_endpoints(spacing):
    grid = make_power_grid(1e-5, 0.1, 20, spacing)
    assert grid.size == 20
    assert grid.levels[0] == 1e-5 and grid.levels[-1] == 0.1
    assert np.all(np.diff(grid.levels) > 0)
    if spacing == "log":
        np.testing.assert_allclose(np.diff(np.log(grid.levels)), math.log(1e4) / 19, rtol=1e-10)


def test_power_grid_rejects_bad_ranges():
    with pytest.raises(ConfigError):
        make_power_grid(0.1, 0.01, 5)
    with pytest.raises(ConfigError):
        make_power_grid(0.01, 0.1, 5, "cubic")


def test_action_levels_mixed_radix():
    levels = action_levels(3, 2)
    assert levels.shape == (9, 2)
    assert levels[5].tolist() == [1, 2]


def test_zf_scalar_and_orthonormal():
    rng = np.random.default_rng(0)
    g = cn(rng, (6, 1))
    a = zf_receiver(g)
    np.testing.assert_allclose(a, g / np.vdot(g, g).real, atol=1e-15)
    assert np.vdot(a[:, 0], g[:, 0]) == pytest.approx(1.0, abs=1e-12)
    q, _ = np.linalg.qr(cn(rng, (5, 3)))
    np.testing.assert_allclose(zf_receiver(q), q, atol=1e-12)


@pytest.mark.parametrize("m, k", [(m, k) for m in (2, 3, 8, 17, 64) for k in (1, 2, 3, 4) if k <= m])
def test_zf_nulling(m, k):
    g = cn(np.random.default_rng(m * 10 + k), (m, k))
    a = zf_receiver(g)
    assert np.max(np.abs(a.conj().T @ g - np.eye(k))) < 1e-8


def test_zf_rank_deficient():
    g = np.ones((4, 2), dtype=complex)
    with pytest.raises(NumericalError, match="condition number"):
        zf_receiver(g)
    with pytest.raises(DomainError):
        zf_receiver(np.ones((1, 2)))


def test_sinr_single_cell_scalar():
    g = cn(np.random.default_rng(1), (8, 1))
    gamma = sinr(zf_receiver(g), [g], np.array([[0.2]]), 0.01, 0)
    assert gamma[0] == pytest.approx(0.2 * np.vdot(g, g).real / 0.01, rel=1e-12)


def test_sinr_intra_cell_term_vanishes():
    rng = np.random.default_rng(2)
    g = cn(rng, (16, 3))
    a = zf_receiver(g)
    for k in range(3):
        for kk in range(3):
            if kk != k:
                assert abs(np.vdot(a[:, k], g[:, kk])) ** 2 < 1e-16


def test_sinr_two_cells_by_hand():
    rng = np.random.default_rng(3)
    g00, g01 = cn(rng, (4, 1)), cn(rng, (4, 1))
    p = np.array([[0.3], [0.7]])
    a = zf_receiver(g00)[:, 0]
    desired = 0.3 * abs(np.sum(a.conj() * g00[:, 0])) ** 2
    inter = 0.7 * abs(np.sum(a.conj() * g01[:, 0])) ** 2
    noise = 0.05 * np.sum(np.abs(a) ** 2)
    got = sinr(zf_receiver(g00), [g00, g01], p, 0.05, 0)
    assert got[0] == pytest.approx(desired / (inter + noise), rel=1e-12)


def test_sinr_monotone_in_powers():
    rng = np.random.default_rng(4)
    g = [cn(rng, (6, 2)), cn(rng, (6, 2))]
    a = zf_receiver(g[0])
    base = np.array([[0.1, 0.2], [0.3, 0.4]])
    g0 = sinr(a, g, base, 0.01, 0)
    up = base.copy()
    up[0, 0] *= 2
    assert sinr(a, g, up, 0.01, 0)[0] > g0[0]
    up = base.copy()
    up[1, 1] *= 2
    assert np.all(sinr(a, g, up, 0.01, 0) <= g0)


@pytest.mark.parametrize("gamma, rate", [(0.0, 0.0), (1.0, 1.0), (3.0, 2.0)])
def test_instantaneous_rate(gamma, rate):
    assert instantaneous_rate(gamma) == pytest.approx(rate, abs=1e-15)


def test_instantaneous_rate_rejects_negative():
    with pytest.raises(DomainError):
        instantaneous_rate(-0.1)


def test_ee_reward_examples():
    assert ee_reward([[1.0]], [[0.01]], 0.01) == pytest.approx(50.0, rel=1e-14)
    assert ee_reward([[0.0, 0.0]], [[0.01, 0.02]], 0.01) == 0.0
    single = ee_reward([[2.5]], [[0.03]], 0.01)
    assert ee_reward([[2.5, 2.5]], [[0.03, 0.03]], [0.01]) == pytest.approx(2 * single, rel=1e-14)
    with pytest.raises(DomainError):
        ee_reward([[1.0]], [[0.0]], 0.0)


def test_ee_reward_decreasing_in_power():
    r = [ee_reward([[1.5]], [[p]], c) for p, c in [(0.01, 0.01), (0.02, 0.01), (0.02, 0.02)]]
    assert r[0] > r[1] > r[2]


def test_sample_channel_determinism_and_moments():
    budget = small_budget(antennas=8)
    a = sample_channel(budget, np.random.default_rng(5))
    b = sample_channel(budget, np.random.default_rng(5))
    assert np.array_equal(a.gains, b.gains)
    rng = np.random.default_rng(6)
    draws = np.array([np.sum(np.abs(sample_channel(budget, rng).gains[0, 1]) ** 2, axis=0)[0] / 8
                      for _ in range(10 ** 4)])
    se = draws.std(ddof=1) / math.sqrt(draws.size)
    assert abs(draws.mean() - BETAS[0, 1, 0]) < 3 * se


def test_sample_channel_exponential_power():
    budget = LinkBudget(np.ones((1, 1, 1)), 1, 1.0, np.array([0.01]))
    rng = np.random.default_rng(7)
    power = np.array([abs(sample_channel(budget, rng).gains[0, 0, 0, 0]) ** 2 for _ in range(4000)])
    assert stats.kstest(power, "expon").pvalue > 0.01


# Representative mode -------------------------------------------------------

@pytest.fixture(scope="module")
def small_system():
    budget = small_budget()
    fsmc = build_fsmc(BETAS, 3, 0.05)
    grid = make_power_grid(1e-4, 0.1, 4)
    return fsmc, budget, grid


def surrogate_by_hand(state, action, fsmc, budget, grid):
    """Per-term recomputation of the surrogate SINR, rate and reward."""
    bins = fsmc.codec.decode(state)
    levels = action_levels(grid.size, 2)[action]
    p = [grid.levels[levels[0]], grid.levels[levels[1]]]
    rep = {link: fsmc.quantizers[n].representative[bins[n]]
           for n, link in enumerate(fsmc.codec.links)}
    noise = budget.noise_w / (budget.antennas - 1)
    reward, rates = 0.0, []
    for l in range(2):
        other = 1 - l
        gamma = p[l] * rep[(l, l, 0, 0)] / (p[other] * rep[(l, other, 0, 0)] + noise)
        rate = math.log2(1 + gamma)
        rates.append(rate)
        reward += rate / (p[l] + 0.01)
    return reward, rates


def test_representative_matches_hand_evaluation(small_system):
    fsmc, budget, grid = small_system
    for state, action in [(0, 0), (17, 5), (80, 15), (40, 9)]:
        r, rates = representative_reward(state, action, fsmc, budget, grid)
        ref, ref_rates = surrogate_by_hand(state, action, fsmc, budget, grid)
        assert r == pytest.approx(ref, rel=1e-13)
        np.testing.assert_allclose(rates, ref_rates, rtol=1e-13)


def test_representative_monotone(small_system):
    fsmc, budget, grid = small_system
    codec = fsmc.codec
    tables = build_reward_tables(fsmc, budget, grid)
    # Own power up at fixed other power raises that UT's rate.
    rates = tables.cost[0].reshape(-1, 4, 4)
    assert np.all(np.diff(rates, axis=1) > 0)
    # Raising the desired-link bin of UT 0 raises the reward.
    for bins in [(0, 1, 2, 0), (1, 0, 0, 2)]:
        lo = codec.encode(bins)
        hi = codec.encode((bins[0] + 1,) + bins[1:])
        assert np.all(tables.reward[hi] > tables.reward[lo])


def test_representative_deterministic(small_system):
    fsmc, budget, grid = small_system
    r1, c1 = representative_reward(33, 7, fsmc, budget, grid)
    r2, c2 = representative_reward(33, 7, fsmc, budget, grid)
    assert r1 == r2 and np.array_equal(c1, c2)
    a = build_reward_tables(fsmc, budget, grid)
    b = build_reward_tables(fsmc, budget, grid)
    assert np.array_equal(a.reward, b.reward) and np.array_equal(a.cost, b.cost)


def test_representative_needs_spare_antennas():
    budget = LinkBudget(BETAS, 1, 1e-6, np.full(2, 0.01))
    with pytest.raises(ConfigError):
        build_reward_tables(build_fsmc(BETAS, 2, 0.05), budget, make_power_grid(0.01, 0.1, 2))


def test_reward_table_shapes_default(default_outcome):
    tables = default_outcome.system.tables
    assert tables.reward.shape == (256, 400)
    assert tables.cost.shape == (2, 256, 400)
    assert np.all(tables.reward >= 0)


def test_doubling_betas_raises_every_reward(small_system):
    _, budget, grid = small_system
    base = build_reward_tables(build_fsmc(BETAS, 3, 0.05), budget, grid)
    doubled_budget = small_budget(betas=2 * BETAS)
    doubled = build_reward_tables(build_fsmc(2 * BETAS, 3, 0.05), doubled_budget, grid)
    assert np.all(doubled.reward > base.reward)


def test_memory_budget_reports_bytes(small_system):
    fsmc, budget, grid = small_system
    with pytest.raises(ConfigError, match="bytes"):
        build_reward_tables(fsmc, budget, grid, memory_budget=1000)


# Monte-Carlo mode ----------------------------------------------------------

def test_monte_carlo_deterministic(small_system):
    fsmc, budget, grid = small_system
    a = monte_carlo_reward(13, 6, 50, fsmc, budget, grid, state_rng(9, 13))
    b = monte_carlo_reward(13, 6, 50, fsmc, budget, grid, state_rng(9, 13))
    assert a[0] == b[0] and np.array_equal(a[1], b[1]) and a[2] == b[2]


def test_monte_carlo_worker_invariant(small_system):
    fsmc, budget, grid = small_system
    one = build_reward_tables(fsmc, budget, grid, "monte_carlo", mc_samples=5, seed=3)
    many = build_reward_tables(fsmc, budget, grid, "monte_carlo", mc_samples=5, seed=3, workers=4)
    assert np.array_equal(one.reward, many.reward) and np.array_equal(one.cost, many.cost)


def test_monte_carlo_single_bin_matches_unconditioned():
    budget = small_budget()
    fsmc = build_fsmc(BETAS, 1, 0.05, thresholds=[])
    grid = make_power_grid(0.01, 0.05, 2)
    action = 1
    powers = grid.levels[action_levels(2, 2)[action]].reshape(2, 1)
    r, _, se = monte_carlo_reward(0, action, 4000, fsmc, budget, grid, state_rng(1, 0))
    rng = np.random.default_rng(11)
    plain = []
    for _ in range(4000):
        ch = sample_channel(budget, rng)
        gammas = np.array([sinr(zf_receiver(ch.gains[l, l]), [ch.gains[l, 0], ch.gains[l, 1]],
                                powers, budget.noise_w, l) for l in range(2)])
        plain.append(ee_reward(gammas, powers, budget.circuit_w))
    plain = np.array(plain)
    se_plain = plain.std(ddof=1) / math.sqrt(plain.size)
    assert abs(r - plain.mean()) < 3 * math.hypot(se, se_plain)


def test_monte_carlo_conditioning_respects_bins(small_system):
    fsmc, budget, grid = small_system
    low = fsmc.codec.encode((0, 0, 0, 0))
    high = fsmc.codec.encode((2, 0, 0, 2))
    r_low = monte_carlo_state(low, fsmc, budget, grid, 200, state_rng(0, low))[0]
    r_high = monte_carlo_state(high, fsmc, budget, grid, 200, state_rng(0, high))[0]
    assert np.all(r_high > r_low)


def test_monte_carlo_standard_error_scaling(small_system):
    fsmc, budget, grid = small_system
    se = [monte_carlo_state(5, fsmc, budget, grid, n, state_rng(2, n))[2] for n in (100, 1000, 10000)]
    for coarse, fine in zip(se, se[1:]):
        ratio = coarse / fine
        assert np.all((ratio > math.sqrt(10) / 2) & (ratio < 2 * math.sqrt(10)))


def test_monte_carlo_low_acceptance_aborts():
    # Four links per block at 1/12 each: acceptance 12**-4 is below the floor.
    betas = np.repeat(BETAS, 2, axis=2)
    budget = small_budget(betas=betas)
    fsmc = build_fsmc(betas, 12, 0.001)
    grid = make_power_grid(0.01, 0.05, 2)
    with pytest.raises(MonteCarloError, match="larger bins"):
        monte_carlo_reward(0, 0, 5, fsmc, budget, grid, state_rng(0, 0))


def test_monte_carlo_rejects_zero_samples(small_system):
    fsmc, budget, grid = small_system
    with pytest.raises(DomainError):
        monte_carlo_reward(0, 0, 0, fsmc, budget, grid, state_rng(0, 0))


# Cache ---------------------------------------------------------------------

def test_cache_round_trip(tmp_path, small_system):
    fsmc, budget, grid = small_system
    tables = build_reward_tables(fsmc, budget, grid)
    path = tmp_path / "t.bin"
    write_table_cache(path, tables, "abc")
    raw = path.read_bytes()
    assert raw[:8] == CACHE_MAGIC
    back = read_table_cache(path, "abc")
    assert np.array_equal(back.reward, tables.reward) and np.array_equal(back.cost, tables.cost)
    assert read_table_cache(path, "other") is None
    path.write_bytes(raw[:-8])
    assert read_table_cache(path, "abc") is None
    assert read_table_cache(tmp_path / "missing.bin", "abc") is None
