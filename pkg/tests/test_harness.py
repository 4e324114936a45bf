import csv

import numpy as np
import pytest

from eecmdp.errors import ConfigError, InfeasibleError
from eecmdp.harness import (Scenario, SweepSpec, apply_axis, build_system, csv_header,
                            dump_scenario, export_lookup_table, load_scenario, max_snr_db,
                            outcome_rows, parse_scenario, parse_sweep, power_grid, run_solve,
                            run_sweep, scenario_hash, write_csv)


def test_empty_config_gives_defaults(tmp_path):
    path = tmp_path / "empty.ini"
    path.write_text("")
    sc = load_scenario(path)
    assert sc == Scenario()
    assert (sc.num_cells, sc.uts_per_cell, sc.antennas, sc.bins, sc.power_levels) == (2, 1, 128, 4, 20)
    assert (sc.pathloss_exponent, sc.shadow_variance_db, sc.noise_dbm) == (3.7, 10.0, -101.0)
    assert (sc.circuit_power_mw, sc.power_min_mw, sc.power_max_mw, sc.discount) == (10.0, 0.01, 100.0, 0.9)
    assert (sc.num_states, sc.num_actions) == (256, 400)


@pytest.mark.parametrize("text, field", [
    ("[solver]\ndiscount = 1.2\n", "discount"),
    ("[system]\nantennas = 1\n", "antennas"),
    ("[channel]\nbins = 1\n", "bins"),
    ("[power]\npower_spacing = cubic\n", "power_spacing"),
    ("[run]\nreward_mode = fancy\n", "reward_mode"),
])
def test_validation_names_field(text, field):
    with pytest.raises(ConfigError, match=field):
        parse_scenario(text)


def test_state_space_size_q5():
    assert parse_scenario("[channel]\nbins = 5\n").num_states == 625


@pytest.mark.parametrize("text, pattern", [
    ("[system]\nnum_cell = 2\n", "unknown key"),
    ("[solver]\nantennas = 4\n", r"belongs in \[system\]"),
    ("[physics]\nx = 1\n", "unknown section"),
    ("discount = 0.5\n", ":1:"),
    ("[solver]\n\ndiscount = 0.5\ndiscount = 0.6\n", ":4:"),
    ("[solver]\ndiscount = fast\n", "discount"),
])
def test_parse_errors(text, pattern):
    with pytest.raises(ConfigError, match=pattern):
        parse_scenario(text, "cfg")


def test_power_units():
    sc = parse_scenario("[power]\npower_max_mw = 20 dBm\npower_min_mw = 1e-5 W\n"
                        "[channel]\nnoise_dbm = 1e-13 W\n")
    assert sc.power_max_mw == pytest.approx(100.0)
    assert sc.power_min_mw == pytest.approx(0.01)
    assert sc.noise_dbm == pytest.approx(-100.0)


def test_round_trip():
    sc = parse_scenario("[channel]\nbins = 3\nthresholds = 0.5, 1.5\n"
                        "[solver]\ninitial_state = steady\nr_min = 2.5\n"
                        "[power]\npower_cap_mw = 3.3\n")
    assert parse_scenario(dump_scenario(sc)) == sc
    assert parse_scenario(dump_scenario(Scenario())) == Scenario()
    assert scenario_hash(sc) != scenario_hash(Scenario())


def test_memory_budget_checked_at_load():
    with pytest.raises(ConfigError, match="memory_budget_mb"):
        parse_scenario("[channel]\nbins = 8\n[run]\nmemory_budget_mb = 1\n")


def test_sweep_section():
    spec = parse_sweep("[sweep]\naxis = discount\nvalues = 0.3, 0.5\n")
    assert spec == SweepSpec("discount", (0.3, 0.5))
    assert parse_sweep("[solver]\ndiscount = 0.5\n") is None
    with pytest.raises(ConfigError):
        parse_sweep("[sweep]\naxis = colour\nvalues = 1\n")
    with pytest.raises(ConfigError):
        parse_sweep("[sweep]\naxis = discount\n")


def test_power_cap_nests_grid():
    sc = Scenario()
    full = power_grid(sc).levels
    capped = power_grid(sc.replace(power_cap_mw=1.0)).levels
    assert np.array_equal(capped, full[full <= 1e-3 * (1 + 1e-12)])
    assert max_snr_db(sc.replace(power_cap_mw=1.0)) < max_snr_db(sc)


def test_apply_axis():
    sc = Scenario()
    assert apply_axis(sc, "discount", 0.5).discount == 0.5
    assert apply_axis(sc, "antennas_m", 16).antennas == 16
    assert apply_axis(sc, "actions_qa", 10).num_actions == 100
    assert apply_axis(sc, "bins_qs", 3).num_states == 81
    snr = apply_axis(sc, "max_snr", 10.0)
    assert max_snr_db(snr) <= 10.0 + 1e-9
    with pytest.raises(ConfigError):
        apply_axis(sc, "colour", 1)


def test_default_run_close_to_greedy(default_outcome):
    cmp = default_outcome.comparison
    assert abs(cmp.value_difference) <= 0.05 * abs(cmp.value_b)
    assert default_outcome.report.converged


def test_run_solve_deterministic(default_outcome):
    again = run_solve(Scenario())
    assert outcome_rows(again) == outcome_rows(default_outcome)


def test_run_solve_infeasible_tagged():
    with pytest.raises(InfeasibleError, match=r"^\[solver\]"):
        run_solve(Scenario(r_min=1e6))


def test_cache_reused(tmp_path):
    sc = Scenario(bins=3, power_levels=5)
    first = build_system(sc, tmp_path)
    files = list(tmp_path.glob("*.bin"))
    assert len(files) == 1
    stamp = files[0].stat().st_mtime_ns
    second = build_system(sc, tmp_path)
    assert files[0].stat().st_mtime_ns == stamp
    assert np.array_equal(first.tables.reward, second.tables.reward)


def test_csv_schema(tmp_path, default_outcome):
    header = csv_header(Scenario())
    assert header == ["scenario_hash", "axis", "axis_value", "policy", "reward", "slack_l1_k1",
                      "slack_l2_k1", "inner_iters", "outer_iters", "wall_ms", "status"]
    rows = outcome_rows(default_outcome)
    write_csv(tmp_path / "r.csv", header, rows)
    with open(tmp_path / "r.csv") as fh:
        parsed = list(csv.reader(fh))
    assert parsed[0] == header and [r[3] for r in parsed[1:]] == ["cmdp", "ergodic"]
    assert all(r[9] == "" for r in parsed[1:])
    assert outcome_rows(default_outcome, timing=True)[0][9] != ""


def test_lookup_table(tmp_path, default_outcome):
    sys = default_outcome.system
    policy = default_outcome.result.policy
    path = export_lookup_table(policy, sys.codec, sys.grid, tmp_path / "t.txt")
    lines = path.read_text().splitlines()
    assert lines[0] == "# eecmdp-table v1, states=256, cells=2, uts=1"
    assert len(lines) == 257
    grid_mw = sys.grid.levels * 1e3
    for s, line in enumerate(lines[1:]):
        index, bins, action, powers = line.split(" ")
        assert int(index) == s
        assert tuple(map(int, bins.split(","))) == sys.codec.decode(s)
        assert int(action) == policy.action_of_state[s]
        for p in powers.split(","):
            assert np.min(np.abs(grid_mw - float(p)) / grid_mw) < 5e-6
    again = export_lookup_table(policy, sys.codec, sys.grid, tmp_path / "t2.txt")
    assert again.read_bytes() == path.read_bytes()


def test_sweep_marks_failed_points():
    result = run_sweep(Scenario(bins=3, power_levels=5), SweepSpec("antennas_m", (1, 16)))
    statuses = [r[-1] for r in result.rows]
    assert statuses[:2] == ["failed", "failed"] and statuses[2:] == ["ok", "ok"]
    assert len(result.rows[0]) == len(result.header)


def test_sweep_worker_invariant():
    sc = Scenario(bins=3, power_levels=5)
    spec = SweepSpec("discount", (0.5, 0.9))
    assert run_sweep(sc, spec).rows == run_sweep(sc, spec, workers=2).rows
