"""Scenario configuration, end-to-end runs, parameter sweeps and file export."""
from __future__ import annotations

import configparser
import csv
import dataclasses
import hashlib
import io
import logging
import math
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .baseline import BaselineSpec, PolicyComparison, compare_policies, greedy_ergodic_policy
from .errors import ConfigError, EecmdpError, InfeasibleError
from .fsmc import FsmcModel, StateCodec, build_fsmc, draw_large_scale_gains
from .phy import (LinkBudget, PowerGrid, RewardTables, action_levels, build_reward_tables,
                  dbm_to_watts, make_power_grid, read_table_cache, table_bytes,
                  write_table_cache)
from .solver import STEADY, DiscountedMdp, Policy, SolveResult, SolveSettings, solve_cmdp

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Scenario
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Scenario:
    # system
    num_cells: int = 2
    uts_per_cell: int = 1
    antennas: int = 128
    # channel
    pathloss_exponent: float = 3.7
    pathloss_constant: float = 1.0
    shadow_variance_db: float = 10.0
    noise_dbm: float = -101.0
    bins: int = 4
    thresholds: tuple[float, ...] | None = None
    normalized_doppler: float = 0.05
    # geometry
    bs_spacing_m: float = 1000.0
    cell_radius_m: float = 500.0
    min_distance_m: float = 35.0
    # power
    circuit_power_mw: float = 10.0
    power_min_mw: float = 1e-2
    power_max_mw: float = 1e2
    power_levels: int = 20
    power_spacing: str = "log"
    power_cap_mw: float | None = None
    # solver
    discount: float = 0.9
    r_min: float = 0.0
    epsilon: float = 1e-4
    rho_init: float = 10.0
    max_inner_iters: int = 100_000
    max_outer_iters: int = 5_000
    rho_ceiling: float = 1e6
    initial_state: int | str = 0
    normalize_by_horizon: bool = False
    warm_start: bool = True
    # baseline
    feasibility_rule: str = "none"
    r_inst: float = 0.0
    # run
    seed: int = 1
    reward_mode: str = "representative"
    mc_samples: int = 200
    memory_budget_mb: float = 1024.0

    @property
    def num_uts(self) -> int:
        return self.num_cells * self.uts_per_cell

    @property
    def num_states(self) -> int:
        return self.bins ** (self.num_cells ** 2 * self.uts_per_cell ** 2)

    @property
    def num_actions(self) -> int:
        return power_grid(self).size ** self.num_uts

    @property
    def noise_w(self) -> float:
        return dbm_to_watts(self.noise_dbm)

    def replace(self, **changes) -> "Scenario":
        return validate_scenario(dataclasses.replace(self, **changes))


SECTIONS = {
    "system": ("num_cells", "uts_per_cell", "antennas"),
    "channel": ("pathloss_exponent", "pathloss_constant", "shadow_variance_db", "noise_dbm",
                "bins", "thresholds", "normalized_doppler"),
    "geometry": ("bs_spacing_m", "cell_radius_m", "min_distance_m"),
    "power": ("circuit_power_mw", "power_min_mw", "power_max_mw", "power_levels",
              "power_spacing", "power_cap_mw"),
    "solver": ("discount", "r_min", "epsilon", "rho_init", "max_inner_iters",
               "max_outer_iters", "rho_ceiling", "initial_state", "normalize_by_horizon",
               "warm_start"),
    "baseline": ("feasibility_rule", "r_inst"),
    "run": ("seed", "reward_mode", "mc_samples", "memory_budget_mb"),
}
SWEEP_SECTION = "sweep"
_FIELDS = {f.name: f for f in dataclasses.fields(Scenario)}
_SECTION_OF = {key: sec for sec, keys in SECTIONS.items() for key in keys}

_POWER_RE = re.compile(r"^\s*([-+0-9.eE]+)\s*(mw|w|dbm)?\s*$", re.IGNORECASE)


def _parse_power(key: str, text: str) -> float:
    """Number with an optional mW / W / dBm suffix, converted to the key's unit."""
    m = _POWER_RE.match(text)
    if not m:
        raise ConfigError(f"{key}: cannot parse power {text!r}")
    value = float(m.group(1))
    unit = (m.group(2) or "").lower()
    target = "dbm" if key.endswith("_dbm") else "mw"
    if not unit or unit == target:
        return value
    if unit == "dbm":
        watts = dbm_to_watts(value)
    elif unit == "mw":
        watts = value * 1e-3
    else:
        watts = value
    if target == "mw":
        return watts * 1e3
    if watts <= 0:
        raise ConfigError(f"{key}: power must be positive to express in dBm")
    return 10 * math.log10(watts) + 30


def _parse_value(key: str, text: str):
    ftype = _FIELDS[key].type
    text = text.strip()
    try:
        if key == "power_cap_mw" and text.lower() in ("", "none"):
            return None
        if key.endswith("_mw") or key.endswith("_dbm"):
            return _parse_power(key, text)
        if key == "thresholds":
            if text.lower() in ("", "none", "equiprobable"):
                return None
            return tuple(float(x) for x in text.split(","))
        if key == "initial_state":
            return STEADY if text.lower() == STEADY else int(text)
        if ftype in ("bool", bool):
            low = text.lower()
            if low not in ("true", "false", "yes", "no", "1", "0", "on", "off"):
                raise ValueError(text)
            return low in ("true", "yes", "1", "on")
        if ftype in ("int", int):
            return int(text)
        if ftype in ("float", float):
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"{key}: invalid value {text!r}") from None


def validate_scenario(sc: Scenario) -> Scenario:
    """Range-check every field; returns ``sc`` unchanged or raises ``ConfigError``."""
    def need(cond, name, why):
        if not cond:
            raise ConfigError(f"{name}: {why} (got {getattr(sc, name)!r})")

    need(sc.num_cells >= 1, "num_cells", "must be >= 1")
    need(sc.uts_per_cell >= 1, "uts_per_cell", "must be >= 1")
    need(sc.antennas > sc.uts_per_cell, "antennas", "ZF needs more antennas than UTs per cell")
    for name in ("pathloss_constant", "normalized_doppler", "bs_spacing_m", "cell_radius_m",
                 "min_distance_m", "circuit_power_mw", "power_min_mw", "power_max_mw",
                 "epsilon", "rho_init", "rho_ceiling", "memory_budget_mb"):
        need(getattr(sc, name) > 0, name, "must be positive")
    need(sc.pathloss_exponent > 1, "pathloss_exponent", "must exceed 1")
    need(sc.shadow_variance_db >= 0, "shadow_variance_db", "must be nonnegative")
    need(sc.min_distance_m < sc.cell_radius_m, "min_distance_m", "must be below cell_radius_m")
    need(sc.power_min_mw <= sc.power_max_mw, "power_min_mw", "must not exceed power_max_mw")
    need(sc.power_levels >= 1, "power_levels", "must be >= 1")
    need(sc.power_cap_mw is None or sc.power_cap_mw >= sc.power_min_mw, "power_cap_mw",
         "must be at least power_min_mw")
    need(sc.power_spacing in ("log", "linear"), "power_spacing", "must be log or linear")
    need(sc.bins >= 2 or sc.thresholds is not None, "bins", "equiprobable quantization needs >= 2")
    need(sc.bins >= 1, "bins", "must be >= 1")
    if sc.thresholds is not None:
        need(len(sc.thresholds) == sc.bins - 1, "thresholds", "need bins - 1 interior values")
        need(all(t > 0 for t in sc.thresholds) and
             all(b > a for a, b in zip(sc.thresholds, sc.thresholds[1:])),
             "thresholds", "must be positive and strictly increasing")
    need(0 < sc.discount < 1, "discount", "must lie in (0, 1)")
    need(sc.r_min >= 0, "r_min", "must be nonnegative")
    need(sc.max_inner_iters >= 1 and sc.max_outer_iters >= 1, "max_outer_iters", "must be >= 1")
    need(sc.initial_state == STEADY or 0 <= sc.initial_state < sc.num_states,
         "initial_state", f"must be 'steady' or an index below {sc.num_states}")
    need(sc.feasibility_rule in ("none", "per_slot_rate"), "feasibility_rule",
         "must be none or per_slot_rate")
    need(sc.r_inst >= 0, "r_inst", "must be nonnegative")
    need(sc.reward_mode in ("representative", "monte_carlo"), "reward_mode",
         "must be representative or monte_carlo")
    need(sc.mc_samples >= 1, "mc_samples", "must be >= 1")
    need(sc.seed >= 0, "seed", "must be nonnegative")
    need_bytes = table_bytes(sc.num_states, sc.num_actions, sc.num_uts)
    if need_bytes > sc.memory_budget_mb * 2 ** 20:
        raise ConfigError(f"memory_budget_mb: {sc.num_states} states x {sc.num_actions} actions "
                          f"need {need_bytes} bytes, above {sc.memory_budget_mb:g} MiB")
    if sc.antennas <= sc.num_uts:
        log.warning("M=%d is not larger than K*L=%d", sc.antennas, sc.num_uts)
    return sc


def _read_config(text: str, source: str) -> configparser.ConfigParser:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"),
                                   default_section="__defaults__")
    cp.optionxform = str
    try:
        cp.read_string(text, source=source)
    except configparser.MissingSectionHeaderError as exc:
        raise ConfigError(f"{source}:{exc.lineno}: key outside a [section]: {exc.line.strip()!r}") from None
    except configparser.DuplicateOptionError as exc:
        raise ConfigError(f"{source}:{exc.lineno}: duplicate key {exc.option!r}") from None
    except configparser.DuplicateSectionError as exc:
        raise ConfigError(f"{source}:{exc.lineno}: duplicate section {exc.section!r}") from None
    except configparser.ParsingError as exc:
        lineno, line = exc.errors[0]
        raise ConfigError(f"{source}:{lineno}: cannot parse {line.strip()!r}") from None
    return cp


def parse_scenario(text: str, source: str = "<config>", **overrides) -> Scenario:
    """Scenario from config text; missing keys take defaults, unknown keys are errors."""
    cp = _read_config(text, source)
    values = {}
    for section in cp.sections():
        if section == SWEEP_SECTION:
            continue
        if section not in SECTIONS:
            raise ConfigError(f"{source}: unknown section [{section}]")
        for key, raw in cp.items(section):
            if key not in SECTIONS[section]:
                where = f" (belongs in [{_SECTION_OF[key]}])" if key in _SECTION_OF else ""
                raise ConfigError(f"{source}: unknown key {key!r} in [{section}]{where}")
            values[key] = _parse_value(key, raw)
    values.update({k: v for k, v in overrides.items() if v is not None})
    return validate_scenario(Scenario(**values))


def load_scenario(path, **overrides) -> Scenario:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_scenario(text, str(path), **overrides)


def _format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, tuple):
        return ", ".join(repr(float(v)) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def dump_scenario(sc: Scenario) -> str:
    """Canonical config text of the effective scenario (round-trips through ``parse_scenario``)."""
    out = io.StringIO()
    for section, keys in SECTIONS.items():
        out.write(f"[{section}]\n")
        for key in keys:
            out.write(f"{key} = {_format_value(getattr(sc, key))}\n")
        out.write("\n")
    return out.getvalue()


def scenario_hash(sc: Scenario) -> str:
    return hashlib.sha256(dump_scenario(sc).encode()).hexdigest()


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------

AXES = {
    "discount": "discount",
    "max_snr": "power_cap_mw",
    "bins_qs": "bins",
    "actions_qa": "power_levels",
    "antennas_m": "antennas",
}


@dataclass(frozen=True)
class SweepSpec:
    axis: str
    values: tuple[float, ...]

    def __post_init__(self):
        if self.axis not in AXES:
            raise ConfigError(f"unknown sweep axis {self.axis!r}; choose from {sorted(AXES)}")
        if not self.values:
            raise ConfigError("sweep needs at least one value")
        object.__setattr__(self, "values", tuple(self.values))


def parse_sweep(text: str, source: str = "<config>") -> SweepSpec | None:
    cp = _read_config(text, source)
    if not cp.has_section(SWEEP_SECTION):
        return None
    items = dict(cp.items(SWEEP_SECTION))
    unknown = set(items) - {"axis", "values"}
    if unknown:
        raise ConfigError(f"{source}: unknown key(s) {sorted(unknown)} in [sweep]")
    if "axis" not in items or "values" not in items:
        raise ConfigError(f"{source}: [sweep] needs axis and values")
    try:
        values = tuple(float(v) for v in items["values"].split(","))
    except ValueError:
        raise ConfigError(f"{source}: [sweep] values must be a comma-separated list") from None
    return SweepSpec(items["axis"].strip(), values)


def power_grid(sc: Scenario) -> PowerGrid:
    """Per-UT power levels in watts; a power cap keeps only the levels at or below it."""
    grid = make_power_grid(sc.power_min_mw * 1e-3, sc.power_max_mw * 1e-3, sc.power_levels,
                           sc.power_spacing)
    if sc.power_cap_mw is None or sc.power_cap_mw >= sc.power_max_mw:
        return grid
    kept = grid.levels[grid.levels <= sc.power_cap_mw * 1e-3 * (1 + 1e-12)]
    return PowerGrid(kept, float(kept[0]), float(kept[-1]), grid.spacing)


def snr_reference_gain(sc: Scenario) -> float:
    """Large-scale gain at the cell edge, path loss only."""
    return sc.pathloss_constant / sc.cell_radius_m ** sc.pathloss_exponent


def max_snr_db(sc: Scenario) -> float:
    """Maximum transmit SNR: peak power times the cell-edge gain over the noise power."""
    return 10 * math.log10(power_grid(sc).max_power * snr_reference_gain(sc) / sc.noise_w)


def power_cap_for_snr(sc: Scenario, snr_db: float) -> float:
    """Power cap in mW that realizes a given maximum transmit SNR."""
    return 10 ** (snr_db / 10) * sc.noise_w / snr_reference_gain(sc) * 1e3


def apply_axis(sc: Scenario, axis: str, value: float) -> Scenario:
    if axis == "discount":
        return sc.replace(discount=float(value))
    if axis == "max_snr":
        return sc.replace(power_cap_mw=power_cap_for_snr(sc, float(value)))
    if axis == "bins_qs":
        return sc.replace(bins=int(value), thresholds=None, initial_state=_clip_initial(sc, int(value)))
    if axis == "actions_qa":
        return sc.replace(power_levels=int(value))
    if axis == "antennas_m":
        return sc.replace(antennas=int(value))
    raise ConfigError(f"unknown sweep axis {axis!r}")


def _clip_initial(sc: Scenario, bins: int):
    if sc.initial_state == STEADY:
        return STEADY
    links = sc.num_cells ** 2 * sc.uts_per_cell ** 2
    return min(sc.initial_state, bins ** links - 1)


# ---------------------------------------------------------------------------
# System assembly and runs
# ---------------------------------------------------------------------------

@dataclass
class System:
    scenario: Scenario
    betas: np.ndarray
    fsmc: FsmcModel
    grid: PowerGrid
    budget: LinkBudget
    tables: RewardTables
    mdp: DiscountedMdp

    @property
    def codec(self) -> StateCodec:
        return self.fsmc.codec


def solve_settings(sc: Scenario) -> SolveSettings:
    return SolveSettings(epsilon=sc.epsilon, rho_init=sc.rho_init,
                         max_inner_iters=sc.max_inner_iters, max_outer_iters=sc.max_outer_iters,
                         r_min=sc.r_min, initial_state=sc.initial_state,
                         normalize_by_horizon=sc.normalize_by_horizon,
                         warm_start=sc.warm_start, rho_ceiling=sc.rho_ceiling)


def large_scale_gains(sc: Scenario) -> np.ndarray:
    """Frozen ``beta[l, i, k]`` of the scenario; depends on geometry, shadowing and seed only."""
    rng = np.random.default_rng(np.random.SeedSequence([sc.seed, 0]))
    return draw_large_scale_gains(sc.num_cells, sc.uts_per_cell, rng,
                                  pathloss_exponent=sc.pathloss_exponent,
                                  pathloss_constant=sc.pathloss_constant,
                                  shadow_variance_db=sc.shadow_variance_db,
                                  bs_spacing_m=sc.bs_spacing_m, cell_radius_m=sc.cell_radius_m,
                                  min_distance_m=sc.min_distance_m)


def build_system(sc: Scenario, cache_dir=None, workers: int = 1) -> System:
    """FSMC, power grid, reward tables and MDP of a scenario (tables cached if asked)."""
    betas = large_scale_gains(sc)
    fsmc = build_fsmc(betas, sc.bins, sc.normalized_doppler, sc.thresholds)
    grid = power_grid(sc)
    budget = LinkBudget(betas, sc.antennas, sc.noise_w,
                        np.full(sc.num_cells, sc.circuit_power_mw * 1e-3))
    digest = scenario_hash(sc)
    tables = None
    cache_path = Path(cache_dir) / f"{digest[:16]}.bin" if cache_dir else None
    if cache_path is not None:
        tables = read_table_cache(cache_path, digest)
    if tables is None:
        tables = build_reward_tables(fsmc, budget, grid, sc.reward_mode, mc_samples=sc.mc_samples,
                                     seed=sc.seed, memory_budget=int(sc.memory_budget_mb * 2 ** 20),
                                     workers=workers)
        if cache_path is not None:
            write_table_cache(cache_path, tables, digest)
    mdp = DiscountedMdp(fsmc.transition, tables.reward, tables.cost, sc.discount)
    return System(sc, betas, fsmc, grid, budget, tables, mdp)


@dataclass
class SolveOutcome:
    system: System
    result: SolveResult
    baseline: Policy
    comparison: PolicyComparison
    wall_time: float

    @property
    def report(self):
        return self.result.report


def run_solve(sc: Scenario, cache_dir=None, workers: int = 1) -> SolveOutcome:
    """Build the system, solve the CMDP and evaluate the ergodic baseline.

    Inner-module errors propagate with the failing stage prefixed.
    """
    start = time.perf_counter()
    try:
        system = build_system(sc, cache_dir, workers)
    except EecmdpError as exc:
        exc.args = (f"[model] {exc}",)
        raise
    settings = solve_settings(sc)
    try:
        result = solve_cmdp(system.mdp, settings)
    except EecmdpError as exc:
        exc.args = (f"[solver] {exc}",)
        raise
    try:
        baseline = greedy_ergodic_policy(system.mdp, BaselineSpec(sc.feasibility_rule, sc.r_inst))
    except EecmdpError as exc:
        exc.args = (f"[baseline] {exc}",)
        raise
    comparison = compare_policies(result.policy, baseline, system.mdp, sc.initial_state, sc.r_min)
    return SolveOutcome(system, result, baseline, comparison, time.perf_counter() - start)


def csv_header(sc: Scenario) -> list[str]:
    slacks = [f"slack_l{l + 1}_k{k + 1}" for l in range(sc.num_cells)
              for k in range(sc.uts_per_cell)]
    return (["scenario_hash", "axis", "axis_value", "policy", "reward"] + slacks +
            ["inner_iters", "outer_iters", "wall_ms", "status"])


def _fmt(x: float) -> str:
    return f"{x:.12g}"


def outcome_rows(outcome: SolveOutcome, axis: str = "", axis_value: str = "",
                 timing: bool = False) -> list[list[str]]:
    sc = outcome.system.scenario
    rep = outcome.report
    digest = scenario_hash(sc)[:16]
    status = "ok" if rep.converged else "nonconverged"
    wall = f"{outcome.wall_time * 1e3:.3f}" if timing else ""
    cmp = outcome.comparison
    return [
        [digest, axis, axis_value, "cmdp", _fmt(cmp.value_a), *map(_fmt, cmp.slacks_a),
         str(rep.total_inner_iterations), str(rep.outer_iterations), wall, status],
        [digest, axis, axis_value, "ergodic", _fmt(cmp.value_b), *map(_fmt, cmp.slacks_b),
         "0", "0", wall, "ok"],
    ]


def failed_rows(sc: Scenario, axis: str, axis_value: str, error: Exception) -> list[list[str]]:
    digest = scenario_hash(sc)[:16] if sc is not None else ""
    blanks = [""] * (len(csv_header(sc)) - 9) if sc is not None else []
    kind = "infeasible" if isinstance(error, InfeasibleError) else "failed"
    return [[digest, axis, axis_value, name, "", *blanks, "", "", "", kind]
            for name in ("cmdp", "ergodic")]


def write_csv(path, header: Sequence[str], rows: Sequence[Sequence[str]]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def export_lookup_table(policy: Policy, codec: StateCodec, grid: PowerGrid, path) -> Path:
    """Write the state -> per-UT power table, one row per composite state.

    Row layout: ``state bins action powers_mw`` separated by single spaces,
    with bins and powers comma-separated and powers at 6 significant digits.
    """
    num_uts = codec.num_cells * codec.num_uts
    levels = action_levels(grid.size, num_uts)
    bins = codec.all_bins()
    lines = [f"# eecmdp-table v1, states={codec.total_states}, cells={codec.num_cells}, "
             f"uts={codec.num_uts}"]
    for s in range(codec.total_states):
        a = int(policy.action_of_state[s])
        powers = ",".join(f"{p * 1e3:#.6g}" for p in grid.levels[levels[a]])
        lines.append(f"{s} {','.join(map(str, bins[s]))} {a} {powers}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n")
    return path


@dataclass
class SweepResult:
    header: list[str]
    rows: list[list[str]] = field(default_factory=list)
    outcomes: list = field(default_factory=list)


def _point_label(value: float) -> str:
    return f"{value:g}"


def run_sweep(sc: Scenario, sweep: SweepSpec, *, workers: int = 1, cache_dir=None,
              table_dir=None, timing: bool = False) -> SweepResult:
    """One solve per sweep point; rows come out in point order regardless of workers.

    A failing point yields rows marked ``failed`` (or ``infeasible``) and the
    sweep continues.
    """
    result = SweepResult(csv_header(sc))

    def one(value):
        label = _point_label(value)
        point = None
        try:
            point = apply_axis(sc, sweep.axis, value)
            outcome = run_solve(point, cache_dir)
        except EecmdpError as exc:
            log.warning("sweep point %s=%s failed: %s", sweep.axis, label, exc)
            return failed_rows(point or sc, sweep.axis, label, exc), None
        if table_dir is not None:
            export_lookup_table(outcome.result.policy, outcome.system.codec, outcome.system.grid,
                                Path(table_dir) / f"{sweep.axis}_{label}.txt")
        return outcome_rows(outcome, sweep.axis, label, timing), outcome

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(one, sweep.values))
    else:
        parts = [one(v) for v in sweep.values]
    for rows, outcome in parts:
        result.rows.extend(rows)
        result.outcomes.append(outcome)
    return result


def rewards_by_policy(result: SweepResult, policy: str) -> list[float]:
    return [float(r[4]) if r[4] else math.nan for r in result.rows if r[3] == policy]
