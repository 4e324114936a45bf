"""ZF-receiver physical layer and the reward/cost tables fed to the solver.

Two ways to turn a quantized channel state into a reward are provided:

* ``representative``: every link gain is replaced by its bin's conditional
  mean and plugged into a deterministic surrogate SINR
  ``p * g_own / (sum p_j * g_j + noise / (M - K))``;
* ``monte_carlo``: full ZF SINR averaged over channel realizations drawn
  conditionally on every link's effective gain lying in its bin.

Powers are in watts, rates in bits/s/Hz and rewards in bits/Joule per Hz.
"""
from __future__ import annotations

import hashlib
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import special

from .errors import ConfigError, DomainError, MonteCarloError, NumericalError
from .fsmc import FsmcModel

ZF_CONDITION_LIMIT = 1e12
MIN_ACCEPTANCE = 1e-4


def dbm_to_watts(dbm: float) -> float:
    return 10.0 ** ((dbm - 30.0) / 10.0)


def watts_to_dbm(watts: float) -> float:
    return 10.0 * math.log10(watts) + 30.0


# ---------------------------------------------------------------------------
# Actions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PowerGrid:
    levels: np.ndarray
    min_power: float
    max_power: float
    spacing: str = "log"

    def __post_init__(self):
        levels = np.asarray(self.levels, dtype=float)
        if levels.ndim != 1 or levels.size < 1:
            raise ConfigError("power grid needs at least one level")
        if np.any(np.diff(levels) <= 0):
            raise ConfigError("power levels must be strictly ascending")
        if levels[0] != self.min_power or levels[-1] != self.max_power:
            raise ConfigError("power grid must start at min_power and end at max_power")
        levels.setflags(write=False)
        object.__setattr__(self, "levels", levels)

    @property
    def size(self) -> int:
        return self.levels.size


def make_power_grid(min_power: float, max_power: float, num_levels: int,
                    spacing: str = "log") -> PowerGrid:
    """Transmit-power levels in watts, log- or linearly spaced inclusive of both ends."""
    if not 0 < min_power <= max_power:
        raise ConfigError(f"need 0 < min_power <= max_power, got {min_power}, {max_power}")
    if num_levels < 1:
        raise ConfigError("need at least one power level")
    if num_levels == 1:
        if min_power != max_power:
            raise ConfigError("a single power level requires min_power == max_power")
        return PowerGrid(np.array([max_power]), min_power, max_power, spacing)
    if spacing == "log":
        levels = np.geomspace(min_power, max_power, num_levels)
    elif spacing == "linear":
        levels = np.linspace(min_power, max_power, num_levels)
    else:
        raise ConfigError(f"unknown power spacing {spacing!r}")
    levels[0], levels[-1] = min_power, max_power
    return PowerGrid(levels, min_power, max_power, spacing)


def action_levels(num_levels: int, num_uts: int) -> np.ndarray:
    """``(num_levels**num_uts, num_uts)`` per-UT level index of each composite action.

    UTs are ordered (l, k) with the first UT the most significant digit.
    """
    shape = (num_levels,) * num_uts
    return np.stack(np.unravel_index(np.arange(num_levels ** num_uts), shape), axis=1)


def action_powers(grid: PowerGrid, num_uts: int) -> np.ndarray:
    return grid.levels[action_levels(grid.size, num_uts)]


# ---------------------------------------------------------------------------
# Channel and receiver
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LinkBudget:
    """Physical constants needed to turn channels into rates and rewards."""
    betas: np.ndarray          # beta[l, i, k]: BS l, UT k of cell i
    antennas: int
    noise_w: float
    circuit_w: np.ndarray      # per-cell circuit power p_lc

    @property
    def num_cells(self) -> int:
        return self.betas.shape[0]

    @property
    def uts_per_cell(self) -> int:
        return self.betas.shape[2]

    @property
    def num_uts(self) -> int:
        return self.num_cells * self.uts_per_cell


@dataclass(frozen=True)
class ChannelRealization:
    gains: np.ndarray          # G[l, i] is the M x K matrix from cell i's UTs to BS l
    noise_variance: float

    def block(self, l: int, i: int) -> np.ndarray:
        return self.gains[l, i]


def _cn(rng: np.random.Generator, shape) -> np.ndarray:
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / math.sqrt(2.0)


def sample_channel(budget: LinkBudget, rng: np.random.Generator) -> ChannelRealization:
    """Rayleigh small-scale fading scaled by the frozen large-scale gains."""
    L, K, M = budget.num_cells, budget.uts_per_cell, budget.antennas
    h = _cn(rng, (L, L, M, K))
    g = h * np.sqrt(budget.betas)[:, :, None, :]
    return ChannelRealization(g, budget.noise_w)


def zf_receiver(own_cell_channel: np.ndarray) -> np.ndarray:
    """Zero-forcing receiver ``G (G^H G)^-1`` for an ``M x K`` channel."""
    g = np.asarray(own_cell_channel)
    m, k = g.shape
    if m < k:
        raise DomainError(f"ZF needs M >= K, got M={m}, K={k}")
    gram = g.conj().T @ g
    cond = np.linalg.cond(gram)
    if not np.isfinite(cond) or cond > ZF_CONDITION_LIMIT:
        raise NumericalError(f"own-cell channel is rank deficient (Gram condition number {cond:.3g})")
    return g @ np.linalg.inv(gram)


def sinr(receiver: np.ndarray, channels: Sequence[np.ndarray], powers: np.ndarray,
         noise: float, cell: int) -> np.ndarray:
    """Per-UT SINR of cell ``cell`` for a linear receiver.

    ``channels[i]`` is G_{cell,i}; ``powers[i, k]`` is the power of UT k in cell i.
    """
    powers = np.asarray(powers, dtype=float)
    num_cells, num_uts = powers.shape
    out = np.empty(num_uts)
    for k in range(num_uts):
        a = receiver[:, k]
        desired = powers[cell, k] * abs(np.vdot(a, channels[cell][:, k])) ** 2
        intra = sum(powers[cell, kk] * abs(np.vdot(a, channels[cell][:, kk])) ** 2
                    for kk in range(num_uts) if kk != k)
        inter = sum(powers[i, kk] * abs(np.vdot(a, channels[i][:, kk])) ** 2
                    for i in range(num_cells) if i != cell for kk in range(num_uts))
        out[k] = desired / (intra + inter + noise * np.vdot(a, a).real)
    return out


def instantaneous_rate(gamma):
    """Shannon rate ``log2(1 + gamma)`` in bits/s/Hz."""
    gamma = np.asarray(gamma, dtype=float)
    if np.any(gamma < 0):
        raise DomainError("SINR must be nonnegative")
    return np.log2(1.0 + gamma)


def ee_reward(gammas: np.ndarray, powers: np.ndarray, circuit) -> float:
    """Sum over UTs of rate / (transmit + circuit power).

    ``gammas`` and ``powers`` are ``(L, K)``; ``circuit`` is scalar or per cell.
    """
    gammas = np.asarray(gammas, dtype=float)
    powers = np.asarray(powers, dtype=float)
    circuit = np.asarray(circuit, dtype=float)
    if circuit.ndim == 1:
        circuit = circuit[:, None]
    denom = powers + circuit
    if np.any(denom <= 0):
        raise DomainError("transmit plus circuit power must be positive for every UT")
    return float(np.sum(instantaneous_rate(gammas) / denom))


# ---------------------------------------------------------------------------
# Reward tables
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RewardTables:
    reward: np.ndarray                 # (S, A)
    cost: np.ndarray                   # (L*K, S, A) per-UT rate
    mode: str = "representative"
    mc_samples: int = 0
    reward_se: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.reward.shape


def _surrogate_gains(fsmc: FsmcModel, budget: LinkBudget, states=None):
    """Desired gain ``(S, U)`` and interference gains ``(S, U, U)`` per state."""
    reps = fsmc.representative_gains if states is None else fsmc.representative_gains[states]
    codec = fsmc.codec
    L, K = budget.num_cells, budget.uts_per_cell
    n = reps.shape[0]
    desired = np.empty((n, L * K))
    interf = np.zeros((n, L * K, L * K))
    for l in range(L):
        for k in range(K):
            u = l * K + k
            desired[:, u] = reps[:, codec.link_position((l, l, k, k))]
            for i in range(L):
                if i == l:
                    continue
                for kappa in range(K):
                    interf[:, u, i * K + kappa] = reps[:, codec.link_position((l, i, k, kappa))]
    return desired, interf


def _surrogate_noise(budget: LinkBudget) -> float:
    dof = budget.antennas - budget.uts_per_cell
    if dof <= 0:
        raise ConfigError(f"representative mode needs M > K, got M={budget.antennas}, "
                          f"K={budget.uts_per_cell}")
    return budget.noise_w / dof


def _rewards_from_sinr(gamma: np.ndarray, powers: np.ndarray, budget: LinkBudget):
    """``gamma`` (..., A, U) -> reward (..., A) and rate (..., A, U)."""
    rate = np.log2(1.0 + gamma)
    circuit = np.repeat(budget.circuit_w, budget.uts_per_cell)
    reward = np.sum(rate / (powers + circuit), axis=-1)
    return reward, rate


def _representative_block(fsmc, budget, powers, states=None):
    desired, interf = _surrogate_gains(fsmc, budget, states)
    signal = desired[:, None, :] * powers[None, :, :]
    interference = np.einsum("suv,av->sau", interf, powers)
    gamma = signal / (interference + _surrogate_noise(budget))
    return _rewards_from_sinr(gamma, powers, budget)


def representative_reward(state: int, action: int, fsmc: FsmcModel, budget: LinkBudget,
                          grid: PowerGrid) -> tuple[float, np.ndarray]:
    """Surrogate reward and per-UT rates of one (state, action) cell."""
    fsmc.codec._check(state)
    levels = action_levels(grid.size, budget.num_uts)
    if not 0 <= action < levels.shape[0]:
        raise DomainError(f"action index {action} outside [0, {levels.shape[0]})")
    powers = grid.levels[levels[action]][None, :]
    reward, rate = _representative_block(fsmc, budget, powers, states=[state])
    return float(reward[0, 0]), rate[0, 0]


# Monte-Carlo mode ----------------------------------------------------------

def link_effective_gains(own: np.ndarray, other: np.ndarray, betas_other: np.ndarray,
                         diagonal: bool) -> np.ndarray:
    """Exponential effective gains of the links between BS l and one cell.

    ``own`` is a batch ``(n, M, K)`` of G_ll and ``other`` a batch of G_li.
    Off-diagonal links use ``|g_llk^H g_likappa|^2 / ||g_llk||^2``, which is
    exponential with mean ``beta_likappa``.  On the diagonal ``||g_llk||^2`` is
    Gamma(M) distributed, so it is mapped through its own survival function to
    an exponential variate with mean ``beta_llk`` (a monotone reparametrization).
    Returns ``(n, K, K)`` indexed ``[k, kappa]``.
    """
    n, m, num_uts = own.shape
    norms = np.sum(np.abs(own) ** 2, axis=1)                         # (n, K)
    inner = np.einsum("nmk,nmj->nkj", own.conj(), other)
    psi = np.abs(inner) ** 2 / norms[:, :, None]
    if diagonal:
        for k in range(num_uts):
            beta = betas_other[k]
            with np.errstate(divide="ignore"):
                psi[:, k, k] = -beta * np.log(special.gammaincc(m, norms[:, k] / beta))
    return psi


def _conditioned_blocks(state_bins, fsmc: FsmcModel, budget: LinkBudget, samples: int,
                        rng: np.random.Generator) -> np.ndarray:
    """Rejection-sample ``(n, L, L, M, K)`` channels whose link gains fall in their bins."""
    codec = fsmc.codec
    L, K, M = budget.num_cells, budget.uts_per_cell, budget.antennas
    out = np.empty((samples, L, L, M, K), dtype=complex)
    scale = np.sqrt(budget.betas)
    for l in range(L):
        for i in [l] + [c for c in range(L) if c != l]:
            pos = [codec.link_position((l, i, k, kappa)) for k in range(K) for kappa in range(K)]
            bins = np.array([state_bins[p] for p in pos])
            quant = [fsmc.quantizers[p] for p in pos]
            acceptance = float(np.prod([q.steady[b] for q, b in zip(quant, bins)]))
            if acceptance < MIN_ACCEPTANCE:
                raise MonteCarloError(
                    f"conditioning acceptance {acceptance:.3g} below {MIN_ACCEPTANCE:g} for "
                    f"block (l={l}, i={i}); use fewer, larger bins")
            lo = np.array([q.thresholds[b] for q, b in zip(quant, bins)]).reshape(K, K)
            hi = np.array([q.thresholds[b + 1] for q, b in zip(quant, bins)]).reshape(K, K)
            pending = np.arange(samples)
            batch = int(min(4096, math.ceil(3.0 / acceptance)))
            rounds = 0
            while pending.size:
                rounds += 1
                if rounds > 200:
                    raise MonteCarloError(f"rejection sampling stalled for block (l={l}, i={i})")
                n = pending.size
                cand = _cn(rng, (n, batch, M, K)) * scale[l, i][None, None, None, :]
                own = out[pending, l, l] if i != l else None
                flat = cand.reshape(n * batch, M, K)
                ref = flat if i == l else np.repeat(own, batch, axis=0)
                psi = link_effective_gains(ref, flat, budget.betas[l, i], i == l)
                inside = (psi >= lo) & ((psi < hi) | np.isinf(hi))
                ok = np.all(inside, axis=(1, 2)).reshape(n, batch)
                hit = ok.any(axis=1)
                first = ok.argmax(axis=1)
                out[pending[hit], l, i] = cand[np.flatnonzero(hit), first[hit]]
                pending = pending[~hit]
    return out


def _zf_batch(own: np.ndarray) -> np.ndarray:
    gram = np.einsum("nmk,nmj->nkj", own.conj(), own)
    return own @ np.linalg.inv(gram)


def _mc_block(gains: np.ndarray, budget: LinkBudget, powers: np.ndarray):
    """Average reward/rates over a batch ``(n, L, L, M, K)`` of channels."""
    L, K = budget.num_cells, budget.uts_per_cell
    n = gains.shape[0]
    U = L * K
    cross = np.empty((n, U, U))
    noise_gain = np.empty((n, U))
    for l in range(L):
        a = _zf_batch(gains[:, l, l])                                  # (n, M, K)
        noise_gain[:, l * K:(l + 1) * K] = np.sum(np.abs(a) ** 2, axis=1)
        for i in range(L):
            proj = np.einsum("nmk,nmj->nkj", a.conj(), gains[:, l, i])
            cross[:, l * K:(l + 1) * K, i * K:(i + 1) * K] = np.abs(proj) ** 2
    desired = np.einsum("nuu->nu", cross).copy()
    interf = cross.copy()
    idx = np.arange(U)
    interf[:, idx, idx] = 0.0
    signal = desired[:, None, :] * powers[None, :, :]
    interference = np.einsum("nuv,av->nau", interf, powers)
    gamma = signal / (interference + budget.noise_w * noise_gain[:, None, :])
    reward, rate = _rewards_from_sinr(gamma, powers, budget)
    se = reward.std(axis=0, ddof=1) / math.sqrt(n) if n > 1 else np.full(reward.shape[1], np.nan)
    return reward.mean(axis=0), rate.mean(axis=0), se


def state_rng(seed: int, state: int) -> np.random.Generator:
    """Independent, worker-count-invariant RNG stream of one composite state."""
    return np.random.default_rng(np.random.SeedSequence([seed, state]))


def monte_carlo_state(state: int, fsmc: FsmcModel, budget: LinkBudget, grid: PowerGrid,
                      samples: int, rng: np.random.Generator):
    """Conditioned MC estimate for all actions of one state.

    Returns ``(reward[A], rate[A, U], reward_se[A])``.
    """
    if samples < 1:
        raise DomainError("need at least one Monte-Carlo sample")
    bins = fsmc.codec.decode(state)
    gains = _conditioned_blocks(bins, fsmc, budget, samples, rng)
    return _mc_block(gains, budget, action_powers(grid, budget.num_uts))


def monte_carlo_reward(state: int, action: int, samples: int, fsmc: FsmcModel,
                       budget: LinkBudget, grid: PowerGrid, rng: np.random.Generator):
    """Conditioned MC reward, per-UT rates and reward standard error of one cell."""
    reward, rate, se = monte_carlo_state(state, fsmc, budget, grid, samples, rng)
    return float(reward[action]), rate[action], float(se[action])


def table_bytes(num_states: int, num_actions: int, num_uts: int) -> int:
    return 8 * num_states * num_actions * (num_uts + 2)


def build_reward_tables(fsmc: FsmcModel, budget: LinkBudget, grid: PowerGrid,
                        mode: str = "representative", *, mc_samples: int = 200,
                        seed: int = 0, memory_budget: int = 1 << 30,
                        workers: int = 1) -> RewardTables:
    """Dense reward ``(S, A)`` and per-UT rate ``(L*K, S, A)`` tables."""
    num_states = fsmc.codec.total_states
    num_actions = grid.size ** budget.num_uts
    need = table_bytes(num_states, num_actions, budget.num_uts)
    if need > memory_budget:
        raise ConfigError(f"reward tables need {need} bytes ({num_states} states x "
                          f"{num_actions} actions), above the budget of {memory_budget}")
    powers = action_powers(grid, budget.num_uts)
    if mode == "representative":
        reward, rate = _representative_block(fsmc, budget, powers)
        return RewardTables(reward, np.moveaxis(rate, -1, 0).copy(), mode)
    if mode != "monte_carlo":
        raise ConfigError(f"unknown reward mode {mode!r}")
    if mc_samples < 1:
        raise ConfigError("mc_samples must be positive")

    def one(s):
        return monte_carlo_state(s, fsmc, budget, grid, mc_samples, state_rng(seed, s))

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(one, range(num_states)))
    else:
        parts = [one(s) for s in range(num_states)]
    reward = np.stack([p[0] for p in parts])
    rate = np.stack([p[1] for p in parts])
    se = np.stack([p[2] for p in parts])
    return RewardTables(reward, np.moveaxis(rate, -1, 0).copy(), mode, mc_samples, se)


# ---------------------------------------------------------------------------
# Binary cache
# ---------------------------------------------------------------------------

CACHE_MAGIC = b"EECMDP01"
_HEADER = struct.Struct("<8sQQQ32sQ")
_MODES = {"representative": 0, "monte_carlo": 1}


def _digest(scenario_hash: str) -> bytes:
    return hashlib.sha256(scenario_hash.encode()).digest()


def write_table_cache(path, tables: RewardTables, scenario_hash: str) -> None:
    """Serialize tables: magic, dims, scenario digest, then little-endian float64 data."""
    s, a = tables.reward.shape
    u = tables.cost.shape[0]
    header = _HEADER.pack(CACHE_MAGIC, s, a, u, _digest(scenario_hash),
                          _MODES[tables.mode] << 32 | tables.mc_samples)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(tables.reward, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(tables.cost, dtype="<f8").tobytes())
    tmp.replace(path)


def read_table_cache(path, scenario_hash: str) -> RewardTables | None:
    """Load cached tables, or ``None`` if absent, corrupt or built for another scenario."""
    path = Path(path)
    if not path.is_file():
        return None
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        return None
    magic, s, a, u, digest, mode_word = _HEADER.unpack_from(raw)
    if magic != CACHE_MAGIC or digest != _digest(scenario_hash):
        return None
    if len(raw) != _HEADER.size + 8 * s * a * (1 + u):
        return None
    data = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size)
    reward = data[:s * a].reshape(s, a).copy()
    cost = data[s * a:].reshape(u, s, a).copy()
    mode = {v: k for k, v in _MODES.items()}[mode_word >> 32]
    return RewardTables(reward, cost, mode, mode_word & 0xFFFFFFFF)
