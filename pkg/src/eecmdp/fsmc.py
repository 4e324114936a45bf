"""Finite-state Markov channel (FSMC) model of the multi-cell uplink.

Every link (l, i, k, kappa) -- BS ``l`` observing UT ``kappa`` of cell ``i``
through the receive direction of its own UT ``k`` -- carries an exponential
effective power gain with mean ``psi0``.  The gain is quantized into ``Q_S``
bins; bin occupancy evolves as a birth-death chain whose rates come from the
Rayleigh level-crossing rate.  The composite system state is the tuple of all
link bins, and links evolve independently of each other and of the action.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np

from .errors import ConfigError, DomainError

LinkIndex = tuple[int, int, int, int]


# ---------------------------------------------------------------------------
# Large-scale fading
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LargeScaleGain:
    beta: float
    distance_m: float
    shadow_linear: float
    pathloss_exponent: float
    pathloss_constant: float
    shadow_db_variance: float = 0.0


def compute_large_scale_gain(distance_m: float, shadow_linear: float,
                             constant: float, exponent: float) -> LargeScaleGain:
    """Path loss times shadowing, ``constant * shadow / distance**exponent``."""
    if not distance_m > 0:
        raise DomainError(f"distance must be positive, got {distance_m}")
    if not shadow_linear > 0 or not constant > 0:
        raise DomainError("shadowing and path-loss constant must be positive")
    beta = constant * shadow_linear / distance_m ** exponent
    return LargeScaleGain(beta=beta, distance_m=distance_m,
                          shadow_linear=shadow_linear,
                          pathloss_exponent=exponent,
                          pathloss_constant=constant)


def place_users(num_cells: int, uts_per_cell: int, rng: np.random.Generator,
                bs_spacing_m: float = 1000.0, cell_radius_m: float = 500.0,
                min_distance_m: float = 35.0) -> tuple[np.ndarray, np.ndarray]:
    """Drop UTs uniformly (by area) in an annulus around their serving BS.

    BSs sit on the x axis ``bs_spacing_m`` apart.  Returns ``(bs_xy, ut_xy)``
    with shapes ``(L, 2)`` and ``(L, K, 2)``.
    """
    if not 0 < min_distance_m < cell_radius_m:
        raise ConfigError("need 0 < min_distance_m < cell_radius_m")
    bs = np.zeros((num_cells, 2))
    bs[:, 0] = bs_spacing_m * np.arange(num_cells)
    u = rng.random((num_cells, uts_per_cell))
    theta = 2 * np.pi * rng.random((num_cells, uts_per_cell))
    r = np.sqrt(min_distance_m ** 2 + u * (cell_radius_m ** 2 - min_distance_m ** 2))
    ut = bs[:, None, :] + np.stack([r * np.cos(theta), r * np.sin(theta)], axis=-1)
    return bs, ut


def draw_large_scale_gains(num_cells: int, uts_per_cell: int,
                           rng: np.random.Generator, *,
                           pathloss_exponent: float = 3.7,
                           pathloss_constant: float = 1.0,
                           shadow_variance_db: float = 10.0,
                           bs_spacing_m: float = 1000.0,
                           cell_radius_m: float = 500.0,
                           min_distance_m: float = 35.0) -> np.ndarray:
    """Draw the frozen ``beta[l, i, k]`` array (BS l, UT k of cell i)."""
    bs, ut = place_users(num_cells, uts_per_cell, rng, bs_spacing_m,
                         cell_radius_m, min_distance_m)
    dist = np.linalg.norm(bs[:, None, None, :] - ut[None, :, :, :], axis=-1)
    shadow_db = rng.normal(0.0, math.sqrt(shadow_variance_db), dist.shape)
    shadow = 10.0 ** (shadow_db / 10.0)
    return pathloss_constant * shadow / dist ** pathloss_exponent


# ---------------------------------------------------------------------------
# Per-link quantization
# ---------------------------------------------------------------------------

def steady_probabilities(thresholds: Sequence[float], mean_gain: float) -> np.ndarray:
    """Probability mass of each bin under an exponential(mean_gain) gain."""
    gamma = np.asarray(thresholds, dtype=float)
    tail = np.exp(-gamma / mean_gain)
    return tail[:-1] - tail[1:]


def _truncated_mean(lo: float, hi: float, mean_gain: float, mass: float) -> float:
    head = (lo + mean_gain) * math.exp(-lo / mean_gain)
    tail = 0.0 if math.isinf(hi) else (hi + mean_gain) * math.exp(-hi / mean_gain)
    return (head - tail) / mass


@dataclass(frozen=True)
class LinkQuantizer:
    thresholds: np.ndarray
    mean_gain: float
    steady: np.ndarray = field(init=False)
    representative: np.ndarray = field(init=False)

    def __post_init__(self):
        gamma = np.asarray(self.thresholds, dtype=float)
        if gamma.ndim != 1 or gamma.size < 2:
            raise ConfigError("need at least one bin (two thresholds)")
        if gamma[0] != 0.0 or not math.isinf(gamma[-1]):
            raise ConfigError("thresholds must start at 0 and end at +inf")
        if np.any(np.diff(gamma) <= 0):
            raise ConfigError("thresholds must be strictly increasing")
        if not self.mean_gain > 0:
            raise ConfigError(f"mean gain must be positive, got {self.mean_gain}")
        gamma.setflags(write=False)
        steady = steady_probabilities(gamma, self.mean_gain)
        steady.setflags(write=False)
        rep = np.array([_truncated_mean(gamma[b], gamma[b + 1], self.mean_gain, steady[b])
                        for b in range(steady.size)])
        rep.setflags(write=False)
        object.__setattr__(self, "thresholds", gamma)
        object.__setattr__(self, "steady", steady)
        object.__setattr__(self, "representative", rep)

    @property
    def num_bins(self) -> int:
        return self.steady.size

    def bin_of(self, gain):
        """Bin index of one or more gains."""
        return np.searchsorted(self.thresholds[1:-1], gain, side="right")


def equiprobable_thresholds(mean_gain: float, num_bins: int) -> LinkQuantizer:
    """Quantizer whose bins carry equal probability ``1/num_bins``."""
    if num_bins < 2:
        raise ConfigError(f"equiprobable quantization needs Q_S >= 2, got {num_bins}")
    if not mean_gain > 0:
        raise ConfigError(f"mean gain must be positive, got {mean_gain}")
    b = np.arange(num_bins)
    gamma = np.append(-mean_gain * np.log1p(-b / num_bins), np.inf)
    return LinkQuantizer(gamma, mean_gain)


def scaled_thresholds(mean_gain: float, normalized: Sequence[float]) -> LinkQuantizer:
    """Quantizer from explicit interior thresholds given in units of ``mean_gain``."""
    interior = np.asarray(normalized, dtype=float) * mean_gain
    return LinkQuantizer(np.concatenate([[0.0], interior, [np.inf]]), mean_gain)


def bin_representative_gain(quantizer: LinkQuantizer, bin: int) -> float:
    """Conditional mean of the exponential gain restricted to one bin."""
    if not 0 <= bin < quantizer.num_bins:
        raise DomainError(f"bin {bin} outside [0, {quantizer.num_bins})")
    return float(quantizer.representative[bin])


# ---------------------------------------------------------------------------
# Link dynamics
# ---------------------------------------------------------------------------

def level_crossing_rate(gain, mean_gain: float, normalized_doppler: float):
    """Rayleigh level-crossing rate per decision slot at power level ``gain``."""
    x = np.asarray(gain, dtype=float) / mean_gain
    with np.errstate(invalid="ignore"):
        h = np.sqrt(2 * np.pi * x) * normalized_doppler * np.exp(-x)
    h = np.where(np.isinf(x), 0.0, h)
    return float(h) if h.ndim == 0 else h


def max_admissible_doppler(quantizer: LinkQuantizer) -> float:
    """Largest f_c for which every row of the link matrix is a distribution."""
    h1 = level_crossing_rate(quantizer.thresholds, quantizer.mean_gain, 1.0)
    outflow = h1[:-1] + h1[1:]
    with np.errstate(divide="ignore"):
        bound = np.where(outflow > 0, quantizer.steady / outflow, np.inf)
    return float(bound.min())


@dataclass(frozen=True)
class LinkTransitionMatrix:
    probs: np.ndarray
    normalized_doppler: float

    @property
    def num_bins(self) -> int:
        return self.probs.shape[0]


def link_transition_matrix(quantizer: LinkQuantizer,
                           normalized_doppler: float) -> LinkTransitionMatrix:
    """Tridiagonal bin-to-bin transition matrix of one link."""
    if not normalized_doppler > 0:
        raise ConfigError(f"normalized Doppler must be positive, got {normalized_doppler}")
    q = quantizer.num_bins
    h = level_crossing_rate(quantizer.thresholds, quantizer.mean_gain, normalized_doppler)
    p = quantizer.steady
    probs = np.zeros((q, q))
    for b in range(q):
        up = h[b + 1] / p[b] if b < q - 1 else 0.0
        down = h[b] / p[b] if b > 0 else 0.0
        stay = 1.0 - up - down
        if up > 1 or down > 1 or stay < 0:
            raise ConfigError(
                f"f_c={normalized_doppler:g} too large for bin {b} "
                f"(up={up:.4g}, down={down:.4g}); maximum admissible f_c is "
                f"{max_admissible_doppler(quantizer):.6g}")
        if b < q - 1:
            probs[b, b + 1] = up
        if b > 0:
            probs[b, b - 1] = down
        probs[b, b] = stay
    probs.setflags(write=False)
    return LinkTransitionMatrix(probs, normalized_doppler)


def stationary_distribution(transition: np.ndarray) -> np.ndarray:
    """Stationary row vector of an irreducible stochastic matrix."""
    n = transition.shape[0]
    a = np.vstack([transition.T - np.eye(n), np.ones((1, n))])
    rhs = np.zeros(n + 1)
    rhs[-1] = 1.0
    pi, *_ = np.linalg.lstsq(a, rhs, rcond=None)
    return pi


# ---------------------------------------------------------------------------
# Composite state
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StateCodec:
    """Mixed-radix codec between composite state indices and link-bin tuples.

    Links are ordered lexicographically in (l, i, k, kappa); the first link is
    the most significant digit.
    """
    num_cells: int
    num_uts: int
    bins_per_link: int

    @cached_property
    def links(self) -> tuple[LinkIndex, ...]:
        return tuple(itertools.product(range(self.num_cells), range(self.num_cells),
                                       range(self.num_uts), range(self.num_uts)))

    @property
    def link_count(self) -> int:
        return self.num_cells ** 2 * self.num_uts ** 2

    @property
    def total_states(self) -> int:
        return self.bins_per_link ** self.link_count

    def link_position(self, link: LinkIndex) -> int:
        l, i, k, kappa = link
        u = self.num_uts
        return ((l * self.num_cells + i) * u + k) * u + kappa

    def _check(self, idx: int) -> None:
        if not 0 <= idx < self.total_states:
            raise DomainError(f"state index {idx} outside [0, {self.total_states})")

    def encode(self, bins: Sequence[int]) -> int:
        if len(bins) != self.link_count:
            raise DomainError(f"expected {self.link_count} link bins, got {len(bins)}")
        idx = 0
        for b in bins:
            if not 0 <= b < self.bins_per_link:
                raise DomainError(f"bin {b} outside [0, {self.bins_per_link})")
            idx = idx * self.bins_per_link + int(b)
        return idx

    def decode(self, idx: int) -> tuple[int, ...]:
        self._check(idx)
        digits = []
        for _ in range(self.link_count):
            idx, b = divmod(idx, self.bins_per_link)
            digits.append(b)
        return tuple(reversed(digits))

    def all_bins(self) -> np.ndarray:
        """``(total_states, link_count)`` array of decoded bins, in index order."""
        shape = (self.bins_per_link,) * self.link_count
        return np.stack(np.unravel_index(np.arange(self.total_states), shape), axis=1)


def composite_transition_probability(codec: StateCodec,
                                     link_matrices: Sequence[LinkTransitionMatrix],
                                     from_state: int, to_state: int) -> float:
    """Product of per-link transition entries between two composite states."""
    src = codec.decode(from_state)
    dst = codec.decode(to_state)
    prob = 1.0
    for m, b, b2 in zip(link_matrices, src, dst):
        prob *= m.probs[b, b2]
    return prob


def composite_transition_matrix(link_matrices: Sequence[LinkTransitionMatrix]) -> np.ndarray:
    out = np.ones((1, 1))
    for m in link_matrices:
        out = np.kron(out, m.probs)
    return out


@dataclass(frozen=True)
class FsmcModel:
    codec: StateCodec
    quantizers: tuple[LinkQuantizer, ...]
    link_matrices: tuple[LinkTransitionMatrix, ...]

    @cached_property
    def transition(self) -> np.ndarray:
        p = composite_transition_matrix(self.link_matrices)
        p.setflags(write=False)
        return p

    @cached_property
    def steady(self) -> np.ndarray:
        out = np.ones(1)
        for q in self.quantizers:
            out = np.kron(out, q.steady)
        return out

    @cached_property
    def representative_gains(self) -> np.ndarray:
        """``(total_states, link_count)`` representative gain of every link."""
        bins = self.codec.all_bins()
        reps = np.stack([q.representative for q in self.quantizers])
        return reps[np.arange(self.codec.link_count), bins]

    def quantizer(self, link: LinkIndex) -> LinkQuantizer:
        return self.quantizers[self.codec.link_position(link)]


def link_mean_gains(betas: np.ndarray) -> np.ndarray:
    """Mean effective gain per link: ``psi0[l, i, k, kappa] = beta[l, i, kappa]``."""
    betas = np.asarray(betas, dtype=float)
    num_uts = betas.shape[2]
    return np.repeat(betas[:, :, None, :], num_uts, axis=2)


def build_fsmc(betas: np.ndarray, num_bins: int, normalized_doppler: float,
               thresholds: Sequence[float] | None = None) -> FsmcModel:
    """Assemble the FSMC for all links from the frozen large-scale gains.

    ``thresholds`` optionally overrides the equiprobable construction with
    interior thresholds expressed in units of each link's mean gain.
    """
    psi0 = link_mean_gains(betas)
    num_cells, _, num_uts, _ = psi0.shape
    codec = StateCodec(num_cells, num_uts, num_bins)
    quantizers = []
    for link in codec.links:
        if thresholds is None:
            quantizers.append(equiprobable_thresholds(float(psi0[link]), num_bins))
        else:
            if len(thresholds) != num_bins - 1:
                raise ConfigError(f"{len(thresholds)} interior thresholds given for "
                                  f"Q_S={num_bins}; expected {num_bins - 1}")
            quantizers.append(scaled_thresholds(float(psi0[link]), thresholds))
    matrices = tuple(link_transition_matrix(q, normalized_doppler) for q in quantizers)
    return FsmcModel(codec, tuple(quantizers), matrices)
