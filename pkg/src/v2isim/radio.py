"""SINR, Shannon rates, and TTI-quantized transmission latencies for AV-SBS links."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .config import ScenarioConfig
from .scenario import Topology, path_gains


class UnservableLinkError(RuntimeError):
    """A link with zero achievable rate cannot carry a packet of any size."""


class AllocationError(ValueError):
    """A bandwidth allocation violating the per-cell subchannel constraints."""


@dataclass
class BandwidthAllocation:
    """Per-cell subchannel assignment.

    counts[n, m] is the number of subchannels SBS n allocates to AV m;
    subchannel_owner[n, k] is the AV using subchannel k in cell n (-1 if free).
    Within a cell every subchannel serves at most one AV and the total never
    exceeds the per-cell budget K.
    """

    counts: np.ndarray  # (N, M) int
    subchannel_owner: np.ndarray  # (N, K) int

    @classmethod
    def from_counts(cls, counts: np.ndarray, n_subchannels: int) -> "BandwidthAllocation":
        """Assign the lowest-indexed free subchannels to AVs in ascending AV order."""
        counts = np.asarray(counts, dtype=int)
        n_sbs, _ = counts.shape
        owner = np.full((n_sbs, n_subchannels), -1, dtype=int)
        for n in range(n_sbs):
            next_free = 0
            for m in np.nonzero(counts[n] > 0)[0]:
                c = int(counts[n, m])
                if next_free + c > n_subchannels:
                    raise AllocationError(
                        f"SBS {n}: allocation of {int(counts[n].sum())} exceeds K={n_subchannels}"
                    )
                owner[n, next_free : next_free + c] = m
                next_free += c
        return cls(counts=counts, subchannel_owner=owner)

    def subchannels_of(self, n: int, m: int) -> np.ndarray:
        return np.nonzero(self.subchannel_owner[n] == m)[0]

    def validate(self, config: ScenarioConfig) -> None:
        if np.any(self.counts < 0):
            raise AllocationError("subchannel counts must be nonnegative")
        if self.counts.sum(axis=1).max(initial=0) > config.n_subchannels:
            raise AllocationError("per-SBS allocation exceeds the subchannel budget")
        for n in range(self.counts.shape[0]):
            owned = self.subchannel_owner[n]
            for m in range(self.counts.shape[1]):
                if int((owned == m).sum()) != int(self.counts[n, m]):
                    raise AllocationError(
                        f"subchannel map of SBS {n} disagrees with counts for AV {m}"
                    )


@dataclass(frozen=True)
class LinkBudget:
    """Realized link figures for one served AV."""

    dl_sinr: tuple[float, ...]  # per assigned subchannel
    ul_sinr: float
    dl_rate_bps: float
    interference_dl_mw: float  # summed over assigned subchannels
    interference_ul_mw: float


# -- signal / interference primitives ----------------------------------------


def dl_signal_matrix(topology: Topology, config: ScenarioConfig) -> np.ndarray:
    """(M, N, K) received downlink power in mW through each SBS's own fading."""
    gains = path_gains(topology, config)  # (M, N)
    const = config.antenna_gain_av * config.antenna_gain_sbs * config.sbs_tx_power_mw
    return const * topology.fading_dl * gains[:, :, None]


def ul_signal_matrix(topology: Topology, config: ScenarioConfig) -> np.ndarray:
    """(M, N) received uplink power in mW on the shared uplink subchannel."""
    gains = path_gains(topology, config)
    const = config.antenna_gain_av * config.antenna_gain_sbs * config.av_tx_power_mw
    return const * topology.fading_ul * gains


def downlink_sinr(
    topology: Topology,
    config: ScenarioConfig,
    m: int,
    n: int,
    k: int,
    active_interferers: Iterable[int] | None = None,
) -> float:
    """Downlink SINR of AV m served by SBS n on subchannel k.

    active_interferers is the set of SBSs transmitting on k; None means the
    worst case where every other SBS is active.
    """
    signal = dl_signal_matrix(topology, config)
    if active_interferers is None:
        interferers = [i for i in range(topology.n_sbs) if i != n]
    else:
        interferers = [i for i in active_interferers if i != n]
    interference = float(signal[m, interferers, k].sum()) if interferers else 0.0
    return float(signal[m, n, k] / (interference + config.noise_power_mw))


def uplink_sinr(
    topology: Topology,
    config: ScenarioConfig,
    m: int,
    n: int,
    active_interferers: Iterable[int] | None = None,
) -> float:
    """Uplink SINR of AV m at SBS n; interferers are AVs sharing the uplink subchannel."""
    signal = ul_signal_matrix(topology, config)
    if active_interferers is None:
        interferers = [i for i in range(topology.n_av) if i != m]
    else:
        interferers = [i for i in active_interferers if i != m]
    interference = float(signal[interferers, n].sum()) if interferers else 0.0
    return float(signal[m, n] / (interference + config.noise_power_mw))


# -- rates and TTI quantization ----------------------------------------------


def shannon_rate(config: ScenarioConfig, sinrs: Sequence[float]) -> float:
    """Aggregate rate over a set of subchannels, w * sum(log2(1 + sinr))."""
    arr = np.asarray(list(sinrs), dtype=float)
    if arr.size == 0:
        return 0.0
    return float(config.subchannel_bw * np.log2(1.0 + arr).sum())


def active_sbs_by_subchannel(alloc: BandwidthAllocation) -> np.ndarray:
    """(N, K) boolean mask: SBS n transmits on subchannel k."""
    return alloc.subchannel_owner >= 0


def downlink_rate(
    topology: Topology,
    config: ScenarioConfig,
    m: int,
    n: int,
    alloc: BandwidthAllocation,
) -> float:
    """Realized downlink rate of AV m at SBS n under the given allocation.

    Interference on each subchannel comes from the SBSs that actually occupy it,
    unless worst_case_interference is set, in which case all other cells count.
    """
    ks = alloc.subchannels_of(n, m)
    if ks.size == 0:
        return 0.0
    signal = dl_signal_matrix(topology, config)
    sinrs = []
    active = active_sbs_by_subchannel(alloc)
    for k in ks:
        if config.worst_case_interference:
            interferers = [i for i in range(topology.n_sbs) if i != n]
        else:
            interferers = [i for i in np.nonzero(active[:, k])[0] if i != n]
        interference = float(signal[m, interferers, k].sum()) if interferers else 0.0
        sinrs.append(float(signal[m, n, k] / (interference + config.noise_power_mw)))
    return shannon_rate(config, sinrs)


def candidate_downlink_rate(
    topology: Topology, config: ScenarioConfig, m: int, n: int, count: int
) -> float:
    """Matching-phase valuation of a count-subchannel offer.

    Before a global allocation exists the offer is valued on the pair's first
    `count` subchannels under worst-case interference, so the valuation does not
    depend on the still-unknown allocations of other cells.
    """
    if count <= 0:
        return 0.0
    signal = dl_signal_matrix(topology, config)
    tot = signal[m].sum(axis=0)  # (K,) total received power per subchannel
    ks = range(min(count, config.n_subchannels))
    sinrs = [
        float(signal[m, n, k] / (tot[k] - signal[m, n, k] + config.noise_power_mw)) for k in ks
    ]
    return shannon_rate(config, sinrs)


def ttis_for_bits(bits: int, rate_bps: float, config: ScenarioConfig) -> int:
    """Number of TTIs to move `bits` at `rate_bps`; ceiling quantized."""
    per_tti = rate_bps * config.tti_s
    if per_tti <= 0.0:
        raise UnservableLinkError("zero-rate link cannot transmit")
    return int(math.ceil(bits / per_tti))


def downlink_ttis(
    topology: Topology,
    config: ScenarioConfig,
    m: int,
    n: int,
    alloc: BandwidthAllocation,
) -> int:
    rate = downlink_rate(topology, config, m, n, alloc)
    bits = config.packet_bits(int(topology.av_task[m]))
    return ttis_for_bits(bits, rate, config)


def uplink_ttis(
    topology: Topology,
    config: ScenarioConfig,
    m: int,
    n: int,
    active_interferers: Iterable[int] | None = None,
) -> int:
    sinr = uplink_sinr(topology, config, m, n, active_interferers)
    rate = shannon_rate(config, [sinr])
    return ttis_for_bits(config.ul_packet_bits, rate, config)


def transmission_latency_ms(
    topology: Topology,
    config: ScenarioConfig,
    m: int,
    n: int,
    alloc: BandwidthAllocation,
    ul_interferers: Iterable[int] | None = None,
) -> float:
    """(uplink + downlink) TTIs, scaled by the TTI duration, in milliseconds."""
    total = downlink_ttis(topology, config, m, n, alloc) + uplink_ttis(
        topology, config, m, n, ul_interferers
    )
    return total * config.tti_ms


# -- vectorized worst-case tables used by the matching phase ------------------


def worst_case_dl_sinr(topology: Topology, config: ScenarioConfig) -> np.ndarray:
    """(M, N, K) downlink SINR with every other cell transmitting on every subchannel."""
    signal = dl_signal_matrix(topology, config)
    tot = signal.sum(axis=1, keepdims=True)  # (M, 1, K)
    return signal / (tot - signal + config.noise_power_mw)


def worst_case_ul_sinr(topology: Topology, config: ScenarioConfig) -> np.ndarray:
    """(M, N) uplink SINR with every other AV transmitting on the uplink subchannel."""
    signal = ul_signal_matrix(topology, config)
    tot = signal.sum(axis=0, keepdims=True)  # (1, N)
    return signal / (tot - signal + config.noise_power_mw)
