"""Iterative AV-SBS association with bandwidth escalation, plus its game-theoretic verifiers.

The market works like a labor market: SBSs (firms) offer association to AVs
(workers), the per-AV bandwidth is the salary, and an SBS whose offer is
rejected raises the salary by one subchannel.  AVs keep the single best offer
each round.  The run converges when a round produces no rejections.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .compute import ExecutionPmf, execution_pmf
from .config import ScenarioConfig
from .radio import BandwidthAllocation, worst_case_dl_sinr, worst_case_ul_sinr
from .scenario import Topology

_INF = math.inf


class MatchingError(RuntimeError):
    """Internal invariant broken: the round cap was exceeded."""


class InstanceTooLargeError(ValueError):
    """Brute-force enumeration refused to avoid a silent exponential blowup."""


@dataclass(frozen=True)
class OfferRecord:
    round: int
    sbs: int
    av: int
    count: int  # subchannels attached to the offer
    outcome: str  # "accepted" or "rejected"

    def to_json_dict(self) -> dict:
        return {
            "round": self.round,
            "sbs": self.sbs,
            "av": self.av,
            "count": self.count,
            "outcome": self.outcome,
        }


@dataclass
class OfferState:
    """Mutable negotiation state: salaries, tentative acceptances, candidate sets."""

    counts: np.ndarray  # (N, M) subchannel counts per pair, monotone across rounds
    held: list  # per AV: SBS whose offer is tentatively accepted, or None
    holders: list  # per SBS: AVs holding its offer, in acceptance order
    withdrawn: np.ndarray  # (N, M) bool, permanently retired pairs
    selections: list  # per SBS: candidate batch of the current round

    @classmethod
    def initial(cls, n_sbs: int, n_av: int) -> "OfferState":
        return cls(
            counts=np.ones((n_sbs, n_av), dtype=int),
            held=[None] * n_av,
            holders=[[] for _ in range(n_sbs)],
            withdrawn=np.zeros((n_sbs, n_av), dtype=bool),
            selections=[[] for _ in range(n_sbs)],
        )


@dataclass
class Matching:
    """Output of an association scheme: the relation f plus its bandwidth."""

    assignment: list  # per AV: SBS index or None
    accepted: list  # per SBS: matched AVs in queue (service) order
    bandwidth: BandwidthAllocation
    rounds_used: int
    offer_log: list = field(default_factory=list)  # per round: list[OfferRecord]
    eligible_avs: tuple = ()  # AVs that received at least one opening offer

    def offer_log_json_lines(self) -> list[str]:
        import json

        return [
            json.dumps(rec.to_json_dict(), sort_keys=True)
            for round_recs in self.offer_log
            for rec in round_recs
        ]


# -- value model ---------------------------------------------------------------


class MatchingContext:
    """Per-instance caches for the utility model used during negotiation.

    All transmission terms are valued under worst-case interference: candidate
    offers must not depend on the still-unknown final allocation of other cells.
    """

    def __init__(self, topology: Topology, config: ScenarioConfig):
        self.topology = topology
        self.config = config
        self.n_av = topology.n_av
        self.n_sbs = topology.n_sbs
        m, n = self.n_av, self.n_sbs

        if m and n:
            dl = worst_case_dl_sinr(topology, config)  # (M, N, K)
            self._dl_log_cum = np.cumsum(np.log2(1.0 + dl), axis=2)
            ul = worst_case_ul_sinr(topology, config)  # (M, N)
            ul_per_tti = config.subchannel_bw * np.log2(1.0 + ul) * config.tti_s
            with np.errstate(divide="ignore"):
                raw = np.where(
                    ul_per_tti > 0.0, np.ceil(config.ul_packet_bits / ul_per_tti), _INF
                )
            self.ul_ttis = raw  # (M, N), float with inf for dead links
        else:
            self._dl_log_cum = np.zeros((m, n, config.n_subchannels))
            self.ul_ttis = np.zeros((m, n))

        self._bits = np.array(
            [config.packet_bits(int(t)) for t in topology.av_task], dtype=float
        )
        self._dl_ttis_memo: dict = {}
        self._exec_pmf: dict = {}
        self._exec_mean: dict = {}
        self._queue_stats: dict = {}

    # transmission ------------------------------------------------------------

    def dl_ttis(self, m: int, n: int, count: int) -> float:
        count = min(int(count), self.config.n_subchannels)
        if count < 1:
            return _INF
        key = (m, n, count)
        hit = self._dl_ttis_memo.get(key)
        if hit is not None:
            return hit
        rate = self.config.subchannel_bw * float(self._dl_log_cum[m, n, count - 1])
        per_tti = rate * self.config.tti_s
        val = math.ceil(self._bits[m] / per_tti) if per_tti > 0.0 else _INF
        self._dl_ttis_memo[key] = val
        return val

    def tau_t_ms(self, m: int, n: int, count: int) -> float:
        total = self.dl_ttis(m, n, count) + self.ul_ttis[m, n]
        return total * self.config.tti_ms

    def servable(self, m: int, n: int) -> bool:
        return self.tau_t_ms(m, n, 1) < _INF

    # compute ------------------------------------------------------------------

    def exec_pmf(self, machine_id: int, task_id: int) -> ExecutionPmf:
        key = (machine_id, task_id)
        if key not in self._exec_pmf:
            self._exec_pmf[key] = execution_pmf(self.config, machine_id, task_id)
        return self._exec_pmf[key]

    def exec_mean_ms(self, machine_id: int, task_id: int) -> float:
        key = (machine_id, task_id)
        if key not in self._exec_mean:
            self._exec_mean[key] = self.exec_pmf(machine_id, task_id).mean_ms()
        return self._exec_mean[key]

    def queue_stats(self, machine_id: int, tasks: tuple) -> tuple:
        """(completion pmf of the last task as a vector, batch tau_c in ms)."""
        if not tasks:
            return None, 0.0
        key = (machine_id, tasks)
        hit = self._queue_stats.get(key)
        if hit is not None:
            return hit
        parent_probs, parent_tau = self.queue_stats(machine_id, tasks[:-1])
        e = self.exec_pmf(machine_id, tasks[-1])
        if parent_probs is None:
            probs = e.probs
        else:
            probs = np.concatenate([[0.0], np.convolve(parent_probs, e.probs)])
        t_max = self.config.task_by_id(tasks[-1]).max_steps
        hi = min(t_max, probs.size)
        trunc = float((np.arange(1, hi + 1) * probs[:hi]).sum()) if hi > 0 else 0.0
        stats = (probs, parent_tau + trunc * self.config.time_step_ms)
        self._queue_stats[key] = stats
        return stats

    def queue_tau_c_ms(self, machine_id: int, tasks: tuple) -> float:
        return self.queue_stats(machine_id, tasks)[1]

    # utilities ------------------------------------------------------------------

    def pair_utility(self, m: int, n: int, count: int) -> float:
        """Salary-minus-transmission value of one AV to one SBS: alpha/w_mn - tau_t."""
        tau = self.tau_t_ms(m, n, count)
        if tau == _INF:
            return -_INF
        cfg = self.config
        price = cfg.alpha / (cfg.subchannel_bw * count)
        return price - cfg.utility_latency_scale * tau

    def tasks_of(self, avs: Iterable[int]) -> tuple:
        return tuple(int(self.topology.av_task[m]) for m in avs)

    def machine_of(self, n: int) -> int:
        return int(self.topology.sbs_machine[n])

    def batch_utility(self, n: int, avs_in_order: Sequence[int], counts_row) -> float:
        """SBS utility of a candidate batch under a per-AV subchannel count vector."""
        if len(avs_in_order) == 0:
            return 0.0
        total = 0.0
        for m in avs_in_order:
            u = self.pair_utility(m, n, int(counts_row[m]))
            if u == -_INF:
                return -_INF
            total += u
        tau_c = self.queue_tau_c_ms(self.machine_of(n), self.tasks_of(avs_in_order))
        return total - self.config.utility_latency_scale * tau_c

    def av_utility(self, m: int, n: int, count: int, preview: Sequence[int]) -> float:
        """Negative expected E2E latency in ms for AV m if served by SBS n.

        preview is the SBS's prospective queue; m must appear in it.  The
        compute part is the mean completion time of m at its queue position,
        which by independence is the sum of execution means up to m.
        """
        tau = self.tau_t_ms(m, n, count)
        if tau == _INF:
            return -_INF
        machine = self.machine_of(n)
        wait = 0.0
        seen = False
        for a in preview:
            wait += self.exec_mean_ms(machine, int(self.topology.av_task[a]))
            if a == m:
                seen = True
                break
        if not seen:
            raise ValueError(f"AV {m} missing from its own queue preview")
        return -(tau + wait)


# -- public utility operations (spec surface) -----------------------------------


def sbs_utility(
    topology: Topology,
    config: ScenarioConfig,
    n: int,
    candidates: Sequence[int],
    offers: OfferState,
    ctx: MatchingContext | None = None,
) -> float:
    """Utility an SBS assigns to serving `candidates` (in queue order) at current salaries."""
    for m in candidates:
        if offers.counts[n, m] < 1:
            raise ValueError(f"candidate AV {m} has no bandwidth at SBS {n}")
    ctx = ctx or MatchingContext(topology, config)
    return ctx.batch_utility(n, list(candidates), offers.counts[n])


def av_utility(
    topology: Topology,
    config: ScenarioConfig,
    m: int,
    n: int,
    offers: OfferState,
    queue_preview: Sequence[int],
    ctx: MatchingContext | None = None,
) -> float:
    """Utility AV m assigns to SBS n's offer; -inf when the link cannot carry packets."""
    if offers.counts[n, m] < 1:
        raise ValueError(f"AV {m} has no bandwidth at SBS {n}")
    ctx = ctx or MatchingContext(topology, config)
    return ctx.av_utility(m, n, int(offers.counts[n, m]), queue_preview)


def select_candidates(
    topology: Topology,
    config: ScenarioConfig,
    n: int,
    offers: OfferState,
    ctx: MatchingContext | None = None,
) -> list:
    """One SBS's candidate batch for the current round.

    AVs already holding this SBS's offer are committed (their offers repeat), so
    they seed the batch.  Remaining AVs are scanned in descending order of their
    individual value alpha/w_mn - tau_t and greedily added while each addition
    improves the batch utility and fits the subchannel budget.
    """
    ctx = ctx or MatchingContext(topology, config)
    counts_row = offers.counts[n]
    batch = list(offers.holders[n])
    budget = int(sum(counts_row[m] for m in batch))
    current = ctx.batch_utility(n, batch, counts_row) if batch else 0.0

    scored = []
    for m in range(ctx.n_av):
        if m in batch or offers.withdrawn[n, m]:
            continue
        u = ctx.pair_utility(m, n, int(counts_row[m]))
        if u > 0.0:
            scored.append((-u, m))
    scored.sort()

    for _, m in scored:
        c = int(counts_row[m])
        if budget + c > config.n_subchannels:
            break
        trial = batch + [m]
        trial_u = ctx.batch_utility(n, trial, counts_row)
        if trial_u > current:
            batch = trial
            current = trial_u
            budget += c
        else:
            break
    return batch


# -- the negotiation loop ---------------------------------------------------------


def _resolve_offers(ctx, state, offers_by_sbs, previews_by_sbs, round_idx, log):
    """Step 4: every AV keeps its best live offer and rejects the rest.

    Returns the list of rejected (sbs, av) pairs. Ties go to the lowest SBS index.
    """
    offers_to_av: dict = {}
    for n, offered in enumerate(offers_by_sbs):
        for m in offered:
            offers_to_av.setdefault(m, []).append(n)

    rejected: list = []
    for m in sorted(offers_to_av):
        options = offers_to_av[m]
        best_n = None
        best_u = -_INF
        for n in options:
            u = ctx.av_utility(m, n, int(state.counts[n, m]), previews_by_sbs[n](m))
            if u > best_u:
                best_u, best_n = u, n
        if best_n is None or best_u == -_INF:
            # No servable offer; reject everything.
            for n in options:
                rejected.append((n, m))
                log.append(OfferRecord(round_idx, n, m, int(state.counts[n, m]), "rejected"))
            continue
        for n in options:
            outcome = "accepted" if n == best_n else "rejected"
            log.append(OfferRecord(round_idx, n, m, int(state.counts[n, m]), outcome))
            if n != best_n:
                rejected.append((n, m))
        if state.held[m] != best_n:
            if state.held[m] is not None and m in state.holders[state.held[m]]:
                state.holders[state.held[m]].remove(m)
            state.holders[best_n].append(m)
            state.held[m] = best_n
    return rejected


def _escalate(state, rejected, n_subchannels):
    """Step 5: one more subchannel for every rejected offer; withdraw past the budget."""
    for n, m in rejected:
        if state.counts[n, m] + 1 > n_subchannels:
            state.withdrawn[n, m] = True
        else:
            state.counts[n, m] += 1


def run_matching(
    topology: Topology,
    config: ScenarioConfig,
    *,
    skip_offer_repetition: bool = False,
) -> Matching:
    """Run the negotiation to convergence and return the final matching.

    skip_offer_repetition deliberately breaks the repeat-unrejected-offers rule;
    it exists only so the trace verifier can demonstrate that it catches the bug.
    """
    ctx = MatchingContext(topology, config)
    m_count, n_count = ctx.n_av, ctx.n_sbs
    k_budget = config.n_subchannels
    state = OfferState.initial(n_count, m_count)
    offer_log: list = []

    if m_count == 0 or n_count == 0:
        empty_alloc = BandwidthAllocation.from_counts(
            np.zeros((n_count, m_count), dtype=int), k_budget
        )
        return Matching(
            assignment=[None] * m_count,
            accepted=[[] for _ in range(n_count)],
            bandwidth=empty_alloc,
            rounds_used=0,
            offer_log=[],
            eligible_avs=(),
        )

    # Round 0: every SBS opens to each AV it could profitably serve with one
    # subchannel, quoting the latency of serving that AV by itself.
    round0_offers = []
    for n in range(n_count):
        cands = [m for m in range(m_count) if ctx.pair_utility(m, n, 1) > 0.0]
        cands.sort(key=lambda m: (-ctx.pair_utility(m, n, 1), m))
        round0_offers.append(cands[:k_budget])
    eligible = tuple(sorted({m for offs in round0_offers for m in offs}))

    log0: list = []
    solo_preview = [(lambda m: [m]) for _ in range(n_count)]
    rejections = _resolve_offers(ctx, state, round0_offers, solo_preview, 0, log0)
    offer_log.append(log0)
    _escalate(state, rejections, k_budget)
    rounds_used = 1

    round_cap = max(10 * m_count * k_budget, 100)
    if rejections:
        for round_idx in range(1, round_cap + 1):
            if skip_offer_repetition:
                saved = state.holders
                state.holders = [[] for _ in range(n_count)]
                sels = [select_candidates(topology, config, n, state, ctx) for n in range(n_count)]
                state.holders = saved
                # Drop holds whose offers vanished (this is the injected bug).
                for n in range(n_count):
                    for m in list(state.holders[n]):
                        if m not in sels[n]:
                            state.holders[n].remove(m)
                            state.held[m] = None
            else:
                sels = [select_candidates(topology, config, n, state, ctx) for n in range(n_count)]
            state.selections = sels
            previews = [(lambda m, sel=sel: sel) for sel in sels]
            log_n: list = []
            rejections = _resolve_offers(ctx, state, sels, previews, round_idx, log_n)
            offer_log.append(log_n)
            rounds_used = round_idx + 1
            if not rejections:
                break
            _escalate(state, rejections, k_budget)
        else:
            raise MatchingError(
                f"no convergence within {round_cap} rounds; the negotiation should "
                "terminate after finitely many escalations"
            )

    counts = np.zeros((n_count, m_count), dtype=int)
    accepted = [list(state.holders[n]) for n in range(n_count)]
    for n in range(n_count):
        for m in accepted[n]:
            counts[n, m] = state.counts[n, m]
    alloc = BandwidthAllocation.from_counts(counts, k_budget)
    return Matching(
        assignment=list(state.held),
        accepted=accepted,
        bandwidth=alloc,
        rounds_used=rounds_used,
        offer_log=offer_log,
        eligible_avs=eligible,
    )


# -- verifiers --------------------------------------------------------------------


def is_individually_rational(
    matching: Matching,
    topology: Topology,
    config: ScenarioConfig,
    ctx: MatchingContext | None = None,
) -> tuple[bool, list]:
    """Every matched AV holds bandwidth and every serving SBS has positive finite utility."""
    ctx = ctx or MatchingContext(topology, config)
    violations: list = []
    for m, n in enumerate(matching.assignment):
        if n is None:
            continue
        if matching.bandwidth.counts[n, m] < 1:
            violations.append(f"AV {m} matched to SBS {n} with zero subchannels")
    for n, avs in enumerate(matching.accepted):
        if not avs:
            continue
        u = ctx.batch_utility(n, avs, matching.bandwidth.counts[n])
        if not (0.0 < u < _INF):
            violations.append(f"SBS {n} serves {avs} with utility {u:.6g}")
    return (not violations), violations


def _compositions(q: int, floors: Sequence[int], cap: int):
    """All count vectors c >= floors with sum(c) <= cap."""

    def rec(i: int, remaining: int):
        if i == q:
            yield ()
            return
        lo = floors[i]
        needed_after = sum(floors[i + 1 :])
        for c in range(lo, remaining - needed_after + 1):
            for rest in rec(i + 1, remaining - c):
                yield (c,) + rest

    if sum(floors) > cap:
        return
    yield from rec(0, cap)


def find_blocking_pair(
    matching: Matching,
    topology: Topology,
    config: ScenarioConfig,
    max_subset: int,
    max_evaluations: int = 20_000_000,
    ctx: MatchingContext | None = None,
):
    """Exhaustive search for an SBS and AV subset that would both gain by deviating.

    Enumerates every SBS, every AV subset up to max_subset, and every per-AV
    subchannel vector with entries >= 1 summing to at most the cell budget.  A
    deviating coalition queues in ascending AV order.  Returns the first
    (sbs, avs, counts) found, or None.  Refuses instances whose enumeration
    would exceed max_evaluations.
    """
    ctx = ctx or MatchingContext(topology, config)
    m_count, n_count, k_budget = ctx.n_av, ctx.n_sbs, config.n_subchannels

    total = 0
    for q in range(1, min(max_subset, m_count) + 1):
        total += math.comb(m_count, q) * math.comb(k_budget, q)
    total *= n_count
    if total > max_evaluations:
        raise InstanceTooLargeError(
            f"blocking-pair enumeration would need ~{total} utility evaluations "
            f"(limit {max_evaluations})"
        )

    # Utility of the status quo.
    current_av_u = np.full(m_count, -_INF)
    for m, n in enumerate(matching.assignment):
        if n is None:
            continue
        queue = matching.accepted[n]
        current_av_u[m] = ctx.av_utility(m, n, int(matching.bandwidth.counts[n, m]), queue)
    current_sbs_u = np.zeros(n_count)
    for n, avs in enumerate(matching.accepted):
        current_sbs_u[n] = (
            ctx.batch_utility(n, avs, matching.bandwidth.counts[n]) if avs else 0.0
        )

    for n in range(n_count):
        machine = ctx.machine_of(n)
        for q in range(1, min(max_subset, m_count) + 1):
            for subset in itertools.combinations(range(m_count), q):
                if any(not ctx.servable(m, n) for m in subset):
                    continue
                tasks = ctx.tasks_of(subset)
                tau_c = ctx.queue_tau_c_ms(machine, tasks)
                # Mean completion of each member at its queue position.
                waits = []
                acc = 0.0
                for m in subset:
                    acc += ctx.exec_mean_ms(machine, int(topology.av_task[m]))
                    waits.append(acc)
                # Minimal counts that make each member strictly better off; the
                # AV side is non-decreasing in bandwidth, so floors are valid.
                floors = []
                feasible = True
                for i, m in enumerate(subset):
                    lo = None
                    for c in range(1, k_budget + 1):
                        if -(ctx.tau_t_ms(m, n, c) + waits[i]) > current_av_u[m]:
                            lo = c
                            break
                    if lo is None:
                        feasible = False
                        break
                    floors.append(lo)
                if not feasible:
                    continue
                for counts_vec in _compositions(q, floors, k_budget):
                    u = 0.0
                    for i, m in enumerate(subset):
                        u += ctx.pair_utility(m, n, counts_vec[i])
                    u -= config.utility_latency_scale * tau_c
                    if u > current_sbs_u[n]:
                        return n, subset, counts_vec
    return None


# -- offer-log property checks ------------------------------------------------------


def check_offer_persistence(matching: Matching) -> tuple[bool, list]:
    """Every offer not rejected in round j must be extended again in round j+1."""
    violations = []
    log = matching.offer_log
    for j in range(len(log) - 1):
        next_pairs = {(r.sbs, r.av) for r in log[j + 1]}
        for rec in log[j]:
            if rec.outcome == "accepted" and (rec.sbs, rec.av) not in next_pairs:
                violations.append(
                    f"offer SBS {rec.sbs} -> AV {rec.av} accepted in round {rec.round} "
                    f"was not repeated in round {rec.round + 1}"
                )
    return (not violations), violations


def check_monotone_escalation(matching: Matching) -> tuple[bool, list]:
    """Per-pair offered subchannel counts never decrease across rounds."""
    violations = []
    last: dict = {}
    for round_recs in matching.offer_log:
        for rec in round_recs:
            key = (rec.sbs, rec.av)
            if key in last and rec.count < last[key]:
                violations.append(
                    f"count for SBS {rec.sbs} -> AV {rec.av} fell from "
                    f"{last[key]} to {rec.count} in round {rec.round}"
                )
            last[key] = rec.count
    return (not violations), violations


def check_at_least_one_offer(matching: Matching) -> tuple[bool, list]:
    """Every AV that got an opening offer holds at least one offer in every round."""
    violations = []
    for j, round_recs in enumerate(matching.offer_log):
        offered = {r.av for r in round_recs}
        for m in matching.eligible_avs:
            if m not in offered:
                violations.append(f"AV {m} had no live offer in round {j}")
    return (not violations), violations


def check_final_argmax(matching: Matching) -> tuple[bool, list]:
    """At convergence each AV holds exactly one live offer: the one it accepted."""
    violations = []
    if not matching.offer_log:
        return True, violations
    final = matching.offer_log[-1]
    per_av: dict = {}
    for rec in final:
        per_av.setdefault(rec.av, []).append(rec)
    for m, recs in per_av.items():
        accepted = [r for r in recs if r.outcome == "accepted"]
        if len(recs) != 1 or len(accepted) != 1:
            violations.append(f"AV {m} ended with {len(recs)} live offers")
        elif matching.assignment[m] != accepted[0].sbs:
            violations.append(
                f"AV {m} assignment {matching.assignment[m]} disagrees with "
                f"its final accepted offer from SBS {accepted[0].sbs}"
            )
    return (not violations), violations
