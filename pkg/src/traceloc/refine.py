"""Iterative neighbor-consistency scoring of geolocation candidates.

Every candidate location of every IP is scored against the RTT budget of
its neighboring hops: two adjacent hops cannot sit farther apart than the
distance light travels in fiber during their RTT difference, padded by a
fraction of the two RTTs summed.  Scores are performance ratios (feasible
evaluations over total evaluations).  Candidates far below an IP's best
ratio are pruned, and the process repeats — each round rescoring against
the *previous* round's surviving candidate sets — until candidate sets
stop changing.  IPs whose best candidate still scores poorly, either
overall or in exactly one travel direction, are tagged anomalous.
"""
from __future__ import annotations

import enum
from bisect import bisect_left
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

from .diagnostics import Diagnostics, logger
from .geo import CityCluster, GeoPoint, haversine_km, sol_km
from .ingest import CleanPath, ip_key


@dataclass
class RefineConfig:
    """Knobs for candidate scoring, pruning, and anomaly tagging."""

    deviation_fraction: float = 0.10
    prune_fraction: float = 0.90
    anomaly_ratio_threshold: float = 0.5
    direction_threshold: float = 0.5
    max_iterations: int = 20
    min_observations: int = 3


class IpStatus(enum.Enum):
    ACTIVE = "active"
    ANOMALOUS = "anomalous"


@dataclass
class PairObservation:
    """One adjacency sighting: RTTs for the numerically-lower ip (``rtt_a``)
    and higher ip (``rtt_b``), plus which one the packet reached first."""

    rtt_a: float
    rtt_b: float
    a_first: bool


@dataclass
class NeighborPair:
    """All observations of two IPs appearing adjacent in some path.

    ``ip_a`` < ``ip_b`` numerically; observations accumulate across every
    path regardless of travel direction.
    """

    ip_a: str
    ip_b: str
    observations: list[PairObservation] = field(default_factory=list)


@dataclass
class CandidateState:
    """Surviving candidates for one IP plus the ratios of the last scoring
    round.  Ratio maps are keyed by cluster_id; directional ratios are
    ``None`` until evidence exists for that direction."""

    ip: str
    candidates: list[CityCluster]
    ratio: dict[int, float] = field(default_factory=dict)
    prev_ratio: dict[int, float | None] = field(default_factory=dict)
    next_ratio: dict[int, float | None] = field(default_factory=dict)
    status: IpStatus = IpStatus.ACTIVE
    evaluations: int = 0


def make_states(clusters_by_ip: dict[str, list[CityCluster]]) -> dict[str, CandidateState]:
    """Initial states: every candidate starts with a vacuous perfect ratio."""
    states: dict[str, CandidateState] = {}
    for ip in sorted(clusters_by_ip, key=ip_key):
        clusters = clusters_by_ip[ip]
        if not clusters:
            continue
        states[ip] = CandidateState(
            ip=ip,
            candidates=list(clusters),
            ratio={c.cluster_id: 1.0 for c in clusters},
            prev_ratio={c.cluster_id: None for c in clusters},
            next_ratio={c.cluster_id: None for c in clusters},
        )
    return states


def extract_pairs(paths: list[CleanPath]) -> list[NeighborPair]:
    """Collect unordered adjacent-IP pairs and their RTT observations."""
    acc: dict[tuple[str, str], list[PairObservation]] = {}
    for path in paths:
        for (ip_x, rtt_x), (ip_y, rtt_y) in zip(path.hops, path.hops[1:]):
            if ip_key(ip_x) <= ip_key(ip_y):
                key, obs = (ip_x, ip_y), PairObservation(rtt_x, rtt_y, a_first=True)
            else:
                key, obs = (ip_y, ip_x), PairObservation(rtt_y, rtt_x, a_first=False)
            acc.setdefault(key, []).append(obs)
    return [
        NeighborPair(ip_a=a, ip_b=b, observations=acc[(a, b)])
        for a, b in sorted(acc, key=lambda k: (ip_key(k[0]), ip_key(k[1])))
    ]


def pair_feasible(
    loc_a: GeoPoint, loc_b: GeoPoint, rtt_a: float, rtt_b: float, cfg: RefineConfig
) -> bool:
    """Can these two locations be adjacent hops given their RTTs?

    True when the great-circle distance fits within the light-in-fiber
    budget of the RTT difference plus ``deviation_fraction`` of the RTT
    sum (boundary inclusive).  Symmetric in the two (location, RTT) roles.
    """
    budget_ms = abs(rtt_a - rtt_b) + cfg.deviation_fraction * (rtt_a + rtt_b)
    return haversine_km(loc_a, loc_b) <= sol_km(budget_ms)


class _PairView:
    """A NeighborPair pre-digested for scoring: distance budgets in km,
    sorted per travel direction, so a candidate-pair distance turns into
    feasible/total counts with one bisect."""

    __slots__ = ("ip_a", "ip_b", "budgets_a_first", "budgets_b_first", "_dist")

    def __init__(self, pair: NeighborPair, cfg: RefineConfig) -> None:
        self.ip_a = pair.ip_a
        self.ip_b = pair.ip_b
        a_first: list[float] = []
        b_first: list[float] = []
        for obs in pair.observations:
            budget_km = sol_km(
                abs(obs.rtt_a - obs.rtt_b)
                + cfg.deviation_fraction * (obs.rtt_a + obs.rtt_b)
            )
            (a_first if obs.a_first else b_first).append(budget_km)
        a_first.sort()
        b_first.sort()
        self.budgets_a_first = a_first
        self.budgets_b_first = b_first
        self._dist: dict[tuple[int, int], float] = {}

    def distance(self, cand_a: CityCluster, cand_b: CityCluster) -> float:
        key = (cand_a.cluster_id, cand_b.cluster_id)
        d = self._dist.get(key)
        if d is None:
            d = haversine_km(cand_a.centroid, cand_b.centroid)
            self._dist[key] = d
        return d


def _feasible_count(sorted_budgets: list[float], distance_km: float) -> int:
    # budget >= distance means feasible; budgets are sorted ascending.
    return len(sorted_budgets) - bisect_left(sorted_budgets, distance_km)


@dataclass
class _Tally:
    feas: int = 0
    total: int = 0
    prev_feas: int = 0
    prev_total: int = 0
    next_feas: int = 0
    next_total: int = 0


def _score_ip(
    state: CandidateState,
    views: list[tuple[_PairView, bool]],
    states: dict[str, CandidateState],
) -> dict[int, _Tally] | None:
    """Tally feasible/total evaluation counts for one IP's candidates
    against the candidate sets its neighbors currently hold."""
    tallies = {c.cluster_id: _Tally() for c in state.candidates}
    any_eval = False
    for view, is_a in views:
        other_ip = view.ip_b if is_a else view.ip_a
        other = states.get(other_ip)
        if other is None or not other.candidates:
            continue
        # Budgets where the neighbor came first count toward the previous-
        # direction ratio; the rest toward the next-direction ratio.
        prev_budgets = view.budgets_b_first if is_a else view.budgets_a_first
        next_budgets = view.budgets_a_first if is_a else view.budgets_b_first
        n_prev, n_next = len(prev_budgets), len(next_budgets)
        for cand in state.candidates:
            tally = tallies[cand.cluster_id]
            for other_cand in other.candidates:
                if is_a:
                    d = view.distance(cand, other_cand)
                else:
                    d = view.distance(other_cand, cand)
                pf = _feasible_count(prev_budgets, d)
                nf = _feasible_count(next_budgets, d)
                tally.prev_feas += pf
                tally.prev_total += n_prev
                tally.next_feas += nf
                tally.next_total += n_next
                tally.feas += pf + nf
                tally.total += n_prev + n_next
                any_eval = True
    return tallies if any_eval else None


def _apply_tallies(state: CandidateState, tallies: dict[int, _Tally]) -> None:
    ratio: dict[int, float] = {}
    prev_ratio: dict[int, float | None] = {}
    next_ratio: dict[int, float | None] = {}
    total = 0
    for cand in state.candidates:
        t = tallies[cand.cluster_id]
        ratio[cand.cluster_id] = t.feas / t.total if t.total else 1.0
        prev_ratio[cand.cluster_id] = t.prev_feas / t.prev_total if t.prev_total else None
        next_ratio[cand.cluster_id] = t.next_feas / t.next_total if t.next_total else None
        total = t.total
    state.ratio = ratio
    state.prev_ratio = prev_ratio
    state.next_ratio = next_ratio
    state.evaluations = total


def _views_by_ip(
    views: list[_PairView],
) -> dict[str, list[tuple[_PairView, bool]]]:
    by_ip: dict[str, list[tuple[_PairView, bool]]] = {}
    for view in views:
        by_ip.setdefault(view.ip_a, []).append((view, True))
        by_ip.setdefault(view.ip_b, []).append((view, False))
    return by_ip


def _score_views(
    states: dict[str, CandidateState],
    by_ip: dict[str, list[tuple[_PairView, bool]]],
    threads: int = 1,
) -> None:
    """One scoring round over every IP, reading candidate sets as they
    stood at entry (scoring never mutates candidate lists, so all IPs see
    the same previous-round sets regardless of order or parallelism)."""
    order = sorted(states, key=ip_key)

    def work(ip: str) -> tuple[str, dict[int, _Tally] | None]:
        return ip, _score_ip(states[ip], by_ip.get(ip, []), states)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = dict(pool.map(work, order))
    else:
        results = dict(map(work, order))

    for ip in order:
        tallies = results[ip]
        if tallies is None:
            continue  # no surviving neighbor candidates: ratios carry over
        _apply_tallies(states[ip], tallies)


def score_iteration(
    states: dict[str, CandidateState],
    pairs: list[NeighborPair],
    cfg: RefineConfig,
    threads: int = 1,
) -> dict[str, CandidateState]:
    """Score one round: every candidate of every IP against every neighbor
    candidate and every observation.  Updates ratios in place and returns
    the states."""
    views = [_PairView(p, cfg) for p in pairs]
    _score_views(states, _views_by_ip(views), threads)
    return states


def prune(state: CandidateState, cfg: RefineConfig) -> CandidateState:
    """Drop candidates scoring below ``prune_fraction`` of the IP's best
    ratio.  A best ratio of zero prunes nothing, and the last remaining
    candidate is never dropped."""
    if not state.candidates:
        return state
    r_star = max(state.ratio.get(c.cluster_id, 0.0) for c in state.candidates)
    if r_star <= 0.0:
        return state
    cutoff = cfg.prune_fraction * r_star
    keep = [c for c in state.candidates if state.ratio.get(c.cluster_id, 0.0) >= cutoff]
    if not keep:  # unreachable while prune_fraction <= 1, kept as a guard
        keep = [
            max(
                state.candidates,
                key=lambda c: (state.ratio.get(c.cluster_id, 0.0), -c.cluster_id),
            )
        ]
    if len(keep) != len(state.candidates):
        kept_ids = {c.cluster_id for c in keep}
        state.candidates = keep
        state.ratio = {k: v for k, v in state.ratio.items() if k in kept_ids}
        state.prev_ratio = {k: v for k, v in state.prev_ratio.items() if k in kept_ids}
        state.next_ratio = {k: v for k, v in state.next_ratio.items() if k in kept_ids}
    return state


def iterate(
    states: dict[str, CandidateState],
    pairs: list[NeighborPair],
    cfg: RefineConfig,
    threads: int = 1,
    diag: Diagnostics | None = None,
) -> tuple[dict[str, CandidateState], int]:
    """Alternate scoring and pruning until a fixed point of the candidate
    sets, or ``max_iterations`` rounds (logged as a warning).

    Candidate updates are simultaneous: a round scores every IP against
    the sets that survived the previous round, then prunes all IPs at
    once.  Returns ``(states, iterations_run)``.
    """
    views = [_PairView(p, cfg) for p in pairs]
    by_ip = _views_by_ip(views)
    iterations = 0
    for _ in range(max(1, cfg.max_iterations)):
        iterations += 1
        _score_views(states, by_ip, threads)
        changed = 0
        for ip in sorted(states, key=ip_key):
            before = len(states[ip].candidates)
            prune(states[ip], cfg)
            if len(states[ip].candidates) != before:
                changed += 1
        if changed == 0:
            break
    else:
        if diag is not None:
            diag.warn(
                "refine_no_convergence",
                f"candidate sets still changing after {cfg.max_iterations} iterations",
            )
        else:
            logger.warning(
                "refine_no_convergence: candidate sets still changing after %d iterations",
                cfg.max_iterations,
            )
    return states, iterations


def tag_anomalies(
    states: dict[str, CandidateState], cfg: RefineConfig
) -> dict[str, CandidateState]:
    """Tag IPs whose best candidate stays infeasible.

    An IP turns anomalous when its best ratio falls below the anomaly
    threshold, or when exactly one of the best candidate's directional
    ratios (previous-hop side vs next-hop side) is below the direction
    threshold.  IPs with fewer than ``min_observations`` total evaluations
    are never tagged.  A missing directional ratio counts as healthy.
    """
    for ip in sorted(states, key=ip_key):
        state = states[ip]
        if not state.candidates or state.evaluations < cfg.min_observations:
            continue
        best = max(
            state.candidates,
            key=lambda c: (state.ratio.get(c.cluster_id, 0.0), -c.cluster_id),
        )
        best_ratio = state.ratio.get(best.cluster_id, 0.0)
        bp = state.prev_ratio.get(best.cluster_id)
        bn = state.next_ratio.get(best.cluster_id)
        prev_low = bp is not None and bp < cfg.direction_threshold
        next_low = bn is not None and bn < cfg.direction_threshold
        if best_ratio < cfg.anomaly_ratio_threshold or (prev_low != next_low):
            state.status = IpStatus.ANOMALOUS
    return states
