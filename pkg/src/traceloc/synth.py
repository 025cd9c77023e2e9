"""Synthetic ground-truth worlds: routers at known city locations, a
connected link graph, simulated traceroutes with tunnel distortion, and
corrupted geolocation databases — everything a scored end-to-end
experiment needs.

Determinism matters more than realism here: identical seeds must yield
byte-identical corpora, so the module carries its own Dijkstra with
explicit tie-breaking and derives all randomness from string-seeded
generators (stable across processes).
"""
from __future__ import annotations

import heapq
import json
import math
import random
from dataclasses import dataclass
from pathlib import Path

from .diagnostics import Diagnostics
from .geo import (
    CityPolygon,
    GeoPoint,
    haversine_km,
    normalize_city,
)
from .ingest import CleanPath, GeoRecord, ip_key
from .refine import CandidateState, IpStatus
from .resolve import ResolutionOutcome, Verdict

_KM_PER_DEG = 111.19492664455873  # mean degree of latitude


@dataclass
class Router:
    ip: str
    location: GeoPoint
    city: str
    country: str


@dataclass
class World:
    routers: list[Router]
    links: list[tuple[int, int]]
    mpls_tunnels: list[list[int]]
    rng_seed: int


@dataclass
class InjectionSpec:
    """Database corruption plan.

    ``interface_error_fraction`` of routers get every record displaced to
    one consistent wrong catalog city at least ``min_displacement_km``
    away.  Everyone else keeps the true city with per-database jitter of
    at most ``db_noise_km``.  Optionally, ``decoy_fraction`` of the
    untouched routers additionally have ``decoy_db_count`` databases name
    a different catalog city, producing multi-candidate IPs without
    hiding the truth.
    """

    interface_error_fraction: float
    min_displacement_km: float
    db_count: int
    db_noise_km: float
    decoy_fraction: float = 0.0
    decoy_db_count: int = 1


def _router_ip(i: int) -> str:
    return f"203.0.{1 + i // 250}.{1 + i % 250}"


def generate_world(
    seed: int,
    n_routers: int,
    n_cities: int,
    mpls_fraction: float,
    catalog: list[CityPolygon],
    *,
    tunnel_len: int = 4,
    extra_degree: int = 2,
) -> World:
    """Build a connected router graph over ``n_cities`` catalog cities.

    Routers sit exactly on city centroids.  The backbone is the minimum
    spanning tree of router distances; each router additionally links to
    its ``extra_degree`` nearest peers.  ``mpls_fraction`` of backbone
    segments (rounded) become tunnels: node-disjoint runs of
    ``tunnel_len`` routers contiguous along the backbone, preferring the
    geographically longest runs (long-haul trunks are where tunnels live).
    Identical arguments produce identical worlds.
    """
    if n_routers < 2:
        raise ValueError("n_routers must be at least 2")
    if n_cities < 1:
        raise ValueError("n_cities must be at least 1")
    if n_cities > len(catalog):
        raise ValueError(
            f"n_cities={n_cities} exceeds catalog size {len(catalog)}"
        )
    if not 0.0 <= mpls_fraction <= 1.0:
        raise ValueError("mpls_fraction must be within [0, 1]")
    if tunnel_len < 2:
        raise ValueError("tunnel_len must be at least 2")

    rng = random.Random(f"world:{seed}")
    cities = rng.sample(sorted(catalog, key=lambda p: p.polygon_id), n_cities)
    routers: list[Router] = []
    for i in range(n_routers):
        # Deal cities round-robin so multi-router cities host an even
        # number of co-sited interfaces rather than a lopsided draw.
        city = cities[i % n_cities]
        routers.append(
            Router(
                ip=_router_ip(i),
                location=city.centroid,
                city=city.name,
                country=city.country,
            )
        )

    n = len(routers)
    dist = [[0.0] * n for _ in range(n)]
    for i in range(n):
        for j in range(i + 1, n):
            d = haversine_km(routers[i].location, routers[j].location)
            dist[i][j] = dist[j][i] = d

    # Prim's MST with (distance, node) tie-breaking.
    in_tree = [False] * n
    best = [math.inf] * n
    parent = [-1] * n
    best[0] = 0.0
    heap: list[tuple[float, int]] = [(0.0, 0)]
    backbone: list[tuple[int, int]] = []
    while heap:
        d, u = heapq.heappop(heap)
        if in_tree[u]:
            continue
        in_tree[u] = True
        if parent[u] >= 0:
            backbone.append((min(u, parent[u]), max(u, parent[u])))
        for v in range(n):
            if not in_tree[v] and dist[u][v] < best[v]:
                best[v] = dist[u][v]
                parent[v] = u
                heapq.heappush(heap, (dist[u][v], v))

    links = set(backbone)
    for i in range(n):
        order = sorted((dist[i][j], j) for j in range(n) if j != i)
        for _, j in order[:extra_degree]:
            links.add((min(i, j), max(i, j)))

    mst_adj: dict[int, list[int]] = {i: [] for i in range(n)}
    for a, b in backbone:
        mst_adj[a].append(b)
        mst_adj[b].append(a)
    for neighbors in mst_adj.values():
        neighbors.sort()

    n_tunnels = round(mpls_fraction * len(backbone))
    tunnels: list[list[int]] = []
    if n_tunnels > 0:
        runs: list[list[int]] = []

        def extend(path: list[int]) -> None:
            if len(path) == tunnel_len:
                if path[0] < path[-1]:  # one orientation per run
                    runs.append(list(path))
                return
            for nxt in mst_adj[path[-1]]:
                if nxt not in path:
                    path.append(nxt)
                    extend(path)
                    path.pop()

        for start in range(n):
            extend([start])

        def run_length(run: list[int]) -> float:
            return sum(dist[a][b] for a, b in zip(run, run[1:]))

        runs.sort(key=lambda r: (-run_length(r), r))
        used: set[int] = set()
        for run in runs:
            if len(tunnels) == n_tunnels:
                break
            if used.isdisjoint(run):
                tunnels.append(run)
                used.update(run)

    return World(
        routers=routers,
        links=sorted(links),
        mpls_tunnels=tunnels,
        rng_seed=seed,
    )


_TIE_EPS_KM = 1e-6

# Independently tie-broken route trees kept per source.  Real campaigns
# observe several equal-cost routes between the same pair as hashing and
# churn shuffle flows, so each probe draws one of these variants.
_ROUTE_VARIANTS = 4


def _shortest_path(
    adj: dict[int, list[tuple[int, float]]],
    key: tuple[int, int],
    cache: dict[tuple[int, int], tuple[list, list]],
    route_seed: str,
) -> tuple[list[float], list[int]]:
    if key in cache:
        return cache[key]
    src, variant = key
    rng = random.Random(f"route:{route_seed}:{src}:{variant}")
    n = len(adj)
    dist = [math.inf] * n
    pred = [-1] * n
    dist[src] = 0.0
    heap: list[tuple[float, int]] = [(0.0, src)]
    while heap:
        d, u = heapq.heappop(heap)
        if d > dist[u]:
            continue
        for v, w in adj[u]:
            nd = d + w
            if nd < dist[v] - _TIE_EPS_KM:
                dist[v] = nd
                pred[v] = u
                heapq.heappush(heap, (nd, v))
            elif abs(nd - dist[v]) <= _TIE_EPS_KM and w > _TIE_EPS_KM:
                # Equal-cost alternative: flip a coin so flows spread across
                # the tied routes instead of funnelling down one tree, the way
                # hash-based multipath does.  Distance is unchanged, so no
                # re-push; the new parent popped strictly earlier (w > 0),
                # which keeps the predecessor graph a tree.  Zero-weight ties
                # (co-located routers) stay excluded — re-parenting through
                # them can chain into a predecessor cycle.
                if rng.random() < 0.5:
                    pred[v] = u
    cache[key] = (dist, pred)
    return dist, pred


def simulate_traceroutes(
    world: World, n_paths: int, noise_fraction: float
) -> list[CleanPath]:
    """Shortest routes between random router pairs, with physical RTTs.

    The cumulative RTT at each hop is twice the along-path distance over
    the fiber propagation speed.  Hops crossing a tunnel in sequence all
    report the RTT of the hop where the tunnel run exits the path —
    applied before the per-hop multiplicative noise of ±``noise_fraction``.
    The reported path omits the probing source itself.
    """
    if not 0.0 <= noise_fraction < 1.0:
        raise ValueError("noise_fraction must be within [0, 1)")
    rng = random.Random(f"paths:{world.rng_seed}")
    n = len(world.routers)
    adj: dict[int, list[tuple[int, float]]] = {i: [] for i in range(n)}
    for a, b in world.links:
        w = haversine_km(world.routers[a].location, world.routers[b].location)
        adj[a].append((b, w))
        adj[b].append((a, w))
    for entries in adj.values():
        entries.sort()

    member_of: dict[int, tuple[int, int]] = {}
    for t_idx, tunnel in enumerate(world.mpls_tunnels):
        for pos, node in enumerate(tunnel):
            member_of[node] = (t_idx, pos)

    cache: dict[tuple[int, int], tuple[list, list]] = {}
    paths: list[CleanPath] = []
    attempts = 0
    max_attempts = max(n_paths * 50, 1000)
    while len(paths) < n_paths and attempts < max_attempts:
        attempts += 1
        src = rng.randrange(n)
        dst = rng.randrange(n)
        if src == dst:
            continue
        variant = rng.randrange(_ROUTE_VARIANTS)
        dist, pred = _shortest_path(adj, (src, variant), cache, f"{world.rng_seed}")
        if math.isinf(dist[dst]):
            continue
        nodes = [dst]
        while nodes[-1] != src:
            nodes.append(pred[nodes[-1]])
        nodes.reverse()
        if len(nodes) < 3:
            continue  # need at least two reported hops

        cumulative = [0.0]
        for a, b in zip(nodes, nodes[1:]):
            cumulative.append(
                cumulative[-1]
                + haversine_km(world.routers[a].location, world.routers[b].location)
            )
        # RTT in ms: out-and-back distance over 200 km/ms.
        rtts = [2.0 * c / 200.0 for c in cumulative]

        hops_nodes = nodes[1:]
        hop_rtts = rtts[1:]
        _apply_tunnels(hops_nodes, hop_rtts, member_of)
        if noise_fraction > 0.0:
            hop_rtts = [
                r * (1.0 + rng.uniform(-noise_fraction, noise_fraction))
                for r in hop_rtts
            ]
        paths.append(
            CleanPath(
                path_id=f"synth-{len(paths)}",
                hops=[
                    (world.routers[node].ip, rtt)
                    for node, rtt in zip(hops_nodes, hop_rtts)
                ],
                source_traceroute=f"router-{src}",
            )
        )
    return paths


def _apply_tunnels(
    nodes: list[int], rtts: list[float], member_of: dict[int, tuple[int, int]]
) -> None:
    """Rewrite RTTs inside tunnel runs to the run's exit-hop RTT.

    A run is a maximal stretch of path hops occupying consecutive tunnel
    positions in either direction; the exit is the run's last hop in path
    order.  Runs of a single hop are untouched.
    """
    i = 0
    while i < len(nodes):
        info = member_of.get(nodes[i])
        if info is None:
            i += 1
            continue
        t_idx, pos = info
        j = i
        direction = 0
        while j + 1 < len(nodes):
            nxt = member_of.get(nodes[j + 1])
            if nxt is None or nxt[0] != t_idx:
                break
            step = nxt[1] - member_of[nodes[j]][1]
            if step not in (1, -1) or (direction and step != direction):
                break
            direction = step
            j += 1
        if j > i:
            for k in range(i, j + 1):
                rtts[k] = rtts[j]
        i = j + 1


def corrupt_geodb(
    world: World,
    spec: InjectionSpec,
    seed: int,
    catalog: list[CityPolygon],
    diag: Diagnostics | None = None,
) -> tuple[dict[str, list[GeoRecord]], set[str]]:
    """Produce per-database geolocation records for every router.

    Displaced routers have *all* databases agree on one wrong catalog city
    at least ``min_displacement_km`` from the truth; if no catalog city
    qualifies the router is skipped with a warning.  Everyone else keeps
    the true city, jittered independently per database by at most
    ``db_noise_km``.  Returns the snapshot and the displaced-IP set.
    """
    diag = diag or Diagnostics()
    if spec.db_count < 1:
        raise ValueError("db_count must be at least 1")
    rng = random.Random(f"geodb:{seed}")
    sources = [f"db{i + 1}" for i in range(spec.db_count)]
    n = len(world.routers)
    displaced_target = round(spec.interface_error_fraction * n)
    displaced_idx = set(rng.sample(range(n), min(displaced_target, n)))
    decoy_pool = [i for i in range(n) if i not in displaced_idx]
    decoy_target = round(spec.decoy_fraction * n)
    decoy_idx = set(rng.sample(decoy_pool, min(decoy_target, len(decoy_pool))))

    snapshot: dict[str, list[GeoRecord]] = {}
    displaced_ips: set[str] = set()
    catalog_sorted = sorted(catalog, key=lambda p: p.polygon_id)
    for i, router in enumerate(world.routers):
        records: list[GeoRecord] = []
        if i in displaced_idx:
            eligible = [
                c
                for c in catalog_sorted
                if haversine_km(c.centroid, router.location) >= spec.min_displacement_km
            ]
            if not eligible:
                diag.warn(
                    "synth_no_displacement_target",
                    f"{router.ip}: no catalog city ≥ {spec.min_displacement_km} km away",
                )
            else:
                wrong = rng.choice(eligible)
                records = [
                    GeoRecord(
                        ip=router.ip,
                        source=src,
                        lat=wrong.centroid.lat,
                        lon=wrong.centroid.lon,
                        city=wrong.name,
                        country=wrong.country,
                    )
                    for src in sources
                ]
                displaced_ips.add(router.ip)
        if not records:
            decoy_sources: set[str] = set()
            decoy_city: CityPolygon | None = None
            if i in decoy_idx and len(catalog_sorted) > 1:
                others = [c for c in catalog_sorted if normalize_city(c.name) != normalize_city(router.city)]
                if others:
                    decoy_city = rng.choice(others)
                    take = min(spec.decoy_db_count, max(0, spec.db_count - 1))
                    decoy_sources = set(sources[spec.db_count - take :])
            for src in sources:
                if decoy_city is not None and src in decoy_sources:
                    records.append(
                        GeoRecord(
                            ip=router.ip,
                            source=src,
                            lat=decoy_city.centroid.lat,
                            lon=decoy_city.centroid.lon,
                            city=decoy_city.name,
                            country=decoy_city.country,
                        )
                    )
                    continue
                bearing = rng.uniform(0.0, 2.0 * math.pi)
                offset_km = rng.uniform(0.0, spec.db_noise_km)
                lat, lon = _offset(router.location, bearing, offset_km)
                records.append(
                    GeoRecord(
                        ip=router.ip,
                        source=src,
                        lat=lat,
                        lon=lon,
                        city=router.city,
                        country=router.country,
                    )
                )
        snapshot[router.ip] = records
    return snapshot, displaced_ips


def _offset(point: GeoPoint, bearing_rad: float, distance_km: float) -> tuple[float, float]:
    dlat = distance_km * math.cos(bearing_rad) / _KM_PER_DEG
    denom = _KM_PER_DEG * max(0.01, math.cos(math.radians(point.lat)))
    dlon = distance_km * math.sin(bearing_rad) / denom
    lat = max(-90.0, min(90.0, point.lat + dlat))
    lon = ((point.lon + dlon + 180.0) % 360.0) - 180.0
    return lat, lon


# --- world (de)serialization ----------------------------------------------


def world_to_dict(world: World) -> dict:
    return {
        "rng_seed": world.rng_seed,
        "routers": [
            {
                "ip": r.ip,
                "lat": r.location.lat,
                "lon": r.location.lon,
                "city": r.city,
                "country": r.country,
            }
            for r in world.routers
        ],
        "links": [list(link) for link in world.links],
        "mpls_tunnels": [list(t) for t in world.mpls_tunnels],
    }


def world_from_dict(doc: dict) -> World:
    return World(
        routers=[
            Router(
                ip=r["ip"],
                location=GeoPoint(float(r["lat"]), float(r["lon"])),
                city=r["city"],
                country=r["country"],
            )
            for r in doc["routers"]
        ],
        links=[(int(a), int(b)) for a, b in doc["links"]],
        mpls_tunnels=[[int(x) for x in t] for t in doc["mpls_tunnels"]],
        rng_seed=int(doc["rng_seed"]),
    )


def save_world(world: World, path: str | Path) -> Path:
    path = Path(path)
    path.write_text(
        json.dumps(world_to_dict(world), indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )
    return path


def load_world(path: str | Path) -> World:
    return world_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


# --- scoring ---------------------------------------------------------------


def tunnel_member_ips(world: World) -> set[str]:
    return {
        world.routers[node].ip for tunnel in world.mpls_tunnels for node in tunnel
    }


def tunnel_interior_ips(world: World) -> set[str]:
    """Members that misreport their RTT in *every* traversal direction:
    everything but a tunnel's two endpoint hops."""
    interior: set[str] = set()
    for tunnel in world.mpls_tunnels:
        for node in tunnel[1:-1]:
            interior.add(world.routers[node].ip)
    return interior


@dataclass
class ScoreReport:
    """Detection and correction quality against synthetic ground truth.

    Ratio fields are ``None`` when their denominator is empty, rendered
    as ``NA`` in CSV output.
    """

    total_ips: int = 0
    tagged_total: int = 0
    detected_total: int = 0
    false_positive_count: int = 0
    displaced_total: int = 0
    displaced_detected: int = 0
    displaced_recall: float | None = None
    detected_non_tunnel: int = 0
    displaced_precision: float | None = None
    overall_precision: float | None = None
    tunnel_interior_total: int = 0
    tunnel_interior_flagged: int = 0
    tunnel_interior_recall: float | None = None
    interface_count: int = 0
    interface_within_100km: int = 0
    interface_within_100km_fraction: float | None = None
    interface_distance_mean_km: float | None = None
    interface_distance_median_km: float | None = None
    interface_distance_max_km: float | None = None
    active_total: int = 0
    active_with_true_city: int = 0
    true_city_retention: float | None = None

    def rows(self) -> list[tuple[str, str]]:
        def fmt(v) -> str:
            if v is None:
                return "NA"
            if isinstance(v, float):
                return repr(round(v, 6))
            return str(v)

        return [
            ("total_ips", fmt(self.total_ips)),
            ("tagged_total", fmt(self.tagged_total)),
            ("detected_total", fmt(self.detected_total)),
            ("false_positive_count", fmt(self.false_positive_count)),
            ("displaced_total", fmt(self.displaced_total)),
            ("displaced_detected", fmt(self.displaced_detected)),
            ("displaced_recall", fmt(self.displaced_recall)),
            ("detected_non_tunnel", fmt(self.detected_non_tunnel)),
            ("displaced_precision", fmt(self.displaced_precision)),
            ("overall_precision", fmt(self.overall_precision)),
            ("tunnel_interior_total", fmt(self.tunnel_interior_total)),
            ("tunnel_interior_flagged", fmt(self.tunnel_interior_flagged)),
            ("tunnel_interior_recall", fmt(self.tunnel_interior_recall)),
            ("interface_count", fmt(self.interface_count)),
            ("interface_within_100km", fmt(self.interface_within_100km)),
            ("interface_within_100km_fraction", fmt(self.interface_within_100km_fraction)),
            ("interface_distance_mean_km", fmt(self.interface_distance_mean_km)),
            ("interface_distance_median_km", fmt(self.interface_distance_median_km)),
            ("interface_distance_max_km", fmt(self.interface_distance_max_km)),
            ("active_total", fmt(self.active_total)),
            ("active_with_true_city", fmt(self.active_with_true_city)),
            ("true_city_retention", fmt(self.true_city_retention)),
        ]


def score_against_truth(
    outcomes: dict[str, ResolutionOutcome],
    states: dict[str, CandidateState],
    world: World,
    displaced_set: set[str],
) -> ScoreReport:
    """Grade a run against the world that generated its corpus.

    Detection counts an IP once it is tagged anomalous and not demoted to
    a false positive.  Precision against displacement excludes tunnel
    members from the denominator (they are genuine anomalies of the other
    kind); ``overall_precision`` scores detections against the union of
    both ground-truth sets.
    """
    import statistics as _stats

    truth = {r.ip: r for r in world.routers}
    t_members = tunnel_member_ips(world)
    t_interior = tunnel_interior_ips(world)

    tagged = {ip for ip, st in states.items() if st.status is IpStatus.ANOMALOUS}
    false_pos = {
        ip
        for ip, out in outcomes.items()
        if out.verdict is Verdict.FALSE_POSITIVE
    }
    detected = tagged - false_pos

    report = ScoreReport(
        total_ips=len(states),
        tagged_total=len(tagged),
        detected_total=len(detected),
        false_positive_count=len(false_pos),
        displaced_total=len(displaced_set),
    )

    report.displaced_detected = len(detected & displaced_set)
    if displaced_set:
        report.displaced_recall = report.displaced_detected / len(displaced_set)
    non_tunnel_detected = detected - t_members
    report.detected_non_tunnel = len(non_tunnel_detected)
    if non_tunnel_detected:
        report.displaced_precision = (
            len(non_tunnel_detected & displaced_set) / len(non_tunnel_detected)
        )
    if detected:
        report.overall_precision = (
            len(detected & (displaced_set | t_members)) / len(detected)
        )

    report.tunnel_interior_total = len(t_interior)
    mpls_classified = {
        ip for ip, out in outcomes.items() if out.verdict is Verdict.MPLS_AFFECTED
    }
    flagged = t_interior & (tagged | mpls_classified)
    report.tunnel_interior_flagged = len(flagged)
    if t_interior:
        report.tunnel_interior_recall = len(flagged) / len(t_interior)

    distances = []
    for ip, out in sorted(outcomes.items(), key=lambda kv: ip_key(kv[0])):
        if out.verdict is Verdict.INTERFACE_AFFECTED and out.resolved and ip in truth:
            distances.append(haversine_km(out.resolved, truth[ip].location))
    report.interface_count = len(distances)
    if distances:
        report.interface_within_100km = sum(1 for d in distances if d <= 100.0)
        report.interface_within_100km_fraction = (
            report.interface_within_100km / len(distances)
        )
        report.interface_distance_mean_km = _stats.fmean(distances)
        report.interface_distance_median_km = float(_stats.median(distances))
        report.interface_distance_max_km = max(distances)

    active = [
        (ip, st)
        for ip, st in states.items()
        if st.status is IpStatus.ACTIVE and ip in truth
    ]
    report.active_total = len(active)
    for ip, st in active:
        router = truth[ip]
        key = (normalize_city(router.city), router.country)
        if any(
            (normalize_city(c.city), c.country) == key for c in st.candidates
        ):
            report.active_with_true_city += 1
    if active:
        report.true_city_retention = report.active_with_true_city / len(active)
    return report
