"""Command-line entry points: ``run``, ``synth``, ``score``, ``fetch-geo``.

Configuration is a flat key-value file (``key = value``, ``#`` comments).
Every algorithm knob is overridable there; ``--out``, ``--threads`` and
``--seed`` override their config counterparts.  Exit codes: 0 success,
1 fatal input problem, 2 configuration problem.  Given identical inputs,
configuration, and seed, two runs produce byte-identical output trees.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

from . import ingest, report, synth
from .diagnostics import Diagnostics, logger
from .geo import GeoPoint, SpatialIndex, cluster_candidates, load_city_catalog
from .ingest import CleanPath, ip_key
from .refine import (
    CandidateState,
    IpStatus,
    RefineConfig,
    extract_pairs,
    iterate,
    make_states,
    tag_anomalies,
)
from .resolve import ResolutionOutcome, ResolveConfig, Verdict, resolve_all


class ConfigError(Exception):
    """Bad or missing configuration; maps to exit code 2."""


class InputError(Exception):
    """Unusable input data; maps to exit code 1."""


@dataclass
class SynthSettings:
    n_routers: int = 50
    n_cities: int = 20
    mpls_fraction: float = 0.03
    n_paths: int = 500
    noise_fraction: float = 0.05
    interface_error_fraction: float = 0.05
    min_displacement_km: float = 500.0
    db_count: int = 8
    db_noise_km: float = 5.0
    tunnel_len: int = 4
    decoy_fraction: float = 0.0
    decoy_db_count: int = 1


@dataclass
class PipelineConfig:
    traceroutes: str = ""
    traceroute_format: str = "auto"
    geo_snapshot: str = ""
    city_catalog: str = ""
    out_dir: str = "out"
    threads: int = 1
    seed: int = 0
    merge_radius_km: float = 20.0
    fetch_ips_file: str = ""
    fetch_cache_dir: str = "geo_cache"
    refine: RefineConfig = field(default_factory=RefineConfig)
    resolve: ResolveConfig = field(default_factory=ResolveConfig)
    synth: SynthSettings = field(default_factory=SynthSettings)
    sources: dict = field(default_factory=dict)


def parse_config_file(path: str | Path) -> dict[str, str]:
    """Read ``key = value`` lines; ``#`` starts a comment."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    entries: dict[str, str] = {}
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise ConfigError(f"{path}:{lineno}: empty key")
        if key in entries:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
        entries[key] = value.strip()
    return entries


_TOP_KEYS = {
    "traceroutes": str,
    "traceroute_format": str,
    "geo_snapshot": str,
    "city_catalog": str,
    "out_dir": str,
    "threads": int,
    "seed": int,
    "merge_radius_km": float,
    "fetch_ips_file": str,
    "fetch_cache_dir": str,
}

_SECTION_FIELDS = {
    "refine": RefineConfig,
    "resolve": ResolveConfig,
    "synth": SynthSettings,
}


def _convert(key: str, raw: str, typ: type):
    try:
        if typ is bool:
            return raw.lower() in ("1", "true", "yes")
        return typ(raw)
    except ValueError as exc:
        raise ConfigError(f"config key {key}: cannot parse {raw!r} as {typ.__name__}") from exc


def build_config(entries: dict[str, str]) -> PipelineConfig:
    cfg = PipelineConfig()
    section_types: dict[str, dict[str, type]] = {}
    for section, klass in _SECTION_FIELDS.items():
        section_types[section] = {
            f.name: type(getattr(klass(), f.name)) for f in dataclasses.fields(klass)
        }

    for key, raw in entries.items():
        if key.startswith("source."):
            cfg.sources[key] = raw
            continue
        if "." in key:
            section, _, name = key.partition(".")
            if section not in section_types or name not in section_types[section]:
                raise ConfigError(f"unknown config key: {key}")
            value = _convert(key, raw, section_types[section][name])
            setattr(getattr(cfg, section), name, value)
            continue
        if key not in _TOP_KEYS:
            raise ConfigError(f"unknown config key: {key}")
        setattr(cfg, key, _convert(key, raw, _TOP_KEYS[key]))
    _validate_knobs(cfg)
    return cfg


def _validate_knobs(cfg: PipelineConfig) -> None:
    checks = [
        (0.0 <= cfg.refine.deviation_fraction <= 1.0, "refine.deviation_fraction in [0,1]"),
        (0.0 <= cfg.refine.prune_fraction <= 1.0, "refine.prune_fraction in [0,1]"),
        (0.0 <= cfg.refine.anomaly_ratio_threshold <= 1.0, "refine.anomaly_ratio_threshold in [0,1]"),
        (0.0 <= cfg.refine.direction_threshold <= 1.0, "refine.direction_threshold in [0,1]"),
        (cfg.refine.max_iterations >= 1, "refine.max_iterations >= 1"),
        (cfg.refine.min_observations >= 0, "refine.min_observations >= 0"),
        (0.0 <= cfg.resolve.country_dominance <= 1.0, "resolve.country_dominance in [0,1]"),
        (cfg.resolve.anchor_allowance_fraction >= 0.0, "resolve.anchor_allowance_fraction >= 0"),
        (cfg.resolve.tie_merge_km > 0, "resolve.tie_merge_km > 0"),
        (cfg.resolve.tie_merge_step_km > 0, "resolve.tie_merge_step_km > 0"),
        (cfg.resolve.tie_merge_max_km >= cfg.resolve.tie_merge_km, "resolve.tie_merge_max_km >= tie_merge_km"),
        (cfg.resolve.match_radius_km >= 0, "resolve.match_radius_km >= 0"),
        (cfg.resolve.min_anchors >= 1, "resolve.min_anchors >= 1"),
        (cfg.threads >= 1, "threads >= 1"),
        (cfg.merge_radius_km >= 0, "merge_radius_km >= 0"),
        (cfg.traceroute_format in ("auto", "native", "atlas"), "traceroute_format one of auto|native|atlas"),
        (cfg.synth.n_routers >= 2, "synth.n_routers >= 2"),
        (cfg.synth.n_cities >= 1, "synth.n_cities >= 1"),
        (0.0 <= cfg.synth.mpls_fraction <= 1.0, "synth.mpls_fraction in [0,1]"),
        (cfg.synth.n_paths >= 1, "synth.n_paths >= 1"),
        (0.0 <= cfg.synth.noise_fraction < 1.0, "synth.noise_fraction in [0,1)"),
        (0.0 <= cfg.synth.interface_error_fraction <= 1.0, "synth.interface_error_fraction in [0,1]"),
        (cfg.synth.min_displacement_km >= 0, "synth.min_displacement_km >= 0"),
        (cfg.synth.db_count >= 1, "synth.db_count >= 1"),
        (cfg.synth.db_noise_km >= 0, "synth.db_noise_km >= 0"),
        (0.0 <= cfg.synth.decoy_fraction <= 1.0, "synth.decoy_fraction in [0,1]"),
    ]
    for ok, message in checks:
        if not ok:
            raise ConfigError(f"config violates: {message}")


def load_config(path: str | Path, args: argparse.Namespace | None = None) -> PipelineConfig:
    cfg = build_config(parse_config_file(path))
    if args is not None:
        if getattr(args, "out", None):
            cfg.out_dir = args.out
        if getattr(args, "threads", None):
            cfg.threads = args.threads
        if getattr(args, "seed", None) is not None:
            cfg.seed = args.seed
    _validate_knobs(cfg)
    return cfg


def _read_traceroutes(cfg: PipelineConfig, diag: Diagnostics) -> list[CleanPath]:
    path = Path(cfg.traceroutes)
    if not path.exists():
        raise ConfigError(f"traceroutes file not found: {path}")
    text = path.read_text(encoding="utf-8")
    if not text.strip():
        raise InputError(f"traceroute file is empty: {path}")
    lines = text.splitlines()
    fmt = cfg.traceroute_format
    if fmt == "auto":
        first = next(line for line in lines if line.strip())
        try:
            fmt = "native" if "path_id" in json.loads(first) else "atlas"
        except (json.JSONDecodeError, TypeError):
            fmt = "atlas"
    if fmt == "native":
        paths = ingest.load_native(lines, diag)
    else:
        paths = ingest.clean_paths(ingest.parse_atlas(lines, diag), diag=diag)
    if not paths:
        raise InputError(f"no usable traceroutes in {path}")
    return paths


def run(cfg: PipelineConfig) -> int:
    """End-to-end analysis: ingest, cluster, refine, tag, resolve, report."""
    diag = Diagnostics()
    for name, value in (("geo_snapshot", cfg.geo_snapshot), ("city_catalog", cfg.city_catalog)):
        if not value:
            raise ConfigError(f"config key {name} is required for run")
    paths = _read_traceroutes(cfg, diag)
    snapshot = ingest.load_geo_snapshot(cfg.geo_snapshot, diag)
    catalog = load_city_catalog(cfg.city_catalog)
    index = SpatialIndex(catalog)

    all_ips = sorted({ip for p in paths for ip, _ in p.hops}, key=ip_key)
    clusters_by_ip = {}
    for ip in all_ips:
        records = snapshot.get(ip)
        if records:
            clusters_by_ip[ip] = cluster_candidates(records, cfg.merge_radius_km)
        else:
            diag.warn("ip_without_geolocation", f"{ip}: no snapshot records")
    states = make_states(clusters_by_ip)

    pairs = extract_pairs(paths)
    iterate(states, pairs, cfg.refine, cfg.threads, diag)
    tag_anomalies(states, cfg.refine)
    outcomes = resolve_all(states, paths, index, cfg.resolve, cfg.threads, diag)

    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    table = report.summarize(states, outcomes, paths)
    report.write_summary_csv(table, out_dir / "summary.csv")
    baseline = report.sol_baseline(all_ips, snapshot, paths, cfg.refine, cfg.merge_radius_km)
    hist = report.cluster_histogram(states, baseline)
    report.write_histogram_csv(hist, out_dir / "clusters_hist.csv")
    distances, under_20 = report.distance_cdf(outcomes, snapshot, diag)
    report.write_distance_cdf_csv(distances, out_dir / "distance_cdf.csv")
    deltas, changed_fraction = report.country_delta(outcomes, snapshot)
    report.write_country_delta_csv(deltas, out_dir / "country_delta.csv")

    _write_ips_jsonl(states, outcomes, out_dir / "ips.jsonl")

    tagged = sum(1 for s in states.values() if s.status is IpStatus.ANOMALOUS)
    logger.info(
        "run: %d traceroutes, %d ips (%d with candidates), %d anomalous, %d corrected",
        len(paths), len(all_ips), len(states), tagged,
        sum(1 for o in outcomes.values() if o.verdict is Verdict.INTERFACE_AFFECTED),
    )
    if under_20 is not None:
        logger.info("corrections within 20 km of database consensus: %.4f", under_20)
    if changed_fraction is not None:
        logger.info("corrected IPs that changed country: %.4f", changed_fraction)
    logger.info("%s", diag.summary_line())
    return 0


def _write_ips_jsonl(
    states: dict[str, CandidateState],
    outcomes: dict[str, ResolutionOutcome],
    path: Path,
) -> None:
    with path.open("w", encoding="utf-8") as fh:
        for ip in sorted(states, key=ip_key):
            state = states[ip]
            outcome = outcomes.get(ip)
            record = {
                "ip": ip,
                "status": state.status.value,
                "verdict": outcome.verdict.value if outcome else None,
                "clusters": [
                    {
                        "lat": c.centroid.lat,
                        "lon": c.centroid.lon,
                        "city": c.city,
                        "country": c.country,
                        "ratio": state.ratio.get(c.cluster_id, 1.0),
                    }
                    for c in state.candidates
                ],
                "resolved": (
                    {"lat": outcome.resolved.lat, "lon": outcome.resolved.lon}
                    if outcome and outcome.resolved
                    else None
                ),
                "anchors": outcome.anchor_count if outcome else 0,
            }
            fh.write(json.dumps(record, separators=(",", ":")) + "\n")


def synth_cmd(cfg: PipelineConfig) -> int:
    """Generate a world, its traceroute corpus, and a corrupted snapshot."""
    diag = Diagnostics()
    if not cfg.city_catalog:
        raise ConfigError("config key city_catalog is required for synth")
    catalog = load_city_catalog(cfg.city_catalog)
    s = cfg.synth
    try:
        world = synth.generate_world(
            cfg.seed, s.n_routers, s.n_cities, s.mpls_fraction, catalog,
            tunnel_len=s.tunnel_len,
        )
        paths = synth.simulate_traceroutes(world, s.n_paths, s.noise_fraction)
        spec = synth.InjectionSpec(
            interface_error_fraction=s.interface_error_fraction,
            min_displacement_km=s.min_displacement_km,
            db_count=s.db_count,
            db_noise_km=s.db_noise_km,
            decoy_fraction=s.decoy_fraction,
            decoy_db_count=s.decoy_db_count,
        )
        snapshot, displaced = synth.corrupt_geodb(world, spec, cfg.seed, catalog, diag)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    synth.save_world(world, out_dir / "world.json")
    with (out_dir / "traceroutes.jsonl").open("w", encoding="utf-8") as fh:
        ingest.dump_native(paths, fh)
    ingest.write_geo_snapshot(snapshot, out_dir / "snapshot.csv")
    (out_dir / "displaced.json").write_text(
        json.dumps({"displaced": sorted(displaced, key=ip_key)}, indent=2) + "\n",
        encoding="utf-8",
    )
    logger.info(
        "synth: %d routers, %d links, %d tunnels, %d paths, %d displaced ips",
        len(world.routers), len(world.links), len(world.mpls_tunnels),
        len(paths), len(displaced),
    )
    logger.info("%s", diag.summary_line())
    return 0


def score_cmd(results_dir: str | Path, world_file: str | Path,
              displaced_file: str | Path | None = None) -> int:
    """Grade a results directory against the world that produced it."""
    results_dir = Path(results_dir)
    world_file = Path(world_file)
    ips_file = results_dir / "ips.jsonl"
    if not ips_file.exists():
        raise InputError(f"results file not found: {ips_file}")
    if not world_file.exists():
        raise InputError(f"world file not found: {world_file}")
    displaced_file = Path(displaced_file) if displaced_file else world_file.parent / "displaced.json"
    if not displaced_file.exists():
        raise InputError(f"displaced-set file not found: {displaced_file}")

    world = synth.load_world(world_file)
    displaced = set(json.loads(displaced_file.read_text(encoding="utf-8"))["displaced"])
    router_ips = {r.ip for r in world.routers}

    states: dict[str, CandidateState] = {}
    outcomes: dict[str, ResolutionOutcome] = {}
    from .geo import CityCluster  # local import keeps module deps one-way

    for line in ips_file.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        ip = rec["ip"]
        if ip not in router_ips:
            raise InputError(f"results do not match world: {ip} is not a world router")
        states[ip] = CandidateState(
            ip=ip,
            candidates=[
                CityCluster(
                    cluster_id=i,
                    centroid=GeoPoint(c["lat"], c["lon"]),
                    city=c["city"],
                    country=c["country"],
                    supporting_sources={"run"},
                )
                for i, c in enumerate(rec["clusters"])
            ],
            status=IpStatus(rec["status"]),
        )
        if rec.get("verdict"):
            outcomes[ip] = ResolutionOutcome(
                ip=ip,
                verdict=Verdict(rec["verdict"]),
                resolved=GeoPoint(**rec["resolved"]) if rec.get("resolved") else None,
                anchor_count=rec.get("anchors", 0),
            )

    report_obj = synth.score_against_truth(outcomes, states, world, displaced)
    out_path = results_dir / "score.csv"
    import csv as _csv

    with out_path.open("w", newline="", encoding="utf-8") as fh:
        writer = _csv.writer(fh)
        writer.writerow(["metric", "value"])
        writer.writerows(report_obj.rows())
    logger.info("score written to %s", out_path)
    return 0


def fetch_cmd(cfg: PipelineConfig) -> int:
    """Fetch geolocations for a list of IPs into a snapshot CSV."""
    if not cfg.fetch_ips_file:
        raise ConfigError("config key fetch_ips_file is required for fetch-geo")
    ips_path = Path(cfg.fetch_ips_file)
    if not ips_path.exists():
        raise ConfigError(f"fetch_ips_file not found: {ips_path}")
    sources = ingest.load_fetch_config(cfg.sources)
    if not sources:
        raise ConfigError("no source.<name>.url entries configured")
    ips = [line.strip() for line in ips_path.read_text(encoding="utf-8").splitlines() if line.strip()]
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    diag = Diagnostics()
    try:
        out = ingest.fetch_geo(
            ips, sources, cfg.fetch_cache_dir, out_dir / "snapshot.csv", diag=diag
        )
    except ingest.FetchError as exc:
        raise InputError(str(exc)) from exc
    logger.info("snapshot written to %s", out)
    logger.info("%s", diag.summary_line())
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="traceloc",
        description="Detect and repair anomalous IP geolocations in traceroute corpora.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, config_required: bool = True) -> None:
        p.add_argument("--config", required=config_required, help="key=value config file")
        p.add_argument("--out", help="output directory (overrides out_dir)")
        p.add_argument("--threads", type=int, help="worker thread cap")
        p.add_argument("--seed", type=int, help="rng seed (overrides seed)")

    common(sub.add_parser("run", help="analyze a traceroute corpus"))
    common(sub.add_parser("synth", help="generate a synthetic ground-truth corpus"))
    p_score = sub.add_parser("score", help="grade results against a synthetic world")
    p_score.add_argument("results_dir")
    p_score.add_argument("world_file")
    p_score.add_argument("--displaced", help="displaced-set file (default: next to world)")
    common(p_score, config_required=False)
    common(sub.add_parser("fetch-geo", help="fetch geolocations into a snapshot"))

    args = parser.parse_args(argv)
    import logging

    logging.basicConfig(
        level=logging.INFO, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s"
    )
    try:
        if args.command == "run":
            return run(load_config(args.config, args))
        if args.command == "synth":
            return synth_cmd(load_config(args.config, args))
        if args.command == "score":
            return score_cmd(args.results_dir, args.world_file, args.displaced)
        if args.command == "fetch-geo":
            return fetch_cmd(load_config(args.config, args))
    except ConfigError as exc:
        logger.error("config error: %s", exc)
        return 2
    except InputError as exc:
        logger.error("input error: %s", exc)
        return 1
    except FileNotFoundError as exc:
        logger.error("input error: %s", exc)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
