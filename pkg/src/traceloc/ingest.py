"""Traceroute and geolocation ingestion.

Two traceroute encodings are understood: the RIPE Atlas result export
(newline-delimited JSON, one measurement result per line) and a native
line format holding already-cleaned paths.  Atlas records pass through
:func:`normalize` to become :class:`CleanPath` objects; native files are
parsed directly.  Geolocation data arrives either as a snapshot CSV or
through the rate-limited :func:`fetch_geo` client.
"""
from __future__ import annotations

import csv
import ipaddress
import json
import os
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, TextIO

from .diagnostics import Diagnostics

# Address space that cannot carry a meaningful public geolocation: private,
# loopback, link-local, carrier-grade NAT, multicast, class E, zero and
# broadcast.  Documentation/test prefixes (192.0.2/24 etc.) are deliberately
# absent so synthetic corpora survive normalization.
DEFAULT_BOGONS: tuple[ipaddress.IPv4Network, ...] = tuple(
    ipaddress.ip_network(net)
    for net in (
        "0.0.0.0/8",
        "10.0.0.0/8",
        "100.64.0.0/10",
        "127.0.0.0/8",
        "169.254.0.0/16",
        "172.16.0.0/12",
        "192.168.0.0/16",
        "224.0.0.0/4",
        "240.0.0.0/4",
        "255.255.255.255/32",
    )
)


def ip_key(ip: str) -> int:
    """Numeric sort key for an IPv4 address."""
    return int(ipaddress.IPv4Address(ip))


def _valid_ipv4(text: str) -> bool:
    try:
        ipaddress.IPv4Address(text)
    except (ipaddress.AddressValueError, ValueError):
        return False
    return True


def is_bogon(ip: str, networks: Iterable[ipaddress.IPv4Network] = DEFAULT_BOGONS) -> bool:
    addr = ipaddress.IPv4Address(ip)
    return any(addr in net for net in networks)


@dataclass
class RawHop:
    hop_index: int
    # (responder ip or None, rtt ms or None) per probe reply; timeouts keep
    # their slot as (None, None).
    replies: list[tuple[str | None, float | None]] = field(default_factory=list)


@dataclass
class RawTraceroute:
    measurement_id: str
    probe_id: str
    timestamp: int
    hops: list[RawHop] = field(default_factory=list)


@dataclass
class CleanPath:
    """A normalized traceroute: consecutive responsive hops with one RTT each."""

    path_id: str
    hops: list[tuple[str, float]] = field(default_factory=list)
    source_traceroute: str = ""


@dataclass(frozen=True)
class GeoRecord:
    ip: str
    source: str
    lat: float
    lon: float
    city: str
    country: str


def parse_atlas(stream: Iterable[str], diag: Diagnostics | None = None) -> list[RawTraceroute]:
    """Parse a RIPE Atlas newline-delimited JSON export.

    Consumes ``msm_id``, ``prb_id``, ``timestamp`` and, per hop entry,
    ``result[].hop`` plus each reply's ``from``/``rtt``.  Replies lacking a
    field keep ``None`` in that slot; duplicate hop numbers merge their
    replies.  Malformed lines are counted and skipped — parsing a corpus
    never fails outright.
    """
    diag = diag or Diagnostics()
    out: list[RawTraceroute] = []
    for lineno, line in enumerate(stream, start=1):
        line = line.strip()
        if not line:
            continue
        try:
            doc = json.loads(line)
        except json.JSONDecodeError:
            diag.warn("atlas_malformed", f"line {lineno}: not valid JSON")
            continue
        try:
            rt = _atlas_record(doc)
        except (KeyError, TypeError, ValueError) as exc:
            diag.warn("atlas_malformed", f"line {lineno}: {exc}")
            continue
        out.append(rt)
    return out


def _atlas_record(doc: object) -> RawTraceroute:
    if not isinstance(doc, dict):
        raise ValueError("record is not an object")
    msm = doc["msm_id"]
    prb = doc["prb_id"]
    ts = doc["timestamp"]
    if not isinstance(ts, int) or ts <= 0:
        raise ValueError("timestamp must be a positive integer")
    hops_raw = doc.get("result", [])
    if not isinstance(hops_raw, list):
        raise ValueError("result must be a list")
    by_index: dict[int, RawHop] = {}
    for entry in hops_raw:
        if not isinstance(entry, dict) or "hop" not in entry:
            continue
        hop_no = entry["hop"]
        if not isinstance(hop_no, int) or hop_no < 1:
            continue
        hop = by_index.setdefault(hop_no, RawHop(hop_index=hop_no))
        for reply in entry.get("result", []) or []:
            if not isinstance(reply, dict):
                continue
            responder = reply.get("from")
            if not (isinstance(responder, str) and _valid_ipv4(responder)):
                responder = None
            rtt = reply.get("rtt")
            if not isinstance(rtt, (int, float)) or rtt < 0:
                rtt = None
            hop.replies.append((responder, float(rtt) if rtt is not None else None))
    hops = [by_index[k] for k in sorted(by_index)]
    return RawTraceroute(
        measurement_id=str(msm), probe_id=str(prb), timestamp=ts, hops=hops
    )


def normalize(
    rt: RawTraceroute,
    bogon_filter: Iterable[ipaddress.IPv4Network] = DEFAULT_BOGONS,
    diag: Diagnostics | None = None,
) -> CleanPath | None:
    """Turn a raw traceroute into a :class:`CleanPath`, or reject it.

    Unresponsive hops are dropped; a surviving hop reports the responder
    seen most often (first seen wins ties) and the median of the hop's
    non-null RTTs.  Bogon responders are removed, consecutive duplicate
    IPs collapse onto the first occurrence, and a path is rejected
    (``None``) when an IP repeats non-consecutively — a forwarding loop —
    or fewer than two hops survive.  Running the result through
    normalization again would change nothing.
    """
    diag = diag or Diagnostics()
    nets = tuple(bogon_filter)
    hops: list[tuple[str, float]] = []
    for hop in rt.hops:
        responders = [ip for ip, _ in hop.replies if ip is not None]
        rtts = [rtt for _, rtt in hop.replies if rtt is not None]
        if not responders or not rtts:
            continue
        counts: dict[str, int] = {}
        for ip in responders:
            counts[ip] = counts.get(ip, 0) + 1
        best = max(counts.values())
        ip = next(r for r in responders if counts[r] == best)
        if is_bogon(ip, nets):
            continue
        hops.append((ip, float(statistics.median(rtts))))

    collapsed: list[tuple[str, float]] = []
    for ip, rtt in hops:
        if collapsed and collapsed[-1][0] == ip:
            continue  # duplicate hop; the first occurrence keeps its RTT
        collapsed.append((ip, rtt))

    ident = f"{rt.measurement_id}-{rt.probe_id}-{rt.timestamp}"
    seen = set()
    for ip, _ in collapsed:
        if ip in seen:
            diag.warn("path_loop", f"{ident}: ip {ip} repeats non-consecutively")
            return None
        seen.add(ip)

    if len(collapsed) < 2:
        diag.warn("path_short", f"{ident}: fewer than 2 hops survive")
        return None
    return CleanPath(path_id=ident, hops=collapsed, source_traceroute=ident)


def clean_paths(
    raws: Iterable[RawTraceroute],
    bogon_filter: Iterable[ipaddress.IPv4Network] = DEFAULT_BOGONS,
    diag: Diagnostics | None = None,
) -> list[CleanPath]:
    """Normalize a batch, disambiguating colliding path ids with a suffix."""
    out: list[CleanPath] = []
    seen: dict[str, int] = {}
    for rt in raws:
        path = normalize(rt, bogon_filter, diag)
        if path is None:
            continue
        n = seen.get(path.path_id, 0) + 1
        seen[path.path_id] = n
        if n > 1:
            path.path_id = f"{path.path_id}-{n}"
        out.append(path)
    return out


def load_native(stream: Iterable[str], diag: Diagnostics | None = None) -> list[CleanPath]:
    """Parse the native one-JSON-object-per-line traceroute format:
    ``{"path_id": str, "hops": [{"ip": "a.b.c.d", "rtt": float}, ...]}``.

    Lines violating the format or the CleanPath invariants are counted
    and skipped.
    """
    diag = diag or Diagnostics()
    out: list[CleanPath] = []
    for lineno, line in enumerate(stream, start=1):
        line = line.strip()
        if not line:
            continue
        try:
            doc = json.loads(line)
            path_id = doc["path_id"]
            hops = [(h["ip"], float(h["rtt"])) for h in doc["hops"]]
            if not isinstance(path_id, str):
                raise ValueError("path_id must be a string")
        except (json.JSONDecodeError, KeyError, TypeError, ValueError):
            diag.warn("native_malformed", f"line {lineno}: bad native record")
            continue
        if len(hops) < 2 or any(not _valid_ipv4(ip) or rtt < 0 for ip, rtt in hops):
            diag.warn("native_malformed", f"line {lineno}: invalid hops")
            continue
        if any(a == b for (a, _), (b, _) in zip(hops, hops[1:])):
            diag.warn("native_malformed", f"line {lineno}: consecutive duplicate hop")
            continue
        out.append(CleanPath(path_id=path_id, hops=hops, source_traceroute=path_id))
    return out


def serialize_native(path: CleanPath) -> str:
    """Canonical single-line encoding; parsing it back is the identity."""
    doc = {"path_id": path.path_id, "hops": [{"ip": ip, "rtt": rtt} for ip, rtt in path.hops]}
    return json.dumps(doc, separators=(",", ":"))


def dump_native(paths: Iterable[CleanPath], fh: TextIO) -> None:
    for path in paths:
        fh.write(serialize_native(path) + "\n")


def load_geo_snapshot(
    path: str | Path, diag: Diagnostics | None = None
) -> dict[str, list[GeoRecord]]:
    """Load a geolocation snapshot CSV (``ip,source,lat,lon,city,country``).

    Coordinate-range violations are skipped with a warning; duplicate
    (ip, source) rows keep the first occurrence.  A missing file is fatal.
    """
    diag = diag or Diagnostics()
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"geolocation snapshot not found: {path}")
    by_ip: dict[str, list[GeoRecord]] = {}
    seen: set[tuple[str, str]] = set()
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        required = {"ip", "source", "lat", "lon", "city", "country"}
        header = set(reader.fieldnames or [])
        if not required.issubset(header):
            raise ValueError(f"snapshot {path} missing columns {sorted(required - header)}")
        for lineno, row in enumerate(reader, start=2):
            ip = (row["ip"] or "").strip()
            source = (row["source"] or "").strip()
            if not _valid_ipv4(ip) or not source:
                diag.warn("snapshot_malformed", f"{path}:{lineno}: bad ip/source")
                continue
            try:
                lat = float(row["lat"])
                lon = float(row["lon"])
            except (TypeError, ValueError):
                diag.warn("snapshot_malformed", f"{path}:{lineno}: bad coordinates")
                continue
            if not (-90.0 <= lat <= 90.0 and -180.0 <= lon <= 180.0):
                diag.warn("snapshot_range", f"{path}:{lineno}: coordinates out of range")
                continue
            if (ip, source) in seen:
                diag.warn("snapshot_duplicate", f"{path}:{lineno}: duplicate ({ip}, {source})")
                continue
            seen.add((ip, source))
            by_ip.setdefault(ip, []).append(
                GeoRecord(
                    ip=ip,
                    source=source,
                    lat=lat,
                    lon=lon,
                    city=(row["city"] or "").strip(),
                    country=(row["country"] or "").strip().upper(),
                )
            )
    return by_ip


def write_geo_snapshot(by_ip: dict[str, list[GeoRecord]], path: str | Path) -> Path:
    """Write a snapshot CSV with deterministic row order (atomic replace)."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["ip", "source", "lat", "lon", "city", "country"])
        for ip in sorted(by_ip, key=ip_key):
            for rec in sorted(by_ip[ip], key=lambda r: r.source):
                writer.writerow([rec.ip, rec.source, repr(rec.lat), repr(rec.lon), rec.city, rec.country])
    os.replace(tmp, path)
    return path


# --- remote geolocation fetch (optional plumbing) -------------------------


@dataclass(frozen=True)
class GeoSource:
    """One remote geolocation provider.

    ``url`` is a template with ``{ip}`` (and optionally ``{key}``)
    placeholders; ``rate_per_s`` caps request frequency against it.
    """

    name: str
    url: str
    key: str = ""
    rate_per_s: float = 1.0


class FetchError(RuntimeError):
    """Raised when every configured source is unreachable."""


class _RateLimiter:
    """Spaces calls at least 1/rate seconds apart, including before the
    first one, so N requests take at least N/rate seconds."""

    def __init__(
        self,
        rate_per_s: float,
        sleep: Callable[[float], None],
        monotonic: Callable[[], float],
    ) -> None:
        self._interval = 1.0 / rate_per_s if rate_per_s > 0 else 0.0
        self._sleep = sleep
        self._monotonic = monotonic
        self._next_at = monotonic() + self._interval

    def wait(self) -> None:
        now = self._monotonic()
        if now < self._next_at:
            self._sleep(self._next_at - now)
        self._next_at = max(now, self._next_at) + self._interval


def _default_http_get(url: str) -> dict:
    import requests

    resp = requests.get(url, timeout=10)
    resp.raise_for_status()
    return resp.json()


def _extract_record(payload: dict, ip: str, source: str) -> GeoRecord:
    def pick(*names):
        for n in names:
            if n in payload and payload[n] is not None:
                return payload[n]
        return None

    lat = pick("lat", "latitude")
    lon = pick("lon", "lng", "longitude")
    if lat is None or lon is None:
        raise ValueError("response lacks coordinates")
    lat, lon = float(lat), float(lon)
    if not (-90.0 <= lat <= 90.0 and -180.0 <= lon <= 180.0):
        raise ValueError("response coordinates out of range")
    city = pick("city") or ""
    country = pick("country", "country_code", "countryCode") or ""
    return GeoRecord(
        ip=ip, source=source, lat=lat, lon=lon, city=str(city).strip(),
        country=str(country).strip().upper(),
    )


def fetch_geo(
    ips: Iterable[str],
    sources: dict[str, GeoSource],
    cache_dir: str | Path,
    out_path: str | Path,
    *,
    http_get: Callable[[str], dict] | None = None,
    sleep: Callable[[float], None] | None = None,
    monotonic: Callable[[], float] | None = None,
    diag: Diagnostics | None = None,
) -> Path:
    """Query each source for each IP, cache-first, and write a snapshot CSV.

    A cached (ip, source) answer is never fetched again; only network
    requests consume rate budget.  Per-IP failures are warnings; a source
    that answers nothing marks itself unreachable, and if every source is
    unreachable and the cache contributed nothing, :class:`FetchError`
    is raised.
    """
    diag = diag or Diagnostics()
    http_get = http_get or _default_http_get
    sleep = sleep or time.sleep
    monotonic = monotonic or time.monotonic
    cache_dir = Path(cache_dir)

    wanted = sorted({ip for ip in ips if _valid_ipv4(ip)}, key=ip_key)
    by_ip: dict[str, list[GeoRecord]] = {}
    any_success = False
    sources_down = 0

    for name in sorted(sources):
        src = sources[name]
        src_cache = cache_dir / name
        src_cache.mkdir(parents=True, exist_ok=True)
        limiter = _RateLimiter(src.rate_per_s, sleep, monotonic)
        network_failures = 0
        network_attempts = 0
        for ip in wanted:
            cache_file = src_cache / f"{ip}.json"
            if cache_file.exists():
                try:
                    payload = json.loads(cache_file.read_text(encoding="utf-8"))
                    rec = _extract_record(payload, ip, name)
                except (json.JSONDecodeError, ValueError, KeyError):
                    diag.warn("fetch_cache_corrupt", f"{cache_file} unreadable; refetching")
                else:
                    by_ip.setdefault(ip, []).append(rec)
                    any_success = True
                    continue
            network_attempts += 1
            limiter.wait()
            url = src.url.format(ip=ip, key=src.key)
            try:
                payload = http_get(url)
                rec = _extract_record(payload, ip, name)
            except Exception as exc:  # provider errors must never kill the run
                network_failures += 1
                diag.warn("fetch_failed", f"{name}/{ip}: {exc}")
                continue
            tmp = cache_file.with_name(cache_file.name + ".tmp")
            tmp.write_text(json.dumps(payload, sort_keys=True), encoding="utf-8")
            os.replace(tmp, cache_file)
            by_ip.setdefault(ip, []).append(rec)
            any_success = True
        if network_attempts > 0 and network_failures == network_attempts:
            sources_down += 1

    if sources and sources_down == len(sources) and not any_success:
        raise FetchError("all geolocation sources unreachable")
    return write_geo_snapshot(by_ip, out_path)


def load_fetch_config(entries: dict[str, str]) -> dict[str, GeoSource]:
    """Build GeoSource specs from flat ``source.<name>.<field>`` keys."""
    grouped: dict[str, dict[str, str]] = {}
    for key, value in entries.items():
        parts = key.split(".")
        if len(parts) != 3 or parts[0] != "source":
            continue
        grouped.setdefault(parts[1], {})[parts[2]] = value
    sources: dict[str, GeoSource] = {}
    for name, fields in sorted(grouped.items()):
        if "url" not in fields:
            raise ValueError(f"source.{name}: missing url")
        try:
            rate = float(fields.get("rate_per_s", "1"))
        except ValueError as exc:
            raise ValueError(f"source.{name}: bad rate_per_s") from exc
        if rate <= 0:
            raise ValueError(f"source.{name}: rate_per_s must be positive")
        sources[name] = GeoSource(
            name=name, url=fields["url"], key=fields.get("key", ""), rate_per_s=rate
        )
    return sources
