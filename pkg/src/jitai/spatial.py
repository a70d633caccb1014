"""Hexagonal binning of geolocated notifications and GeoJSON export.

Points are projected to local planar metres with an equirectangular
approximation about an origin, then assigned to pointy-top hexagons in
axial ``(q, r)`` coordinates by cube rounding.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .domain import Mechanism, NotificationRecord

EARTH_RADIUS_M = 6371008.8
SQRT3 = math.sqrt(3.0)
DEFAULT_EDGE_M = 250.0

# Corner offsets of a pointy-top hexagon in units of (edge*sqrt3/2, edge/2),
# counter-clockwise from the east-north-east corner.
_CORNERS = ((1, 1), (0, 2), (-1, 1), (-1, -1), (0, -2), (1, -1))


@dataclass(frozen=True)
class HexCell:
    q: int
    r: int
    edge_m: float
    count: int = 0


def project(lat: float, lon: float, origin: tuple[float, float]) -> tuple[float, float]:
    lat0, lon0 = origin
    x = EARTH_RADIUS_M * math.radians(lon - lon0) * math.cos(math.radians(lat0))
    y = EARTH_RADIUS_M * math.radians(lat - lat0)
    return x, y


def unproject(x: float, y: float, origin: tuple[float, float]) -> tuple[float, float]:
    lat0, lon0 = origin
    lat = lat0 + math.degrees(y / EARTH_RADIUS_M)
    lon = lon0 + math.degrees(x / (EARTH_RADIUS_M * math.cos(math.radians(lat0))))
    return lat, lon


def cube_round(qf: float, rf: float) -> tuple[int, int]:
    sf = -qf - rf
    q, r, s = round(qf), round(rf), round(sf)
    dq, dr, ds = abs(q - qf), abs(r - rf), abs(s - sf)
    if dq > dr and dq > ds:
        q = -r - s
    elif dr > ds:
        r = -q - s
    return int(q), int(r)


def planar_to_hex(x: float, y: float, edge_m: float) -> tuple[int, int]:
    if edge_m <= 0:
        raise ValueError("edge_m must be positive")
    qf = (SQRT3 / 3.0 * x - y / 3.0) / edge_m
    rf = (2.0 / 3.0 * y) / edge_m
    return cube_round(qf, rf)


def hex_center(q: int, r: int, edge_m: float) -> tuple[float, float]:
    return edge_m * SQRT3 * (q + r / 2.0), edge_m * 1.5 * r


def to_hex(lat: float, lon: float, origin: tuple[float, float], edge_m: float = DEFAULT_EDGE_M) -> tuple[int, int]:
    return planar_to_hex(*project(lat, lon, origin), edge_m)


def hex_corners(q: int, r: int, edge_m: float) -> list[tuple[float, float]]:
    """Planar corners, built from an integer vertex lattice so that adjacent
    cells produce bit-identical shared vertices."""
    i0, j0 = 2 * q + r, 3 * r
    return [
        (edge_m * SQRT3 / 2.0 * (i0 + di), edge_m / 2.0 * (j0 + dj)) for di, dj in _CORNERS
    ]


@dataclass
class BinResult:
    cells: list[HexCell]
    located: int
    unlocated: int


def bin_records(
    log: Iterable[NotificationRecord],
    origin: tuple[float, float],
    edge_m: float = DEFAULT_EDGE_M,
    mechanism: Mechanism | None = None,
) -> BinResult:
    """Count sent notifications per hexagon; records without a location are
    tallied separately."""
    counts: Counter[tuple[int, int]] = Counter()
    unlocated = 0
    for rec in log:
        if not rec.sent or (mechanism is not None and rec.event.mechanism is not mechanism):
            continue
        if rec.event.location is None:
            unlocated += 1
            continue
        counts[to_hex(*rec.event.location, origin, edge_m)] += 1
    cells = [HexCell(q, r, edge_m, n) for (q, r), n in sorted(counts.items())]
    return BinResult(cells, sum(counts.values()), unlocated)


def point_in_polygon(lat: float, lon: float, polygon: Sequence[tuple[float, float]]) -> bool:
    """Even-odd ray casting over a ``(lat, lon)`` ring."""
    inside = False
    n = len(polygon)
    for i in range(n):
        la1, lo1 = polygon[i]
        la2, lo2 = polygon[(i + 1) % n]
        if (la1 > lat) != (la2 > lat):
            cross = lo1 + (lat - la1) * (lo2 - lo1) / (la2 - la1)
            if lon < cross:
                inside = not inside
    return inside


def cluster_share(
    log: Iterable[NotificationRecord],
    polygon: Sequence[tuple[float, float]],
    mechanism: Mechanism = Mechanism.THRESHOLD,
) -> float:
    """Share of sent ``mechanism`` messages located inside ``polygon``.

    The denominator is every sent message of that mechanism; 0.0 when there
    are none.
    """
    total = inside = 0
    for rec in log:
        if not rec.sent or rec.event.mechanism is not mechanism:
            continue
        total += 1
        if rec.event.location is not None and point_in_polygon(*rec.event.location, polygon):
            inside += 1
    return inside / total if total else 0.0


def to_geojson(cells: Iterable[HexCell], origin: tuple[float, float]) -> dict:
    features = []
    for cell in cells:
        ring = []
        for x, y in hex_corners(cell.q, cell.r, cell.edge_m):
            lat, lon = unproject(x, y, origin)
            ring.append([lon, lat])
        ring.append(ring[0])
        features.append({
            "type": "Feature",
            "geometry": {"type": "Polygon", "coordinates": [ring]},
            "properties": {"q": cell.q, "r": cell.r, "edge_m": cell.edge_m, "count": cell.count},
        })
    return {"type": "FeatureCollection", "features": features}


def export_geojson(cells: Iterable[HexCell], origin: tuple[float, float], path: str | Path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(to_geojson(cells, origin), indent=1) + "\n", encoding="utf-8")
    return path


def read_geojson(path: str | Path) -> list[HexCell]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("type") != "FeatureCollection":
        raise ValueError("not a GeoJSON FeatureCollection")
    return [
        HexCell(int(f["properties"]["q"]), int(f["properties"]["r"]),
                float(f["properties"]["edge_m"]), int(f["properties"]["count"]))
        for f in doc["features"]
    ]
