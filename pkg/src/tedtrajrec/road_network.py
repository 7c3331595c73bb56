"""Directed road-segment graph with a grid spatial index.

Segments are the graph vertices; a directed edge (a, b) exists whenever
segment ``a`` ends at the junction where segment ``b`` starts.  Positions on
the network are ``NetworkPoint(segment, ratio)`` with ``ratio`` the arclength
fraction along the segment geometry.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import dijkstra

EARTH_RADIUS_M = 6_371_000.0
CELL_SIZE_M = 200.0
TIE_TOL_M = 1e-6
LENGTH_RTOL = 1e-3


class NetworkError(ValueError):
    """Invalid network file or invalid query against a network."""


@dataclass(frozen=True)
class RoadSegment:
    id: int
    geometry: tuple[tuple[float, float], ...]
    length: float
    from_node: int
    to_node: int


@dataclass(frozen=True)
class NetworkPoint:
    segment: int
    ratio: float

    def __post_init__(self):
        if not 0.0 <= self.ratio <= 1.0:
            raise NetworkError(f"ratio {self.ratio} outside [0, 1]")


def haversine(p1: Sequence[float], p2: Sequence[float]) -> float:
    """Great-circle distance in meters between two (lon, lat) points."""
    lon1, lat1 = math.radians(p1[0]), math.radians(p1[1])
    lon2, lat2 = math.radians(p2[0]), math.radians(p2[1])
    a = (math.sin((lat2 - lat1) / 2) ** 2
         + math.cos(lat1) * math.cos(lat2) * math.sin((lon2 - lon1) / 2) ** 2)
    return 2 * EARTH_RADIUS_M * math.asin(min(1.0, math.sqrt(a)))


def haversine_np(lon1, lat1, lon2, lat2):
    lon1, lat1, lon2, lat2 = map(np.radians, (lon1, lat1, lon2, lat2))
    a = (np.sin((lat2 - lat1) / 2) ** 2
         + np.cos(lat1) * np.cos(lat2) * np.sin((lon2 - lon1) / 2) ** 2)
    return 2 * EARTH_RADIUS_M * np.arcsin(np.minimum(1.0, np.sqrt(a)))


def polyline_length(geometry: Iterable[Sequence[float]]) -> float:
    pts = list(geometry)
    return sum(haversine(a, b) for a, b in zip(pts[:-1], pts[1:]))


@dataclass
class _Pieces:
    """Flattened straight pieces of every segment geometry."""

    seg_pos: np.ndarray      # dense segment index of each piece
    lon0: np.ndarray
    lat0: np.ndarray
    lon1: np.ndarray
    lat1: np.ndarray
    length: np.ndarray       # haversine length of the piece
    offset: np.ndarray       # arclength from segment start to piece start


class RoadNetwork:
    """Immutable directed road network.

    ``ids`` lists segment ids in ascending order; ``index[id]`` is the dense
    position used by the learning code.
    """

    def __init__(self, segments: Iterable[RoadSegment]):
        segs: dict[int, RoadSegment] = {}
        for s in segments:
            if s.id in segs:
                raise NetworkError(f"duplicate segment id {s.id}")
            if s.id < 0:
                raise NetworkError(f"negative segment id {s.id}")
            if len(s.geometry) < 2:
                raise NetworkError(f"segment {s.id}: geometry needs >= 2 vertices")
            if not s.length > 0:
                raise NetworkError(f"segment {s.id}: zero or negative length")
            geo_len = polyline_length(s.geometry)
            if geo_len <= 0:
                raise NetworkError(f"segment {s.id}: zero-length geometry")
            if abs(geo_len - s.length) > LENGTH_RTOL * geo_len:
                raise NetworkError(
                    f"segment {s.id}: length {s.length} disagrees with geometry {geo_len:.3f}")
            segs[s.id] = s
        if not segs:
            raise NetworkError("network has no segments")
        self.segments = segs
        self.ids: list[int] = sorted(segs)
        self.index = {sid: i for i, sid in enumerate(self.ids)}
        self.lengths = np.array([segs[i].length for i in self.ids])

        starts: dict[int, list[int]] = {}
        for s in segs.values():
            starts.setdefault(s.from_node, []).append(s.id)
        self.edges: set[tuple[int, int]] = {
            (a.id, b) for a in segs.values() for b in starts.get(a.to_node, [])
        }
        self._build_pieces()
        self._build_index()
        self._build_junction_graphs()

    def __len__(self):
        return len(self.ids)

    def successors(self, sid: int) -> list[int]:
        return sorted(b for a, b in self.edges if a == sid)

    # -- geometry ---------------------------------------------------------

    def _build_pieces(self):
        cols = {k: [] for k in ("seg_pos", "lon0", "lat0", "lon1", "lat1", "length", "offset")}
        for pos, sid in enumerate(self.ids):
            geom = self.segments[sid].geometry
            off = 0.0
            for (x0, y0), (x1, y1) in zip(geom[:-1], geom[1:]):
                ln = haversine((x0, y0), (x1, y1))
                for k, v in zip(cols, (pos, x0, y0, x1, y1, ln, off)):
                    cols[k].append(v)
                off += ln
        self._pieces = _Pieces(**{k: np.asarray(v) for k, v in cols.items()})
        self._geo_len = np.zeros(len(self.ids))
        np.add.at(self._geo_len, self._pieces.seg_pos, self._pieces.length)

    def _build_index(self):
        pc = self._pieces
        lat_ref = float(np.mean(np.concatenate([pc.lat0, pc.lat1])))
        self._lat_ref = lat_ref
        self._max_abs_lat = float(np.max(np.abs(np.concatenate([pc.lat0, pc.lat1]))))
        self._cell_dlat = math.degrees(CELL_SIZE_M / EARTH_RADIUS_M)
        self._cell_dlon = self._cell_dlat / max(math.cos(math.radians(lat_ref)), 1e-6)
        grid: dict[tuple[int, int], list[int]] = {}
        for k in range(len(pc.seg_pos)):
            cx0, cy0 = self._cell(min(pc.lon0[k], pc.lon1[k]), min(pc.lat0[k], pc.lat1[k]))
            cx1, cy1 = self._cell(max(pc.lon0[k], pc.lon1[k]), max(pc.lat0[k], pc.lat1[k]))
            for cx in range(cx0, cx1 + 1):
                for cy in range(cy0, cy1 + 1):
                    grid.setdefault((cx, cy), []).append(k)
        self._grid = {c: np.asarray(v) for c, v in grid.items()}

    def _cell(self, lon, lat):
        return math.floor(lon / self._cell_dlon), math.floor(lat / self._cell_dlat)

    def _pieces_near(self, p, radius_m):
        """Piece indices whose bounding cells intersect the box of ``radius_m`` around p."""
        dlat = math.degrees(radius_m / EARTH_RADIUS_M) * 1.01 + 1e-9
        coslat = math.cos(math.radians(min(89.0, max(abs(p[1]) + dlat, self._max_abs_lat))))
        dlon = dlat / max(coslat, 1e-6)
        cx0, cy0 = self._cell(p[0] - dlon, p[1] - dlat)
        cx1, cy1 = self._cell(p[0] + dlon, p[1] + dlat)
        if (cx1 - cx0 + 1) * (cy1 - cy0 + 1) > 4 * len(self._grid):
            return np.arange(len(self._pieces.seg_pos))
        found = [self._grid[c] for cx in range(cx0, cx1 + 1) for cy in range(cy0, cy1 + 1)
                 if (c := (cx, cy)) in self._grid]
        if not found:
            return np.zeros(0, dtype=int)
        return np.unique(np.concatenate(found))

    def _project_pieces(self, p, idx):
        """Perpendicular foot of p on each piece: (distance_m, arclength_along_segment)."""
        pc = self._pieces
        lon, lat = p
        coslat = math.cos(math.radians(lat))
        # local tangent plane centred on p, meters
        ax = np.radians(pc.lon0[idx] - lon) * coslat * EARTH_RADIUS_M
        ay = np.radians(pc.lat0[idx] - lat) * EARTH_RADIUS_M
        bx = np.radians(pc.lon1[idx] - lon) * coslat * EARTH_RADIUS_M
        by = np.radians(pc.lat1[idx] - lat) * EARTH_RADIUS_M
        dx, dy = bx - ax, by - ay
        den = dx * dx + dy * dy
        t = np.where(den > 0, -(ax * dx + ay * dy) / np.where(den > 0, den, 1.0), 0.0)
        t = np.clip(t, 0.0, 1.0)
        flon = pc.lon0[idx] + t * (pc.lon1[idx] - pc.lon0[idx])
        flat = pc.lat0[idx] + t * (pc.lat1[idx] - pc.lat0[idx])
        dist = haversine_np(lon, lat, flon, flat)
        along = pc.offset[idx] + t * pc.length[idx]
        return dist, along

    def segment_distances(self, p, radius_m=None):
        """Map segment id -> (distance_m, ratio) for segments within ``radius_m`` (all if None)."""
        if radius_m is None or math.isinf(radius_m):
            idx = np.arange(len(self._pieces.seg_pos))
        else:
            idx = self._pieces_near(p, radius_m)
        if len(idx) == 0:
            return {}
        dist, along = self._project_pieces(p, idx)
        out: dict[int, tuple[float, float]] = {}
        for k, d, a in zip(self._pieces.seg_pos[idx], dist, along):
            sid = self.ids[k]
            if radius_m is not None and d > radius_m:
                continue
            if sid not in out or d < out[sid][0]:
                out[sid] = (float(d), float(min(1.0, max(0.0, a / self._geo_len[k]))))
        return out

    def point_at(self, sid: int, ratio: float) -> tuple[float, float]:
        """(lon, lat) located at ``ratio`` of arclength along segment ``sid``."""
        pos = self._pos(sid)
        pc = self._pieces
        idx = np.flatnonzero(pc.seg_pos == pos)
        target = ratio * self._geo_len[pos]
        for k in idx:
            if target <= pc.offset[k] + pc.length[k] or k == idx[-1]:
                f = 0.0 if pc.length[k] == 0 else (target - pc.offset[k]) / pc.length[k]
                f = min(1.0, max(0.0, f))
                return (float(pc.lon0[k] + f * (pc.lon1[k] - pc.lon0[k])),
                        float(pc.lat0[k] + f * (pc.lat1[k] - pc.lat0[k])))
        raise AssertionError("unreachable")

    def _pos(self, sid):
        try:
            return self.index[sid]
        except KeyError:
            raise NetworkError(f"unknown segment id {sid}") from None

    # -- graph distances --------------------------------------------------

    def _build_junction_graphs(self):
        nodes = sorted({s.from_node for s in self.segments.values()}
                       | {s.to_node for s in self.segments.values()})
        self._jidx = {n: i for i, n in enumerate(nodes)}
        nj = len(nodes)
        best: dict[tuple[int, int], tuple[float, int]] = {}
        for s in self.segments.values():
            key = (self._jidx[s.from_node], self._jidx[s.to_node])
            if key not in best or (s.length, s.id) < best[key]:
                best[key] = (s.length, s.id)
        self._directed_seg = {k: v[1] for k, v in best.items()}
        rows = [k[0] for k in best]
        cols = [k[1] for k in best]
        w = [v[0] for v in best.values()]
        self._directed = csr_matrix((w, (rows, cols)), shape=(nj, nj))
        und: dict[tuple[int, int], float] = {}
        for (a, b), (ln, _) in best.items():
            for key in ((a, b), (b, a)):
                und[key] = min(und.get(key, math.inf), ln)
        self._undirected = csr_matrix(
            ([v for v in und.values()], ([k[0] for k in und], [k[1] for k in und])),
            shape=(nj, nj))
        self._dir_cache = lru_cache(maxsize=4096)(self._dir_from)
        self._und_cache = lru_cache(maxsize=4096)(self._und_from)

    def _dir_from(self, j):
        d, pred = dijkstra(self._directed, directed=True, indices=j, return_predecessors=True)
        return d, pred

    def _und_from(self, j):
        return dijkstra(self._undirected, directed=False, indices=j)

    def junction_distance(self, a_node: int, b_node: int) -> float:
        return float(self._und_cache(self._jidx[a_node])[self._jidx[b_node]])

    def network_distance(self, a: NetworkPoint, b: NetworkPoint) -> float:
        """Undirected shortest-path distance between two on-network points.

        Falls back to the haversine distance between the two locations when
        no path connects them.
        """
        sa, sb = self.segments.get(a.segment), self.segments.get(b.segment)
        if sa is None or sb is None:
            raise NetworkError(f"unknown segment id {a.segment if sa is None else b.segment}")
        best = math.inf
        if a.segment == b.segment:
            best = abs(a.ratio - b.ratio) * sa.length
        ends_a = ((sa.from_node, a.ratio * sa.length), (sa.to_node, (1 - a.ratio) * sa.length))
        ends_b = ((sb.from_node, b.ratio * sb.length), (sb.to_node, (1 - b.ratio) * sb.length))
        for na, da in ends_a:
            row = self._und_cache(self._jidx[na])
            for nb, db in ends_b:
                best = min(best, da + float(row[self._jidx[nb]]) + db)
        if math.isinf(best):
            return haversine(self.point_at(a.segment, a.ratio), self.point_at(b.segment, b.ratio))
        return best

    def route(self, a: NetworkPoint, b: NetworkPoint) -> tuple[float, list[int]] | None:
        """Shortest directed travel from ``a`` to ``b``.

        Returns ``(distance_m, segment_path)`` where the path starts with
        ``a.segment`` and ends with ``b.segment``, or None if unreachable.
        """
        sa, sb = self.segments.get(a.segment), self.segments.get(b.segment)
        if sa is None or sb is None:
            raise NetworkError(f"unknown segment id {a.segment if sa is None else b.segment}")
        if a.segment == b.segment and b.ratio >= a.ratio:
            return (b.ratio - a.ratio) * sa.length, [a.segment]
        src, dst = self._jidx[sa.to_node], self._jidx[sb.from_node]
        dist, pred = self._dir_cache(src)
        if math.isinf(dist[dst]):
            return None
        nodes = [dst]
        while nodes[-1] != src:
            nodes.append(int(pred[nodes[-1]]))
        nodes.reverse()
        middle = [self._directed_seg[(u, v)] for u, v in zip(nodes[:-1], nodes[1:])]
        total = (1 - a.ratio) * sa.length + float(dist[dst]) + b.ratio * sb.length
        return total, [a.segment, *middle, b.segment]

    def route_distance(self, a: NetworkPoint, b: NetworkPoint) -> float:
        r = self.route(a, b)
        return math.inf if r is None else r[0]


def project_point(net: RoadNetwork, p: Sequence[float]) -> tuple[NetworkPoint, float]:
    """Nearest on-network point to ``p``; ties go to the smallest segment id."""
    if len(net) == 0:
        raise NetworkError("empty network")
    radius = CELL_SIZE_M
    while True:
        found = net.segment_distances(p, radius)
        if found:
            dmin = min(d for d, _ in found.values())
            found = net.segment_distances(p, dmin + TIE_TOL_M)
            break
        if radius > 4 * EARTH_RADIUS_M:
            found = net.segment_distances(p, None)
            dmin = min(d for d, _ in found.values())
            break
        radius *= 2
    sid = min(s for s, (d, _) in found.items() if d <= dmin + TIE_TOL_M)
    d, r = found[sid]
    return NetworkPoint(sid, r), d


def subregion(net: RoadNetwork, p: Sequence[float], eta: float) -> set[int]:
    """Ids of all segments whose distance to ``p`` is at most ``eta`` meters."""
    if not eta > 0:
        raise NetworkError(f"eta must be positive, got {eta}")
    if math.isinf(eta):
        return set(net.ids)
    return set(net.segment_distances(p, eta))


def network_distance(net: RoadNetwork, a: NetworkPoint, b: NetworkPoint) -> float:
    return net.network_distance(a, b)


# -- IO -----------------------------------------------------------------

CSV_HEADER = ["id", "u", "v", "length_m", "geometry"]


def load_network(path) -> RoadNetwork:
    segments = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != CSV_HEADER:
            raise NetworkError(f"{path}: line 1: expected header {','.join(CSV_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                sid, u, v, length, geom = row
                coords = tuple(
                    (float(x), float(y))
                    for x, y in (pair.split() for pair in geom.strip().split(";") if pair.strip())
                )
                segments.append(RoadSegment(int(sid), coords, float(length), int(u), int(v)))
            except ValueError as exc:
                raise NetworkError(f"{path}: line {lineno}: malformed row ({exc})") from None
    return RoadNetwork(segments)


def save_network(net: RoadNetwork, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for sid in net.ids:
            s = net.segments[sid]
            geom = ";".join(f"{x:.8f} {y:.8f}" for x, y in s.geometry)
            w.writerow([s.id, s.from_node, s.to_node, f"{s.length:.6f}", geom])


def grid_network(rows: int = 4, cols: int = 4, spacing_m: float = 300.0,
                 origin=(104.05, 30.65), bidirectional: bool = True) -> RoadNetwork:
    """Rectangular street grid of ``rows x cols`` junctions.

    With ``bidirectional=False`` each street carries one segment, pointing
    east or north.
    """
    dlat = math.degrees(spacing_m / EARTH_RADIUS_M)
    dlon = dlat / math.cos(math.radians(origin[1]))

    def node(r, c):
        return r * cols + c

    def coord(r, c):
        return (origin[0] + c * dlon, origin[1] + r * dlat)

    pairs = []
    for r in range(rows):
        for c in range(cols):
            if c + 1 < cols:
                pairs.append(((r, c), (r, c + 1)))
            if r + 1 < rows:
                pairs.append(((r, c), (r + 1, c)))
    segs = []
    for a, b in pairs:
        ends = [(a, b), (b, a)] if bidirectional else [(a, b)]
        for u, v in ends:
            geom = (coord(*u), coord(*v))
            segs.append(RoadSegment(len(segs), geom, polyline_length(geom), node(*u), node(*v)))
    return RoadNetwork(segs)
