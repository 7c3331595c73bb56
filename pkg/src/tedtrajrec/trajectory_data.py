"""Trajectory types, JSON-lines IO and the dataset preparation pipeline.

The pipeline turns raw GPS traces into training pairs:
HMM map matching -> interpolation onto a uniform time grid -> random
downsampling -> 7:2:1 split.  ``generate_synthetic`` produces ground-truth
map-constrained trajectories on a grid network for desk-scale experiments.
"""

from __future__ import annotations

import json
import math
import zlib
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .road_network import NetworkPoint, RoadNetwork, haversine

DAY0 = 1_699_920_000  # 2023-11-14 00:00 UTC
SECONDS_PER_DAY = 86_400


class TrajectoryError(ValueError):
    pass


class MatchError(TrajectoryError):
    pass


def _check_times(times, tid):
    if any(b <= a for a, b in zip(times[:-1], times[1:])):
        raise TrajectoryError(f"trajectory {tid}: timestamps must be strictly increasing")


@dataclass(frozen=True)
class RawTrajectory:
    id: str
    points: tuple[tuple[float, float, float], ...]

    def __post_init__(self):
        object.__setattr__(self, "points", tuple(tuple(map(float, p)) for p in self.points))
        if len(self.points) < 2:
            raise TrajectoryError(f"trajectory {self.id}: needs >= 2 points")
        _check_times([p[2] for p in self.points], self.id)

    @property
    def times(self):
        return [p[2] for p in self.points]

    @property
    def coords(self):
        return [(p[0], p[1]) for p in self.points]


@dataclass(frozen=True)
class MapTrajectory:
    id: str
    points: tuple[tuple[int, float, float], ...]

    def __post_init__(self):
        pts = tuple((int(s), float(r), float(t)) for s, r, t in self.points)
        object.__setattr__(self, "points", pts)
        if not pts:
            raise TrajectoryError(f"trajectory {self.id}: empty")
        for s, r, _ in pts:
            if not 0.0 <= r <= 1.0:
                raise TrajectoryError(f"trajectory {self.id}: ratio {r} outside [0, 1]")
        _check_times([p[2] for p in pts], self.id)

    @property
    def segments(self):
        return [p[0] for p in self.points]

    @property
    def ratios(self):
        return [p[1] for p in self.points]

    @property
    def times(self):
        return [p[2] for p in self.points]

    def validate(self, net: RoadNetwork):
        for s in self.segments:
            if s not in net.segments:
                raise TrajectoryError(f"trajectory {self.id}: unknown segment {s}")
        return self


@dataclass
class DatasetSplit:
    train: list
    valid: list
    test: list
    seed: int


# -- JSON lines -----------------------------------------------------------

def _num(x):
    return int(x) if float(x).is_integer() else x


def dump_raw(traj: RawTrajectory) -> str:
    return json.dumps({"id": traj.id, "points": [[x, y, _num(t)] for x, y, t in traj.points]})


def dump_map(traj: MapTrajectory) -> str:
    return json.dumps({"id": traj.id, "points": [[s, r, _num(t)] for s, r, t in traj.points]})


def write_jsonl(path, trajs: Iterable) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for t in trajs:
            fh.write((dump_map(t) if isinstance(t, MapTrajectory) else dump_raw(t)) + "\n")


def read_jsonl(path, kind: str = "raw") -> list:
    cls = RawTrajectory if kind == "raw" else MapTrajectory
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                out.append(cls(str(obj["id"]), obj["points"]))
            except (ValueError, KeyError, TypeError) as exc:
                raise TrajectoryError(f"{path}: line {lineno}: {exc}") from None
    return out


# -- map matching ---------------------------------------------------------

@dataclass
class HMMConfig:
    sigma_m: float = 20.0
    beta: float = 5.0
    radius_m: float = 100.0
    backtrack_tol_m: float = 30.0


def travel_distance(net: RoadNetwork, a: NetworkPoint, b: NetworkPoint,
                    backtrack_tol_m: float = 0.0) -> float:
    """Directed travel distance; a small backwards move on one segment counts as jitter."""
    if a.segment == b.segment and b.ratio < a.ratio:
        back = (a.ratio - b.ratio) * net.segments[a.segment].length
        if back <= backtrack_tol_m:
            return back
    return net.route_distance(a, b)


def hmm_map_match(net: RoadNetwork, raw: RawTrajectory, config: HMMConfig | None = None) -> MapTrajectory:
    """Viterbi map matching with Gaussian emissions and route/great-circle transitions."""
    cfg = config or HMMConfig()
    cands = []
    for i, (lon, lat, _) in enumerate(raw.points):
        found = net.segment_distances((lon, lat), cfg.radius_m)
        if not found:
            raise MatchError(f"trajectory {raw.id}: point {i} has no candidate within {cfg.radius_m} m")
        cands.append([(NetworkPoint(s, r), d) for s, (d, r) in sorted(found.items())])

    score = np.array([-(d * d) / (2 * cfg.sigma_m ** 2) for _, d in cands[0]])
    back = []
    for i in range(1, len(cands)):
        gc = haversine(raw.points[i - 1][:2], raw.points[i][:2])
        prev, cur = cands[i - 1], cands[i]
        trans = np.full((len(prev), len(cur)), -np.inf)
        for a, (pa, _) in enumerate(prev):
            if not np.isfinite(score[a]):
                continue
            for b, (pb, _) in enumerate(cur):
                route = travel_distance(net, pa, pb, cfg.backtrack_tol_m)
                if np.isfinite(route):
                    trans[a, b] = -abs(gc - route) / cfg.beta
        total = score[:, None] + trans
        arg = np.argmax(total, axis=0)
        best = total[arg, np.arange(len(cur))]
        if not np.isfinite(best).any():
            raise MatchError(f"trajectory {raw.id}: no connected candidates between points {i - 1} and {i}")
        emis = np.array([-(d * d) / (2 * cfg.sigma_m ** 2) for _, d in cur])
        score = best + emis
        back.append(arg)

    k = int(np.argmax(score))
    path = [k]
    for arg in reversed(back):
        k = int(arg[k])
        path.append(k)
    path.reverse()
    pts = [(cands[i][k][0].segment, cands[i][k][0].ratio, raw.points[i][2]) for i, k in enumerate(path)]
    return MapTrajectory(raw.id, pts)


# -- interpolation --------------------------------------------------------

def grid_times(t_first: float, t_last: float, eps_tau: float) -> list[float]:
    if not eps_tau > 0:
        raise TrajectoryError(f"eps_tau must be positive, got {eps_tau}")
    if t_last < t_first:
        raise TrajectoryError("t_last precedes t_first")
    n = int(math.floor((t_last - t_first) / eps_tau + 1e-9)) + 1
    return [t_first + i * eps_tau for i in range(n)]


def _locate_on_path(net, a: NetworkPoint, path: list[int], s: float) -> tuple[int, float]:
    """Position reached after travelling ``s`` meters from ``a`` along ``path``."""
    seg = path[0]
    length = net.segments[seg].length
    remaining = (1 - a.ratio) * length if len(path) > 1 else math.inf
    if s <= remaining or len(path) == 1:
        return seg, min(1.0, a.ratio + s / length)
    s -= remaining
    for seg in path[1:]:
        length = net.segments[seg].length
        if s <= length or seg == path[-1]:
            return seg, min(1.0, s / length)
        s -= length
    raise AssertionError("unreachable")


def interpolate_to_interval(net: RoadNetwork, traj: MapTrajectory, eps_tau: float,
                            backtrack_tol_m: float = 30.0) -> MapTrajectory:
    """Resample ``traj`` onto the uniform grid t1, t1+eps, ... by constant-speed travel."""
    times = traj.times
    grid = grid_times(times[0], times[-1], eps_tau)
    pts = [NetworkPoint(s, r) for s, r, _ in traj.points]
    out = []
    k = 0
    cache: dict[int, tuple[float, list[int]]] = {}
    for t in grid:
        while k + 1 < len(times) - 1 and times[k + 1] <= t:
            k += 1
        if abs(t - times[k]) < 1e-9:
            out.append((pts[k].segment, pts[k].ratio, t))
            continue
        if k + 1 < len(times) and abs(t - times[k + 1]) < 1e-9:
            out.append((pts[k + 1].segment, pts[k + 1].ratio, t))
            continue
        a, b = pts[k], pts[k + 1]
        if k not in cache:
            if a.segment == b.segment and b.ratio < a.ratio and \
                    (a.ratio - b.ratio) * net.segments[a.segment].length <= backtrack_tol_m:
                cache[k] = (0.0, [a.segment])
            else:
                r = net.route(a, b)
                if r is None:
                    raise TrajectoryError(
                        f"trajectory {traj.id}: points {k} and {k + 1} are mutually unreachable")
                cache[k] = r
        dist, path = cache[k]
        frac = (t - times[k]) / (times[k + 1] - times[k])
        seg, ratio = _locate_on_path(net, a, path, frac * dist)
        out.append((seg, ratio, t))
    return MapTrajectory(traj.id, out)


# -- downsampling ---------------------------------------------------------

def trajectory_rng(seed: int, tid) -> np.random.Generator:
    return np.random.default_rng([int(seed), zlib.crc32(str(tid).encode())])


def to_raw(traj: MapTrajectory, net: RoadNetwork) -> RawTrajectory:
    return RawTrajectory(traj.id, [(*net.point_at(s, r), t) for s, r, t in traj.points])


def downsample(traj, keep_prob: float, seed: int, net: RoadNetwork | None = None) -> RawTrajectory:
    """Keep endpoints, keep each interior point independently with ``keep_prob``."""
    if not 0.0 < keep_prob <= 1.0:
        raise TrajectoryError(f"keep_prob must lie in (0, 1], got {keep_prob}")
    if len(traj.points) < 2:
        raise TrajectoryError(f"trajectory {traj.id}: needs >= 2 points")
    if isinstance(traj, MapTrajectory):
        if net is None:
            raise TrajectoryError("a road network is required to downsample a map-constrained trajectory")
        traj = to_raw(traj, net)
    rng = trajectory_rng(seed, traj.id)
    keep = rng.random(len(traj.points) - 2) < keep_prob
    pts = [traj.points[0]] + [p for p, k in zip(traj.points[1:-1], keep) if k] + [traj.points[-1]]
    return RawTrajectory(traj.id, pts)


# -- synthetic traffic ----------------------------------------------------

@dataclass
class SynthParams:
    eps_tau: float = 15.0
    min_points: int = 20
    max_points: int = 30
    speed_range: tuple[float, float] = (9.0, 14.0)   # free-flow m/s, drawn per segment
    peak_factor: float = 2.5                          # peak traversal time / off-peak
    peak_hours: tuple[float, ...] = (8.0, 18.0)
    peak_width_h: float = 1.5
    depart_hours: tuple[float, float] | None = None   # uniform over the day when None
    allow_uturn: bool = False


def congestion(minute_of_day: float, params: SynthParams) -> float:
    """Traversal-time multiplier in [1, peak_factor]."""
    h = (minute_of_day / 60.0) % 24.0
    bump = 0.0
    for c in params.peak_hours:
        dh = min(abs(h - c), 24.0 - abs(h - c))
        bump = max(bump, math.exp(-0.5 * (dh / params.peak_width_h) ** 2))
    return 1.0 + (params.peak_factor - 1.0) * bump


def segment_speeds(net: RoadNetwork, params: SynthParams, seed: int) -> dict[int, float]:
    rng = np.random.default_rng([int(seed), 7])
    lo, hi = params.speed_range
    return {sid: float(v) for sid, v in zip(net.ids, rng.uniform(lo, hi, len(net.ids)))}


def generate_synthetic(net: RoadNetwork, count: int, params: SynthParams | None = None,
                       seed: int = 0, max_restarts: int = 50) -> list[MapTrajectory]:
    """Seeded random walks sampled on the ``eps_tau`` grid.

    Speed on a segment is its free-flow speed divided by the time-of-day
    congestion multiplier, so travel times peak twice a day.
    """
    params = params or SynthParams()
    speeds = segment_speeds(net, params, seed)
    rng = np.random.default_rng(seed)
    succ = {sid: net.successors(sid) for sid in net.ids}
    out = []
    for k in range(count):
        n = int(rng.integers(params.min_points, params.max_points + 1))
        for _ in range(max_restarts):
            walk = _walk(net, succ, speeds, params, rng, n)
            if walk is not None:
                break
        else:
            raise TrajectoryError(f"could not build a {n}-point walk after {max_restarts} restarts")
        out.append(MapTrajectory(f"syn{seed}_{k:05d}", walk))
    return out


def _walk(net, succ, speeds, params, rng, n):
    if params.depart_hours is None:
        minute = float(rng.uniform(0, 1440))
    else:
        minute = float(rng.uniform(*params.depart_hours)) * 60.0
    t0 = DAY0 + round(minute * 60.0)
    seg = int(net.ids[rng.integers(len(net.ids))])
    ratio = float(rng.uniform(0.0, 0.5))
    pts = [(seg, ratio, float(t0))]
    t = float(t0)
    for _ in range(n - 1):
        budget = params.eps_tau
        while True:
            length = net.segments[seg].length
            speed = speeds[seg] / congestion(((t - DAY0) % SECONDS_PER_DAY) / 60.0, params)
            left = (1.0 - ratio) * length / speed
            if left > budget:
                ratio += budget * speed / length
                t += budget
                break
            budget -= left
            t += left
            nxt = succ[seg]
            if not params.allow_uturn:
                back = net.segments[seg].from_node
                fwd = [s for s in nxt if net.segments[s].to_node != back]
                nxt = fwd or nxt
            if not nxt:
                return None
            seg = int(nxt[rng.integers(len(nxt))])
            ratio = 0.0
        t = pts[-1][2] + params.eps_tau
        pts.append((seg, min(ratio, 1.0), t))
    return pts


def add_gps_noise(raw: RawTrajectory, sigma_m: float, rng: np.random.Generator) -> RawTrajectory:
    pts = []
    for lon, lat, t in raw.points:
        dx, dy = rng.normal(0.0, sigma_m, 2)
        dlat = math.degrees(dy / 6_371_000.0)
        dlon = math.degrees(dx / (6_371_000.0 * math.cos(math.radians(lat))))
        pts.append((lon + dlon, lat + dlat, t))
    return RawTrajectory(raw.id, pts)


# -- splitting ------------------------------------------------------------

def build_splits(pairs: Sequence, seed: int) -> DatasetSplit:
    if len(pairs) < 10:
        raise TrajectoryError(f"need at least 10 pairs to split, got {len(pairs)}")
    order = np.random.default_rng(seed).permutation(len(pairs))
    n = len(pairs)
    n_train = int(round(0.7 * n))
    n_valid = int(round(0.2 * n))
    shuffled = [pairs[i] for i in order]
    return DatasetSplit(shuffled[:n_train], shuffled[n_train:n_train + n_valid],
                        shuffled[n_train + n_valid:], seed)
