"""Trajectory and POI records, CSV ingestion, preprocessing and the synthetic generator."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .config import ConfigError, dump_kv, from_kv, read_kv
from .geo import GeoError, LngLat, RegionConfig, haversine_np, norm_to_lnglat

MIN_POINTS = 5
MAX_POINTS = 120
UTC_OFFSET_S = 8 * 3600

TRAJ_COLUMNS = ("traj_id", "seq", "lng", "lat", "timestamp")
POI_COLUMNS = ("poi_id", "lng", "lat", "name", "category", "address")


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class TrajPoint:
    loc: LngLat
    t: float


@dataclass(frozen=True)
class Trajectory:
    id: str
    points: tuple[TrajPoint, ...]

    def __len__(self):
        return len(self.points)

    @property
    def departure(self) -> float:
        return self.points[0].t

    def lnglat_array(self) -> np.ndarray:
        return np.array([[p.loc.lng, p.loc.lat] for p in self.points], dtype=np.float64)

    def time_array(self) -> np.ndarray:
        return np.array([p.t for p in self.points], dtype=np.float64)


@dataclass(frozen=True)
class Poi:
    id: str
    loc: LngLat
    name: str
    category: str
    address: str

    @property
    def desc(self) -> str:
        return f"{self.name}; {self.category}; {self.address}"


@dataclass(frozen=True)
class TemporalFeatures:
    dow: int
    hod: int
    moh: int
    dt_min: float

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (float(self.dow), float(self.hod), float(self.moh), float(self.dt_min))


@dataclass
class Dataset:
    region: RegionConfig
    trajectories: list[Trajectory]
    pois: list[Poi]
    split: dict[str, str] = field(default_factory=dict)

    def subset(self, name: str) -> list[Trajectory]:
        return [t for t in self.trajectories if self.split.get(t.id) == name]


# --------------------------------------------------------------------------- csv


def _check_header(reader, expected, path):
    header = next(reader, None)
    if header is None:
        return False
    missing = [c for c in expected if c not in header]
    if missing:
        raise DataError(f"{path}: missing columns {missing}")
    return header


def load_trajectories_csv(path: str | Path) -> list[Trajectory]:
    rows: dict[str, list[tuple[int, int, TrajPoint]]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = _check_header(reader, TRAJ_COLUMNS, path)
        if not header:
            return []
        col = {name: header.index(name) for name in TRAJ_COLUMNS}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                tid = row[col["traj_id"]]
                seq = int(row[col["seq"]])
                loc = LngLat(float(row[col["lng"]]), float(row[col["lat"]]))
                ts = float(row[col["timestamp"]])
            except (IndexError, ValueError) as exc:
                raise DataError(f"{path}:{lineno}: malformed row: {exc}") from exc
            if not math.isfinite(ts) or ts < 0:
                raise DataError(f"{path}:{lineno}: invalid timestamp {ts}")
            rows.setdefault(tid, []).append((seq, lineno, TrajPoint(loc, ts)))

    out = []
    for tid, pts in rows.items():
        pts.sort(key=lambda r: r[0])
        for (_, _, a), (_, lineno, b) in zip(pts, pts[1:]):
            if b.t < a.t:
                raise DataError(f"{path}:{lineno}: timestamps decrease within trajectory {tid}")
        out.append(Trajectory(tid, tuple(p for _, _, p in pts)))
    return out


def write_trajectories_csv(path: str | Path, trajectories: list[Trajectory]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRAJ_COLUMNS)
        for traj in trajectories:
            for seq, p in enumerate(traj.points):
                w.writerow([traj.id, seq, repr(p.loc.lng), repr(p.loc.lat), int(round(p.t))])


def load_pois_csv(path: str | Path) -> list[Poi]:
    out: list[Poi] = []
    seen: set[str] = set()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = _check_header(reader, POI_COLUMNS, path)
        if not header:
            return []
        col = {name: header.index(name) for name in POI_COLUMNS}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                pid = row[col["poi_id"]]
                poi = Poi(
                    pid,
                    LngLat(float(row[col["lng"]]), float(row[col["lat"]])),
                    row[col["name"]],
                    row[col["category"]],
                    row[col["address"]],
                )
            except (IndexError, ValueError) as exc:
                raise DataError(f"{path}:{lineno}: malformed row: {exc}") from exc
            if pid in seen:
                raise DataError(f"{path}:{lineno}: duplicate poi_id {pid!r}")
            seen.add(pid)
            out.append(poi)
    return out


def write_pois_csv(path: str | Path, pois: list[Poi]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(POI_COLUMNS)
        for p in pois:
            w.writerow([p.id, repr(p.loc.lng), repr(p.loc.lat), p.name, p.category, p.address])


# ------------------------------------------------------------------ preprocessing


def three_hop_resample(t: Trajectory) -> Trajectory:
    n = len(t.points)
    keep = list(range(0, n, 3))
    if keep[-1] != n - 1:
        keep.append(n - 1)
    return Trajectory(t.id, tuple(t.points[i] for i in keep))


def filter_length(ts: list[Trajectory], lo: int = MIN_POINTS, hi: int = MAX_POINTS) -> list[Trajectory]:
    return [t for t in ts if lo <= len(t.points) <= hi]


def temporal_array(times) -> np.ndarray:
    """(n, 4) array of [dow, hod, moh, dt_min] for a sequence of timestamps."""
    times = np.asarray(times, dtype=np.float64)
    local = np.floor(times).astype(np.int64) + UTC_OFFSET_S
    days = np.floor_divide(local, 86400)
    # 1970-01-01 was a Thursday (Monday = 0)
    dow = (days + 3) % 7
    hod = (local % 86400) // 3600
    moh = (local % 3600) // 60
    dt_min = (times - times[0]) / 60.0
    return np.stack([dow, hod, moh, dt_min], axis=-1).astype(np.float64)


def expand_temporal(t: Trajectory, i: int) -> TemporalFeatures:
    if not 0 <= i < len(t.points):
        raise IndexError(i)
    row = temporal_array([t.points[0].t, t.points[i].t])[1 if i else 0]
    return TemporalFeatures(int(row[0]), int(row[1]), int(row[2]), float(row[3]))


def split_chronological(ds: Dataset) -> Dataset:
    if not ds.trajectories:
        raise DataError("cannot split an empty dataset")
    order = sorted(ds.trajectories, key=lambda t: (t.departure, t.id))
    n = len(order)
    n_train = int(round(n * 0.8))
    n_val = int(round(n * 0.1))
    split = {}
    for k, t in enumerate(order):
        split[t.id] = "train" if k < n_train else ("val" if k < n_train + n_val else "test")
    return Dataset(ds.region, list(ds.trajectories), list(ds.pois), split)


# ---------------------------------------------------------------------- POI index


def _unit_vectors(lng, lat) -> np.ndarray:
    lam, phi = np.radians(lng), np.radians(lat)
    return np.stack([np.cos(phi) * np.cos(lam), np.cos(phi) * np.sin(lam), np.sin(phi)], axis=-1)


class PoiIndex:
    """Exact nearest-POI lookup by great-circle distance.

    POIs are embedded as unit vectors; chord length is monotone in
    great-circle distance, so a KD-tree over the vectors is exact.
    """

    def __init__(self, pois: list[Poi]):
        self.pois = sorted(pois, key=lambda p: p.id)
        self.by_id = {p.id: p for p in self.pois}
        if self.pois:
            self._lng = np.array([p.loc.lng for p in self.pois])
            self._lat = np.array([p.loc.lat for p in self.pois])
            self._tree = cKDTree(_unit_vectors(self._lng, self._lat))

    def __len__(self):
        return len(self.pois)

    def nearest_indices(self, lng, lat) -> np.ndarray:
        if not self.pois:
            raise DataError("nearest_poi on an empty POI index")
        lng = np.atleast_1d(np.asarray(lng, dtype=np.float64))
        lat = np.atleast_1d(np.asarray(lat, dtype=np.float64))
        k = min(4, len(self.pois))
        _, cand = self._tree.query(_unit_vectors(lng, lat), k=k)
        cand = cand.reshape(len(lng), k)
        out = np.empty(len(lng), dtype=np.int64)
        for q in range(len(lng)):
            d = haversine_np(lng[q], lat[q], self._lng[cand[q]], self._lat[cand[q]])
            best = d.min()
            if k < len(self.pois) and np.isclose(d.max(), best, rtol=1e-12, atol=0):
                # many exact ties: widen the candidate set
                r = float(np.linalg.norm(_unit_vectors(lng[q], lat[q]) - self._tree.data[cand[q][0]]))
                cand_q = np.array(self._tree.query_ball_point(_unit_vectors(lng[q], lat[q]), r * (1 + 1e-9) + 1e-15))
                d = haversine_np(lng[q], lat[q], self._lng[cand_q], self._lat[cand_q])
                best = d.min()
            else:
                cand_q = cand[q]
            ties = cand_q[d <= best * (1 + 1e-12)]
            # pois are sorted by id, so the smallest position is the smallest id
            out[q] = ties.min()
        return out

    def nearest(self, p: LngLat) -> Poi:
        return self.pois[int(self.nearest_indices(p.lng, p.lat)[0])]


def nearest_poi(idx: PoiIndex, p: LngLat) -> Poi:
    return idx.nearest(p)


def nearest_poi_bruteforce(pois: list[Poi], p: LngLat) -> Poi:
    lng = np.array([q.loc.lng for q in pois])
    lat = np.array([q.loc.lat for q in pois])
    d = haversine_np(p.lng, p.lat, lng, lat)
    return min(zip(d.tolist(), [q.id for q in pois], pois), key=lambda r: (r[0], r[1]))[2]


# ------------------------------------------------------------------ synthetic data


@dataclass(frozen=True)
class SynthConfig:
    center_lng: float = 104.0665
    center_lat: float = 30.5728
    grid_size: int = 40
    cell_spacing_m: float = 200.0
    n_pois: int = 300
    n_trajectories: int = 600
    speed_min: float = 5.0
    speed_max: float = 15.0
    min_edges: int = 18
    max_edges: int = 45
    straight_prob: float = 0.7
    n_hubs: int = 8
    start_time: int = 1538352000  # 2018-10-01 08:00 UTC+8
    span_days: float = 30.0

    def __post_init__(self):
        if self.grid_size < 2:
            raise DataError("grid_size must be >= 2")
        if self.n_trajectories < 1:
            raise DataError("n_trajectories must be >= 1")
        if not 0 < self.speed_min <= self.speed_max:
            raise DataError("need 0 < speed_min <= speed_max")
        if not 1 <= self.min_edges <= self.max_edges:
            raise DataError("need 1 <= min_edges <= max_edges")
        if self.cell_spacing_m <= 0:
            raise DataError("cell_spacing_m must be positive")
        if not 0 <= self.n_hubs <= len(_HUBS):
            raise DataError(f"n_hubs must be in [0, {len(_HUBS)}]")
        if self.n_pois + self.n_hubs > self.grid_size**2:
            raise DataError("more POIs than grid nodes")
        if self.n_hubs and self.min_edges > 2 * (self.grid_size - 1):
            raise DataError("min_edges exceeds the grid diameter")

    @classmethod
    def from_kv(cls, values: dict[str, str], strict: bool = True) -> "SynthConfig":
        return from_kv(cls, values, strict=strict)


_CATEGORIES = ("restaurant", "school", "hospital", "park", "mall", "hotel", "office", "station", "bank", "market")
_DIRS = ((1, 0), (0, 1), (-1, 0), (0, -1))
# landmarks present in every region; identical descriptions on purpose
_HUBS = (
    ("Railway Station", "station"),
    ("International Airport", "airport"),
    ("University", "school"),
    ("People's Hospital", "hospital"),
    ("Sports Stadium", "stadium"),
    ("Exhibition Center", "venue"),
    ("Bus Terminal", "station"),
    ("Central Park", "park"),
    ("Shopping Center", "mall"),
    ("Financial Tower", "office"),
    ("Old Town Square", "tourism"),
    ("Science Museum", "museum"),
)


def _edge_key(a, b):
    return (a, b) if a <= b else (b, a)


def generate_synthetic(cfg: SynthConfig, seed: int) -> Dataset:
    """Seeded trips on a square grid road network around the region center.

    Every edge carries a fixed speed drawn once from [speed_min, speed_max],
    so a trajectory's timing is a deterministic function of its path. With
    n_hubs > 0 each trip is a random shortest path from a random origin to
    one of the landmark POIs; with n_hubs = 0 it is an undirected walk with
    heading persistence.
    """
    rng = np.random.default_rng(seed)
    region = RegionConfig(LngLat(cfg.center_lng, cfg.center_lat))
    g = cfg.grid_size
    half = (g - 1) / 2.0
    offs = (np.arange(g) - half) * cfg.cell_spacing_m
    ex, ny = np.meshgrid(offs / region.scale_x, offs / region.scale_y, indexing="ij")
    node_lng, node_lat = norm_to_lnglat(ex, ny, region)

    speeds: dict[tuple, float] = {}
    # draw every edge speed up front so the walk sequence cannot perturb them
    for i in range(g):
        for j in range(g):
            if i + 1 < g:
                speeds[(i, j), (i + 1, j)] = float(rng.uniform(cfg.speed_min, cfg.speed_max))
            if j + 1 < g:
                speeds[(i, j), (i, j + 1)] = float(rng.uniform(cfg.speed_min, cfg.speed_max))

    def node_loc(n):
        return LngLat(float(node_lng[n]), float(node_lat[n]))

    node_ids = [int(v) for v in rng.choice(g * g, size=cfg.n_pois + cfg.n_hubs, replace=False)]
    hubs = [divmod(nid, g) for nid in node_ids[: cfg.n_hubs]]
    pois = []
    for k, nid in enumerate(sorted(node_ids[cfg.n_hubs :])):
        i, j = divmod(nid, g)
        cat = _CATEGORIES[int(rng.integers(len(_CATEGORIES)))]
        pois.append(Poi(f"poi{k:05d}", node_loc((i, j)), f"{cat.title()} {k}", cat, f"{i + 1} Row {j + 1} Avenue"))
    for k, node in enumerate(hubs):
        name, cat = _HUBS[k]
        pois.append(Poi(f"hub{k:02d}", node_loc(node), name, cat, f"{name} Plaza"))

    trajectories = []
    for k in range(cfg.n_trajectories):
        if hubs:
            dest = hubs[int(rng.integers(len(hubs)))]
            reach = max(dest[0], g - 1 - dest[0]) + max(dest[1], g - 1 - dest[1])
            hi = max(min(cfg.max_edges, reach), min(cfg.min_edges, reach))
            n_edges = int(rng.integers(min(cfg.min_edges, reach), hi + 1))
            nodes = _directed_trip(dest, n_edges, g, cfg.straight_prob, rng)
        else:
            n_edges = int(rng.integers(cfg.min_edges, cfg.max_edges + 1))
            nodes = _undirected_walk(n_edges, g, cfg.straight_prob, rng)
        t = float(cfg.start_time + rng.uniform(0, cfg.span_days * 86400.0))
        points = [TrajPoint(node_loc(nodes[0]), t)]
        for a, b in zip(nodes, nodes[1:]):
            t += cfg.cell_spacing_m / speeds[_edge_key(a, b)]
            points.append(TrajPoint(node_loc(b), t))
        trajectories.append(Trajectory(f"traj{k:06d}", tuple(points)))

    return Dataset(region, trajectories, pois, {})


def _undirected_walk(n_edges, g, straight_prob, rng):
    node = (int(rng.integers(g)), int(rng.integers(g)))
    heading = int(rng.integers(4))
    nodes = [node]
    side = (1 - straight_prob) / 2
    for _ in range(n_edges):
        options = []
        for turn, weight in ((0, straight_prob), (1, side), (3, side)):
            h = (heading + turn) % 4
            nxt = (node[0] + _DIRS[h][0], node[1] + _DIRS[h][1])
            if 0 <= nxt[0] < g and 0 <= nxt[1] < g:
                options.append((h, nxt, weight))
        if not options:  # dead end in a corner: turn around
            h = (heading + 2) % 4
            options = [(h, (node[0] + _DIRS[h][0], node[1] + _DIRS[h][1]), 1.0)]
        w = np.array([o[2] for o in options])
        if w.sum() <= 0:
            w = np.ones_like(w)
        heading, node, _ = options[int(rng.choice(len(options), p=w / w.sum()))]
        nodes.append(node)
    return nodes


def _directed_trip(dest, n_edges, g, straight_prob, rng):
    """Random shortest grid path of about n_edges edges ending at dest."""
    di, dj = dest
    origins = [
        (i, j)
        for i in range(g)
        for j in range(g)
        if abs(i - di) + abs(j - dj) == n_edges
    ]
    node = origins[int(rng.integers(len(origins)))]
    nodes = [node]
    heading = -1
    while node != dest:
        moves = []
        if node[0] != di:
            moves.append(0 if di > node[0] else 2)
        if node[1] != dj:
            moves.append(1 if dj > node[1] else 3)
        if heading in moves and len(moves) > 1:
            h = heading if rng.random() < straight_prob else next(m for m in moves if m != heading)
        else:
            h = moves[int(rng.integers(len(moves)))]
        node = (node[0] + _DIRS[h][0], node[1] + _DIRS[h][1])
        heading = h
        nodes.append(node)
    return nodes


def preprocess(ds: Dataset) -> Dataset:
    """Resample, filter by length and assign the chronological split.

    A dataset that already carries a split is taken as preprocessed and is
    not resampled again, which makes the step idempotent.
    """
    resampled = ds.trajectories if ds.split else [three_hop_resample(t) for t in ds.trajectories]
    kept = filter_length(resampled)
    if not kept:
        raise DataError("no trajectories survive preprocessing")
    return split_chronological(Dataset(ds.region, kept, list(ds.pois), {}))


# ------------------------------------------------------------- dataset dirs

TRAJ_FILE = "trajectories.csv"
POI_FILE = "pois.csv"
REGION_FILE = "region.txt"
SPLIT_FILE = "split.csv"
ANNOTATION_FILE = "poi_annotations.csv"


def write_region(path: str | Path, region: RegionConfig) -> None:
    Path(path).write_text(
        dump_kv(
            {
                "center_lng": repr(region.center.lng),
                "center_lat": repr(region.center.lat),
                "scale_x": repr(region.scale_x),
                "scale_y": repr(region.scale_y),
            }
        ),
        encoding="utf-8",
    )


def read_region(path: str | Path) -> RegionConfig:
    try:
        kv = read_kv(path)
        return RegionConfig(
            LngLat(float(kv["center_lng"]), float(kv["center_lat"])),
            float(kv.get("scale_x", 4000.0)),
            float(kv.get("scale_y", 4000.0)),
        )
    except (KeyError, ValueError, ConfigError) as exc:
        raise DataError(f"{path}: bad region file ({exc})") from exc


def write_dataset_dir(path: str | Path, ds: Dataset, poi_index: PoiIndex | None = None) -> None:
    """Write trajectories, POIs and region; split and POI annotations when present."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    write_trajectories_csv(out / TRAJ_FILE, ds.trajectories)
    write_pois_csv(out / POI_FILE, ds.pois)
    write_region(out / REGION_FILE, ds.region)
    if ds.split:
        with open(out / SPLIT_FILE, "w", newline="\n", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("traj_id", "split"))
            for t in ds.trajectories:
                w.writerow((t.id, ds.split[t.id]))
    if poi_index is not None:
        with open(out / ANNOTATION_FILE, "w", newline="\n", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("traj_id", "seq", "poi_id"))
            for t in ds.trajectories:
                ll = t.lnglat_array()
                for seq, i in enumerate(poi_index.nearest_indices(ll[:, 0], ll[:, 1])):
                    w.writerow((t.id, seq, poi_index.pois[int(i)].id))


def load_dataset_dir(path: str | Path) -> Dataset:
    src = Path(path)
    for name in (TRAJ_FILE, POI_FILE, REGION_FILE):
        if not (src / name).is_file():
            raise DataError(f"{src}: missing {name}")
    ds = Dataset(read_region(src / REGION_FILE), load_trajectories_csv(src / TRAJ_FILE), load_pois_csv(src / POI_FILE))
    if (src / SPLIT_FILE).is_file():
        with open(src / SPLIT_FILE, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            _check_header(reader, ("traj_id", "split"), src / SPLIT_FILE)
            ds.split = {row[0]: row[1] for row in reader if row}
        missing = [t.id for t in ds.trajectories if t.id not in ds.split]
        if missing:
            raise DataError(f"{src / SPLIT_FILE}: no split for {missing[:3]}")
    return ds


def check_region_points(trajectories: list[Trajectory]) -> None:
    for t in trajectories:
        for p in t.points:
            if not -80.0 <= p.loc.lat <= 84.0:
                raise GeoError(f"{t.id}: latitude {p.loc.lat} outside UTM domain")
