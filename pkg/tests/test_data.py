import datetime as dt
import filecmp

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from trajfm.data import (
    DataError,
    Dataset,
    Poi,
    PoiIndex,
    SynthConfig,
    TrajPoint,
    Trajectory,
    expand_temporal,
    filter_length,
    generate_synthetic,
    load_pois_csv,
    load_trajectories_csv,
    nearest_poi,
    nearest_poi_bruteforce,
    preprocess,
    split_chronological,
    temporal_array,
    three_hop_resample,
    write_pois_csv,
    write_trajectories_csv,
)
from trajfm.geo import LngLat, RegionConfig


def make_traj(n, tid="t", t0=1_600_000_000, step=10.0):
    return Trajectory(tid, tuple(TrajPoint(LngLat(104.0 + 0.001 * i, 30.6), t0 + step * i) for i in range(n)))


# --------------------------------------------------------------------- csv


def test_load_trajectories_groups_by_id(tmp_path):
    path = tmp_path / "t.csv"
    rows = ["traj_id,seq,lng,lat,timestamp"]
    rows += [f"a,{i},104.0,30.{i},{100 + i}" for i in (2, 0, 1)]
    rows += [f"b,{i},104.1,30.{i},{200 + i}" for i in range(4)]
    path.write_text("\n".join(rows) + "\n")
    trajs = {t.id: t for t in load_trajectories_csv(path)}
    assert sorted(len(t) for t in trajs.values()) == [3, 4]
    assert [p.t for p in trajs["a"].points] == [100, 101, 102]


def test_load_trajectories_empty(tmp_path):
    path = tmp_path / "t.csv"
    path.write_text("")
    assert load_trajectories_csv(path) == []
    path.write_text("traj_id,seq,lng,lat,timestamp\n")
    assert load_trajectories_csv(path) == []


def test_load_trajectories_bad_latitude_names_row(tmp_path):
    path = tmp_path / "t.csv"
    path.write_text("traj_id,seq,lng,lat,timestamp\na,0,104.0,30.0,1\na,1,104.0,95.0,2\n")
    with pytest.raises(DataError, match=":3"):
        load_trajectories_csv(path)


def test_load_trajectories_errors(tmp_path):
    path = tmp_path / "t.csv"
    path.write_text("traj_id,seq,lng,timestamp\n")
    with pytest.raises(DataError, match="missing columns"):
        load_trajectories_csv(path)
    path.write_text("traj_id,seq,lng,lat,timestamp\na,0,104.0,30.0,5\na,1,104.0,30.0,4\n")
    with pytest.raises(DataError, match="decrease"):
        load_trajectories_csv(path)


def test_poi_desc_concatenation(tmp_path):
    path = tmp_path / "p.csv"
    path.write_text("poi_id,lng,lat,name,category,address\np1,104.0,30.0,Park A,park,1 Rd\n")
    (poi,) = load_pois_csv(path)
    assert poi.desc == "Park A; park; 1 Rd"


def test_poi_csv_empty_and_duplicates(tmp_path):
    path = tmp_path / "p.csv"
    path.write_text("")
    assert load_pois_csv(path) == []
    path.write_text("poi_id,lng,lat,name,category,address\np1,104,30,a,b,c\np1,104,30,a,b,c\n")
    with pytest.raises(DataError, match="duplicate"):
        load_pois_csv(path)


def test_csv_round_trip(tmp_path):
    ds = generate_synthetic(SynthConfig(n_trajectories=5, n_pois=10, grid_size=10), 0)
    write_trajectories_csv(tmp_path / "t.csv", ds.trajectories)
    write_pois_csv(tmp_path / "p.csv", ds.pois)
    back = load_trajectories_csv(tmp_path / "t.csv")
    assert [t.id for t in back] == [t.id for t in ds.trajectories]
    assert all(len(a) == len(b) for a, b in zip(back, ds.trajectories))
    assert load_pois_csv(tmp_path / "p.csv") == ds.pois


# ----------------------------------------------------------- preprocessing


@pytest.mark.parametrize(
    "n, kept",
    [(10, [0, 3, 6, 9]), (8, [0, 3, 6, 7]), (1, [0]), (2, [0, 1]), (4, [0, 3])],
)
def test_three_hop_resample(n, kept):
    t = make_traj(n)
    assert three_hop_resample(t).points == tuple(t.points[i] for i in kept)


@given(st.integers(1, 400))
def test_resample_keeps_endpoints(n):
    t = make_traj(n)
    r = three_hop_resample(t)
    assert r.points[0] == t.points[0] and r.points[-1] == t.points[-1]
    rr = three_hop_resample(r)
    assert rr.points[0] == t.points[0] and rr.points[-1] == t.points[-1]


def test_filter_length_bounds():
    ts = [make_traj(n, str(n)) for n in (4, 5, 120, 121)]
    assert [len(t) for t in filter_length(ts)] == [5, 120]
    assert filter_length([]) == []
    ok = [make_traj(n, str(n)) for n in (7, 5, 9)]
    assert filter_length(ok) == ok


def civil(ts):
    d = dt.datetime.fromtimestamp(ts, tz=dt.timezone(dt.timedelta(hours=8)))
    return d.weekday(), d.hour, d.minute


def test_expand_temporal_basics():
    t = make_traj(3, step=45.0)
    assert expand_temporal(t, 0).dt_min == 0.0
    assert expand_temporal(t, 2).dt_min == pytest.approx(1.5)
    monday = int(dt.datetime(2018, 10, 1, tzinfo=dt.timezone(dt.timedelta(hours=8))).timestamp())
    tf = expand_temporal(Trajectory("m", (TrajPoint(LngLat(0, 0), monday),)), 0)
    assert (tf.dow, tf.hod, tf.moh) == (0, 0, 0)


@given(st.lists(st.integers(0, 2_000_000_000), min_size=1, max_size=20))
def test_temporal_matches_civil_time_oracle(stamps):
    stamps = sorted(stamps)
    arr = temporal_array(stamps)
    for row, ts in zip(arr, stamps):
        assert tuple(int(v) for v in row[:3]) == civil(ts)
    assert arr[0, 3] == 0 and (arr[:, 3] >= 0).all()


# ---------------------------------------------------------------- POI index


def poi(pid, lng, lat):
    return Poi(pid, LngLat(lng, lat), pid, "cat", "addr")


def test_nearest_poi_exact_hit_and_tie():
    pois = [poi("b", 104.0 + 2**-7, 30.0), poi("a", 104.0 - 2**-7, 30.0), poi("c", 104.5, 30.5)]
    idx = PoiIndex(pois)
    assert nearest_poi(idx, LngLat(104.5, 30.5)).id == "c"
    assert nearest_poi(idx, LngLat(104.0, 30.0)).id == "a"


def test_nearest_poi_many_ties():
    pois = [poi(f"p{k}", 104.0 + 0.001 * np.cos(a), 30.0 + 0.001 * np.sin(a)) for k, a in enumerate(np.zeros(6))]
    idx = PoiIndex(pois)
    assert nearest_poi(idx, LngLat(104.0, 30.0)).id == "p0"


def test_nearest_poi_empty_index():
    with pytest.raises(DataError):
        nearest_poi(PoiIndex([]), LngLat(0, 0))


def test_nearest_poi_matches_linear_scan():
    rng = np.random.default_rng(1)
    pois = [poi(f"p{k:04d}", lng, lat) for k, (lng, lat) in enumerate(zip(rng.uniform(103.9, 104.2, 400), rng.uniform(30.5, 30.8, 400)))]
    idx = PoiIndex(pois)
    qs = np.stack([rng.uniform(103.8, 104.3, 1000), rng.uniform(30.4, 30.9, 1000)], axis=1)
    got = idx.nearest_indices(qs[:, 0], qs[:, 1])
    for (lng, lat), g in zip(qs, got):
        assert idx.pois[g].id == nearest_poi_bruteforce(pois, LngLat(lng, lat)).id


# --------------------------------------------------------------- synthetic


def test_synthetic_is_deterministic(tmp_path):
    cfg = SynthConfig(n_trajectories=20, n_pois=30)
    for k in (1, 2):
        ds = generate_synthetic(cfg, 42)
        write_trajectories_csv(tmp_path / f"t{k}.csv", ds.trajectories)
        write_pois_csv(tmp_path / f"p{k}.csv", ds.pois)
    assert filecmp.cmp(tmp_path / "t1.csv", tmp_path / "t2.csv", shallow=False)
    assert filecmp.cmp(tmp_path / "p1.csv", tmp_path / "p2.csv", shallow=False)
    assert generate_synthetic(cfg, 42) == generate_synthetic(cfg, 42)
    assert generate_synthetic(cfg, 43).trajectories != generate_synthetic(cfg, 42).trajectories


def test_synthetic_time_steps_follow_speed_bounds():
    cfg = SynthConfig(n_trajectories=50, cell_spacing_m=200.0, speed_min=5.0, speed_max=15.0)
    ds = generate_synthetic(cfg, 7)
    dts = np.concatenate([np.diff(t.time_array()) for t in ds.trajectories])
    assert dts.min() >= 200 / 15 - 1e-9
    assert dts.max() <= 200 / 5 + 1e-9


def test_synthetic_default_survives_preprocessing():
    ds = generate_synthetic(SynthConfig(), 0)
    resampled = [three_hop_resample(t) for t in ds.trajectories]
    assert len(filter_length(resampled)) == len(ds.trajectories)
    assert all(len(t) >= 6 for t in resampled)
    arr = np.concatenate([temporal_array(t.time_array()) for t in resampled])
    assert arr[:, 0].min() >= 0 and arr[:, 0].max() <= 6
    assert arr[:, 1].max() <= 23 and arr[:, 2].max() <= 59 and arr[:, 3].min() >= 0


def test_synthetic_points_lie_in_region():
    ds = generate_synthetic(SynthConfig(n_trajectories=10), 0)
    ll = np.concatenate([t.lnglat_array() for t in ds.trajectories])
    assert np.abs(ll[:, 0] - 104.0665).max() < 0.1
    assert np.abs(ll[:, 1] - 30.5728).max() < 0.1


def test_synthetic_config_validation():
    with pytest.raises(DataError):
        SynthConfig(grid_size=1)
    with pytest.raises(DataError):
        SynthConfig(n_trajectories=0)


# ------------------------------------------------------------------- split


def dataset_of(n, same_departure=False):
    trajs = [make_traj(5, f"id{k:03d}", t0=1_600_000_000 + (0 if same_departure else 1000 * ((k * 37) % n))) for k in range(n)]
    return Dataset(RegionConfig(LngLat(104.0, 30.6)), trajs, [])


def test_split_ratios_10():
    ds = split_chronological(dataset_of(10))
    assert [len(ds.subset(s)) for s in ("train", "val", "test")] == [8, 1, 1]


def test_split_is_chronological_100():
    ds = split_chronological(dataset_of(100))
    assert [len(ds.subset(s)) for s in ("train", "val", "test")] == [80, 10, 10]
    assert max(t.departure for t in ds.subset("train")) <= min(t.departure for t in ds.subset("val"))
    assert max(t.departure for t in ds.subset("val")) <= min(t.departure for t in ds.subset("test"))


def test_split_ties_by_id():
    ds = split_chronological(dataset_of(10, same_departure=True))
    assert [t.id for t in ds.subset("test")] == ["id009"]
    assert [t.id for t in ds.subset("val")] == ["id008"]


def test_split_empty_is_error():
    with pytest.raises(DataError):
        split_chronological(Dataset(RegionConfig(LngLat(0, 0)), [], []))


def test_preprocess_pipeline():
    ds = preprocess(generate_synthetic(SynthConfig(n_trajectories=40), 3))
    assert all(5 <= len(t) <= 120 for t in ds.trajectories)
    assert len(ds.subset("train")) == 32
