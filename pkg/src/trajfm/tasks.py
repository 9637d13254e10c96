"""Task adapters built from the masking primitives: ETA, OD ETA and trajectory prediction."""
from __future__ import annotations

import enum
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data import PoiIndex, TrajPoint, temporal_array
from .embedding import KIND_VALUE, PoiVectorProvider, SpecialToken
from .geo import LngLat, NormXY, RegionConfig, haversine_np, lnglat_to_norm, norm_to_lnglat
from .pretrain import TrajFeatures
from .strformer import CONTEXT, GENERATION, PointPrediction, STRFormer, tensorize

M, S, V = int(SpecialToken.MASK), int(SpecialToken.START), KIND_VALUE
FUTURE_POINTS = 5
TASKS = ("traj-eta", "od-eta", "traj-pred")


class StopReason(enum.Enum):
    END_FLAG = "end_flag"
    MAX_LEN = "max_len"


@dataclass(frozen=True)
class GeneratedPoint:
    prediction: PointPrediction
    loc: LngLat
    poi_id: str


@dataclass
class GenerationTrace:
    points: list[GeneratedPoint]
    stop_reason: StopReason

    def __len__(self):
        return len(self.points)


def _point(kinds, xy=(0.0, 0.0), tf=(0.0, 0.0, 0.0, 0.0), poi=None, dim=0, segment=CONTEXT):
    return {
        "kinds": np.array([kinds], dtype=np.int64),
        "xy": np.array([xy], dtype=np.float64),
        "tf": np.array([tf], dtype=np.float64),
        "poi": np.zeros((1, dim)) if poi is None else np.asarray(poi, dtype=np.float64)[None],
        "segment": np.array([segment], dtype=np.int64),
    }


def _concat(parts):
    return {k: np.concatenate([p[k] for p in parts]) for k in parts[0]}


def context_arrays(f: TrajFeatures, rows, kinds) -> dict[str, np.ndarray]:
    rows = list(rows)
    return {
        "kinds": np.broadcast_to(np.asarray(kinds, dtype=np.int64), (len(rows), 3)).copy(),
        "xy": f.xy[rows].copy(),
        "tf": f.tf[rows].copy(),
        "poi": f.poi[rows].copy(),
        "segment": np.full(len(rows), CONTEXT, dtype=np.int64),
    }


@torch.no_grad()
def autoregressive_recover_batch(
    contexts: list[dict[str, np.ndarray]],
    model: STRFormer,
    region: RegionConfig,
    poi_index: PoiIndex,
    provider: PoiVectorProvider,
    max_gen_len: int | None = None,
) -> list[GenerationTrace]:
    """Append a start point to each context and decode until both end heads fire or the cap is hit."""
    cap = model.cfg.max_gen_len if max_gen_len is None else max_gen_len
    dim = provider.dim
    seqs = [_concat([c, _point((S, S, S), dim=dim, segment=GENERATION)]) for c in contexts]
    traces = [GenerationTrace([], StopReason.MAX_LEN) for _ in contexts]
    active = list(range(len(contexts)))
    for _ in range(cap):
        if not active:
            break
        batch = tensorize([seqs[i] for i in active], dtype=model.dtype)
        out = model(batch)
        last = torch.tensor([len(seqs[i]["segment"]) - 1 for i in active])
        rows = torch.arange(len(active))
        xy = out["xy"][rows, last].double().numpy()
        t_hat = out["t"][rows, last].double().numpy()
        r_s = out["r_s"][rows, last].double().numpy()
        r_t = out["r_t"][rows, last].double().numpy()
        lng, lat = norm_to_lnglat(xy[:, 0], xy[:, 1], region)
        lat = np.clip(lat, -90.0, 90.0)
        poi_rows = poi_index.nearest_indices(lng, lat)
        still = []
        for k, i in enumerate(active):
            pred = PointPrediction(NormXY(*xy[k].tolist()), tuple(t_hat[k].tolist()), float(r_s[k]), float(r_t[k]))
            if pred.is_end:
                traces[i].stop_reason = StopReason.END_FLAG
                continue
            poi = poi_index.pois[int(poi_rows[k])]
            traces[i].points.append(GeneratedPoint(pred, LngLat(float(lng[k]), float(lat[k])), poi.id))
            seqs[i] = _concat(
                [seqs[i], _point((V, V, V), xy[k], t_hat[k], provider.vector(poi.desc), dim, GENERATION)]
            )
            still.append(i)
        active = still
    return traces


def autoregressive_recover(context, model, region, poi_index, provider, max_gen_len=None) -> GenerationTrace:
    return autoregressive_recover_batch([context], model, region, poi_index, provider, max_gen_len)[0]


# ------------------------------------------------------------------------ ETA


def trajectory_eta_input(f: TrajFeatures) -> dict[str, np.ndarray]:
    if len(f) < 2:
        raise ValueError("travel-time estimation needs n >= 2")
    seq = context_arrays(f, range(len(f)), (V, M, V))
    seq["kinds"][0] = (V, V, V)
    return seq


@torch.no_grad()
def _read_dt_seconds(model: STRFormer, seqs, positions) -> np.ndarray:
    out = model(tensorize(seqs, dtype=model.dtype))
    rows = torch.arange(len(seqs))
    dt_min = out["t"][rows, torch.as_tensor(positions), 3].double().numpy()
    return dt_min * 60.0


def estimate_trajectory_eta_batch(fs: list[TrajFeatures], model: STRFormer) -> np.ndarray:
    seqs = [trajectory_eta_input(f) for f in fs]
    return _read_dt_seconds(model, seqs, [len(f) - 1 for f in fs])


def estimate_trajectory_eta(f: TrajFeatures, model: STRFormer) -> float:
    return float(estimate_trajectory_eta_batch([f], model)[0])


def od_eta_input(
    origin: TrajPoint, dest_loc: LngLat, region: RegionConfig, poi_index: PoiIndex, provider: PoiVectorProvider
) -> dict[str, np.ndarray]:
    x, y = lnglat_to_norm([origin.loc.lng, dest_loc.lng], [origin.loc.lat, dest_loc.lat], region)
    rows = poi_index.nearest_indices([origin.loc.lng, dest_loc.lng], [origin.loc.lat, dest_loc.lat])
    vecs = [provider.vector(poi_index.pois[int(r)].desc) for r in rows]
    tf0 = temporal_array([origin.t])[0]
    dim = provider.dim
    return _concat(
        [
            _point((V, V, V), (x[0], y[0]), tf0, vecs[0], dim),
            _point((M, M, M), dim=dim),
            _point((V, M, V), (x[1], y[1]), poi=vecs[1], dim=dim),
        ]
    )


def estimate_od_eta_batch(pairs, model, region, poi_index, provider) -> np.ndarray:
    seqs = [od_eta_input(o, d, region, poi_index, provider) for o, d in pairs]
    return _read_dt_seconds(model, seqs, [2] * len(seqs))


def estimate_od_eta(origin: TrajPoint, dest_loc: LngLat, model, region, poi_index, provider) -> float:
    return float(estimate_od_eta_batch([(origin, dest_loc)], model, region, poi_index, provider)[0])


# ----------------------------------------------------------------- prediction


def prediction_context(f: TrajFeatures) -> dict[str, np.ndarray]:
    n = len(f)
    if n < FUTURE_POINTS + 1:
        raise ValueError(f"trajectory prediction needs n >= {FUTURE_POINTS + 1}")
    hist = context_arrays(f, range(n - FUTURE_POINTS), (V, V, V))
    return _concat([hist, _point((M, M, M), dim=f.poi.shape[1])])


def destination(trace: GenerationTrace, f: TrajFeatures) -> LngLat:
    if trace.points:
        return trace.points[-1].loc
    lng, lat = f.lnglat[len(f) - FUTURE_POINTS - 1]
    return LngLat(float(lng), float(lat))


def predict_future_batch(fs, model, region, poi_index, provider):
    traces = autoregressive_recover_batch([prediction_context(f) for f in fs], model, region, poi_index, provider)
    return traces, [destination(t, f) for t, f in zip(traces, fs)]


def predict_future(f: TrajFeatures, model, region, poi_index, provider) -> GenerationTrace:
    return autoregressive_recover(prediction_context(f), model, region, poi_index, provider)


def last_point_baseline_errors(fs: list[TrajFeatures]) -> np.ndarray:
    """Distance in meters from the last observed point p_{n-5} to the true destination."""
    errs = []
    for f in fs:
        n = len(f)
        a, b = f.lnglat[n - FUTURE_POINTS - 1], f.lnglat[n - 1]
        errs.append(float(haversine_np(a[0], a[1], b[0], b[1])))
    return np.array(errs)


# ----------------------------------------------------------------- evaluation


@dataclass
class TaskResult:
    task: str
    predictions: list[dict]
    mae: float
    rmse: float
    mape: float | None = None
    unit: str = "s"
    runtime_seconds: float = 0.0
    extra: dict = field(default_factory=dict)

    @property
    def n_samples(self) -> int:
        return len(self.predictions)

    def report(self, checkpoint_path: str | None = None) -> dict:
        out = {
            "task": self.task,
            "n_samples": self.n_samples,
            "mae": self.mae,
            "rmse": self.rmse,
            "runtime_seconds": self.runtime_seconds,
            "checkpoint_path": checkpoint_path,
        }
        if self.mape is not None:
            out["mape"] = self.mape
        out.update(self.extra)
        return out

    def write(self, path: str | Path, checkpoint_path: str | None = None) -> None:
        Path(path).write_text(json.dumps(self.report(checkpoint_path), indent=2) + "\n", encoding="utf-8")


REPORT_SCHEMA = {
    "type": "object",
    "required": ["task", "n_samples", "mae", "rmse", "runtime_seconds", "checkpoint_path"],
    "properties": {
        "task": {"enum": list(TASKS)},
        "n_samples": {"type": "integer", "minimum": 1},
        "mae": {"type": "number", "minimum": 0},
        "rmse": {"type": "number", "minimum": 0},
        "mape": {"type": "number", "minimum": 0},
        "runtime_seconds": {"type": "number", "minimum": 0},
        "checkpoint_path": {"type": ["string", "null"]},
    },
}


def regression_metrics(pred, truth, with_mape: bool):
    pred, truth = np.asarray(pred, dtype=np.float64), np.asarray(truth, dtype=np.float64)
    err = pred - truth
    mae = float(np.mean(np.abs(err)))
    rmse = float(math.sqrt(np.mean(err**2)))
    mape = None
    if with_mape:
        ok = truth >= 1.0
        mape = float(np.mean(np.abs(err[ok]) / truth[ok]) * 100) if ok.any() else float("nan")
    return mae, rmse, mape


def distance_metrics(errors_m):
    e = np.asarray(errors_m, dtype=np.float64)
    return float(np.mean(e)), float(math.sqrt(np.mean(e**2)))


def evaluate(
    task: str,
    fs: list[TrajFeatures],
    model: STRFormer,
    region: RegionConfig,
    poi_index: PoiIndex,
    provider: PoiVectorProvider,
    batch_size: int = 64,
) -> TaskResult:
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")
    if task == "traj-pred":
        fs = [f for f in fs if len(f) > FUTURE_POINTS]
    if not fs:
        raise ValueError("empty evaluation split")
    t0 = time.perf_counter()
    model.eval()
    records = []
    if task in ("traj-eta", "od-eta"):
        preds = []
        for start in range(0, len(fs), batch_size):
            chunk = fs[start : start + batch_size]
            if task == "traj-eta":
                preds.extend(estimate_trajectory_eta_batch(chunk, model))
            else:
                pairs = [
                    (TrajPoint(LngLat(*map(float, f.lnglat[0])), float(f.times[0])), LngLat(*map(float, f.lnglat[-1])))
                    for f in chunk
                ]
                preds.extend(estimate_od_eta_batch(pairs, model, region, poi_index, provider))
        truth = [float(f.times[-1] - f.times[0]) for f in fs]
        for f, p, t in zip(fs, preds, truth):
            records.append({"id": f.id, "pred_s": float(p), "true_s": t})
        mae, rmse, mape = regression_metrics(preds, truth, with_mape=True)
        result = TaskResult(task, records, mae, rmse, mape, "s")
    else:
        errs = []
        for start in range(0, len(fs), batch_size):
            chunk = fs[start : start + batch_size]
            traces, dests = predict_future_batch(chunk, model, region, poi_index, provider)
            for f, tr, dst in zip(chunk, traces, dests):
                true_lng, true_lat = f.lnglat[-1]
                err = float(haversine_np(dst.lng, dst.lat, true_lng, true_lat))
                errs.append(err)
                records.append(
                    {
                        "id": f.id,
                        "pred_lng": dst.lng,
                        "pred_lat": dst.lat,
                        "error_m": err,
                        "generated": len(tr),
                        "stop": tr.stop_reason.value,
                    }
                )
        mae, rmse = distance_metrics(errs)
        base_mae, base_rmse = distance_metrics(last_point_baseline_errors(fs))
        result = TaskResult(task, records, mae, rmse, None, "m", extra={"baseline_mae": base_mae, "baseline_rmse": base_rmse})
    result.runtime_seconds = time.perf_counter() - t0
    return result
