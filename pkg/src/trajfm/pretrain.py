"""Masking-and-recovery pre-training: sample construction, loss, training loop, checkpoints."""
from __future__ import annotations

import enum
import io
import json
import logging
import math
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import numerics as nx
from .config import from_kv
from .data import Dataset, PoiIndex, Trajectory, temporal_array
from .embedding import KIND_VALUE, PoiVectorProvider, SpecialToken
from .geo import RegionConfig, lnglat_to_norm
from .strformer import CONTEXT, GENERATION, ModelConfig, STRFormer, tensorize

log = logging.getLogger(__name__)

R_CLAMP = 1e-7
TEMPORAL_EPS = 1e-12

M, S, E, V = int(SpecialToken.MASK), int(SpecialToken.START), int(SpecialToken.END), KIND_VALUE


class Modality(enum.IntEnum):
    SPATIAL = 0
    TEMPORAL = 1


@dataclass(frozen=True)
class TrajFeatures:
    """Model-ready modalities of one trajectory in its region frame."""

    id: str
    xy: np.ndarray  # (n, 2) normalized coordinates
    tf: np.ndarray  # (n, 4) dow, hod, moh, dt_min
    poi: np.ndarray  # (n, D) POI text vectors
    poi_ids: tuple[str, ...]
    lnglat: np.ndarray
    times: np.ndarray

    def __len__(self):
        return len(self.xy)


def featurize(t: Trajectory, region: RegionConfig, poi_index: PoiIndex, provider: PoiVectorProvider) -> TrajFeatures:
    ll = t.lnglat_array()
    times = t.time_array()
    x, y = lnglat_to_norm(ll[:, 0], ll[:, 1], region)
    idx = poi_index.nearest_indices(ll[:, 0], ll[:, 1])
    pois = [poi_index.pois[int(i)] for i in idx]
    vecs = np.stack([provider.vector(p.desc) for p in pois])
    return TrajFeatures(t.id, np.stack([x, y], axis=-1), temporal_array(times), vecs, tuple(p.id for p in pois), ll, times)


def featurize_all(ts: list[Trajectory], region, poi_index, provider) -> list[TrajFeatures]:
    return [featurize(t, region, poi_index, provider) for t in ts]


# --------------------------------------------------------------------- masking


@dataclass(frozen=True)
class MaskPlan:
    """Sub-trajectory span (1-based, inclusive) plus a modality choice per remaining point.

    ``choice[i]`` is -1 for points inside [s, e].
    """

    n: int
    s: int
    e: int
    choice: tuple[int, ...]

    def __post_init__(self):
        if not 1 <= self.s < self.e <= self.n:
            raise ValueError(f"invalid span ({self.s}, {self.e}) for n = {self.n}")
        if len(self.choice) != self.n:
            raise ValueError("choice length must equal n")
        for i, c in enumerate(self.choice, start=1):
            inside = self.s <= i <= self.e
            if inside != (c == -1):
                raise ValueError(f"point {i}: choice {c} inconsistent with span")


def sample_mask_plan(n: int, rng: np.random.Generator) -> MaskPlan:
    if n < 2:
        raise ValueError("sub-trajectory masking needs n >= 2")
    while True:
        s, e = (int(v) for v in rng.integers(1, n + 1, size=2))
        if s < e:
            break
    outside = n - (e - s + 1)
    draws = iter(rng.integers(0, 2, size=outside).tolist())
    choice = tuple(-1 if s <= i <= e else next(draws) for i in range(1, n + 1))
    return MaskPlan(n, s, e, choice)


def _empty(n, dim):
    return {
        "kinds": np.full((n, 3), V, dtype=np.int64),
        "xy": np.zeros((n, 2)),
        "tf": np.zeros((n, 4)),
        "poi": np.zeros((n, dim)),
        "segment": np.full(n, CONTEXT, dtype=np.int64),
        "tgt_xy": np.zeros((n, 2)),
        "tgt_t": np.zeros((n, 4)),
        "sup_s": np.zeros(n, dtype=bool),
        "sup_t": np.zeros(n, dtype=bool),
        "sup_r": np.zeros(n, dtype=bool),
        "r": np.zeros(n),
    }


def build_training_sequence(f: TrajFeatures, plan: MaskPlan) -> dict[str, np.ndarray]:
    """Context with modality masks and one mask point, then a teacher-forced generation segment.

    Layout: ⟨p_1..p_{s-1}, p_[m], p_{e+1}..p_n | p_[s], p_s, .., p_e⟩. The
    generation position holding p_[s] predicts p_s, the one holding p_k
    predicts p_{k+1}, and the one holding p_e predicts the end point (r = 1).
    """
    n = len(f)
    if plan.n != n:
        raise ValueError("plan length does not match trajectory")
    s, e = plan.s - 1, plan.e - 1  # 0-based inclusive
    ctx = list(range(0, s)) + [None] + list(range(e + 1, n))
    gen = [None] + list(range(s, e + 1))
    seq = _empty(len(ctx) + len(gen), f.poi.shape[1])

    for pos, i in enumerate(ctx):
        if i is None:
            seq["kinds"][pos] = M
            continue
        seq["xy"][pos], seq["tf"][pos], seq["poi"][pos] = f.xy[i], f.tf[i], f.poi[i]
        seq["sup_r"][pos] = True
        if plan.choice[i] == Modality.SPATIAL:
            seq["kinds"][pos] = (M, V, M)
            seq["tgt_xy"][pos] = f.xy[i]
            seq["sup_s"][pos] = True
        else:
            seq["kinds"][pos] = (V, M, V)
            seq["tgt_t"][pos] = f.tf[i]
            seq["sup_t"][pos] = True

    off = len(ctx)
    for k, i in enumerate(gen):
        pos = off + k
        seq["segment"][pos] = GENERATION
        if i is None:
            seq["kinds"][pos] = S
        else:
            seq["xy"][pos], seq["tf"][pos], seq["poi"][pos] = f.xy[i], f.tf[i], f.poi[i]
        seq["sup_r"][pos] = True
        target = s + k
        if target <= e:
            seq["tgt_xy"][pos], seq["tgt_t"][pos] = f.xy[target], f.tf[target]
            seq["sup_s"][pos] = seq["sup_t"][pos] = True
        else:
            seq["r"][pos] = 1.0
    return seq


def collate(seqs: list[dict[str, np.ndarray]], dtype=torch.float32):
    batch = tensorize(seqs, dtype=dtype)
    B, T = batch.segment.shape
    targets = {}
    for key, shape, dt in (
        ("tgt_xy", (2,), dtype),
        ("tgt_t", (4,), dtype),
        ("sup_s", (), torch.bool),
        ("sup_t", (), torch.bool),
        ("sup_r", (), torch.bool),
        ("r", (), dtype),
    ):
        arr = np.zeros((B, T) + shape, dtype=bool if dt is torch.bool else np.float64)
        for b, s in enumerate(seqs):
            arr[b, : len(s["segment"])] = s[key]
        targets[key] = torch.as_tensor(arr, dtype=dt)
    return batch, targets


# ------------------------------------------------------------------------ loss


def compute_loss(pred: dict[str, torch.Tensor], tgt: dict[str, torch.Tensor]) -> torch.Tensor:
    """Unweighted sum of spatial squared error, temporal Euclidean error and end-flag cross-entropy."""
    l_s = ((pred["xy"] - tgt["tgt_xy"]) ** 2).sum(-1)
    l_t = torch.sqrt(((pred["t"] - tgt["tgt_t"]) ** 2).sum(-1) + TEMPORAL_EPS)
    r = tgt["r"]
    l_e = 0.0
    for head in ("r_s", "r_t"):
        r_hat = pred[head].clamp(R_CLAMP, 1 - R_CLAMP)
        l_e = l_e - (r * torch.log(r_hat) + (1 - r) * torch.log(1 - r_hat))
    zero = torch.zeros((), dtype=l_s.dtype)
    return (
        torch.where(tgt["sup_s"], l_s, zero).sum()
        + torch.where(tgt["sup_t"], l_t, zero).sum()
        + torch.where(tgt["sup_r"], l_e, zero).sum()
    )


def sequence_loss(model: STRFormer, seqs: list[dict[str, np.ndarray]]) -> torch.Tensor:
    batch, tgt = collate(seqs, dtype=model.dtype)
    return compute_loss(model(batch), tgt)


# ---------------------------------------------------------------- training loop


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 16
    lr: float = 1e-3
    seed: int = 0

    @classmethod
    def from_kv(cls, values: dict[str, str], strict: bool = True) -> "TrainConfig":
        return from_kv(cls, values, strict=strict)


@dataclass
class TrainResult:
    model: STRFormer
    history: list[float]
    state: nx.AdamState
    seconds: float = 0.0


def pretrain(
    train: list[TrajFeatures],
    cfg: ModelConfig,
    hyper: TrainConfig,
    *,
    dtype=torch.float32,
    model: STRFormer | None = None,
    progress=None,
) -> TrainResult:
    if not train:
        raise ValueError("empty training split")
    t0 = time.perf_counter()
    rng = np.random.default_rng(hyper.seed)
    if model is None:
        model = STRFormer.create(cfg, seed=hyper.seed, dtype=dtype)
    params = nx.param_store(model)
    state = nx.AdamState(lr=hyper.lr)
    history = []
    usable = [f for f in train if len(f) >= 2]
    for epoch in range(hyper.epochs):
        order = rng.permutation(len(usable))
        total = 0.0
        for start in range(0, len(order), hyper.batch_size):
            seqs = []
            for j in order[start : start + hyper.batch_size]:
                f = usable[int(j)]
                seqs.append(build_training_sequence(f, sample_mask_plan(len(f), rng)))
            loss = sequence_loss(model, seqs)
            if not torch.isfinite(loss):
                raise nx.NumericalError(f"non-finite loss {loss.item()} at epoch {epoch + 1}, step {state.step + 1}")
            grads = nx.backward(loss, params)
            nx.adam_step(params, grads, state)
            total += loss.item()
        history.append(total / len(usable))
        if progress is not None:
            progress(epoch + 1, history[-1])
        log.info("epoch %d loss %.4f", epoch + 1, history[-1])
    return TrainResult(model, history, state, time.perf_counter() - t0)


# ------------------------------------------------------------------ checkpoints

MAGIC = b"TFM1"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: dict
    seed: int
    step: int
    params: dict[str, np.ndarray]
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: STRFormer, seed: int, step: int, extra: dict | None = None) -> "Checkpoint":
        params = {n: p.detach().cpu().numpy().astype(np.float32) for n, p in model.named_parameters()}
        return cls(model.cfg.to_dict(), seed, step, params, dict(extra or {}))

    def model_config(self) -> ModelConfig:
        return ModelConfig(**self.config)

    def build_model(self, dtype=torch.float32) -> STRFormer:
        model = STRFormer.create(self.model_config(), seed=self.seed, dtype=dtype)
        own = dict(model.named_parameters())
        if set(own) != set(self.params):
            raise CheckpointError(f"parameter names differ from config: {sorted(set(own) ^ set(self.params))[:5]}")
        with torch.no_grad():
            for name, p in own.items():
                arr = self.params[name]
                if tuple(arr.shape) != tuple(p.shape):
                    raise CheckpointError(f"{name}: shape {arr.shape} != expected {tuple(p.shape)}")
                p.copy_(torch.from_numpy(np.array(arr, dtype=np.float32)).to(dtype))
        return model


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    entries, offset = [], 0
    for name, arr in ckpt.params.items():
        entries.append({"name": name, "shape": list(arr.shape), "byte_offset": offset})
        offset += int(np.prod(arr.shape, dtype=np.int64)) * 4
    header = json.dumps(
        {"config": ckpt.config, "seed": ckpt.seed, "step": ckpt.step, "params": entries, "extra": ckpt.extra},
        sort_keys=True,
    ).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(bytes([VERSION]))
    buf.write(struct.pack("<I", len(header)))
    buf.write(header)
    for arr in ckpt.params.values():
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path: str | Path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < 9 or raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    if raw[4] != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {raw[4]}")
    (hlen,) = struct.unpack("<I", raw[5:9])
    if len(raw) < 9 + hlen:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[9 : 9 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    payload = raw[9 + hlen :]
    params = {}
    expected = 0
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        start = entry["byte_offset"]
        if start + 4 * count > len(payload):
            raise CheckpointError(f"{path}: truncated payload at {entry['name']}")
        params[entry["name"]] = np.frombuffer(payload, dtype="<f4", count=count, offset=start).reshape(shape).copy()
        expected = max(expected, start + 4 * count)
    if expected != len(payload):
        raise CheckpointError(f"{path}: payload size {len(payload)} != expected {expected}")
    ckpt = Checkpoint(header["config"], header["seed"], header["step"], params, header.get("extra", {}))
    ckpt.build_model()  # shape validation against the stored config
    return ckpt


# ------------------------------------------------------------- gradient check


def gradcheck_features(n_points: int = 5, seed: int = 0, poi_dim: int = 8) -> TrajFeatures:
    """A short synthetic trajectory with exactly ``n_points`` points after resampling."""
    from .data import SynthConfig, generate_synthetic, three_hop_resample
    from .embedding import SyntheticPoiProvider

    edges = 3 * (n_points - 1)
    cfg = SynthConfig(n_trajectories=1, n_pois=20, grid_size=max(10, edges + 2), min_edges=edges, max_edges=edges)
    ds = generate_synthetic(cfg, seed)
    t = three_hop_resample(ds.trajectories[0])
    return featurize(t, ds.region, PoiIndex(ds.pois), SyntheticPoiProvider(dim=poi_dim, seed=seed))


def full_loss_gradcheck(
    cfg: ModelConfig, seed: int = 0, n_points: int = 5, n_coords: int = 200, h: float = 1e-5, tolerance: float = 1e-4
) -> nx.GradCheckReport:
    """Finite-difference check of the full pre-training loss in 64-bit precision."""
    f = gradcheck_features(n_points, seed, cfg.poi_dim)
    rng = np.random.default_rng(seed)
    plan = sample_mask_plan(len(f), rng)
    model = STRFormer.create(cfg, seed=seed, dtype=torch.float64)
    batch, tgt = collate([build_training_sequence(f, plan)], dtype=torch.float64)
    params = nx.param_store(model)
    return nx.finite_difference_check(
        lambda: compute_loss(model(batch), tgt), params, h=h, tolerance=tolerance, n_coords=n_coords, seed=seed
    )
