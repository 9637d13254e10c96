"""STRFormer: modality mixing, rotary spatial attention stack and prediction heads."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from . import numerics as nx
from .config import from_kv
from .data import Poi, PoiIndex
from .embedding import (
    KIND_VALUE,
    SYNTHETIC_POI_DIM,
    ModalityEmbedder,
    PoiValue,
    PoiVectorProvider,
    SpatialValue,
    SpecialToken,
    TemporalValue,
    Token,
    check_point_cells,
    init_linear,
    poi_vector,
)
from .geo import NormXY, RegionConfig, norm_to_lnglat

CONTEXT, GENERATION, PAD = 0, 1, -1


@dataclass(frozen=True)
class ModelConfig:
    d: int = 128
    L: int = 2
    ffn_hidden: int = 0  # 0 means 4 * d
    mix_heads: int = 4
    use_strpe: bool = True
    use_poi: bool = True
    max_gen_len: int = 128
    poi_dim: int = SYNTHETIC_POI_DIM
    phi_init_std: float = 0.02

    def __post_init__(self):
        if self.d < 4 or self.d % 2:
            raise ValueError("d must be even and >= 4")
        if self.L < 1:
            raise ValueError("L must be >= 1")
        if self.d % self.mix_heads:
            raise ValueError("d must be divisible by mix_heads")
        if self.max_gen_len < 1:
            raise ValueError("max_gen_len must be >= 1")

    @property
    def hidden(self) -> int:
        return self.ffn_hidden or 4 * self.d

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_kv(cls, values: dict[str, str], strict: bool = True) -> "ModelConfig":
        return from_kv(cls, values, strict=strict)


@dataclass(frozen=True)
class PointPrediction:
    xy_hat: NormXY
    t_hat: tuple[float, float, float, float]
    r_hat_s: float
    r_hat_t: float

    @property
    def is_end(self) -> bool:
        return self.r_hat_s >= 0.5 and self.r_hat_t >= 0.5


@dataclass
class SeqBatch:
    """Padded, tensorized sequences of per-point modality slots.

    kinds (B, T, 3): slot codes, token index or KIND_VALUE.
    segment (B, T): CONTEXT, GENERATION or PAD.
    """

    kinds: torch.Tensor
    xy: torch.Tensor
    tf: torch.Tensor
    poi: torch.Tensor
    segment: torch.Tensor

    @property
    def valid(self) -> torch.Tensor:
        return self.segment != PAD

    def allowed(self) -> torch.Tensor:
        return attention_mask(self.segment)


def attention_mask(segment: torch.Tensor) -> torch.Tensor:
    """Allowed-attention matrix (B, T, T) from per-position segment labels.

    Context attends to context only; generation attends to all context and
    causally within generation. Padding rows attend to themselves.
    """
    seg_i = segment.unsqueeze(-1)
    seg_j = segment.unsqueeze(-2)
    T = segment.shape[-1]
    idx = torch.arange(T, device=segment.device)
    causal = idx[None, :] <= idx[:, None]
    allowed = (seg_j == CONTEXT) & (seg_i != PAD)
    allowed = allowed | ((seg_i == GENERATION) & (seg_j == GENERATION) & causal)
    pad_diag = (seg_i == PAD) & torch.eye(T, dtype=torch.bool, device=segment.device)
    return allowed | pad_diag


def tensorize(
    sequences: list[dict[str, np.ndarray]], dtype=torch.float32
) -> SeqBatch:
    """Stack per-sequence arrays (kinds, xy, tf, poi, segment) into a padded batch."""
    B = len(sequences)
    T = max(len(s["segment"]) for s in sequences)
    D = sequences[0]["poi"].shape[-1]
    kinds = np.full((B, T, 3), int(SpecialToken.MASK), dtype=np.int64)
    xy = np.zeros((B, T, 2))
    tf = np.zeros((B, T, 4))
    poi = np.zeros((B, T, D))
    seg = np.full((B, T), PAD, dtype=np.int64)
    for b, s in enumerate(sequences):
        n = len(s["segment"])
        kinds[b, :n] = s["kinds"]
        xy[b, :n] = s["xy"]
        tf[b, :n] = s["tf"]
        poi[b, :n] = s["poi"]
        seg[b, :n] = s["segment"]
    return SeqBatch(
        torch.from_numpy(kinds),
        torch.as_tensor(xy, dtype=dtype),
        torch.as_tensor(tf, dtype=dtype),
        torch.as_tensor(poi, dtype=dtype),
        torch.from_numpy(seg),
    )


def cells_to_arrays(points: list[tuple], provider: PoiVectorProvider, segment=None) -> dict[str, np.ndarray]:
    """Convert per-point ModalityCell triples into the array form used by :func:`tensorize`."""
    n = len(points)
    out = {
        "kinds": np.zeros((n, 3), dtype=np.int64),
        "xy": np.zeros((n, 2)),
        "tf": np.zeros((n, 4)),
        "poi": np.zeros((n, provider.dim)),
        "segment": np.full(n, CONTEXT, dtype=np.int64) if segment is None else np.asarray(segment, dtype=np.int64),
    }
    for i, cells in enumerate(points):
        check_point_cells(cells)
        spatial, temporal, poi = cells
        for slot, cell in enumerate(cells):
            out["kinds"][i, slot] = int(cell.token) if isinstance(cell, Token) else KIND_VALUE
        if isinstance(spatial, SpatialValue):
            out["xy"][i] = (spatial.xy.x, spatial.xy.y)
        if isinstance(temporal, TemporalValue):
            out["tf"][i] = temporal.features
        if isinstance(poi, PoiValue):
            out["poi"][i] = poi_vector(provider, poi.poi.desc)
    return out


# --------------------------------------------------------------------- rotary


def rotary_thetas(d: int, dtype=torch.float64) -> torch.Tensor:
    k = torch.arange(1, d // 2 + 1, dtype=dtype)
    return 10000.0 ** (-2.0 * k / d)


def compute_phi(xy: torch.Tensor, w_phi: torch.Tensor, present: torch.Tensor | None = None) -> torch.Tensor:
    """Φ = W_Φ (x‖y); rows where ``present`` is False get Φ = 0."""
    phi = xy @ w_phi.T
    if present is not None:
        phi = phi * present.unsqueeze(-1).to(phi.dtype)
    return phi


def rotary_apply(v: torch.Tensor, phi: torch.Tensor, thetas: torch.Tensor | None = None) -> torch.Tensor:
    """Rotate consecutive pairs of ``v`` by angles φ_k θ_k."""
    d = v.shape[-1]
    if d % 2:
        raise ValueError("rotary dimension must be even")
    if thetas is None:
        thetas = rotary_thetas(d, dtype=v.dtype)
    alpha = phi * thetas
    cos, sin = torch.cos(alpha), torch.sin(alpha)
    a, b = v[..., 0::2], v[..., 1::2]
    return torch.stack([a * cos - b * sin, a * sin + b * cos], dim=-1).flatten(-2)


def sinusoidal_positions(T: int, d: int, dtype=torch.float32) -> torch.Tensor:
    pos = torch.arange(T, dtype=torch.float64)[:, None]
    inv = 10000.0 ** (-torch.arange(0, d, 2, dtype=torch.float64) / d)
    pe = torch.zeros(T, d, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(pos * inv)
    pe[:, 1::2] = torch.cos(pos * inv)
    return pe.to(dtype)


# ------------------------------------------------------------------- layers


class FeedForward(nn.Module):
    def __init__(self, d: int, hidden: int):
        super().__init__()
        self.lin1 = init_linear(nn.Linear(d, hidden))
        self.lin2 = init_linear(nn.Linear(hidden, d))

    def forward(self, x):
        return self.lin2(nx.relu(self.lin1(x)))


class MixingEncoder(nn.Module):
    """One post-norm multi-head transformer encoder layer over the three slots, then mean pooling."""

    def __init__(self, d: int, heads: int, hidden: int):
        super().__init__()
        self.d, self.heads = d, heads
        self.q = init_linear(nn.Linear(d, d))
        self.k = init_linear(nn.Linear(d, d))
        self.v = init_linear(nn.Linear(d, d))
        self.out = init_linear(nn.Linear(d, d))
        self.ln1 = nn.LayerNorm(d, eps=nx.LN_EPS)
        self.ln2 = nn.LayerNorm(d, eps=nx.LN_EPS)
        self.ffn = FeedForward(d, hidden)

    def encode(self, slots: torch.Tensor) -> torch.Tensor:
        *lead, S, d = slots.shape
        hd = d // self.heads

        def split(t):
            return t.reshape(*lead, S, self.heads, hd).transpose(-3, -2)

        q, k, v = split(self.q(slots)), split(self.k(slots)), split(self.v(slots))
        att = nx.softmax(q @ k.transpose(-1, -2) / math.sqrt(hd), dim=-1)
        mixed = (att @ v).transpose(-3, -2).reshape(*lead, S, d)
        x = self.ln1(slots + self.out(mixed))
        return self.ln2(x + self.ffn(x))

    def forward(self, slots: torch.Tensor) -> torch.Tensor:
        return nx.mean(self.encode(slots), dim=-2)


class STRPELayer(nn.Module):
    def __init__(self, d: int, hidden: int, use_strpe: bool = True, phi_init_std: float = 0.02):
        super().__init__()
        self.d = d
        self.use_strpe = use_strpe
        self.W_q = init_linear(nn.Linear(d, d, bias=False))
        self.W_k = init_linear(nn.Linear(d, d, bias=False))
        self.W_v = init_linear(nn.Linear(d, d, bias=False))
        self.W_phi = nn.Parameter(torch.randn(d // 2, 2) * phi_init_std)
        self.ln1 = nn.LayerNorm(d, eps=nx.LN_EPS)
        self.ln2 = nn.LayerNorm(d, eps=nx.LN_EPS)
        self.ffn = FeedForward(d, hidden)
        self.register_buffer("thetas", rotary_thetas(d, torch.float64), persistent=False)

    def queries_keys(self, e, xy, present):
        q, k = self.W_q(e), self.W_k(e)
        if self.use_strpe:
            phi = compute_phi(xy, self.W_phi, present)
            thetas = self.thetas.to(e.dtype)
            q, k = rotary_apply(q, phi, thetas), rotary_apply(k, phi, thetas)
        return q, k

    def logits(self, e, xy, present):
        q, k = self.queries_keys(e, xy, present)
        return q @ k.transpose(-1, -2) / math.sqrt(self.d)

    def attention(self, e, xy, present, allowed):
        return nx.softmax(self.logits(e, xy, present), dim=-1, allowed=allowed)

    def forward(self, e, xy, present, allowed):
        h = self.attention(e, xy, present, allowed) @ self.W_v(e)
        return self.ln2(self.ffn(self.ln1(h + e)) + h)


class STRFormer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.d
        self.embed = ModalityEmbedder(d, cfg.poi_dim)
        self.mixer = MixingEncoder(d, cfg.mix_heads, cfg.hidden)
        self.layers = nn.ModuleList(STRPELayer(d, cfg.hidden, cfg.use_strpe, cfg.phi_init_std) for _ in range(cfg.L))
        self.head_xy = init_linear(nn.Linear(d, 2))
        self.head_t = init_linear(nn.Linear(d, 4))
        self.head_rs = init_linear(nn.Linear(d, 1))
        self.head_rt = init_linear(nn.Linear(d, 1))

    @classmethod
    def create(cls, cfg: ModelConfig, seed: int = 0, dtype=torch.float32) -> "STRFormer":
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            model = cls(cfg)
        return model.to(dtype)

    @property
    def dtype(self):
        return self.embed.token_table.dtype

    def slot_kinds(self, kinds: torch.Tensor) -> torch.Tensor:
        if self.cfg.use_poi:
            return kinds
        kinds = kinds.clone()
        kinds[..., 2] = int(SpecialToken.MASK)
        return kinds

    def mix(self, batch: SeqBatch) -> torch.Tensor:
        slots = self.embed.embed_slots(self.slot_kinds(batch.kinds), batch.xy, batch.tf, batch.poi)
        return self.mixer(slots)

    def encode(self, batch: SeqBatch, return_embeddings: bool = False):
        e = self.mix(batch)
        present = batch.kinds[..., 0] == KIND_VALUE
        allowed = batch.allowed()
        if not self.cfg.use_strpe:
            e = e + sinusoidal_positions(e.shape[-2], self.cfg.d, e.dtype)
        x = e
        for layer in self.layers:
            x = layer(x, batch.xy, present, allowed)
        return (x, e) if return_embeddings else x

    def heads(self, z: torch.Tensor) -> dict[str, torch.Tensor]:
        return {
            "xy": self.head_xy(z),
            "t": nx.softplus(self.head_t(z)),
            "r_s": nx.sigmoid(self.head_rs(z)).squeeze(-1),
            "r_t": nx.sigmoid(self.head_rt(z)).squeeze(-1),
        }

    def forward(self, batch: SeqBatch) -> dict[str, torch.Tensor]:
        return self.heads(self.encode(batch))

    def predict_point(self, z: torch.Tensor) -> PointPrediction:
        out = self.heads(z)
        xy = out["xy"].tolist()
        return PointPrediction(NormXY(*xy), tuple(out["t"].tolist()), float(out["r_s"]), float(out["r_t"]))

    def encode_points(self, points: list[tuple], provider: PoiVectorProvider, segment=None) -> torch.Tensor:
        """Encode a single sequence of ModalityCell triples; returns (n, d)."""
        if not points:
            raise ValueError("cannot encode an empty sequence")
        batch = tensorize([cells_to_arrays(points, provider, segment)], dtype=self.dtype)
        return self.encode(batch)[0]


def recover_poi(xy_hat: NormXY, region: RegionConfig, poi_index: PoiIndex) -> Poi:
    lng, lat = norm_to_lnglat(xy_hat.x, xy_hat.y, region)
    idx = poi_index.nearest_indices(float(lng), float(np.clip(lat, -90, 90)))
    return poi_index.pois[int(idx[0])]
