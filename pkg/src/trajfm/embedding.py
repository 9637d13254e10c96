"""Per-modality embedders, special tokens and POI text-vector providers."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Union

import numpy as np
import torch
from torch import nn

from .data import Poi, TemporalFeatures
from .geo import NormXY

N_FREQS = 16
N_TEMPORAL = 4
SYNTHETIC_POI_DIM = 64
# std of the initial Fourier frequencies for dow, hod, moh, dt_min
FREQ_INIT_STD = (1.0, 1.0, 1.0, 0.01)


class SpecialToken(enum.IntEnum):
    MASK = 0
    START = 1
    END = 2


# slot kind codes used in tensorized batches; token codes double as token_table rows
KIND_VALUE = 3


@dataclass(frozen=True)
class SpatialValue:
    xy: NormXY


@dataclass(frozen=True)
class TemporalValue:
    features: tuple[float, float, float, float]

    @classmethod
    def of(cls, tf: TemporalFeatures) -> "TemporalValue":
        return cls(tf.as_tuple())


@dataclass(frozen=True)
class PoiValue:
    poi: Poi


@dataclass(frozen=True)
class Token:
    token: SpecialToken


ModalityCell = Union[SpatialValue, TemporalValue, PoiValue, Token]

MASK = Token(SpecialToken.MASK)
START = Token(SpecialToken.START)
END = Token(SpecialToken.END)


def check_point_cells(cells: tuple) -> None:
    spatial, temporal, poi = cells
    if not isinstance(spatial, (SpatialValue, Token)):
        raise TypeError(f"spatial slot holds {type(spatial).__name__}")
    if not isinstance(temporal, (TemporalValue, Token)):
        raise TypeError(f"temporal slot holds {type(temporal).__name__}")
    if not isinstance(poi, (PoiValue, Token)):
        raise TypeError(f"poi slot holds {type(poi).__name__}")
    if spatial == MASK and poi != MASK:
        raise ValueError("a masked spatial slot requires a masked POI slot")


# ------------------------------------------------------------------ providers


def fnv1a_64(text: str) -> int:
    h = 0xCBF29CE484222325
    for byte in text.encode("utf-8"):
        h ^= byte
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


class PoiVectorProvider(Protocol):
    dim: int

    def vector(self, desc: str) -> np.ndarray: ...


class SyntheticPoiProvider:
    """Deterministic stand-in for a text-embedding service.

    The description hash seeds a generator whose normal draw is scaled to
    unit length.
    """

    def __init__(self, dim: int = SYNTHETIC_POI_DIM, seed: int = 0):
        self.dim = dim
        self.seed = seed
        self._cache: dict[str, np.ndarray] = {}

    def vector(self, desc: str) -> np.ndarray:
        if not desc:
            raise ValueError("empty POI description")
        v = self._cache.get(desc)
        if v is None:
            rng = np.random.default_rng([self.seed, fnv1a_64(desc)])
            v = rng.standard_normal(self.dim)
            v /= np.linalg.norm(v)
            v.setflags(write=False)
            self._cache[desc] = v
        return v


class FilePoiProvider:
    """Lookup of precomputed vectors keyed by the FNV-1a hash of the description."""

    def __init__(self, table: dict[int, np.ndarray], dim: int):
        self.dim = dim
        self.table = table

    @classmethod
    def load(cls, path: str | Path) -> "FilePoiProvider":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if not lines or not lines[0].startswith("dim="):
            raise ValueError(f"{path}: missing 'dim=<D>' header")
        dim = int(lines[0][4:])
        table = {}
        for lineno, line in enumerate(lines[1:], start=2):
            if not line.strip():
                continue
            key, _, floats = line.partition("\t")
            vec = np.array([float(v) for v in floats.split()], dtype=np.float64)
            if vec.shape != (dim,):
                raise ValueError(f"{path}:{lineno}: expected {dim} values, got {vec.size}")
            table[int(key, 16)] = vec
        return cls(table, dim)

    @staticmethod
    def write(path: str | Path, entries: dict[str, np.ndarray]) -> None:
        dims = {len(v) for v in entries.values()}
        if len(dims) > 1:
            raise ValueError("inconsistent vector dimensions")
        dim = dims.pop() if dims else 0
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(f"dim={dim}\n")
            for desc, vec in entries.items():
                fh.write(f"{fnv1a_64(desc):016x}\t{' '.join(repr(float(x)) for x in vec)}\n")

    def vector(self, desc: str) -> np.ndarray:
        if not desc:
            raise ValueError("empty POI description")
        try:
            return self.table[fnv1a_64(desc)]
        except KeyError:
            raise KeyError(f"POI description not in vector table: {desc!r}") from None


def poi_vector(provider: PoiVectorProvider, desc: str) -> np.ndarray:
    return provider.vector(desc)


# ------------------------------------------------------------------ embedders


def init_linear(layer: nn.Linear, generator: torch.Generator | None = None) -> nn.Linear:
    with torch.no_grad():
        layer.weight.normal_(0.0, 1.0 / math.sqrt(layer.in_features), generator=generator)
        if layer.bias is not None:
            layer.bias.zero_()
    return layer


class ModalityEmbedder(nn.Module):
    def __init__(self, d: int, poi_dim: int):
        super().__init__()
        self.d = d
        self.poi_dim = poi_dim
        self.spatial = init_linear(nn.Linear(2, d))
        self.fourier_freqs = nn.Parameter(torch.randn(N_TEMPORAL, N_FREQS) * torch.tensor(FREQ_INIT_STD)[:, None])
        self.temporal_mix = init_linear(nn.Linear(2 * N_FREQS * N_TEMPORAL, d))
        self.poi_proj = init_linear(nn.Linear(poi_dim, d))
        self.token_table = nn.Parameter(torch.randn(3, d) / math.sqrt(d))

    def fourier(self, tf: torch.Tensor) -> torch.Tensor:
        # (..., 4) -> (..., 4, 32) with per-feature [cos | sin] blocks
        ang = 2 * math.pi * tf.unsqueeze(-1) * self.fourier_freqs
        return torch.cat([torch.cos(ang), torch.sin(ang)], dim=-1)

    def embed_spatial(self, xy: torch.Tensor) -> torch.Tensor:
        return self.spatial(xy)

    def embed_temporal(self, tf: torch.Tensor) -> torch.Tensor:
        return self.temporal_mix(self.fourier(tf).flatten(-2))

    def embed_poi_vector(self, vec: torch.Tensor) -> torch.Tensor:
        if vec.shape[-1] != self.poi_dim:
            raise ValueError(f"POI vector dimension {vec.shape[-1]} != projection input {self.poi_dim}")
        return self.poi_proj(vec)

    def embed_poi(self, poi: Poi, provider: PoiVectorProvider) -> torch.Tensor:
        if provider.dim != self.poi_dim:
            raise ValueError(f"provider dimension {provider.dim} != projection input {self.poi_dim}")
        vec = torch.tensor(poi_vector(provider, poi.desc), dtype=self.token_table.dtype)
        return self.embed_poi_vector(vec)

    def embed_token(self, token: SpecialToken) -> torch.Tensor:
        return self.token_table[int(token)]

    def embed_cell(self, cell: ModalityCell, provider: PoiVectorProvider | None = None) -> torch.Tensor:
        dtype = self.token_table.dtype
        if isinstance(cell, Token):
            return self.embed_token(cell.token)
        if isinstance(cell, SpatialValue):
            return self.embed_spatial(torch.tensor([cell.xy.x, cell.xy.y], dtype=dtype))
        if isinstance(cell, TemporalValue):
            return self.embed_temporal(torch.tensor(cell.features, dtype=dtype))
        if isinstance(cell, PoiValue):
            return self.embed_poi(cell.poi, provider)
        raise TypeError(f"not a modality cell: {cell!r}")

    def embed_slots(self, kinds: torch.Tensor, xy: torch.Tensor, tf: torch.Tensor, poi: torch.Tensor) -> torch.Tensor:
        """Batched slot embeddings.

        kinds: (..., 3) slot codes (token index or ``KIND_VALUE``);
        xy (..., 2), tf (..., 4), poi (..., D). Returns (..., 3, d).
        """
        values = torch.stack([self.embed_spatial(xy), self.embed_temporal(tf), self.embed_poi_vector(poi)], dim=-2)
        tok = self.token_table[kinds.clamp(max=2)]
        return torch.where((kinds == KIND_VALUE).unsqueeze(-1), values, tok)
