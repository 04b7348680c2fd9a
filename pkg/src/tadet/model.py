"""The two-stage detector network and its parameter store.

Layout of a forward pass over one buffer of shape ``(C_in, L, h, w)``:

* backbone: temporal conv / ReLU / temporal max-pool stages whose pool
  factors multiply to 8, optionally followed by dilated stride-8 convs;
* proposal head: 3-tap temporal conv + ReLU, spatial max collapse, then two
  per-location projections giving ``2K`` objectness logits and ``2K`` offsets;
* classification head: 3D RoI pooling of the shared features, two fully
  connected ReLU layers, then ``C + 1`` class logits and per-class offsets.
"""

from __future__ import annotations

import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .roipool import PoolGrid

THUMOS_SCALES = (2, 4, 5, 6, 8, 9, 10, 12, 14, 16)


@dataclass
class BackboneConfig:
    in_channels: int = 8
    hidden_channels: list[int] = field(default_factory=lambda: [32, 32, 64])
    pool_factors: list[int] = field(default_factory=lambda: [2, 2, 2])
    dilations: list[int] = field(default_factory=lambda: [1, 1, 1])
    temporal_downsample: int = 8
    spatial_dims: tuple[int, int] = (7, 7)

    def __post_init__(self):
        self.spatial_dims = tuple(self.spatial_dims)
        n = len(self.hidden_channels)
        if len(self.pool_factors) != n or len(self.dilations) != n:
            raise ValueError("hidden_channels, pool_factors and dilations must have equal length")
        if int(np.prod(self.pool_factors)) != self.temporal_downsample:
            raise ValueError(
                f"pool factors {self.pool_factors} multiply to {int(np.prod(self.pool_factors))}, "
                f"expected {self.temporal_downsample}"
            )

    @property
    def out_channels(self) -> int:
        return self.hidden_channels[-1]


@dataclass
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    num_classes: int = 20
    anchor_scales: tuple[int, ...] = THUMOS_SCALES
    proposal_channels: int = 64
    fc_channels: int = 128
    pool_grid: tuple[int, int, int] = (1, 4, 4)
    # regression outputs are offsets divided by this per-coordinate scale
    offset_std: tuple[float, float] = (1.0, 1.0)

    def __post_init__(self):
        if isinstance(self.backbone, dict):
            self.backbone = BackboneConfig(**self.backbone)
        self.anchor_scales = tuple(int(s) for s in self.anchor_scales)
        self.pool_grid = tuple(int(g) for g in self.pool_grid)
        self.offset_std = tuple(float(v) for v in self.offset_std)

    @property
    def stride(self) -> int:
        return self.backbone.temporal_downsample

    @property
    def num_scales(self) -> int:
        return len(self.anchor_scales)

    @property
    def grid(self) -> PoolGrid:
        return PoolGrid(*self.pool_grid)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["backbone"]["spatial_dims"] = list(self.backbone.spatial_dims)
        d["anchor_scales"] = list(self.anchor_scales)
        d["pool_grid"] = list(self.pool_grid)
        d["offset_std"] = list(self.offset_std)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        d = dict(d)
        d["backbone"] = BackboneConfig(**d.get("backbone", {}))
        return cls(**d)


class ParameterStore:
    """Named parameter tensors, kept in insertion order."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter {name}")
        t = Tensor(np.asarray(value, dtype=self.dtype), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __iter__(self):
        return iter(self._params.items())

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.zero_grad()

    def grads_finite(self) -> bool:
        return all(t.grad is None or np.all(np.isfinite(t.grad)) for t in self._params.values())

    def state(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self._params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self._params) ^ set(state)
        if missing:
            raise ValueError(f"parameter names differ: {sorted(missing)}")
        for k, t in self._params.items():
            if state[k].shape != t.shape:
                raise ValueError(f"shape mismatch for {k}: {state[k].shape} vs {t.shape}")
            t.data = np.asarray(state[k], dtype=self.dtype).copy()


def glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


class Detector:
    """Backbone plus both heads over a single :class:`ParameterStore`."""

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.params = ParameterStore(dtype)
        rng = np.random.default_rng(seed)
        p = self.params
        bb = config.backbone
        cin = bb.in_channels
        for i, cout in enumerate(bb.hidden_channels):
            p.add(f"backbone.{i}.weight", glorot(rng, (cout, cin, 3), cin * 3, cout * 3))
            p.add(f"backbone.{i}.bias", np.zeros(cout))
            cin = cout
        c, ct, k = bb.out_channels, config.proposal_channels, config.num_scales
        p.add("proposal.trunk.weight", glorot(rng, (ct, c, 3), c * 3, ct * 3))
        p.add("proposal.trunk.bias", np.zeros(ct))
        p.add("proposal.score.weight", glorot(rng, (ct, 2 * k), ct, 2 * k))
        p.add("proposal.score.bias", np.zeros(2 * k))
        p.add("proposal.offset.weight", glorot(rng, (ct, 2 * k), ct, 2 * k))
        p.add("proposal.offset.bias", np.zeros(2 * k))
        d_in = c * config.grid.cells
        fc, ncls = config.fc_channels, config.num_classes + 1
        p.add("classifier.fc1.weight", glorot(rng, (d_in, fc), d_in, fc))
        p.add("classifier.fc1.bias", np.zeros(fc))
        p.add("classifier.fc2.weight", glorot(rng, (fc, fc), fc, fc))
        p.add("classifier.fc2.bias", np.zeros(fc))
        p.add("classifier.cls.weight", glorot(rng, (fc, ncls), fc, ncls))
        p.add("classifier.cls.bias", np.zeros(ncls))
        p.add("classifier.reg.weight", glorot(rng, (fc, 2 * ncls), fc, 2 * ncls))
        p.add("classifier.reg.bias", np.zeros(2 * ncls))

    @property
    def dtype(self):
        return self.params.dtype

    def _w(self, name: str) -> Tensor:
        return self.params[name]

    def backbone_forward(self, x) -> Tensor:
        """``(C_in, L, h, w)`` buffer to a ``(C, L/8, h*w)`` feature tensor."""
        bb = self.config.backbone
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.dtype))
        cin, length, h, w = x.shape
        if cin != bb.in_channels:
            raise ValueError(f"expected {bb.in_channels} input channels, got {cin}")
        if length % bb.temporal_downsample:
            raise ValueError(f"buffer length {length} is not divisible by {bb.temporal_downsample}; pad it first")
        if (h, w) != bb.spatial_dims:
            raise ValueError(f"expected spatial dims {bb.spatial_dims}, got {(h, w)}")
        y = ag.reshape(x, (cin, length, h * w))
        for i, (pool, dil) in enumerate(zip(bb.pool_factors, bb.dilations)):
            y = ag.conv_time(y, self._w(f"backbone.{i}.weight"), self._w(f"backbone.{i}.bias"), dil)
            y = ag.relu(y)
            y = ag.maxpool_time(y, pool)
        return y

    def proposal_forward(self, features: Tensor) -> tuple[Tensor, Tensor]:
        """Per-anchor objectness logits and offsets, both ``(L/8 * K, 2)`` in anchor order."""
        y = ag.conv_time(features, self._w("proposal.trunk.weight"), self._w("proposal.trunk.bias"))
        y = ag.relu(y)
        y = ag.transpose(ag.max_spatial(y))  # (L/8, C_tpn)
        n = y.shape[0] * self.config.num_scales
        scores = ag.linear(y, self._w("proposal.score.weight"), self._w("proposal.score.bias"))
        offsets = ag.linear(y, self._w("proposal.offset.weight"), self._w("proposal.offset.bias"))
        return ag.reshape(scores, (n, 2)), ag.reshape(offsets, (n, 2))

    def classifier_forward(self, pooled: Tensor) -> tuple[Tensor, Tensor]:
        """Class logits ``(N, C+1)`` and per-class offsets ``(N, C+1, 2)`` from flat pooled features."""
        expected = self.config.backbone.out_channels * self.config.grid.cells
        if pooled.shape[-1] != expected:
            raise ValueError(f"pooled feature size {pooled.shape[-1]} != head input size {expected}")
        y = ag.relu(ag.linear(pooled, self._w("classifier.fc1.weight"), self._w("classifier.fc1.bias")))
        y = ag.relu(ag.linear(y, self._w("classifier.fc2.weight"), self._w("classifier.fc2.bias")))
        logits = ag.linear(y, self._w("classifier.cls.weight"), self._w("classifier.cls.bias"))
        offsets = ag.linear(y, self._w("classifier.reg.weight"), self._w("classifier.reg.bias"))
        return logits, ag.reshape(offsets, (pooled.shape[0], self.config.num_classes + 1, 2))

    def pool(self, features: Tensor, segments: np.ndarray) -> Tensor:
        return ag.roi_pool(features, self.config.backbone.spatial_dims, segments, self.config.grid, self.config.stride)

    def feature_volume(self, features: Tensor) -> np.ndarray:
        c, l, _ = features.shape
        return features.data.reshape(c, l, *self.config.backbone.spatial_dims)


# -- checkpoint I/O -----------------------------------------------------------

CHECKPOINT_MAGIC = b"TDCK"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, params: ParameterStore) -> None:
    """Write parameters as float32 little-endian in the ``TDCK`` container."""
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(params))]
    for name, t in params:
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", t.data.ndim))
        chunks.append(struct.pack(f"<{t.data.ndim}Q", *t.data.shape))
        chunks.append(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_checkpoint(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    out = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", buf, off)
        off += 4
        name = buf[off:off + n].decode("utf-8")
        off += n
        (rank,) = struct.unpack_from("<I", buf, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}Q", buf, off)
        off += 8 * rank
        size = int(np.prod(dims)) if rank else 1
        out[name] = np.frombuffer(buf, dtype="<f4", count=size, offset=off).reshape(dims).copy()
        off += 4 * size
    if off != len(buf):
        raise ValueError(f"{path}: {len(buf) - off} trailing bytes")
    return out


def load_checkpoint(path, model: Detector) -> None:
    """Load into ``model``, rejecting any name or shape mismatch with its config."""
    model.params.load_state(read_checkpoint(path))
