"""Point network: per-point feature extractor, superpoint-point cross
attention with residual inverse mapping, and a two-way prediction head."""
from __future__ import annotations

import collections
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import ad, kvfile
from .ad import Tensor
from .pcio import PointCloud, build_input_features
from .spatial import DEFAULT_VOXEL_SHAPE, VoxelGrid, voxelize
from .superpoint import DEFAULT_K, SuperpointPartition, adaptive_gamma, partition

VARIANTS = ("baseline", "+SP", "+SP+GE", "+SP+GE+CA")
IN_CHANNELS = 9

# instrumentation: number of partitions computed by forward passes
stats: collections.Counter = collections.Counter()


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 32
    layers: int = 3
    voxel_shape: tuple[int, int, int] = DEFAULT_VOXEL_SHAPE
    sp_k: int = DEFAULT_K
    # None selects the adaptive percentile rule per cloud
    sp_gamma: Optional[float] = None
    gamma_percentile: float = 10.0
    variant: str = "+SP+GE+CA"
    xyz_only: bool = False
    backbone: str = "pointwise-mlp"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.channels < 1 or self.layers < 1:
            raise ValueError("channels and layers must be >= 1")

    @property
    def use_partition(self) -> bool:
        return self.variant != "baseline"

    @property
    def use_attention(self) -> bool:
        return self.variant in ("+SP+GE", "+SP+GE+CA")

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = "auto" if v is None else v
        return out

    @classmethod
    def from_dict(cls, kv: dict) -> "ModelConfig":
        base = cls()
        changes = {}
        for f in fields(cls):
            if f.name not in kv:
                continue
            raw = str(kv[f.name])
            cur = getattr(base, f.name)
            if f.name == "sp_gamma":
                changes[f.name] = None if raw in ("auto", "None", "") else float(raw)
            elif f.name == "voxel_shape":
                changes[f.name] = tuple(kvfile.ints(raw))
            elif isinstance(cur, bool):
                changes[f.name] = kvfile.boolean(raw)
            elif isinstance(cur, int):
                changes[f.name] = int(raw)
            elif isinstance(cur, float):
                changes[f.name] = float(raw)
            else:
                changes[f.name] = raw
        return replace(base, **changes)


class ModelParams:
    """Named float64 weight arrays."""

    def __init__(self, arrays: dict[str, np.ndarray]):
        self.arrays = {k: np.asarray(v, dtype=np.float64) for k, v in arrays.items()}

    @classmethod
    def init(cls, config: ModelConfig = ModelConfig(), seed: int = 0) -> "ModelParams":
        rng = np.random.default_rng(seed)
        c = config.channels
        arrays = {}
        fan_in = IN_CHANNELS
        for i in range(config.layers):
            arrays[f"ext.{i}.w"] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, c))
            arrays[f"ext.{i}.b"] = np.zeros(c)
            fan_in = c
        for name in ("wq", "wk", "wv", "wo"):
            arrays[f"attn.{name}"] = rng.normal(0.0, 1.0 / np.sqrt(c), size=(c, c))
        arrays["head.w"] = rng.normal(0.0, 1.0 / np.sqrt(c), size=(c, 2))
        arrays["head.b"] = np.zeros(2)
        return cls(arrays)

    def names(self) -> list[str]:
        return list(self.arrays)

    def copy(self) -> "ModelParams":
        return ModelParams({k: v.copy() for k, v in self.arrays.items()})

    def n_values(self) -> int:
        return sum(v.size for v in self.arrays.values())

    def tensors(self, requires_grad: bool = False) -> dict[str, Tensor]:
        return {k: Tensor(v, requires_grad=requires_grad) for k, v in self.arrays.items()}

    def layers(self) -> int:
        return sum(1 for k in self.arrays if k.startswith("ext.") and k.endswith(".w"))

    def channels(self) -> int:
        return self.arrays["head.w"].shape[0]

    def equals(self, other: "ModelParams") -> bool:
        return self.names() == other.names() and all(np.array_equal(self.arrays[k], other.arrays[k]) for k in self.arrays)


def _as_tensors(params) -> dict[str, Tensor]:
    if isinstance(params, ModelParams):
        return params.tensors()
    return params


def extract_features(inputs, params) -> Tensor:
    """Shared per-point MLP ``9 -> C``; ReLU after every layer."""
    p = _as_tensors(params)
    x = inputs if isinstance(inputs, Tensor) else Tensor(getattr(inputs, "values", inputs))
    if x.data.ndim != 2 or x.shape[1] != IN_CHANNELS:
        raise ad.ShapeError(f"extract_features: expected N x {IN_CHANNELS} input, got {x.shape}")
    i = 0
    while f"ext.{i}.w" in p:
        x = ad.relu(ad.add(ad.matmul(x, p[f"ext.{i}.w"]), p[f"ext.{i}.b"]))
        i += 1
    return x


def cross_attention(u, f, params) -> Tensor:
    """Single-head attention with superpoint queries and point keys/values.

    ``softmax(U Wq (F Wk)^T / sqrt(C)) F Wv`` followed by the output
    projection ``Wo``.
    """
    p = _as_tensors(params)
    u, f = ad.as_tensor(u), ad.as_tensor(f)
    c = p["attn.wq"].shape[0]
    if u.data.ndim != 2 or f.data.ndim != 2 or u.shape[1] != c or f.shape[1] != c:
        raise ad.ShapeError(f"cross_attention: U {u.shape} and F {f.shape} must both have {c} columns")
    scale = 1.0 / np.sqrt(c)
    # the 1/sqrt(C) factor is applied to the M x C queries, not the M x N scores
    q = ad.scalar_mul(ad.matmul(u, p["attn.wq"]), scale)
    k = ad.matmul(f, p["attn.wk"])
    v = ad.matmul(f, p["attn.wv"])
    return ad.matmul(ad.attention(q, k, v), p["attn.wo"])


def geometry_enhance(f, part: SuperpointPartition, params, attention: bool = True):
    """``G = Inv(U') + F`` with ``U`` the superpoint means of ``F``.

    With ``attention=False`` the pooled means are broadcast back directly
    (``U' = U``). Returns ``(G, U, U')``.
    """
    f = ad.as_tensor(f)
    if part.n_points != f.shape[0]:
        raise ad.ShapeError(f"geometry_enhance: partition covers {part.n_points} points, features have {f.shape[0]}")
    u = ad.scatter_mean_rows(f, part.sp_id_of_point, part.m)
    u_attn = cross_attention(u, f, params) if attention else u
    g = ad.add(ad.gather_rows(u_attn, part.sp_id_of_point), f)
    return g, u, u_attn


@dataclass
class ForwardTrace:
    F: Tensor
    partition: Optional[SuperpointPartition]
    U: Optional[Tensor]
    U_attn: Optional[Tensor]
    G: Tensor
    logits: Tensor
    saliency: np.ndarray
    logits_reduced: Tensor
    grid: VoxelGrid
    reduced: PointCloud
    gamma: Optional[float] = None

    @property
    def probabilities(self) -> np.ndarray:
        return ad._softmax(self.logits.data.copy())


@dataclass
class Prepared:
    """Geometry of one cloud that does not depend on the weights."""

    cloud: PointCloud
    grid: VoxelGrid
    reduced: PointCloud
    inputs: np.ndarray
    table: Optional[tuple[np.ndarray, np.ndarray]] = None
    extra: dict = field(default_factory=dict)


def prepare(cloud: PointCloud, config: ModelConfig) -> Prepared:
    feats = build_input_features(cloud, xyz_only=config.xyz_only).values
    grid, reduced = voxelize(cloud, config.voxel_shape)
    counts = grid.counts.astype(np.float64)
    inputs = np.stack([np.bincount(grid.voxel_of_point, weights=feats[:, c], minlength=grid.n_voxels)
                       for c in range(feats.shape[1])], axis=1) / counts[:, None]
    return Prepared(cloud, grid, reduced, inputs)


def run(
    prep: Prepared,
    params,
    config: ModelConfig,
    seed: int = 0,
    part: Optional[SuperpointPartition] = None,
    inputs: Optional[np.ndarray] = None,
    part_positions: Optional[np.ndarray] = None,
) -> ForwardTrace:
    """Forward pass on a prepared cloud.

    ``part`` reuses a fixed partition (gradient checks); ``inputs`` replaces
    the prepared input channels (e.g. translated copies); ``part_positions``
    sets the positions the partition clusters over.
    """
    p = _as_tensors(params)
    x = Tensor(prep.inputs if inputs is None else inputs)
    f = extract_features(x, p)
    gamma = None
    if config.use_partition:
        if part is None:
            feats = f.data
            gamma = config.sp_gamma
            if gamma is None:
                gamma = adaptive_gamma(feats, seed, config.gamma_percentile)
            pos = prep.reduced.positions if part_positions is None else part_positions
            part = partition(pos, feats, config.sp_k, gamma, seed, table=prep.table)
            stats["partition"] += 1
        g, u, u_attn = geometry_enhance(f, part, p, attention=config.use_attention)
    else:
        part, u, u_attn, g = None, None, None, f
    logits_r = ad.add(ad.matmul(g, p["head.w"]), p["head.b"])
    logits = ad.gather_rows(logits_r, prep.grid.voxel_of_point)
    sal = ad._softmax(logits.data.copy())[:, 1]
    return ForwardTrace(f, part, u, u_attn, g, logits, sal, logits_r, prep.grid, prep.reduced, gamma)


def forward(cloud: PointCloud, params, config: ModelConfig = ModelConfig(), seed: int = 0,
            part: Optional[SuperpointPartition] = None) -> ForwardTrace:
    """Features, voxel reduction, backbone, partition, enhancement, head, and
    per-point saliency at full resolution."""
    return run(prepare(cloud, config), params, config, seed=seed, part=part)


def predict(cloud: PointCloud, params: ModelParams, config: ModelConfig, seed: int = 0) -> np.ndarray:
    with ad.no_grad():
        return forward(cloud, params, config, seed).saliency


# --- checkpoints ----------------------------------------------------------

PARAMS_FILE = "params.bin"
MANIFEST_FILE = "manifest.txt"


def save_checkpoint(path: str | Path, params: ModelParams, config: ModelConfig) -> None:
    """Directory with a flat little-endian float64 blob and a text manifest.

    Manifest lines: ``param <name> <shape> <offset>`` (offset in values) and
    ``config <key> = <value>``.
    """
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    lines = []
    offset = 0
    blobs = []
    for name, arr in params.arrays.items():
        shape = "x".join(str(s) for s in arr.shape)
        lines.append(f"param {name} {shape} {offset}")
        blobs.append(np.ascontiguousarray(arr, dtype="<f8").reshape(-1))
        offset += arr.size
    for key, value in config.to_dict().items():
        lines.append("config " + kvfile.dumps({key: value}).strip())
    tmp_bin = path / (PARAMS_FILE + ".tmp")
    tmp_man = path / (MANIFEST_FILE + ".tmp")
    tmp_bin.write_bytes(np.concatenate(blobs).tobytes() if blobs else b"")
    tmp_man.write_text("\n".join(lines) + "\n")
    tmp_bin.replace(path / PARAMS_FILE)
    tmp_man.replace(path / MANIFEST_FILE)


def load_checkpoint(path: str | Path) -> tuple[ModelParams, ModelConfig]:
    path = Path(path)
    manifest = path / MANIFEST_FILE
    blob = path / PARAMS_FILE
    if not manifest.is_file() or not blob.is_file():
        raise FileNotFoundError(f"{path}: not a checkpoint directory (need {MANIFEST_FILE} and {PARAMS_FILE})")
    flat = np.frombuffer(blob.read_bytes(), dtype="<f8")
    arrays = {}
    cfg = {}
    for lineno, line in enumerate(manifest.read_text().splitlines(), 1):
        if not line.strip():
            continue
        kind, _, rest = line.partition(" ")
        if kind == "param":
            name, shape, offset = rest.split()
            dims = tuple(int(s) for s in shape.split("x")) if shape else ()
            size = int(np.prod(dims)) if dims else 1
            start = int(offset)
            if start + size > flat.size:
                raise ValueError(f"{manifest}:{lineno}: parameter {name} runs past the end of {PARAMS_FILE}")
            arrays[name] = flat[start:start + size].reshape(dims).copy()
        elif kind == "config":
            cfg.update(kvfile.loads(rest))
        else:
            raise ValueError(f"{manifest}:{lineno}: unknown manifest entry {kind!r}")
    return ModelParams(arrays), ModelConfig.from_dict(cfg)
