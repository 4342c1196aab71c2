"""Adam training loop, augmentation, evaluation and the ablation / density harnesses."""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import ad, kvfile
from .losses import LossConfig, final_loss
from .metrics import EvalReport, aggregate, evaluate_sample
from .model import VARIANTS, ModelConfig, ModelParams, Prepared, prepare, run, save_checkpoint
from .pcio import PointCloud
from .spatial import DEFAULT_VOXEL_SHAPE, generate_local_areas
from .superpoint import NeighborIndex

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 1e-4
    epochs: int = 60
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    translation_noise_std: tuple[float, float, float] = (3.0, 3.0, 3.0)
    voxel_shape: tuple[int, int, int] = DEFAULT_VOXEL_SHAPE
    sp_k: int = 32
    sp_gamma: Optional[float] = None
    gamma_percentile: float = 10.0
    channels: int = 32
    layers: int = 3
    area_count: int = 16
    area_size: int = 32
    alpha: float = 0.01
    beta: float = 0.2
    ce_weight: float = 1.0
    agn_weight: float = 1.0
    agn_on: str = "F"
    # samples per optimizer step
    accumulate: int = 1
    # float32 attention kernel during training steps (evaluation stays float64)
    attention_float32: bool = True
    xyz_only: bool = False
    seed: int = 0

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if any(s < 0 for s in self.translation_noise_std):
            raise ValueError("translation_noise_std must be >= 0")
        if self.accumulate < 1:
            raise ValueError("accumulate must be >= 1")

    def model_config(self, variant: str) -> ModelConfig:
        return ModelConfig(self.channels, self.layers, tuple(self.voxel_shape), self.sp_k, self.sp_gamma,
                           self.gamma_percentile, variant, self.xyz_only)

    def loss_config(self, variant: str) -> LossConfig:
        agn = self.agn_weight if variant == "+SP+GE+CA" else 0.0
        return LossConfig(self.alpha, self.beta, self.ce_weight, agn, self.agn_on)

    def to_dict(self) -> dict:
        return {f.name: ("auto" if getattr(self, f.name) is None else getattr(self, f.name)) for f in fields(self)}

    @classmethod
    def from_dict(cls, kv: dict) -> "TrainConfig":
        base = cls()
        changes = {}
        for f in fields(cls):
            if f.name not in kv:
                continue
            raw, cur = str(kv[f.name]), getattr(base, f.name)
            if f.name == "sp_gamma":
                changes[f.name] = None if raw in ("auto", "None", "") else float(raw)
            elif f.name == "translation_noise_std":
                changes[f.name] = tuple(kvfile.floats(raw))
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
        unknown = set(kv) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return replace(base, **changes)

    @classmethod
    def load(cls, path: str | Path) -> "TrainConfig":
        return cls.from_dict(kvfile.read(path))

    def save(self, path: str | Path) -> None:
        kvfile.write(path, self.to_dict())


# --- optimizer -------------------------------------------------------------

@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: ModelParams, grads: dict[str, np.ndarray], state: AdamState, config: TrainConfig) -> None:
    """One in-place Adam update with decoupled weight decay."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"adam_step: non-finite gradient for parameter {name!r}")
    state.step += 1
    t = state.step
    b1, b2 = config.beta1, config.beta2
    for name, g in grads.items():
        p = params.arrays[name]
        if g.shape != p.shape:
            raise ValueError(f"adam_step: gradient shape {g.shape} for parameter {name!r} of shape {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        update = m_hat / (np.sqrt(v_hat) + config.eps) + config.weight_decay * p
        p -= config.lr * update


# --- augmentation ----------------------------------------------------------

def augment_offset(std: Sequence[float], rng: np.random.Generator) -> np.ndarray:
    return rng.normal(0.0, 1.0, size=3) * np.asarray(std, dtype=np.float64)


def augment(cloud: PointCloud, std: Sequence[float] = (3.0, 3.0, 3.0), seed: int = 0) -> PointCloud:
    """Translate the whole cloud by one Gaussian offset per axis."""
    if any(s < 0 for s in std):
        raise ValueError("augmentation stds must be >= 0")
    offset = augment_offset(std, np.random.default_rng(seed))
    return cloud.replace(positions=cloud.positions + offset)


# --- training --------------------------------------------------------------

class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, params: ModelParams, history: list):
        super().__init__(message)
        self.params = params
        self.history = history


def prepare_with_table(cloud: PointCloud, mcfg: ModelConfig) -> Prepared:
    """``prepare`` plus the cached neighbour table the partition reuses."""
    prep = prepare(cloud, mcfg)
    if mcfg.use_partition and prep.reduced.n > 1:
        width = min(2 * mcfg.sp_k, prep.reduced.n - 1)
        table, trusted = NeighborIndex(prep.reduced.positions).neighbor_table(width)
        prep.table = (table.astype(np.int32), trusted.astype(np.int32))
    return prep


@dataclass
class Sample:
    """A training cloud with its weight-independent geometry."""

    prep: Prepared
    part_seed: int
    areas: object = None


def build_samples(dataset: Sequence[PointCloud], mcfg: ModelConfig, config: TrainConfig,
                  need_areas: bool, seed: int) -> list[Sample]:
    rng = np.random.default_rng([seed, 1])
    part_seeds = rng.integers(0, 2**31 - 1, size=len(dataset))
    out = []
    for cloud, ps in zip(dataset, part_seeds):
        if cloud.gt_mask is None:
            raise ValueError("training clouds need a ground-truth mask")
        prep = prepare_with_table(cloud, mcfg)
        areas = None
        if need_areas and np.any(prep.reduced.gt_mask == 1):
            areas = generate_local_areas(prep.reduced, config.area_count, config.area_size, int(ps))
        out.append(Sample(prep, int(ps), areas))
    return out


@dataclass
class TrainResult:
    params: ModelParams
    model_config: ModelConfig
    history: list[dict]
    seconds: float
    step_losses: list[float] = field(default_factory=list)


def sample_loss(params, sample: Sample, mcfg: ModelConfig, lcfg: LossConfig, inputs=None):
    trace = run(sample.prep, params, mcfg, seed=sample.part_seed, inputs=inputs)
    return final_loss(trace, sample.prep.cloud, sample.areas, lcfg), trace


def train(
    dataset: Sequence[PointCloud],
    config: TrainConfig = TrainConfig(),
    variant: str = "+SP+GE+CA",
    val: Optional[Sequence[PointCloud]] = None,
    out_dir: Optional[str | Path] = None,
    params: Optional[ModelParams] = None,
) -> TrainResult:
    """Per-sample Adam steps over shuffled epochs.

    Writes a checkpoint to ``out_dir`` after every epoch. A non-finite loss
    aborts with :class:`TrainingDiverged`, carrying the last good weights.
    """
    if not dataset:
        raise ValueError("train: empty dataset")
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    start = time.perf_counter()
    mcfg = config.model_config(variant)
    lcfg = config.loss_config(variant)
    samples = build_samples(dataset, mcfg, config, lcfg.agn_weight > 0, config.seed)
    val_samples = None
    if val:
        val_samples = [prepare_with_table(c, mcfg) for c in val]
    params = ModelParams.init(mcfg, config.seed) if params is None else params.copy()
    state = AdamState()
    rng = np.random.default_rng([config.seed, 2])
    history: list[dict] = []
    step_losses: list[float] = []
    last_good = params.copy()
    precision = np.float32 if config.attention_float32 else np.float64
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)

    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(samples))
        total = 0.0
        pending: dict[str, np.ndarray] = {}
        count = 0
        for pos, idx in enumerate(order):
            sample = samples[idx]
            inputs = sample.prep.inputs.copy()
            inputs[:, :3] += augment_offset(config.translation_noise_std, rng)
            tensors = params.tensors(requires_grad=True)
            with ad.attention_precision(precision):
                loss, _ = sample_loss(tensors, sample, mcfg, lcfg, inputs)
            value = float(loss.data)
            if not np.isfinite(value):
                _abort(out_dir, last_good, mcfg, history, f"non-finite loss at epoch {epoch}, sample {idx}")
            ad.backward(loss)
            for name, t in tensors.items():
                if t.grad is None:
                    continue
                pending[name] = t.grad if name not in pending else pending[name] + t.grad
            count += 1
            total += value
            step_losses.append(value)
            if count == config.accumulate or pos == len(order) - 1:
                grads = {k: g / count for k, g in pending.items()}
                try:
                    adam_step(params, grads, state, config)
                except FloatingPointError as exc:
                    _abort(out_dir, last_good, mcfg, history, str(exc))
                pending, count = {}, 0
        row = {"epoch": epoch, "loss": total / len(order), "val_iou": float("nan")}
        if val_samples:
            row["val_iou"] = evaluate_prepared(params, mcfg, val_samples).iou
        history.append(row)
        log.info("%s epoch %d loss %.5f val_iou %.4f", variant, epoch, row["loss"], row["val_iou"])
        last_good = params.copy()
        if out_dir is not None:
            save_checkpoint(out_dir, params, mcfg)
            write_history(history, Path(out_dir) / "log.csv")
    return TrainResult(params, mcfg, history, time.perf_counter() - start, step_losses)


def _abort(out_dir, last_good: ModelParams, mcfg: ModelConfig, history, message: str):
    if out_dir is not None:
        save_checkpoint(out_dir, last_good, mcfg)
    raise TrainingDiverged(message, last_good, history)


def write_history(history: list[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss", "val_iou"])
        for row in history:
            w.writerow([row["epoch"], repr(row["loss"]), repr(row["val_iou"])])


# --- evaluation ------------------------------------------------------------

def eval_seed(index: int) -> int:
    """Partition seed used for the ``index``-th evaluation cloud."""
    return 1000 + index


def evaluate_prepared(params: ModelParams, mcfg: ModelConfig, preps: Sequence[Prepared],
                      names: Optional[Sequence[str]] = None) -> EvalReport:
    reports = []
    with ad.no_grad():
        for i, prep in enumerate(preps):
            sal = run(prep, params, mcfg, seed=eval_seed(i)).saliency
            name = names[i] if names else f"{i:04d}"
            reports.append(evaluate_sample(sal, prep.cloud.gt_mask, name))
    return aggregate(reports)


def evaluate(params: ModelParams, mcfg: ModelConfig, dataset: Sequence[PointCloud]) -> EvalReport:
    return evaluate_prepared(params, mcfg, [prepare_with_table(c, mcfg) for c in dataset])


# --- harnesses -------------------------------------------------------------

@dataclass
class AblationResult:
    rows: list[dict]
    runs: dict = field(default_factory=dict)


def ablation_harness(
    train_set: Sequence[PointCloud],
    test_set: Sequence[PointCloud],
    config: TrainConfig = TrainConfig(),
    seeds: Sequence[int] = (0, 1, 2),
    variants: Sequence[str] = VARIANTS,
    out_csv: Optional[str | Path] = None,
) -> AblationResult:
    """Train every variant under every seed; one row per variant with seed means."""
    runs = {}
    rows = []
    for variant in variants:
        per_seed = []
        for seed in seeds:
            res = train(train_set, replace(config, seed=seed), variant)
            report = evaluate(res.params, res.model_config, test_set)
            runs[(variant, seed)] = (res, report)
            per_seed.append(report)
            log.info("ablation %s seed %d: iou %.4f mae %.4f (%.0fs)", variant, seed, report.iou, report.mae, res.seconds)
        rows.append({
            "variant": variant,
            "mae": float(np.mean([r.mae for r in per_seed])),
            "f_measure": float(np.mean([r.f_measure for r in per_seed])),
            "e_measure": float(np.mean([r.e_measure for r in per_seed])),
            "iou": float(np.mean([r.iou for r in per_seed])),
        })
    if out_csv is not None:
        write_table(rows, ["variant", "mae", "f_measure", "e_measure", "iou"], out_csv)
    return AblationResult(rows, runs)


def subsample(cloud: PointCloud, fraction: float, seed: int) -> PointCloud:
    if fraction >= 1:
        return cloud
    n = max(1, int(round(cloud.n * fraction)))
    idx = np.sort(np.random.default_rng(seed).choice(cloud.n, size=n, replace=False))
    return cloud.subset(idx)


def density_harness(
    params: ModelParams,
    mcfg: ModelConfig,
    dataset: Sequence[PointCloud],
    factors: Sequence[float] = (1.0, 0.5, 0.25),
    seed: int = 0,
    out_csv: Optional[str | Path] = None,
) -> list[dict]:
    """MAE of a fixed model on seeded uniform subsamples of every cloud."""
    rows = []
    for factor in factors:
        clouds = [subsample(c, factor, seed + i) for i, c in enumerate(dataset)]
        rep = evaluate(params, mcfg, clouds)
        rows.append({"fraction": float(factor), "mae": rep.mae})
    if out_csv is not None:
        write_table(rows, ["fraction", "mae"], out_csv)
    return rows


def write_table(rows: list[dict], columns: Sequence[str], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for row in rows:
            w.writerow([repr(row[c]) if isinstance(row[c], float) else row[c] for c in columns])
