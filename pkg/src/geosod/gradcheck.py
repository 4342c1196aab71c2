"""Finite-difference checks for every differentiable op, the losses, and the
full training objective on a small scene."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import ad
from .ad import GradCheckResult, grad_check
from .losses import LossConfig, cross_entropy, final_loss, pull_loss, push_loss
from .model import ModelConfig, ModelParams, cross_attention, geometry_enhance, prepare, run
from .pcio import PointCloud
from .spatial import LocalAreaSet, generate_local_areas
from .superpoint import SuperpointPartition, partition

TOLERANCE = 1e-5


@dataclass
class CheckOutcome:
    name: str
    result: GradCheckResult
    seconds: float

    @property
    def passed(self) -> bool:
        return self.result.n_checked > 0 and self.result.max_rel_error <= TOLERANCE


def _weighted(op: Callable, w: np.ndarray) -> Callable:
    """Reduce an op's output to a scalar through fixed random weights."""
    wt = ad.Tensor(w)
    return lambda *xs: ad.sum_all(ad.mul(op(*xs), wt))


def _op_checks(rng: np.random.Generator) -> dict[str, tuple[Callable, list]]:
    def r(*shape):
        return rng.normal(size=shape)

    def away_from_zero(*shape):
        x = rng.uniform(0.1, 1.0, size=shape) * rng.choice([-1.0, 1.0], size=shape)
        return x

    ids = np.array([0, 2, 1, 2, 0, 2])
    gather_idx = np.array([3, 0, 0, 4, 1])
    cols = np.array([1, 0, 2, 2, 1])
    return {
        "add": (_weighted(ad.add, r(5, 3)), [r(5, 3), r(1, 3)]),
        "sub": (_weighted(ad.sub, r(5, 3)), [r(5, 3), r(5, 3)]),
        "mul": (_weighted(ad.mul, r(5, 3)), [r(5, 3), r(1, 3)]),
        "scalar_mul": (_weighted(lambda x: ad.scalar_mul(x, -1.7), r(4, 3)), [r(4, 3)]),
        "relu": (_weighted(ad.relu, r(5, 4)), [away_from_zero(5, 4)]),
        "hinge": (_weighted(ad.hinge, r(6)), [away_from_zero(6)]),
        "square": (_weighted(ad.square, r(5, 3)), [r(5, 3)]),
        "matmul": (_weighted(ad.matmul, r(4, 2)), [r(4, 3), r(3, 2)]),
        "transpose": (_weighted(ad.transpose, r(3, 5)), [r(5, 3)]),
        "row_softmax": (_weighted(ad.row_softmax, r(4, 5)), [r(4, 5)]),
        "row_log_softmax": (_weighted(ad.row_log_softmax, r(4, 5)), [r(4, 5)]),
        "l2_norm_rows": (_weighted(ad.l2_norm_rows, r(5)), [r(5, 3)]),
        "mean_rows": (_weighted(ad.mean_rows, r(1, 3)), [r(6, 3)]),
        "mean_all": (lambda x: ad.scalar_mul(ad.mean_all(ad.square(x)), 1.0), [r(4, 3)]),
        "sum_all": (lambda x: ad.sum_all(ad.square(x)), [r(4, 3)]),
        "concat_rows": (_weighted(lambda a, b: ad.concat_rows([a, b]), r(5, 3)), [r(2, 3), r(3, 3)]),
        "gather_rows": (_weighted(lambda x: ad.gather_rows(x, gather_idx), r(5, 3)), [r(5, 3)]),
        "scatter_mean_rows": (_weighted(lambda x: ad.scatter_mean_rows(x, ids, 3), r(3, 2)), [r(6, 2)]),
        "take_per_row": (_weighted(lambda x: ad.take_per_row(x, cols), r(5)), [r(5, 3)]),
        "attention": (_weighted(ad.attention, r(4, 3)), [r(4, 2), r(6, 2), r(6, 3)]),
    }


def small_scene(n: int = 32, seed: int = 0) -> PointCloud:
    """A random cloud with two clearly separated classes."""
    rng = np.random.default_rng(seed)
    mask = np.zeros(n, dtype=np.uint8)
    mask[: n // 2] = 1
    rng.shuffle(mask)
    pos = rng.uniform(0, 1, size=(n, 3))
    pos[mask == 1] += (0.5, 0.0, 0.0)
    col = np.where(mask[:, None] == 1, (0.8, 0.2, 0.2), (0.4, 0.4, 0.4)) + rng.normal(0, 0.05, size=(n, 3))
    return PointCloud(pos, np.clip(col, 0, 1), mask)


def _model_fixture(seed: int = 0):
    cloud = small_scene(seed=seed)
    mcfg = ModelConfig(channels=8, layers=2, sp_k=4, variant="+SP+GE+CA")
    params = ModelParams.init(mcfg, seed)
    # random (non-zero) biases keep ReLUs away from exact zeros
    rng = np.random.default_rng(seed + 1)
    for name, arr in params.arrays.items():
        if name.endswith(".b"):
            arr[...] = rng.normal(0, 0.1, size=arr.shape)
    prep = prepare(cloud, mcfg)
    with ad.no_grad():
        trace = run(prep, params, mcfg, seed=seed)
    part = trace.partition
    areas = generate_local_areas(prep.reduced, area_count=3, area_size=4, seed=seed)
    return cloud, mcfg, params, prep, part, areas


def _loss_checks(seed: int) -> dict[str, tuple[Callable, list]]:
    rng = np.random.default_rng(seed)
    n, c = 12, 4
    mask = np.array([1, 1, 1, 1, 1, 1, 0, 0, 0, 0, 0, 0], dtype=np.uint8)
    areas = LocalAreaSet([np.array([0, 1, 2]), np.array([2, 3, 4, 5])], np.flatnonzero(mask == 0))
    f = rng.normal(size=(n, c))
    # push margins: scale object features so some distances fall inside 2*beta and none sit on it
    f_push = f * 0.15
    logits = rng.normal(size=(n, 2))
    cfg = LossConfig(alpha=0.01, beta=0.2)
    return {
        "pull_loss": (lambda x: pull_loss(x, areas, cfg.alpha), [f]),
        "push_loss": (lambda x: push_loss(x, areas, cfg.beta), [f_push]),
        "cross_entropy": (lambda z: cross_entropy(z, mask), [logits]),
    }


def _model_checks(seed: int) -> dict[str, tuple[Callable, list]]:
    cloud, mcfg, params, prep, part, areas = _model_fixture(seed)
    names = params.names()
    rng = np.random.default_rng(seed + 2)
    u0 = rng.normal(size=(5, mcfg.channels))
    f0 = rng.normal(size=(9, mcfg.channels))
    attn_names = ["attn.wq", "attn.wk", "attn.wv", "attn.wo"]
    w_attn = rng.normal(size=(5, mcfg.channels))
    small_part = SuperpointPartition.from_ids(np.array([0, 1, 0, 2, 1, 2, 0, 3, 3]))
    w_ge = rng.normal(size=(9, mcfg.channels))

    def attn(u, f, *ws):
        p = dict(zip(attn_names, ws))
        return ad.sum_all(ad.mul(cross_attention(u, f, p), ad.Tensor(w_attn)))

    def ge(f, *ws):
        p = dict(zip(attn_names, ws))
        return ad.sum_all(ad.mul(geometry_enhance(f, small_part, p)[0], ad.Tensor(w_ge)))

    lcfg = LossConfig()

    def full(*arrays):
        p = dict(zip(names, arrays))
        trace = run(prep, p, mcfg, seed=seed, part=part)
        return final_loss(trace, cloud, areas, lcfg)

    attn_ws = [params.arrays[k] for k in attn_names]
    return {
        "cross_attention": (attn, [u0, f0, *attn_ws]),
        "geometry_enhance": (ge, [f0, *attn_ws]),
        "final_loss": (full, [params.arrays[k] for k in names]),
    }


def all_checks(seed: int = 0) -> dict[str, tuple[Callable, list]]:
    checks = _op_checks(np.random.default_rng(seed))
    checks.update(_loss_checks(seed))
    checks.update(_model_checks(seed))
    return checks


def run_suite(seed: int = 0, only: list[str] | None = None, h: float = 1e-6) -> list[CheckOutcome]:
    out = []
    for name, (fn, inputs) in all_checks(seed).items():
        if only is not None and name not in only:
            continue
        t = time.perf_counter()
        res = grad_check(fn, inputs, h=h)
        out.append(CheckOutcome(name, res, time.perf_counter() - t))
    return out


def format_summary(outcomes: list[CheckOutcome]) -> str:
    lines = []
    for o in outcomes:
        status = "PASS" if o.passed else "FAIL"
        lines.append(f"{status} {o.name:<18} max_rel_error={o.result.max_rel_error:.3e} "
                     f"checked={o.result.n_checked} skipped={len(o.result.skipped)}")
    failed = [o.name for o in outcomes if not o.passed]
    lines.append("all checks passed" if not failed else f"failed: {', '.join(failed)}")
    return "\n".join(lines)
