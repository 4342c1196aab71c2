"""Training objective: cross-entropy plus the class-agnostic pull/push terms."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ad
from .ad import Tensor
from .spatial import LocalAreaSet


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.01
    beta: float = 0.2
    ce_weight: float = 1.0
    agn_weight: float = 1.0
    # "F": backbone features; "G": enhanced features
    agn_on: str = "F"

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be >= 0")
        if self.agn_on not in ("F", "G"):
            raise ValueError(f"agn_on must be 'F' or 'G', got {self.agn_on!r}")


def _area_layout(areas: LocalAreaSet) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if not areas.areas:
        raise ValueError("class-agnostic loss needs at least one local area")
    sizes = np.array([len(a) for a in areas.areas])
    if np.any(sizes == 0):
        raise ValueError("local areas must be non-empty")
    rows = np.concatenate([np.asarray(a, dtype=np.intp) for a in areas.areas])
    area_id = np.repeat(np.arange(len(sizes)), sizes)
    # (1/Z) * (1/|N_i|) for every member
    weights = 1.0 / (len(sizes) * sizes[area_id].astype(np.float64))
    return rows, area_id, weights


def pull_loss(f: Tensor, areas: LocalAreaSet, alpha: float = 0.01) -> Tensor:
    """Squared hinge on each member's distance to its area's mean feature, margin ``alpha``."""
    rows, area_id, w = _area_layout(areas)
    x = ad.gather_rows(f, rows)
    means = ad.scatter_mean_rows(x, area_id, len(areas.areas))
    dist = ad.l2_norm_rows(ad.sub(x, ad.gather_rows(means, area_id)))
    term = ad.square(ad.hinge(ad.sub(dist, alpha)))
    return ad.sum_all(ad.mul(term, w))


def push_loss(f: Tensor, areas: LocalAreaSet, beta: float = 0.2) -> Tensor:
    """Squared hinge keeping object members at least ``2 * beta`` from the
    mean background feature; zero when there is no background."""
    rows, _, w = _area_layout(areas)
    if len(areas.background) == 0:
        return Tensor(0.0)
    b = ad.mean_rows(ad.gather_rows(f, areas.background))
    dist = ad.l2_norm_rows(ad.sub(ad.gather_rows(f, rows), b))
    term = ad.square(ad.hinge(ad.sub(2.0 * beta, dist)))
    return ad.sum_all(ad.mul(term, w))


def agnostic_loss(f: Tensor, areas: LocalAreaSet, config: LossConfig = LossConfig()) -> Tensor:
    return ad.add(pull_loss(f, areas, config.alpha), push_loss(f, areas, config.beta))


def cross_entropy(logits: Tensor, gt_mask) -> Tensor:
    gt = np.asarray(gt_mask)
    if gt.shape != (logits.shape[0],):
        raise ValueError(f"cross_entropy: {gt.shape} labels for {logits.shape[0]} rows")
    picked = ad.take_per_row(ad.row_log_softmax(logits), gt.astype(np.intp))
    return ad.scalar_mul(ad.mean_all(picked), -1.0)


def final_loss(trace, cloud, areas: LocalAreaSet | None, config: LossConfig = LossConfig()) -> Tensor:
    """Weighted ``ce + agn``. ``areas`` index rows of ``trace.F`` (the reduced
    cloud); pass ``None`` or ``agn_weight=0`` for cross-entropy alone."""
    if cloud.gt_mask is None:
        raise ValueError("final_loss needs a ground-truth mask")
    ce = cross_entropy(trace.logits, cloud.gt_mask)
    loss = ce if config.ce_weight == 1.0 else ad.scalar_mul(ce, config.ce_weight)
    if areas is None or config.agn_weight == 0.0:
        return loss
    feats = trace.F if config.agn_on == "F" else trace.G
    agn = agnostic_loss(feats, areas, config)
    if config.agn_weight != 1.0:
        agn = ad.scalar_mul(agn, config.agn_weight)
    return ad.add(loss, agn)
