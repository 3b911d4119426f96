"""Local client objective: cross-entropy + supervised contrastive + classifier proximal term."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ndgrad as ng
from .datasets import AugmentationConfig, augment_two_views
from .models import ClassifierWeights, ClientModel, forward_features, forward_logits
from .ndgrad import Tensor


@dataclass(frozen=True)
class LossConfig:
    rho: float = 0.1
    temperature: float = 0.07
    enable_CL: bool = True
    enable_PR: bool = True
    squared_proximal: bool = False

    def __post_init__(self):
        if not (np.isfinite(self.temperature) and self.temperature > 0):
            raise ValueError(f"temperature must be > 0, got {self.temperature}")
        if not (np.isfinite(self.rho) and self.rho >= 0):
            raise ValueError(f"rho must be finite and >= 0, got {self.rho}")


@dataclass(frozen=True)
class LossBreakdown:
    ce: float
    cl: float
    pr: float
    total: float


def _labels(labels, n: int, num_classes: int | None = None) -> np.ndarray:
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if len(y) != n:
        raise ng.ShapeError(f"{len(y)} labels for a batch of {n}")
    if num_classes is not None and len(y) and (y.min() < 0 or y.max() >= num_classes):
        raise ValueError(f"label outside [0, {num_classes}): {y.min()}..{y.max()}")
    return y


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Batch mean of ``-log softmax(logits)[label]``."""
    if logits.data.ndim != 2 or logits.shape[0] < 1:
        raise ng.ShapeError(f"cross_entropy expects (batch>=1, classes) logits, got {logits.shape}")
    B, C = logits.shape
    y = _labels(labels, B, C)
    onehot = np.zeros((B, C), dtype=logits.dtype)
    onehot[np.arange(B), y] = 1
    logp = ng.log_softmax(logits)
    return ng.mul_scalar(ng.sum(ng.mul(logp, Tensor(onehot, dtype=logits.dtype))), -1.0 / B)


def supcon(z1: Tensor, z2: Tensor, labels, temperature: float) -> Tensor:
    """Supervised contrastive loss over the 2B stacked, L2-normalised views.

    For anchor i with positives P(i) (same label, not i), the term is
    ``-1/|P(i)| * sum_p log(exp(s_ip/t) / sum_{a != i} exp(s_ia/t))``;
    the loss averages over anchors that have at least one positive.
    """
    if not temperature > 0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    if z1.shape != z2.shape or z1.data.ndim != 2 or z1.shape[0] < 1 or z1.shape[1] < 1:
        raise ng.ShapeError(f"supcon views must be equal (B>=1, d>=1) matrices, got {z1.shape} and {z2.shape}")
    B = z1.shape[0]
    y = _labels(labels, B)
    y2 = np.concatenate([y, y])
    n = 2 * B
    not_self = ~np.eye(n, dtype=np.bool_)
    positive = (y2[:, None] == y2[None, :]) & not_self
    n_pos = positive.sum(axis=1)
    valid = n_pos > 0
    dtype = z1.dtype
    if not valid.any():
        return ng.mul_scalar(ng.sum(ng.mul_scalar(z1, 0.0)), 0.0)
    weights = np.zeros((n, n), dtype=dtype)
    weights[valid] = positive[valid] / n_pos[valid, None]

    z = ng.l2_normalize_rows(ng.concat_rows([z1, z2]))
    sim = ng.mul_scalar(ng.matmul(z, ng.transpose(z)), 1.0 / temperature)
    logp = ng.log_softmax(sim, mask=not_self)
    total = ng.sum(ng.mul(logp, Tensor(weights, dtype=dtype)))
    return ng.mul_scalar(total, -1.0 / int(valid.sum()))


def _prox_sq(local: ClassifierWeights, global_c: ClassifierWeights) -> Tensor:
    if local.weight.shape != global_c.weight.shape or local.bias.shape != global_c.bias.shape:
        raise ng.ShapeError(
            f"proximal: classifier shapes differ, {local.weight.shape}/{local.bias.shape} "
            f"vs {global_c.weight.shape}/{global_c.bias.shape}"
        )
    dw = ng.sub(local.weight, Tensor(global_c.weight.data, dtype=local.weight.dtype))
    db = ng.sub(local.bias, Tensor(global_c.bias.data, dtype=local.bias.dtype))
    return ng.add(ng.sum(ng.mul(dw, dw)), ng.sum(ng.mul(db, db)))


def proximal(local: ClassifierWeights, global_c: ClassifierWeights, squared: bool = False) -> Tensor:
    """Euclidean distance between the flattened (weight, bias) of two heads.

    The global head is treated as a constant.  With ``squared=True`` the
    squared distance is returned instead.
    """
    sq = _prox_sq(local, global_c)
    return sq if squared else ng.sqrt(sq)


def local_objective(
    model: ClientModel,
    batch,
    global_c: ClassifierWeights,
    aug: AugmentationConfig,
    cfg: LossConfig,
    nonce: int,
) -> tuple[Tensor, LossBreakdown]:
    x, y = batch
    x = np.asarray(x)
    if len(x) == 0:
        raise ValueError("local_objective: empty batch")
    x1, x2 = augment_two_views(x, aug, nonce)
    f1 = forward_features(model, x1)
    ce = cross_entropy(forward_logits(model, f1), y)
    total = ce
    cl_val = pr_val = 0.0
    if cfg.enable_CL:
        cl = supcon(f1, forward_features(model, x2), y, cfg.temperature)
        cl_val = cl.item()
        total = ng.add(total, cl)
    if cfg.enable_PR:
        pr = proximal(model.classifier, global_c, squared=cfg.squared_proximal)
        pr_val = pr.item()
        total = ng.add(total, ng.mul_scalar(pr, cfg.rho))
    ce_val = ce.item()
    # recomposed from the parts so the breakdown is exactly additive
    return total, LossBreakdown(ce_val, cl_val, pr_val, ce_val + cl_val + cfg.rho * pr_val)
