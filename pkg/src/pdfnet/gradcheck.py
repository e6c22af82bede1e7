"""Batched central-difference gradient checks for per-sample loss functions."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from . import losses
from .network import PdfnetOutputs

STEP = 1e-5


FLOOR = 1e-3


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a - n| / max(|a|, |n|, FLOOR * max|n|) over all entries.

    The floor keeps entries far below the gradient's scale, where the O(h^2)
    truncation of the central difference dominates, from reading as failures.
    """
    floor = FLOOR * max(np.abs(numeric).max(), 1e-300)
    den = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float((np.abs(analytic - numeric) / den).max())


def check(fn: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor, step: float = STEP) -> float:
    """Compare autograd against central differences for ``fn`` (batch 1 in, per-sample values out)."""
    x = x.detach().to(torch.float64)
    xg = x.clone().requires_grad_(True)
    (analytic,) = torch.autograd.grad(fn(xg).sum(), xg)
    n = x.numel()
    eye = torch.eye(n, dtype=x.dtype).reshape(n, *x.shape[1:]) * step
    with torch.no_grad():
        plus = fn(x + eye)
        minus = fn(x - eye)
    numeric = ((plus - minus) / (2 * step)).reshape(x.shape)
    return relative_error(analytic.numpy(), numeric.numpy())


@dataclass
class Instance:
    pred: torch.Tensor
    logits: torch.Tensor
    mask: torch.Tensor
    depth: torch.Tensor
    depth_pred: torch.Tensor


def random_instance(seed: int, size: int = 8) -> Instance:
    g = torch.Generator().manual_seed(seed)
    shape = (1, 1, size, size)
    pred = 0.02 + 0.96 * torch.rand(shape, generator=g, dtype=torch.float64)
    mask = (torch.rand(shape, generator=g, dtype=torch.float64) > 0.5).double()
    depth = 0.05 + 0.9 * torch.rand(shape, generator=g, dtype=torch.float64)
    depth_pred = 0.05 + 0.9 * torch.rand(shape, generator=g, dtype=torch.float64)
    return Instance(pred, torch.logit(pred), mask, depth, depth_pred)


def _expand(t: torch.Tensor, n: int) -> torch.Tensor:
    return t.expand(n, *t.shape[1:])


def _synthetic_outputs(final_logit, depth_logit, stage_logits, stage_depth_logits) -> PdfnetOutputs:
    return PdfnetOutputs(stage_logits=stage_logits, final_logit=final_logit,
                         stage_depth_logits=stage_depth_logits, final_depth_logit=depth_logit)


def loss_checks(inst: Instance) -> dict[str, float]:
    """Max relative gradient error of every differentiable loss on one instance."""
    m, d = inst.mask, inst.depth
    cfg = losses.LossConfig()

    def prior(fn):
        return lambda p: fn(p, _expand(m, p.shape[0]), _expand(d, p.shape[0]), reduction="none")

    def total(z):
        b = z.shape[0]
        stage_logits = [torch.nn.functional.interpolate(z, size=(s, s), mode="area") for s in (1, 1, 2, 4, 8)]
        stage_depth = [torch.nn.functional.interpolate(z * 0.5, size=(s, s), mode="area") for s in (1, 1, 2, 4, 8)]
        out = _synthetic_outputs(z, 0.3 * z, stage_logits, stage_depth)
        return losses.total_loss(out, _expand(m, b), _expand(d, b), cfg, reduction="none").total

    return {
        "l_v": check(prior(losses.depth_stability_loss), inst.pred),
        "l_g": check(prior(losses.depth_continuity_loss), inst.pred),
        "l_inte": check(lambda p: losses.integrity_prior_loss(
            p, _expand(m, p.shape[0]), _expand(d, p.shape[0]), reduction="none")[0], inst.pred),
        "wbce": check(lambda z: losses.weighted_bce(z, _expand(m, z.shape[0]), reduction="none"), inst.logits),
        "wiou": check(lambda p: losses.weighted_iou(p, _expand(m, p.shape[0]), reduction="none"), inst.pred),
        "ssim": check(lambda p: losses.ssim_loss(p, _expand(m, p.shape[0]), reduction="none"), inst.pred),
        "silog": check(lambda q: losses.silog_loss(q, _expand(d, q.shape[0]), reduction="none"), inst.depth_pred),
        "stage": check(lambda z: losses.stage_loss(
            z, _expand(m, z.shape[0]), _expand(d, z.shape[0]), cfg, reduction="none").total, inst.logits),
        "total": check(total, inst.logits),
    }


def run(seeds: int = 100) -> dict[str, float]:
    """Worst relative error per loss over ``seeds`` random 8x8 instances."""
    worst: dict[str, float] = {}
    for s in range(seeds):
        for k, v in loss_checks(random_instance(s)).items():
            worst[k] = max(worst.get(k, 0.0), v)
    return worst
