"""Segmentation and depth objectives, including the depth integrity-prior loss.

Every loss reduces to a per-sample pixel mean first and then averages over the
batch; pass ``reduction="none"`` to get the per-sample vector.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import torch
import torch.nn.functional as F

from .errors import NumericsError, ShapeError

LOG_EPS = 1e-7
SILOG_EPS = 1e-6
SILOG_LAMBDA = 0.85
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


def _check(*tensors: torch.Tensor) -> None:
    shape = tensors[0].shape
    for t in tensors:
        if t.shape != shape:
            raise ShapeError(f"loss inputs differ in shape: {tuple(t.shape)} vs {tuple(shape)}")
        if not torch.isfinite(t).all():
            raise NumericsError("non-finite loss input")


def _reduce(per_sample: torch.Tensor, reduction: str) -> torch.Tensor:
    if reduction == "mean":
        return per_sample.mean()
    if reduction == "none":
        return per_sample
    raise ValueError(f"unknown reduction {reduction!r}")


def _pixel_mean(x: torch.Tensor) -> torch.Tensor:
    return x.flatten(1).mean(1)


# --------------------------------------------------------------------------- integrity prior


@dataclass
class DepthPriorTerms:
    mu: torch.Tensor  # B, masked mean depth (NaN where the mask is empty)
    diff: torch.Tensor
    p_y: torch.Tensor
    fp: torch.Tensor
    fn: torch.Tensor
    g_x: torch.Tensor
    g_y: torch.Tensor
    neg_log: torch.Tensor

    @property
    def stability_weight(self) -> torch.Tensor:
        """Per-pixel factor multiplying -log(P_y) in the stability term."""
        return self.diff * (self.fp - self.fn) + self.fn

    @property
    def stability_map(self) -> torch.Tensor:
        return self.neg_log * self.stability_weight

    @property
    def continuity_map(self) -> torch.Tensor:
        return self.neg_log * (self.g_x.abs() + self.g_y.abs())


def mask_mean_depth(depth: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Per-sample mean depth over the mask; NaN marks an empty mask."""
    _check(depth, mask)
    total = mask.flatten(1).sum(1)
    mu = (depth * mask).flatten(1).sum(1) / total.clamp_min(1)
    return torch.where(total > 0, mu, torch.full_like(mu, float("nan")))




def sobel(depth: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    # separable form: central difference first, then [1, 2, 1] smoothing, so flat regions give exact zeros
    p = F.pad(depth, (1, 1, 1, 1), mode="replicate")
    dx = p[..., :, 2:] - p[..., :, :-2]
    dy = p[..., 2:, :] - p[..., :-2, :]
    g_x = dx[..., :-2, :] + 2 * dx[..., 1:-1, :] + dx[..., 2:, :]
    g_y = dy[..., :, :-2] + 2 * dy[..., :, 1:-1] + dy[..., :, 2:]
    return g_x, g_y


def prior_terms(pred: torch.Tensor, mask: torch.Tensor, depth: torch.Tensor) -> DepthPriorTerms:
    _check(pred, mask, depth)
    mu = mask_mean_depth(depth, mask)
    mu_safe = torch.nan_to_num(mu, nan=0.0).view(-1, 1, 1, 1)
    p_y = pred * mask + (1 - pred) * (1 - mask)
    g_x, g_y = sobel(depth)
    return DepthPriorTerms(
        mu=mu,
        diff=(depth - mu_safe) ** 2,
        p_y=p_y,
        fp=(1 - p_y) * pred,
        fn=(1 - p_y) * mask,
        g_x=g_x,
        g_y=g_y,
        neg_log=-torch.log(p_y.clamp(LOG_EPS, 1.0)),
    )


def _stability(terms: DepthPriorTerms) -> torch.Tensor:
    per_sample = _pixel_mean(terms.stability_map)
    return torch.where(torch.isnan(terms.mu), torch.zeros_like(per_sample), per_sample)


def _continuity(terms: DepthPriorTerms) -> torch.Tensor:
    return _pixel_mean(terms.continuity_map)


def depth_stability_loss(pred, mask, depth, reduction: str = "mean") -> torch.Tensor:
    return _reduce(_stability(prior_terms(pred, mask, depth)), reduction)


def depth_continuity_loss(pred, mask, depth, reduction: str = "mean") -> torch.Tensor:
    return _reduce(_continuity(prior_terms(pred, mask, depth)), reduction)


def integrity_prior_loss(pred, mask, depth, reduction: str = "mean") -> tuple[torch.Tensor, DepthPriorTerms]:
    terms = prior_terms(pred, mask, depth)
    return _reduce((_stability(terms) + _continuity(terms)) / 2, reduction), terms


# --------------------------------------------------------------------------- segmentation terms


def boundary_weights(mask: torch.Tensor) -> torch.Tensor:
    # separable 31x31 box mean; border windows average only the in-image pixels
    pooled = F.avg_pool2d(mask, (1, 31), stride=1, padding=(0, 15), count_include_pad=False)
    pooled = F.avg_pool2d(pooled, (31, 1), stride=1, padding=(15, 0), count_include_pad=False)
    return 1 + 5 * (pooled - mask).abs()


def weighted_bce(logits: torch.Tensor, mask: torch.Tensor, reduction: str = "mean") -> torch.Tensor:
    _check(logits, mask)
    w = boundary_weights(mask)
    bce = F.binary_cross_entropy_with_logits(logits, mask, reduction="none")
    return _reduce((w * bce).flatten(1).sum(1) / w.flatten(1).sum(1), reduction)


def weighted_iou(pred: torch.Tensor, mask: torch.Tensor, reduction: str = "mean") -> torch.Tensor:
    _check(pred, mask)
    w = boundary_weights(mask)
    inter = (w * pred * mask).flatten(1).sum(1)
    union = (w * (pred + mask - pred * mask)).flatten(1).sum(1)
    safe = torch.where(union > 0, union, torch.ones_like(union))
    return _reduce(torch.where(union > 0, 1 - inter / safe, torch.zeros_like(union)), reduction)


def gaussian_window(size: int = 11, sigma: float = 1.5, dtype=torch.float64) -> torch.Tensor:
    x = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    g = torch.exp(-(x**2) / (2 * sigma**2))
    g = g / g.sum()
    return torch.outer(g, g).to(dtype)


def ssim_map(x: torch.Tensor, y: torch.Tensor, size: int = 11, sigma: float = 1.5) -> torch.Tensor:
    win = gaussian_window(size, sigma, x.dtype).to(x.device)[None, None]
    pad = size // 2

    def filt(t):
        return F.conv2d(t, win, padding=pad)

    mu_x, mu_y = filt(x), filt(y)
    sxx = filt(x * x) - mu_x * mu_x
    syy = filt(y * y) - mu_y * mu_y
    sxy = filt(x * y) - mu_x * mu_y
    num = (2 * mu_x * mu_y + SSIM_C1) * (2 * sxy + SSIM_C2)
    den = (mu_x * mu_x + mu_y * mu_y + SSIM_C1) * (sxx + syy + SSIM_C2)
    return num / den


def ssim_loss(pred: torch.Tensor, mask: torch.Tensor, reduction: str = "mean") -> torch.Tensor:
    _check(pred, mask)
    if pred.shape[1] != 1:
        raise ShapeError("ssim_loss expects single-channel maps")
    return _reduce(1 - _pixel_mean(ssim_map(pred, mask)), reduction)


def silog_loss(d_pred: torch.Tensor, d_target: torch.Tensor, lam: float = SILOG_LAMBDA,
               reduction: str = "mean") -> torch.Tensor:
    _check(d_pred, d_target)
    d = torch.log(d_pred.clamp_min(SILOG_EPS)) - torch.log(d_target.clamp_min(SILOG_EPS))
    d = d.flatten(1)
    inner = (d * d).mean(1) - lam * d.mean(1) ** 2
    positive = inner > 0
    val = torch.where(positive, torch.sqrt(torch.where(positive, inner, torch.ones_like(inner))),
                      torch.zeros_like(inner))
    return _reduce(val, reduction)


# --------------------------------------------------------------------------- combined objectives


@dataclass(frozen=True)
class LossConfig:
    lambda1: float = 0.5
    lambda2: float = 0.1
    silog_lambda: float = SILOG_LAMBDA
    use_wbce: bool = True
    use_wiou: bool = True
    use_ssim: bool = True
    use_inte: bool = True
    use_silog: bool = True


@dataclass
class StageLoss:
    total: torch.Tensor
    wbce: torch.Tensor
    wiou: torch.Tensor
    ssim: torch.Tensor
    l_v: torch.Tensor
    l_g: torch.Tensor
    inte: torch.Tensor


def stage_loss(logits: torch.Tensor, mask: torch.Tensor, depth: torch.Tensor,
               cfg: LossConfig = LossConfig(), reduction: str = "mean") -> StageLoss:
    """wBCE + wIoU + SSIM/2 + integrity prior on one prediction; disabled terms report 0."""
    pred = torch.sigmoid(logits)
    zero = _reduce(logits.new_zeros(logits.shape[0]), reduction)
    wbce = weighted_bce(logits, mask, reduction) if cfg.use_wbce else zero
    wiou = weighted_iou(pred, mask, reduction) if cfg.use_wiou else zero
    ssim = ssim_loss(pred, mask, reduction) if cfg.use_ssim else zero
    if cfg.use_inte:
        terms = prior_terms(pred, mask, depth)
        l_v, l_g = _reduce(_stability(terms), reduction), _reduce(_continuity(terms), reduction)
        inte = (l_v + l_g) / 2
    else:
        l_v = l_g = inte = zero
    # parts are reduced first so the reported total is exactly their combination
    total = wbce + wiou + ssim / 2 + inte
    return StageLoss(total=total, wbce=wbce, wiou=wiou, ssim=ssim, l_v=l_v, l_g=l_g, inte=inte)


@dataclass
class LossReport:
    l_wbce: torch.Tensor
    l_wiou: torch.Tensor
    l_ssim: torch.Tensor
    l_v: torch.Tensor
    l_g: torch.Tensor
    l_inte: torch.Tensor
    l_f: torch.Tensor
    stage_losses: list[torch.Tensor]  # l^i_f, deepest stage first
    l_silog: torch.Tensor
    stage_silog: list[torch.Tensor]
    total: torch.Tensor
    lambda1: float = 0.5
    lambda2: float = 0.1
    stage_parts: list[StageLoss] = field(default_factory=list, repr=False)

    def recombine(self) -> torch.Tensor:
        return combine(self.l_f, self.stage_losses, self.l_silog, self.stage_silog, self.lambda1, self.lambda2)

    def as_dict(self) -> dict[str, float]:
        out = {}
        for f in fields(self):
            if f.name == "stage_parts":
                continue
            v = getattr(self, f.name)
            if isinstance(v, list):
                for i, t in enumerate(v):
                    out[f"{f.name}_{5 - i}"] = float(t.detach().mean())
            elif isinstance(v, torch.Tensor):
                out[f.name] = float(v.detach().mean())
            else:
                out[f.name] = v
        return out


def combine(l_f, stage_losses, l_silog, stage_silog, lambda1, lambda2):
    seg = l_f + lambda1 * sum(stage_losses[1:], stage_losses[0])
    depth = l_silog + lambda1 * sum(stage_silog[1:], stage_silog[0])
    return seg + lambda2 * depth


def downsample_targets(mask: torch.Tensor, depth: torch.Tensor, size) -> tuple[torch.Tensor, torch.Tensor]:
    """Area-average to ``size``; masks are re-binarized at 0.5."""
    if tuple(mask.shape[-2:]) == tuple(size):
        return mask, depth
    m = (F.interpolate(mask, size=size, mode="area") >= 0.5).to(mask.dtype)
    return m, F.interpolate(depth, size=size, mode="area")


def total_loss(outputs, mask: torch.Tensor, depth_target: torch.Tensor, cfg: LossConfig = LossConfig(),
               reduction: str = "mean") -> LossReport:
    """Deep-supervised objective over the five stage outputs and the final output."""
    final = stage_loss(outputs.final_logit, mask, depth_target, cfg, reduction)
    stages, parts, silogs = [], [], []
    depth_on = cfg.use_silog and cfg.lambda2 != 0
    zero = outputs.final_logit.new_zeros(() if reduction == "mean" else (mask.shape[0],))
    for logit, dlogit in zip(outputs.stage_logits, outputs.stage_depth_logits):
        m_i, d_i = downsample_targets(mask, depth_target, logit.shape[-2:])
        part = stage_loss(logit, m_i, d_i, cfg, reduction)
        parts.append(part)
        stages.append(part.total)
        silogs.append(silog_loss(torch.sigmoid(dlogit), d_i, cfg.silog_lambda, reduction) if depth_on else zero)
    l_silog = (silog_loss(torch.sigmoid(outputs.final_depth_logit), depth_target, cfg.silog_lambda, reduction)
               if depth_on else zero)
    total = combine(final.total, stages, l_silog, silogs, cfg.lambda1, cfg.lambda2)
    return LossReport(
        l_wbce=final.wbce, l_wiou=final.wiou, l_ssim=final.ssim, l_v=final.l_v, l_g=final.l_g,
        l_inte=final.inte, l_f=final.total, stage_losses=stages, l_silog=l_silog, stage_silog=silogs,
        total=total, lambda1=cfg.lambda1, lambda2=cfg.lambda2, stage_parts=parts,
    )
