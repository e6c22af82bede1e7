"""Boundary/integrity separation of a coarse prediction and the cross-modal attention fusion block."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ShapeError

TAU = 0.1
TOKEN_LIMIT = 32


# --------------------------------------------------------------------------- separation math


@dataclass
class BoundaryArtifacts:
    prev_prediction: torch.Tensor
    pooled: torch.Tensor
    boundary: torch.Tensor
    integrity: torch.Tensor
    patch_scores: torch.Tensor
    tau: float


def _same_shape(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def pool_prediction(p: torch.Tensor) -> torch.Tensor:
    """Stride-1 average pool with kernel (h/8, w/8) and replicate padding; output keeps h x w."""
    h, w = p.shape[-2:]
    if h < 8 or w < 8:
        raise ShapeError(f"prediction {h}x{w} is smaller than 8x8")
    kh, kw = h // 8, w // 8
    top, left = (kh - 1) // 2, (kw - 1) // 2
    padded = F.pad(p, (left, kw - 1 - left, top, kh - 1 - top), mode="replicate")
    return F.avg_pool2d(padded, (kh, kw), stride=1)


def boundary_map(p: torch.Tensor, pooled: torch.Tensor, tau: float = TAU) -> torch.Tensor:
    _same_shape(p, pooled)
    return ((p - pooled).abs() > tau).to(p.dtype)


def integrity_map(p: torch.Tensor, boundary: torch.Tensor) -> torch.Tensor:
    _same_shape(p, boundary)
    return F.relu(p - boundary)


def patch_boundary_scores(boundary: torch.Tensor, g: int) -> torch.Tensor:
    """B x 1 x h x w boundary map -> B x g*g indicator of patches holding any boundary pixel."""
    b, c, h, w = boundary.shape
    if h % g or w % g:
        raise ShapeError(f"{h}x{w} boundary map is not divisible into a {g}x{g} grid")
    per_patch = boundary.reshape(b, c, g, h // g, g, w // g).amax(dim=(1, 3, 5))
    return (per_patch > 0).to(boundary.dtype).reshape(b, g * g)


def separate_boundary(prev_prediction: torch.Tensor, g: int, tau: float = TAU) -> BoundaryArtifacts:
    pooled = pool_prediction(prev_prediction)
    boundary = boundary_map(prev_prediction, pooled, tau)
    return BoundaryArtifacts(
        prev_prediction=prev_prediction,
        pooled=pooled,
        boundary=boundary,
        integrity=integrity_map(prev_prediction, boundary),
        patch_scores=patch_boundary_scores(boundary, g),
        tau=tau,
    )


# --------------------------------------------------------------------------- attention block


class SwiGLU(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.gate = nn.Linear(dim, hidden, bias=False)
        self.up = nn.Linear(dim, hidden, bias=False)
        self.down = nn.Linear(hidden, dim, bias=False)

    def forward(self, x):
        return self.down(F.silu(self.gate(x)) * self.up(x))


class CoABlock(nn.Module):
    """Cross-modal attention: query tokens attend to context tokens, then a gated FFN.

    ``out = q2 + FFN(norm(q2))`` with ``q2 = query + norm(attn(query, context))``.
    With ``zero_init`` the output and FFN-down projections start at zero so the
    block is an exact identity on ``query``.
    """

    def __init__(self, query_dim: int, context_dim: int, head_count: int = 4, ffn_mult: float = 2.0,
                 zero_init: bool = True, eps: float = 1e-6):
        super().__init__()
        if query_dim % head_count:
            raise ShapeError(f"query_dim {query_dim} not divisible by head_count {head_count}")
        self.query_dim = query_dim
        self.context_dim = context_dim
        self.head_count = head_count
        self.norm_q = nn.RMSNorm(query_dim, eps=eps)
        self.norm_kv = nn.RMSNorm(context_dim, eps=eps)
        self.to_q = nn.Linear(query_dim, query_dim, bias=False)
        self.to_k = nn.Linear(context_dim, query_dim, bias=False)
        self.to_v = nn.Linear(context_dim, query_dim, bias=False)
        self.to_out = nn.Linear(query_dim, query_dim, bias=False)
        self.norm_attn = nn.RMSNorm(query_dim, eps=eps)
        self.norm_ffn = nn.RMSNorm(query_dim, eps=eps)
        self.ffn = SwiGLU(query_dim, int(round(query_dim * ffn_mult)))
        if zero_init:
            nn.init.zeros_(self.to_out.weight)
            nn.init.zeros_(self.ffn.down.weight)

    def _heads(self, x):
        b, n, _ = x.shape
        return x.reshape(b, n, self.head_count, -1).transpose(1, 2)

    def attention_weights(self, query: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        q = self._heads(self.to_q(self.norm_q(query)))
        k = self._heads(self.to_k(self.norm_kv(context)))
        return torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1]), dim=-1)

    def forward(self, query: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        if query.ndim != 3 or query.shape[-1] != self.query_dim:
            raise ShapeError(f"query {tuple(query.shape)} does not match query_dim {self.query_dim}")
        if context.ndim != 3 or context.shape[-1] != self.context_dim or context.shape[0] != query.shape[0]:
            raise ShapeError(f"context {tuple(context.shape)} does not match context_dim {self.context_dim}")
        kv = self.norm_kv(context)
        q = self._heads(self.to_q(self.norm_q(query)))
        k = self._heads(self.to_k(kv))
        v = self._heads(self.to_v(kv))
        mixed = F.scaled_dot_product_attention(q, k, v).transpose(1, 2).reshape(query.shape)
        q2 = query + self.norm_attn(self.to_out(mixed))
        return q2 + self.ffn(self.norm_ffn(q2))


def coa_forward(block: CoABlock, query_seq: torch.Tensor, context_seq: torch.Tensor) -> torch.Tensor:
    return block(query_seq, context_seq)


# --------------------------------------------------------------------------- FSE


@dataclass
class FusedStageFeatures:
    visual: torch.Tensor
    depth: torch.Tensor
    patch: torch.Tensor
    pooled_visual: torch.Tensor
    pooled_depth: torch.Tensor
    pooled_patch: torch.Tensor
    fn_patch: torch.Tensor
    fn_depth: torch.Tensor
    fn_visual1: torch.Tensor
    fn_visual2: torch.Tensor
    boundary: BoundaryArtifacts | None


def _tokens(x: torch.Tensor) -> torch.Tensor:
    return x.flatten(2).transpose(1, 2)


def _untokens(x: torch.Tensor, h: int, w: int) -> torch.Tensor:
    return x.transpose(1, 2).reshape(x.shape[0], -1, h, w)


def token_factor(size: int, g: int, aligned: bool, limit: int = TOKEN_LIMIT) -> int:
    """Smallest pooling factor bringing ``size`` to at most ``limit`` tokens.

    When ``aligned`` the factor must divide the patch side so no pooling window
    straddles two patches.
    """
    base = size // g if aligned else size
    if aligned and size % g:
        raise ShapeError(f"stage size {size} not divisible by patch grid {g}")
    k = max(1, math.ceil(size / limit))
    while base % k:
        k += 1
    return k


class FSE(nn.Module):
    """Feature selection and extraction for one decoder stage (four CoA blocks)."""

    def __init__(self, dim: int, head_count: int = 4, zero_init: bool = True, tau: float = TAU,
                 token_limit: int = TOKEN_LIMIT):
        super().__init__()
        self.tau = tau
        self.token_limit = token_limit
        self.blocks = nn.ModuleList(CoABlock(dim, dim, head_count, zero_init=zero_init) for _ in range(4))

    def forward(self, f_v, f_d, f_p, prev_pred, g, use_integrity=True, use_patch_scores=True):
        return fse_forward(f_v, f_d, f_p, prev_pred, self.blocks, g, self.tau, use_integrity, use_patch_scores,
                           self.token_limit)


def fse_forward(
    f_v: torch.Tensor,
    f_d: torch.Tensor,
    f_p: torch.Tensor,
    prev_pred: torch.Tensor | None,
    blocks,
    g: int,
    tau: float = TAU,
    use_integrity: bool = True,
    use_patch_scores: bool = True,
    token_limit: int = TOKEN_LIMIT,
) -> FusedStageFeatures:
    """Fuse one stage's visual, depth and patch features.

    ``prev_pred=None`` is the deepest-stage bootstrap: patch scores and the
    integrity map are all ones. The three outputs are residual updates, so with
    zero-initialized blocks they equal the inputs exactly.
    """
    if not (f_v.shape == f_d.shape == f_p.shape):
        raise ShapeError(f"stage features differ: {tuple(f_v.shape)}, {tuple(f_d.shape)}, {tuple(f_p.shape)}")
    b, c, h, w = f_v.shape
    bootstrap = prev_pred is None
    if bootstrap:
        artifacts = None
        integrity = f_v.new_ones(b, 1, h, w)
        scores = f_v.new_ones(b, g * g)
    else:
        if prev_pred.shape[-2:] != (h, w):
            prev_pred = F.interpolate(prev_pred, size=(h, w), mode="bilinear", align_corners=False)
        artifacts = separate_boundary(prev_pred, g, tau)
        integrity = artifacts.integrity
        scores = artifacts.patch_scores
    if not use_integrity:
        integrity = torch.ones_like(integrity)
    if not use_patch_scores:
        scores = torch.ones_like(scores)

    kh = token_factor(h, g, not bootstrap, token_limit)
    kw = token_factor(w, g, not bootstrap, token_limit)
    th, tw = h // kh, w // kw
    fp_v = F.avg_pool2d(f_v, (kh, kw))
    fp_d = F.avg_pool2d(f_d, (kh, kw))
    fp_p = F.avg_pool2d(f_p, (kh, kw))
    s_tok = F.avg_pool2d(integrity, (kh, kw))
    if th % g == 0 and tw % g == 0:
        gate = scores.reshape(b, 1, g, g).repeat_interleave(th // g, 2).repeat_interleave(tw // g, 3)
    elif bool((scores == 1).all()):
        gate = f_v.new_ones(b, 1, th, tw)
    else:
        raise ShapeError(f"token grid {th}x{tw} cannot carry {g}x{g} patch scores")

    q_p = _tokens(fp_p * (1 + gate))
    q_d = _tokens(fp_d * (1 + s_tok))
    q_v = _tokens(f_v)
    t_v = _tokens(fp_v)
    fn_p = blocks[0](q_p, torch.cat([t_v, _tokens(fp_d)], dim=1))
    fn_d = blocks[1](q_d, torch.cat([t_v, _tokens(fp_p)], dim=1))
    fn_v1 = blocks[2](q_v, fn_p)
    fn_v2 = blocks[3](fn_v1, fn_d)

    def up(x):
        return x if (th, tw) == (h, w) else F.interpolate(x, size=(h, w), mode="bilinear", align_corners=False)

    return FusedStageFeatures(
        visual=f_v + _untokens(fn_v2 - q_v, h, w),
        depth=f_d + up(_untokens(fn_d - q_d, th, tw)),
        patch=f_p + up(_untokens(fn_p - q_p, th, tw)),
        pooled_visual=fp_v,
        pooled_depth=fp_d,
        pooled_patch=fp_p,
        fn_patch=fn_p,
        fn_depth=fn_d,
        fn_visual1=fn_v1,
        fn_visual2=fn_v2,
        boundary=artifacts,
    )
