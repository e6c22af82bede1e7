"""Three-branch encoder, FSE refinement decoder, depth-refinement decoder and final merging."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .data import DepthTriplet, PatchGrid, check_divisible, partition_patches, reassemble_patches
from .errors import ShapeError
from .fse import FSE, FusedStageFeatures

STAGE_STRIDES = (4, 8, 16, 32)


@dataclass(frozen=True)
class BackboneConfig:
    stage_channels: tuple[int, int, int, int] = (32, 64, 128, 256)
    block_depths: tuple[int, int, int, int] = (1, 1, 1, 1)
    width_scale: float = 1.0
    stage_strides: tuple[int, int, int, int] = STAGE_STRIDES

    def __post_init__(self):
        if tuple(self.stage_strides) != STAGE_STRIDES:
            raise ValueError(f"stage strides are fixed to {STAGE_STRIDES}")
        if len(self.stage_channels) != 4 or len(self.block_depths) != 4:
            raise ValueError("backbone needs exactly 4 stages")
        if any(c <= 0 for c in self.stage_channels) or list(self.stage_channels) != sorted(self.stage_channels):
            raise ValueError("stage channels must be positive and non-decreasing")

    @property
    def channels(self) -> tuple[int, ...]:
        return tuple(max(4, int(round(c * self.width_scale))) for c in self.stage_channels)

    def scaled(self, factor: float) -> "BackboneConfig":
        return BackboneConfig(self.stage_channels, self.block_depths, self.width_scale * factor)


@dataclass(frozen=True)
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    patch_width_scale: float = 0.5
    share_patch_encoder: bool = False
    decoder_channels: int = 64
    head_count: int = 4
    patch_grid: int = 8
    tau: float = 0.1
    token_limit: int = 32
    coa_zero_init: bool = True
    depth_gate_init: float = 1.0
    shallow_channels: int = 16
    use_depth: bool = True
    use_fse: bool = True
    use_integrity: bool = True
    use_patch_scores: bool = True
    use_shallow_fusion: bool = True


class ChannelRMSNorm(nn.Module):
    """RMS normalization over the channel axis of a B x C x H x W map."""

    def __init__(self, channels: int, eps: float = 1e-6):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(channels))

    def forward(self, x):
        x = x * torch.rsqrt(x.pow(2).mean(dim=1, keepdim=True) + self.eps)
        return x * self.weight.view(1, -1, 1, 1)


def conv_block(cin: int, cout: int, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(nn.Conv2d(cin, cout, 3, stride, 1), ChannelRMSNorm(cout), nn.SiLU())


class ResBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(channels, channels, 3, 1, 1), ChannelRMSNorm(channels), nn.SiLU(),
            nn.Conv2d(channels, channels, 3, 1, 1), ChannelRMSNorm(channels),
        )

    def forward(self, x):
        return F.silu(x + self.body(x))


class Stem(nn.Module):
    """Two stride-2 convolutions; returns the 1/2 map and the 1/4 map fed to stage 1."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        mid = max(4, out_channels // 2)
        self.to_half = conv_block(in_channels, mid, stride=2)
        self.to_quarter = conv_block(mid, out_channels, stride=2)

    def forward(self, x):
        half = self.to_half(x)
        return half, self.to_quarter(half)


class Stages(nn.Module):
    """Residual-convolution pyramid with the 4-stage, stride 4/8/16/32 contract."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        chans = cfg.channels
        layers = []
        for i, (c, depth) in enumerate(zip(chans, cfg.block_depths)):
            down = nn.Identity() if i == 0 else conv_block(chans[i - 1], c, stride=2)
            layers.append(nn.Sequential(down, *[ResBlock(c) for _ in range(depth)]))
        self.layers = nn.ModuleList(layers)

    def forward(self, x) -> list[torch.Tensor]:
        feats = []
        for layer in self.layers:
            x = layer(x)
            feats.append(x)
        return feats


class CrossScaleFusion(nn.Module):
    """Stage-5 builder: each of stages 1-4 is pooled and strided to 1/64, summed, then mixed."""

    def __init__(self, in_channels, out_channels: int):
        super().__init__()
        self.proj = nn.ModuleList(nn.Conv2d(c, out_channels, 3, 2, 1) for c in in_channels)
        self.mix = nn.Sequential(conv_block(out_channels, out_channels), nn.Conv2d(out_channels, out_channels, 3, 1, 1))

    def forward(self, feats):
        total = 0
        for i, (f, proj) in enumerate(zip(feats, self.proj)):
            factor = 2 ** (3 - i)  # stage i at stride 4*2^i; the stride-2 conv supplies the last factor 2
            if factor > 1:
                f = F.avg_pool2d(f, factor)
            total = total + proj(f)
        return self.mix(total)


@dataclass
class Pyramids:
    visual: list[torch.Tensor]  # F^v_1..F^v_5
    depth: list[torch.Tensor]
    patch: list[torch.Tensor]
    stem: torch.Tensor  # 1/2 resolution visual stem output
    shallow: torch.Tensor  # full-resolution shallow embedding of image and depth
    patch_grid: int


@dataclass
class DecoderStates:
    states: list[torch.Tensor]  # X_5..X_1
    logits: list[torch.Tensor]  # mask logits, coarse to fine
    fused: list[FusedStageFeatures | None]


@dataclass
class PdfnetOutputs:
    stage_logits: list[torch.Tensor]  # P_5..P_1 before sigmoid
    final_logit: torch.Tensor
    stage_depth_logits: list[torch.Tensor]
    final_depth_logit: torch.Tensor
    fused: list[FusedStageFeatures | None] = field(default_factory=list)

    @property
    def stage_predictions(self) -> list[torch.Tensor]:
        return [torch.sigmoid(x) for x in self.stage_logits]

    @property
    def final_prediction(self) -> torch.Tensor:
        return torch.sigmoid(self.final_logit)

    @property
    def stage_depths(self) -> list[torch.Tensor]:
        return [torch.sigmoid(x) for x in self.stage_depth_logits]

    @property
    def final_depth(self) -> torch.Tensor:
        return torch.sigmoid(self.final_depth_logit)


def _up_to(x: torch.Tensor, ref: torch.Tensor) -> torch.Tensor:
    if x.shape[-2:] == ref.shape[-2:]:
        return x
    return F.interpolate(x, size=ref.shape[-2:], mode="bilinear", align_corners=False)


class MergeHead(nn.Module):
    """Two x2 upsample-and-fuse steps (1/4 -> 1/2 -> 1/1) plus a residual on the upsampled coarse logit."""

    def __init__(self, channels: int, stem_channels: int, shallow_channels: int):
        super().__init__()
        self.fuse_half = conv_block(channels + stem_channels, channels)
        self.fuse_full = conv_block(channels + shallow_channels, channels)
        self.head = nn.Conv2d(channels, 1, 3, 1, 1)

    def forward(self, state, coarse_logit, stem, shallow, use_skip=True):
        x = F.interpolate(state, scale_factor=2, mode="bilinear", align_corners=False)
        x = self.fuse_half(torch.cat([x, stem if use_skip else torch.zeros_like(stem)], 1))
        x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        x = self.fuse_full(torch.cat([x, shallow if use_skip else torch.zeros_like(shallow)], 1))
        return self.head(x) + _up_to(coarse_logit, x)


class PDFNet(nn.Module):
    def __init__(self, cfg: ModelConfig = ModelConfig()):
        super().__init__()
        self.cfg = cfg
        bb = cfg.backbone
        chans = bb.channels
        dch = cfg.decoder_channels

        self.stem_v = Stem(3, chans[0])
        self.stem_d = Stem(1, chans[0])
        self.stages = Stages(bb)
        if cfg.share_patch_encoder:
            self.stem_p, self.stages_p = self.stem_v, self.stages
            pchans = chans
        else:
            pbb = bb.scaled(cfg.patch_width_scale)
            pchans = pbb.channels
            self.stem_p = Stem(3, pchans[0])
            self.stages_p = Stages(pbb)
        self.depth_gate = nn.Parameter(torch.full((4,), float(cfg.depth_gate_init)))
        self.fuse5 = nn.ModuleDict({
            "v": CrossScaleFusion(chans, dch),
            "d": CrossScaleFusion(chans, dch),
            "p": CrossScaleFusion(pchans, dch),
        })
        self.shallow = conv_block(4, cfg.shallow_channels)

        self.lat_v = nn.ModuleList(nn.Conv2d(c, dch, 1) for c in chans)
        self.lat_d = nn.ModuleList(nn.Conv2d(c, dch, 1) for c in chans)
        self.lat_p = nn.ModuleList(nn.Conv2d(c, dch, 1) for c in pchans)
        if cfg.use_fse:
            self.fse = nn.ModuleList(FSE(dch, cfg.head_count, cfg.coa_zero_init, cfg.tau, cfg.token_limit) for _ in range(5))
        else:
            # FSE ablation: conv, SiLU, RMS norm per stage
            self.plain = nn.ModuleList(conv_block(dch, dch) for _ in range(5))
        self.merge = nn.ModuleList(conv_block(dch, dch) for _ in range(5))
        self.heads = nn.ModuleList(nn.Conv2d(dch, 1, 3, 1, 1) for _ in range(5))

        self.depth_blocks = nn.ModuleList(
            nn.Sequential(conv_block(dch, dch), conv_block(dch, dch)) for _ in range(5)
        )
        self.depth_heads = nn.ModuleList(nn.Conv2d(dch, 1, 3, 1, 1) for _ in range(5))
        stem_ch = self.stem_v.to_half[0].out_channels
        self.merge_mask = MergeHead(dch, stem_ch, cfg.shallow_channels)
        self.merge_depth = MergeHead(dch, stem_ch, cfg.shallow_channels)

    def depth_decoder_parameters(self):
        for mod in (self.depth_blocks, self.depth_heads, self.merge_depth):
            yield from mod.parameters()

    # ------------------------------------------------------------------ encoder

    def encode(self, image: torch.Tensor, depth: torch.Tensor, g: int | None = None) -> Pyramids:
        g = self.cfg.patch_grid if g is None else g
        if image.shape[1] != 3 or depth.shape[1] != 1 or image.shape[-2:] != depth.shape[-2:]:
            raise ShapeError(f"image {tuple(image.shape)} / depth {tuple(depth.shape)} mismatch")
        check_divisible(image.shape[-2:], g)
        b = image.shape[0]

        stem_v, x_v = self.stem_v(image)
        visual = self.stages(x_v)
        if self.cfg.use_depth:
            _, x_d = self.stem_d(depth)
            depth_feats = [f * gate for f, gate in zip(self.stages(x_d), self.depth_gate)]
        else:
            depth_feats = [torch.zeros_like(f) for f in visual]

        grid = partition_patches(image, g)
        _, x_p = self.stem_p(grid.as_batch())
        patch = [
            reassemble_patches(PatchGrid.from_batch(f, g, b, origin_shape=image.shape[-2:]))
            for f in self.stages_p(x_p)
        ]

        visual.append(self.fuse5["v"](visual))
        depth_feats.append(self.fuse5["d"](depth_feats))
        patch.append(self.fuse5["p"](patch))
        shallow = self.shallow(torch.cat([image, depth], 1))
        return Pyramids(visual, depth_feats, patch, stem_v, shallow, g)

    # ------------------------------------------------------------------ decoders

    def _lateral(self, pyr: Pyramids, i: int):
        if i == 4:
            return pyr.visual[4], pyr.depth[4], pyr.patch[4]
        return self.lat_v[i](pyr.visual[i]), self.lat_d[i](pyr.depth[i]), self.lat_p[i](pyr.patch[i])

    def decode(self, pyr: Pyramids) -> DecoderStates:
        states, logits, fused = [], [], []
        x = prev = None
        for i in range(4, -1, -1):
            f_v, f_d, f_p = self._lateral(pyr, i)
            if x is not None:
                f_v = f_v + _up_to(x, f_v)
            try:
                if self.cfg.use_fse:
                    out = self.fse[i](f_v, f_d, f_p, prev, pyr.patch_grid,
                                      self.cfg.use_integrity, self.cfg.use_patch_scores)
                    merged = out.visual + out.patch + out.depth
                else:
                    out = None
                    merged = self.plain[i](f_v + f_p + f_d)
            except ShapeError as exc:
                raise ShapeError(f"decoder stage {i + 1}: {exc}") from exc
            x = self.merge[i](merged)
            logit = self.heads[i](x)
            prev = torch.sigmoid(logit)
            states.append(x)
            logits.append(logit)
            fused.append(out)
        return DecoderStates(states, logits, fused)

    def depth_refine(self, pyr: Pyramids, dec: DecoderStates) -> tuple[list[torch.Tensor], list[torch.Tensor]]:
        states, logits = [], []
        y = None
        for k, i in enumerate(range(4, -1, -1)):
            f_v, f_d, _ = self._lateral(pyr, i)
            z = f_v + f_d + dec.states[k]
            if y is not None:
                z = z + _up_to(y, z)
            y = self.depth_blocks[i](z)
            states.append(y)
            logits.append(self.depth_heads[i](y))
        return states, logits

    def merge_final(self, state, coarse_logit, pyr: Pyramids, depth: bool = False) -> torch.Tensor:
        head = self.merge_depth if depth else self.merge_mask
        return head(state, coarse_logit, pyr.stem, pyr.shallow, self.cfg.use_shallow_fusion)

    def forward(self, image, depth=None, g: int | None = None) -> PdfnetOutputs:
        if isinstance(image, DepthTriplet):
            image, depth = image.image, image.depth
        pyr = self.encode(image, depth, g)
        dec = self.decode(pyr)
        depth_states, depth_logits = self.depth_refine(pyr, dec)
        final = self.merge_final(dec.states[-1], dec.logits[-1], pyr)
        final_depth = self.merge_final(depth_states[-1], depth_logits[-1], pyr, depth=True)
        return PdfnetOutputs(dec.logits, final, depth_logits, final_depth, dec.fused)


def forward(t: DepthTriplet, model: PDFNet, g: int | None = None) -> PdfnetOutputs:
    t.validate(model.cfg.patch_grid if g is None else g)
    return model(t.image, t.depth, g)
