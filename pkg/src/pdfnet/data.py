"""Image/depth/mask triplets: loading, augmentation, patch tiling and synthetic fixtures.

On-disk layout of a dataset root::

    root/images/{id}.png      RGB, 8-bit
    root/depths/{id}.png      single channel, 8- or 16-bit, larger = farther or nearer
    root/depths_hq/{id}.png   optional higher-fidelity depth used as supervision
    root/masks/{id}.png       single channel, anti-aliased values binarized at 0.5
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .errors import AugmentError, DataError, IoError, NotFound, ShapeError

log = logging.getLogger(__name__)

BACKBONE_STRIDE = 32
VALID_GRIDS = (1, 2, 4, 8, 16)
MANIFEST_NAME = "manifest.tsv"


@dataclass
class DepthTriplet:
    """Aligned network input/supervision unit.

    ``depth_hq`` is the optional supervision depth; ``supervision_depth`` falls
    back to ``depth`` when it is absent.
    """

    image: torch.Tensor  # B x 3 x H x W, [0, 1]
    depth: torch.Tensor  # B x 1 x H x W, [0, 1]
    mask: torch.Tensor  # B x 1 x H x W, {0, 1}
    sample_id: str | tuple[str, ...]
    depth_hq: torch.Tensor | None = None

    @property
    def supervision_depth(self) -> torch.Tensor:
        return self.depth if self.depth_hq is None else self.depth_hq

    @property
    def shape(self) -> tuple[int, int]:
        return tuple(self.image.shape[-2:])

    def validate(self, patch_grid: int | None = 1) -> "DepthTriplet":
        """Check shapes, ranges and binarity; ``patch_grid=None`` skips the 32*g divisibility rule."""
        b, c, h, w = self.image.shape
        if c != 3:
            raise ShapeError(f"image must have 3 channels, got {c}")
        for name in ("depth", "mask", "depth_hq"):
            t = getattr(self, name)
            if t is None:
                continue
            if tuple(t.shape) != (b, 1, h, w):
                raise ShapeError(f"{name} shape {tuple(t.shape)} != {(b, 1, h, w)}")
        if patch_grid is not None:
            check_divisible((h, w), patch_grid)
        for name in ("image", "depth", "mask", "depth_hq"):
            t = getattr(self, name)
            if t is not None and not torch.isfinite(t).all():
                raise DataError(f"{self.sample_id}: non-finite values in {name}")
        for name in ("image", "depth", "depth_hq"):
            t = getattr(self, name)
            if t is not None and (t.min() < 0 or t.max() > 1):
                raise DataError(f"{self.sample_id}: {name} outside [0, 1]")
        if not ((self.mask == 0) | (self.mask == 1)).all():
            raise DataError(f"{self.sample_id}: mask is not binary")
        return self

    def to(self, *args, **kwargs) -> "DepthTriplet":
        return replace(
            self,
            image=self.image.to(*args, **kwargs),
            depth=self.depth.to(*args, **kwargs),
            mask=self.mask.to(*args, **kwargs),
            depth_hq=None if self.depth_hq is None else self.depth_hq.to(*args, **kwargs),
        )


def check_divisible(shape: Sequence[int], patch_grid: int) -> None:
    if patch_grid not in VALID_GRIDS:
        raise ShapeError(f"patch grid must be one of {VALID_GRIDS}, got {patch_grid}")
    unit = BACKBONE_STRIDE * patch_grid
    h, w = shape
    if h % unit or w % unit:
        raise ShapeError(f"resolution {h}x{w} is not divisible by {unit} (32 * grid {patch_grid})")


def collate_triplets(items: Sequence[DepthTriplet]) -> DepthTriplet:
    hq = [t.depth_hq for t in items]
    has_hq = all(x is not None for x in hq)
    return DepthTriplet(
        image=torch.cat([t.image for t in items]),
        depth=torch.cat([t.depth for t in items]),
        mask=torch.cat([t.mask for t in items]),
        sample_id=tuple(t.sample_id if isinstance(t.sample_id, str) else "+".join(t.sample_id) for t in items),
        depth_hq=torch.cat(hq) if has_hq else None,
    )


# --------------------------------------------------------------------------- loading


def _read_png(path: Path) -> Image.Image:
    if not path.is_file():
        raise NotFound(f"missing file: {path}")
    try:
        img = Image.open(path)
        img.load()
    except OSError as exc:
        raise DataError(f"cannot decode {path}: {exc}") from exc
    return img


def read_depth_png(path: Path) -> np.ndarray:
    """Return an H x W float64 array in [0, 1], normalized by the file's bit-depth maximum."""
    img = _read_png(path)
    if img.mode in ("I;16", "I;16B", "I;16L", "I"):
        arr = np.asarray(img).astype(np.float64) / 65535.0
    elif img.mode == "L":
        arr = np.asarray(img).astype(np.float64) / 255.0
    elif img.mode == "F":
        arr = np.asarray(img).astype(np.float64)
    else:
        raise DataError(f"{path}: depth must be single-channel, got mode {img.mode}")
    if not np.isfinite(arr).all():
        raise DataError(f"{path}: non-finite depth values")
    return arr


def read_mask_png(path: Path) -> np.ndarray:
    img = _read_png(path)
    if img.mode == "1":
        img = img.convert("L")
    if img.mode == "L":
        arr = np.asarray(img).astype(np.float64) / 255.0
    elif img.mode in ("I;16", "I;16B", "I;16L", "I"):
        arr = np.asarray(img).astype(np.float64) / 65535.0
    else:
        raise DataError(f"{path}: mask must be single-channel, got mode {img.mode}")
    return arr


def read_image_png(path: Path) -> np.ndarray:
    img = _read_png(path)
    if img.mode != "RGB":
        img = img.convert("RGB")
    return np.asarray(img).astype(np.float64) / 255.0


def _resize(x: torch.Tensor, size: tuple[int, int], mode: str) -> torch.Tensor:
    if tuple(x.shape[-2:]) == tuple(size):
        return x
    if mode == "nearest":
        return F.interpolate(x, size=size, mode="nearest")
    return F.interpolate(x, size=size, mode="bilinear", align_corners=False).clamp_(0.0, 1.0)


def load_triplet(
    root: str | Path,
    sample_id: str,
    resolution: tuple[int, int] | None = (1024, 1024),
    patch_grid: int | None = 1,
) -> DepthTriplet:
    """Read one sample; ``resolution=None`` keeps the files' native size."""
    root = Path(root)
    image = read_image_png(root / "images" / f"{sample_id}.png")
    depth = read_depth_png(root / "depths" / f"{sample_id}.png")
    mask = read_mask_png(root / "masks" / f"{sample_id}.png")
    hq_path = root / "depths_hq" / f"{sample_id}.png"
    depth_hq = read_depth_png(hq_path) if hq_path.is_file() else None
    for name, arr in (("image", image), ("mask", mask)):
        if not np.isfinite(arr).all():
            raise DataError(f"{sample_id}: non-finite pixel in {name}")

    if resolution is None:
        natives = {image.shape[:2], depth.shape, mask.shape} | ({depth_hq.shape} if depth_hq is not None else set())
        if len(natives) != 1:
            raise ShapeError(f"{sample_id}: native sizes differ: {sorted(natives)}")
        resolution = image.shape[:2]
    size = tuple(int(s) for s in resolution)
    img_t = _resize(torch.from_numpy(image).permute(2, 0, 1)[None].float(), size, "bilinear")
    dep_t = _resize(torch.from_numpy(depth)[None, None].float(), size, "bilinear")
    mask_t = _resize(torch.from_numpy(mask)[None, None].float(), size, "nearest")
    mask_t = (mask_t > 0.5).float()
    hq_t = None
    if depth_hq is not None:
        hq_t = _resize(torch.from_numpy(depth_hq)[None, None].float(), size, "bilinear")
    shapes = {tuple(t.shape[-2:]) for t in (img_t, dep_t, mask_t) if t is not None}
    if len(shapes) != 1:
        raise ShapeError(f"{sample_id}: dimension mismatch after resize: {shapes}")
    return DepthTriplet(img_t, dep_t, mask_t, sample_id, hq_t).validate(patch_grid)


def list_samples(root: str | Path) -> list[str]:
    root = Path(root)
    img_dir = root / "images"
    if not img_dir.is_dir():
        raise NotFound(f"no images/ directory under {root}")
    return sorted(p.stem for p in img_dir.glob("*.png"))


class TripletDataset(torch.utils.data.Dataset):
    """Map-style dataset; augmentation seeds derive from (seed, epoch, index) only."""

    def __init__(self, root, resolution=(1024, 1024), patch_grid=1, augment=False, seed=0, params=None):
        self.root = Path(root)
        self.ids = list_samples(self.root)
        self.resolution = tuple(resolution)
        self.patch_grid = patch_grid
        self.augment = augment
        self.seed = seed
        self.epoch = 0
        self.params = params or AugmentParams()

    def __len__(self):
        return len(self.ids)

    def set_epoch(self, epoch: int) -> None:
        self.epoch = epoch

    def __getitem__(self, idx: int) -> DepthTriplet:
        t = load_triplet(self.root, self.ids[idx], self.resolution, self.patch_grid)
        if self.augment:
            sub = int(np.random.SeedSequence([self.seed, self.epoch, idx]).generate_state(1)[0])
            t = augment(t, sub, self.params)
        return t


# --------------------------------------------------------------------------- augmentation


@dataclass(frozen=True)
class AugmentParams:
    flip_p: float = 0.5
    rotation_deg: float = 15.0
    crop_scale: tuple[float, float] = (0.75, 1.0)
    brightness: float = 0.2
    contrast: float = 0.2
    saturation: float = 0.2
    max_retries: int = 5


def hflip(t: DepthTriplet) -> DepthTriplet:
    flip = lambda x: None if x is None else torch.flip(x, dims=[-1])  # noqa: E731
    return replace(t, image=flip(t.image), depth=flip(t.depth), mask=flip(t.mask), depth_hq=flip(t.depth_hq))


def _affine(x: torch.Tensor, theta: torch.Tensor, mode: str) -> torch.Tensor:
    grid = F.affine_grid(theta.expand(x.shape[0], 2, 3).to(x.dtype), list(x.shape), align_corners=False)
    return F.grid_sample(x, grid, mode=mode, padding_mode="zeros", align_corners=False)


def _rotate_crop(t: DepthTriplet, angle_deg: float, scale: float, cx: float, cy: float) -> tuple[DepthTriplet, float]:
    h, w = t.shape
    a = math.radians(angle_deg)
    cos, sin = math.cos(a), math.sin(a)
    # output normalized coords -> input normalized coords; aspect-correct rotation then crop zoom
    theta = torch.tensor(
        [[cos * scale, -sin * scale * h / w, cx], [sin * scale * w / h, cos * scale, cy]],
        dtype=torch.float64,
    )[None]
    valid = _affine(torch.ones(1, 1, h, w, dtype=torch.float64), theta, "nearest")
    warp = lambda x, m: None if x is None else _affine(x, theta, m)  # noqa: E731
    out = replace(
        t,
        image=warp(t.image, "bilinear").clamp(0, 1),
        depth=warp(t.depth, "bilinear").clamp(0, 1),
        mask=(warp(t.mask, "nearest") > 0.5).to(t.mask.dtype),
        depth_hq=None if t.depth_hq is None else warp(t.depth_hq, "bilinear").clamp(0, 1),
    )
    return out, float(valid.mean())


def _jitter(img: torch.Tensor, b: float, c: float, s: float) -> torch.Tensor:
    weights = torch.tensor([0.299, 0.587, 0.114], dtype=img.dtype).view(1, 3, 1, 1)
    img = (img * b).clamp(0, 1)
    mean = (img * weights).sum(1, keepdim=True).mean(dim=(2, 3), keepdim=True)
    img = ((img - mean) * c + mean).clamp(0, 1)
    gray = (img * weights).sum(1, keepdim=True)
    return ((img - gray) * s + gray).clamp(0, 1)


def augment(t: DepthTriplet, rng_seed: int, params: AugmentParams = AugmentParams()) -> DepthTriplet:
    """Random flip, rotation, crop and color jitter; geometry shared by all three maps."""
    for attempt in range(params.max_retries + 1):
        rng = np.random.default_rng([rng_seed, attempt])
        flip = rng.random() < params.flip_p
        angle = rng.uniform(-params.rotation_deg, params.rotation_deg) if params.rotation_deg else 0.0
        lo, hi = params.crop_scale
        scale = rng.uniform(lo, hi) if hi > lo else float(hi)
        slack = 1.0 - scale
        cx, cy = (rng.uniform(-slack, slack), rng.uniform(-slack, slack)) if slack > 0 else (0.0, 0.0)
        jit = [
            rng.uniform(1 - params.brightness, 1 + params.brightness),
            rng.uniform(1 - params.contrast, 1 + params.contrast),
            rng.uniform(1 - params.saturation, 1 + params.saturation),
        ]
        out = hflip(t) if flip else t
        if angle != 0.0 or scale != 1.0:
            out, valid = _rotate_crop(out, angle, scale, cx, cy)
            if valid == 0.0:
                log.debug("empty valid area on attempt %d, resampling", attempt)
                continue
        if params.brightness or params.contrast or params.saturation:
            out = replace(out, image=_jitter(out.image, *jit))
        return out
    raise AugmentError(f"no valid rotation after {params.max_retries} retries")


# --------------------------------------------------------------------------- patches


@dataclass
class PatchGrid:
    patches: torch.Tensor  # (g*g) x B x C x h x w, row-major patch index
    grid_size: int
    origin_shape: tuple[int, int]

    def as_batch(self) -> torch.Tensor:
        """Flatten to a (g*g*B) x C x h x w batch, patch-major."""
        n, b = self.patches.shape[:2]
        return self.patches.reshape(n * b, *self.patches.shape[2:])

    @classmethod
    def from_batch(cls, x: torch.Tensor, grid_size: int, batch: int, stride: int = 1, origin_shape=None) -> "PatchGrid":
        n = grid_size * grid_size
        if x.shape[0] != n * batch:
            raise ShapeError(f"batch {x.shape[0]} is not {n} patches x {batch}")
        h, w = x.shape[-2:]
        origin = origin_shape or (h * grid_size * stride, w * grid_size * stride)
        return cls(x.reshape(n, batch, *x.shape[1:]), grid_size, tuple(origin))


def partition_patches(x: torch.Tensor, g: int) -> PatchGrid:
    b, c, h, w = x.shape
    if g < 1 or h % g or w % g:
        raise ShapeError(f"{h}x{w} is not divisible into a {g}x{g} grid")
    ph, pw = h // g, w // g
    p = x.reshape(b, c, g, ph, g, pw).permute(2, 4, 0, 1, 3, 5).reshape(g * g, b, c, ph, pw)
    return PatchGrid(p, g, (h, w))


def reassemble_patches(p: PatchGrid) -> torch.Tensor:
    n, b, c, ph, pw = p.patches.shape
    g = p.grid_size
    if n != g * g or math.isqrt(n) ** 2 != n:
        raise ShapeError(f"{n} patches do not form a {g}x{g} grid")
    x = p.patches.reshape(g, g, b, c, ph, pw).permute(2, 3, 0, 4, 1, 5)
    return x.reshape(b, c, g * ph, g * pw)


# --------------------------------------------------------------------------- synthetic data


BG_MODES = ("gradient", "noise", "textured")


def _blob_mask(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    yy = (yy + 0.5) / h
    xx = (xx + 0.5) / w
    while True:
        mask = np.zeros((h, w), dtype=bool)
        for _ in range(rng.integers(1, 4)):
            cy, cx = rng.uniform(0.3, 0.7, size=2)
            ry, rx = rng.uniform(0.08, 0.22, size=2)
            mask |= ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        # thin structures, a few pixels wide
        for _ in range(rng.integers(1, 3)):
            y0, x0 = rng.uniform(0.2, 0.8, size=2)
            ang = rng.uniform(0, math.pi)
            length = rng.uniform(0.15, 0.35)
            half = max(1.0, 0.006 * max(h, w)) / max(h, w)
            t = (xx - x0) * math.cos(ang) + (yy - y0) * math.sin(ang)
            d = -(xx - x0) * math.sin(ang) + (yy - y0) * math.cos(ang)
            mask |= (np.abs(d) <= half) & (t >= 0) & (t <= length)
        frac = mask.mean()
        if 0.05 <= frac <= 0.6:
            return mask


def _ramp(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    ang = rng.uniform(0, 2 * math.pi)
    r = xx / max(w - 1, 1) * math.cos(ang) + yy / max(h - 1, 1) * math.sin(ang)
    return (r - r.min()) / (r.max() - r.min())


def _synth_sample(rng, h, w, fg_depth_sigma, bg_mode, bg_noise_sigma):
    mask = _blob_mask(rng, h, w)
    fg_level = rng.uniform(0.1, 0.35)
    fg = np.clip(fg_level + rng.normal(0.0, fg_depth_sigma, size=(h, w)), 0.0, 1.0) if fg_depth_sigma > 0 else np.full((h, w), fg_level)
    lo = rng.uniform(0.35, 0.5)
    if bg_mode == "gradient":
        bg = lo + (1.0 - lo) * _ramp(rng, h, w)
    elif bg_mode == "noise":
        bg = np.clip(rng.uniform(0.55, 0.8) + rng.normal(0.0, bg_noise_sigma, size=(h, w)), 0.0, 1.0)
    elif bg_mode == "textured":
        yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
        f1, f2 = rng.uniform(3, 9, size=2)
        tex = 0.5 + 0.25 * np.sin(2 * math.pi * f1 * xx) * np.cos(2 * math.pi * f2 * yy)
        bg = np.clip(lo + (0.9 - lo) * (0.6 * _ramp(rng, h, w) + 0.4 * tex), 0.0, 1.0)
    else:
        raise ValueError(f"bg_mode must be one of {BG_MODES}")
    depth = np.where(mask, fg, bg)

    # image: object and background colors differ, with background distractors in the object color
    fg_col = rng.uniform(0.45, 0.95, size=3)
    bg_col = np.clip(1.0 - fg_col + rng.normal(0, 0.1, size=3), 0.05, 0.95)
    image = np.where(mask[..., None], fg_col, bg_col)
    distract = np.zeros((h, w), dtype=bool)
    yy, xx = np.mgrid[0:h, 0:w]
    for _ in range(rng.integers(1, 3)):
        cy, cx = rng.choice([0.12, 0.88]) * h, rng.uniform(0.1, 0.9) * w
        rad = rng.uniform(0.04, 0.08) * max(h, w)
        distract |= (yy - cy) ** 2 + (xx - cx) ** 2 <= rad**2
    distract &= ~mask
    image = np.where(distract[..., None], fg_col * 0.9, image)
    shade = 0.85 + 0.15 * (1.0 - depth)
    image = np.clip(image * shade[..., None] + rng.normal(0, 0.03, size=(h, w, 3)), 0.0, 1.0)
    return image, depth, mask


def _quantize_depth(depth: np.ndarray) -> np.ndarray:
    return np.round(np.clip(depth, 0.0, 1.0) * 65535.0).astype(np.uint16)


def make_synthetic_dataset(
    out_dir: str | Path,
    n: int,
    resolution: tuple[int, int] = (256, 256),
    fg_depth_sigma: float = 0.02,
    bg_mode: str = "gradient",
    seed: int = 0,
    bg_noise_sigma: float = 0.15,
) -> Path:
    """Write ``n`` deterministic triplets plus ``manifest.tsv`` and return the root.

    Foreground depth is a constant level plus Gaussian noise of ``fg_depth_sigma``.
    For ``gradient`` and ``textured`` backgrounds a sample is redrawn until the
    background variance is at least 10x the foreground variance.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if bg_mode not in BG_MODES:
        raise ValueError(f"bg_mode must be one of {BG_MODES}")
    out = Path(out_dir)
    h, w = (int(v) for v in resolution)
    try:
        for sub in ("images", "depths", "masks"):
            (out / sub).mkdir(parents=True, exist_ok=True)
        lines = [
            "#generator\t"
            + json.dumps(
                {"n": n, "resolution": [h, w], "fg_depth_sigma": fg_depth_sigma, "bg_mode": bg_mode,
                 "seed": seed, "bg_noise_sigma": bg_noise_sigma},
                sort_keys=True,
            )
        ]
        width = max(4, len(str(n - 1)))
        for i in range(n):
            sid = f"syn_{i:0{width}d}"
            for attempt in range(20):
                rng = np.random.default_rng([seed, i, attempt])
                image, depth, mask = _synth_sample(rng, h, w, fg_depth_sigma, bg_mode, bg_noise_sigma)
                q = _quantize_depth(depth).astype(np.float64) / 65535.0
                var_fg, var_bg = float(q[mask].var()), float(q[~mask].var())
                if bg_mode == "noise" or var_bg >= 10.0 * var_fg:
                    break
            else:
                raise DataError(f"{sid}: could not reach var_bg >= 10 var_fg")
            Image.fromarray(np.round(image * 255).astype(np.uint8)).save(out / "images" / f"{sid}.png")
            Image.fromarray(_quantize_depth(depth)).save(out / "depths" / f"{sid}.png")
            Image.fromarray(mask.astype(np.uint8) * 255).save(out / "masks" / f"{sid}.png")
            params = {"attempt": attempt, "fg_fraction": round(float(mask.mean()), 6),
                      "var_fg": float(f"{var_fg:.6e}"), "var_bg": float(f"{var_bg:.6e}")}
            lines.append(f"{sid}\t{json.dumps(params, sort_keys=True)}")
        (out / MANIFEST_NAME).write_text("\n".join(lines) + "\n")
    except PermissionError as exc:
        raise IoError(f"cannot write synthetic dataset to {out}: {exc}") from exc
    except OSError as exc:
        if isinstance(exc, (NotFound,)):
            raise
        raise IoError(f"cannot write synthetic dataset to {out}: {exc}") from exc
    return out


def read_manifest(root: str | Path) -> dict[str, dict]:
    rows = {}
    for line in (Path(root) / MANIFEST_NAME).read_text().splitlines():
        if not line or line.startswith("#"):
            continue
        sid, _, params = line.partition("\t")
        rows[sid] = json.loads(params)
    return rows
