"""DIS evaluation metrics (MAE, max-F, weighted-F, S-measure, E-measure) and depth variance statistics.

All metrics take a prediction ``P`` in [0, 1] and a binary mask ``M`` as 2-D
arrays and compute in float64.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .data import read_depth_png, read_mask_png
from .errors import DataError, EmptyInput, NotFound, ShapeError

EPS = np.spacing(1)
BETA2 = 0.3
WF_BETA2 = 1.0
S_ALPHA = 0.5
THRESHOLDS = 256
CSV_COLUMNS = ("sample_id", "fmax", "fw", "em", "sm", "mae", "var_fg", "var_bg", "var_all")


def _prep(pred, mask) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, dtype=np.float64)
    m = np.asarray(mask)
    if p.shape != m.shape or p.ndim != 2:
        raise ShapeError(f"expected matching 2-D maps, got {p.shape} and {m.shape}")
    if m.dtype != bool:
        m = m > 0.5
    return p, m


def mae(pred, mask) -> float:
    p, m = _prep(pred, mask)
    return float(np.abs(p - m).mean())


# --------------------------------------------------------------------------- F-measure


@dataclass
class FCurve:
    thresholds: np.ndarray  # k / 255
    precision: np.ndarray
    recall: np.ndarray
    fbeta: np.ndarray
    tp: np.ndarray
    fp: np.ndarray
    positives: int

    @property
    def f_max(self) -> float:
        return float(self.fbeta.max())


def _safe_div(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.divide(a, b, out=np.zeros(np.broadcast(a, b).shape), where=b != 0)


def fbeta_from_counts(tp, fp, positives, beta2: float = BETA2):
    precision = _safe_div(tp, np.asarray(tp) + np.asarray(fp))
    recall = _safe_div(tp, positives)
    f = _safe_div((1 + beta2) * precision * recall, beta2 * precision + recall)
    return precision, recall, f


def quantize(pred) -> np.ndarray:
    """Threshold bin of each pixel: pixel passes threshold k/255 when its bin is >= k."""
    return np.clip(np.floor(np.asarray(pred, dtype=np.float64) * 255), 0, 255).astype(np.int64)


def f_measure_curve(pred, mask, beta2: float = BETA2) -> FCurve:
    p, m = _prep(pred, mask)
    q = quantize(p)
    fg_hist = np.bincount(q[m], minlength=THRESHOLDS)
    bg_hist = np.bincount(q[~m], minlength=THRESHOLDS)
    tp = np.cumsum(fg_hist[::-1])[::-1]
    fp = np.cumsum(bg_hist[::-1])[::-1]
    positives = int(m.sum())
    precision, recall, f = fbeta_from_counts(tp, fp, positives, beta2)
    return FCurve(np.arange(THRESHOLDS) / 255.0, precision, recall, f, tp, fp, positives)


def f_max(pred, mask, beta2: float = BETA2) -> float:
    return f_measure_curve(pred, mask, beta2).f_max


def binary_f_measure(binary_pred, mask, beta2: float = BETA2) -> float:
    b, m = _prep(binary_pred, mask)
    b = b > 0.5
    _, _, f = fbeta_from_counts(np.sum(b & m), np.sum(b & ~m), m.sum(), beta2)
    return float(f)


# --------------------------------------------------------------------------- weighted F


def gaussian_kernel(size: int = 7, sigma: float = 5.0) -> np.ndarray:
    r = (size - 1) / 2
    y, x = np.ogrid[-r : r + 1, -r : r + 1]
    h = np.exp(-(x * x + y * y) / (2 * sigma * sigma))
    h[h < np.finfo(h.dtype).eps * h.max()] = 0
    return h / h.sum()


def weighted_f_measure(pred, mask, beta2: float = WF_BETA2) -> float:
    """Dependency- and importance-weighted F-measure; 0 when the mask is empty."""
    p, m = _prep(pred, mask)
    if not m.any():
        return 0.0
    dist, idx = ndimage.distance_transform_edt(~m, return_indices=True)
    err = np.abs(p - m)
    err_t = err.copy()
    bg = ~m
    err_t[bg] = err[idx[0][bg], idx[1][bg]]
    err_a = ndimage.convolve(err_t, gaussian_kernel(), mode="constant", cval=0.0)
    min_e = np.where(m & (err_a < err), err_a, err)
    importance = np.where(bg, 2 - np.exp(np.log(0.5) / 5 * dist), 1.0)
    ew = min_e * importance
    tpw = m.sum() - ew[m].sum()
    fpw = ew[bg].sum()
    recall = 1 - ew[m].mean()
    precision = tpw / (tpw + fpw + EPS)
    return float((1 + beta2) * recall * precision / (recall + beta2 * precision + EPS))


# --------------------------------------------------------------------------- S-measure


def _object_score(x: np.ndarray) -> float:
    mean = x.mean()
    std = x.std(ddof=1) if x.size > 1 else 0.0
    return 2 * mean / (mean * mean + 1 + std + EPS)


def _region_ssim(p: np.ndarray, m: np.ndarray) -> float:
    n = p.size
    x, y = p.mean(), m.mean()
    sx = ((p - x) ** 2).sum() / (n - 1 + EPS)
    sy = ((m - y) ** 2).sum() / (n - 1 + EPS)
    sxy = ((p - x) * (m - y)).sum() / (n - 1 + EPS)
    a = 4 * x * y * sxy
    b = (x * x + y * y) * (sx + sy)
    if a != 0:
        return a / (b + EPS)
    return 1.0 if b == 0 else 0.0


def _centroid(m: np.ndarray) -> tuple[int, int]:
    h, w = m.shape
    if not m.any():
        cy, cx = np.round(h / 2), np.round(w / 2)
    else:
        cy, cx = np.argwhere(m).mean(axis=0).round()
    return int(cy) + 1, int(cx) + 1


def s_measure(pred, mask, alpha: float = S_ALPHA) -> float:
    p, m = _prep(pred, mask)
    y = m.mean()
    if y == 0:
        return float(1 - p.mean())
    if y == 1:
        return float(p.mean())
    obj = _object_score(p[m]) * y + _object_score((1 - p)[~m]) * (1 - y)
    h, w = m.shape
    cy, cx = _centroid(m)
    mf = m.astype(np.float64)
    region = 0.0
    for rows, cols in (((0, cy), (0, cx)), ((0, cy), (cx, w)), ((cy, h), (0, cx)), ((cy, h), (cx, w))):
        area = (rows[1] - rows[0]) * (cols[1] - cols[0])
        if area <= 0:
            continue
        sl = (slice(*rows), slice(*cols))
        region += _region_ssim(p[sl], mf[sl]) * area / (h * w)
    return float(max(0.0, alpha * obj + (1 - alpha) * region))


# --------------------------------------------------------------------------- E-measure


def _enhanced_sum(fg_fg, fg_bg, pred_fg, n_fg, size):
    """Sum of the enhanced-alignment matrix from region counts of a binarized prediction."""
    pred_bg = size - pred_fg
    if n_fg == 0:
        return pred_bg
    if n_fg == size:
        return pred_fg
    bg_fg = n_fg - fg_fg
    bg_bg = pred_bg - bg_fg
    mp = pred_fg / size
    mg = n_fg / size
    total = 0.0
    for count, a, b in ((fg_fg, 1 - mp, 1 - mg), (fg_bg, 1 - mp, -mg), (bg_fg, -mp, 1 - mg), (bg_bg, -mp, -mg)):
        align = 2 * a * b / (a * a + b * b + EPS)
        total = total + (align + 1) ** 2 / 4 * count
    return total


def e_measure_curve(pred, mask) -> np.ndarray:
    """Enhanced-alignment score at each of the 256 thresholds k/255."""
    p, m = _prep(pred, mask)
    q = quantize(p)
    fg_fg = np.cumsum(np.bincount(q[m], minlength=THRESHOLDS)[::-1])[::-1].astype(np.float64)
    fg_bg = np.cumsum(np.bincount(q[~m], minlength=THRESHOLDS)[::-1])[::-1].astype(np.float64)
    size = m.size
    total = _enhanced_sum(fg_fg, fg_bg, fg_fg + fg_bg, int(m.sum()), size)
    return np.broadcast_to(np.asarray(total, dtype=np.float64), (THRESHOLDS,)) / (size - 1 + EPS)


def e_measure_at(pred, mask, threshold: float) -> float:
    p, m = _prep(pred, mask)
    b = p >= threshold
    fg_fg, fg_bg = int(np.sum(b & m)), int(np.sum(b & ~m))
    return float(_enhanced_sum(fg_fg, fg_bg, fg_fg + fg_bg, int(m.sum()), m.size) / (m.size - 1 + EPS))


def e_measure(pred, mask) -> float:
    """Mean E-measure over the 256 thresholds."""
    return float(e_measure_curve(pred, mask).mean())


def e_measure_adaptive(pred, mask) -> float:
    p, _ = _prep(pred, mask)
    return e_measure_at(pred, mask, min(2 * p.mean(), 1.0))


# --------------------------------------------------------------------------- depth variance


@dataclass
class DepthVarianceReport:
    sample_ids: list[str]
    var_fg: np.ndarray
    var_bg: np.ndarray
    var_all: np.ndarray

    @property
    def mean_fg(self) -> float:
        return _nanmean(self.var_fg)

    @property
    def mean_bg(self) -> float:
        return _nanmean(self.var_bg)

    @property
    def mean_all(self) -> float:
        return _nanmean(self.var_all)

    @property
    def comparable(self) -> np.ndarray:
        return np.isfinite(self.var_fg) & np.isfinite(self.var_bg)

    @property
    def fraction_fg_lower(self) -> float:
        ok = self.comparable
        return float(np.mean(self.var_fg[ok] < self.var_bg[ok])) if ok.any() else float("nan")

    def summary(self) -> dict:
        return {
            "samples": len(self.sample_ids),
            "mean_var_fg": self.mean_fg,
            "mean_var_bg": self.mean_bg,
            "mean_var_all": self.mean_all,
            "fraction_fg_lower": self.fraction_fg_lower,
        }


def _nanmean(x: np.ndarray) -> float:
    x = x[np.isfinite(x)]
    return float(x.mean()) if x.size else float("nan")


def _var(x: np.ndarray) -> float:
    if x.size == 0:
        return float("nan")
    # shifting by one sample keeps a constant region at exactly zero
    return float((x - x.flat[0]).var())


def region_variances(depth, mask) -> tuple[float, float, float]:
    d = np.asarray(depth, dtype=np.float64)
    _, m = _prep(d, mask)
    return _var(d[m]), _var(d[~m]), _var(d)


def depth_variance_report(depths, masks, sample_ids=None) -> DepthVarianceReport:
    """Population variance of depth inside the mask, outside it and overall; NaN marks an empty region."""
    if isinstance(depths, np.ndarray) and depths.ndim == 2:
        depths, masks = [depths], [masks]
    depths, masks = list(depths), list(masks)
    if not depths:
        raise EmptyInput("no samples for depth variance report")
    if len(depths) != len(masks):
        raise ShapeError("depth and mask counts differ")
    rows = np.array([region_variances(d, m) for d, m in zip(depths, masks)], dtype=np.float64)
    ids = list(sample_ids) if sample_ids is not None else [str(i) for i in range(len(depths))]
    return DepthVarianceReport(ids, rows[:, 0], rows[:, 1], rows[:, 2])


# --------------------------------------------------------------------------- reports


@dataclass
class SampleMetrics:
    fmax: float
    fw: float
    em: float
    sm: float
    mae: float
    var_fg: float = float("nan")
    var_bg: float = float("nan")
    var_all: float = float("nan")


@dataclass
class MetricReport:
    f_max: float
    f_weighted: float
    e_measure: float
    s_measure: float
    mae: float
    per_sample: dict[str, SampleMetrics] = field(default_factory=dict)
    unpaired: list[str] = field(default_factory=list)
    depth: DepthVarianceReport | None = None

    def summary(self) -> dict:
        out = {
            "samples": len(self.per_sample),
            "f_max": self.f_max,
            "f_weighted": self.f_weighted,
            "e_measure": self.e_measure,
            "s_measure": self.s_measure,
            "mae": self.mae,
            "unpaired": list(self.unpaired),
        }
        if self.depth is not None:
            out["depth"] = self.depth.summary()
        return out


def evaluate_sample(pred, mask, depth=None) -> SampleMetrics:
    p, m = _prep(pred, mask)
    row = SampleMetrics(f_max(p, m), weighted_f_measure(p, m), e_measure(p, m), s_measure(p, m), mae(p, m))
    if depth is not None:
        row.var_fg, row.var_bg, row.var_all = region_variances(depth, m)
    return row


def aggregate(rows: dict[str, SampleMetrics], unpaired=(), with_depth: bool = False) -> MetricReport:
    if not rows:
        raise EmptyInput("no evaluated samples")

    def mean(key):
        return float(np.mean([getattr(r, key) for r in rows.values()]))

    depth = None
    if with_depth:
        ids = list(rows)
        depth = DepthVarianceReport(
            ids, *(np.array([getattr(rows[i], k) for i in ids]) for k in ("var_fg", "var_bg", "var_all"))
        )
    return MetricReport(mean("fmax"), mean("fw"), mean("em"), mean("sm"), mean("mae"), dict(rows),
                        sorted(unpaired), depth)


def read_prediction(path: Path, normalize: bool = True) -> np.ndarray:
    """Read a prediction map into [0, 1]; ``normalize`` applies min-max scaling as the standard toolkits do."""
    arr = _read_gray(Path(path))
    if normalize:
        lo, hi = arr.min(), arr.max()
        if hi != lo:
            arr = (arr - lo) / (hi - lo)
    return arr


def _read_gray(path: Path) -> np.ndarray:
    if not path.is_file():
        raise NotFound(f"missing file: {path}")
    with Image.open(path) as img:
        if img.mode in ("RGB", "RGBA", "LA", "P"):
            return np.asarray(img.convert("L")).astype(np.float64) / 255.0
    return read_mask_png(path)


def _stems(directory: Path) -> dict[str, Path]:
    return {p.stem: p for p in sorted(directory.glob("*.png"))}


def evaluate_directory(
    pred_dir,
    gt_dir,
    depth_dir=None,
    out_dir=None,
    normalize: bool = True,
    binarize: bool = False,
) -> MetricReport:
    """Pair PNGs by file stem, score each pair and aggregate by the arithmetic mean.

    Files present on only one side are listed in ``report.unpaired`` and skipped.
    Writes ``metrics.csv`` and ``summary.json`` into ``out_dir`` when given.
    """
    pred_dir, gt_dir = Path(pred_dir), Path(gt_dir)
    for d in (pred_dir, gt_dir):
        if not d.is_dir():
            raise NotFound(f"not a directory: {d}")
    preds, gts = _stems(pred_dir), _stems(gt_dir)
    if not preds and not gts:
        raise EmptyInput(f"no PNG files in {pred_dir} or {gt_dir}")
    depths = _stems(Path(depth_dir)) if depth_dir is not None else {}
    unpaired = sorted(set(preds) ^ set(gts))
    rows: dict[str, SampleMetrics] = {}
    for stem in sorted(set(preds) & set(gts)):
        mask = read_mask_png(gts[stem]) > 0.5
        pred = read_prediction(preds[stem], normalize)
        if pred.shape != mask.shape:
            raise ShapeError(f"{stem}: prediction {pred.shape} vs mask {mask.shape}")
        if binarize:
            pred = (pred > 0.5).astype(np.float64)
        depth = None
        if depth_dir is not None:
            if stem not in depths:
                raise NotFound(f"{stem}: no depth map in {depth_dir}")
            depth = read_depth_png(depths[stem])
            if depth.shape != mask.shape:
                raise ShapeError(f"{stem}: depth {depth.shape} vs mask {mask.shape}")
        rows[stem] = evaluate_sample(pred, mask, depth)
    if not rows:
        raise EmptyInput("no prediction/ground-truth pairs")
    report = aggregate(rows, unpaired, with_depth=depth_dir is not None)
    if out_dir is not None:
        write_report(report, out_dir)
    return report


def _fmt(x: float) -> str:
    return "nan" if math.isnan(x) else repr(float(x))


def write_report(report: MetricReport, out_dir) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path, json_path = out / "metrics.csv", out / "summary.json"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for sid, row in report.per_sample.items():
            d = asdict(row)
            writer.writerow([sid] + [_fmt(d[k]) for k in CSV_COLUMNS[1:]])
    summary = report.summary()
    summary["per_sample"] = {sid: asdict(r) for sid, r in report.per_sample.items()}
    json_path.write_text(json.dumps(summary, indent=2, allow_nan=True))
    return csv_path, json_path


def read_csv_rows(path) -> dict[str, dict[str, float]]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
            raise DataError(f"{path}: unexpected columns {reader.fieldnames}")
        return {r["sample_id"]: {k: float(r[k]) for k in CSV_COLUMNS[1:]} for r in reader}
