"""Saliency evaluation: PR/F curves, adaptive F-measure, weighted F-measure,
E-measure and MAE, plus dataset aggregation."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .tensor import interp_matrix

log = logging.getLogger(__name__)

N_THRESHOLDS = 256
THRESHOLDS = np.arange(N_THRESHOLDS) / (N_THRESHOLDS - 1)
BETA2 = 0.3


def _pair(s, g) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(s, dtype=np.float64)
    g = np.asarray(g)
    if s.shape != g.shape:
        raise ValueError(f"prediction {s.shape} and ground truth {g.shape} differ in shape")
    if s.size and not (np.all(np.isfinite(s)) and s.min() >= 0.0 and s.max() <= 1.0):
        raise ValueError("prediction values must lie in [0, 1]")
    return s, g.astype(bool)


def mae(s, g) -> float:
    s, g = _pair(s, g)
    return float(np.abs(s - g).mean())


def _precision_recall(pred: np.ndarray, g: np.ndarray) -> tuple[float, float]:
    tp = np.count_nonzero(pred & g)
    npred = np.count_nonzero(pred)
    npos = np.count_nonzero(g)
    precision = tp / npred if npred else 0.0
    recall = tp / npos if npos else 0.0
    return precision, recall


def pr_at_threshold(s, g, t: float) -> tuple[float, float]:
    """Precision and recall of the mask ``s >= t``."""
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"threshold {t} outside [0, 1]")
    s, g = _pair(s, g)
    return _precision_recall(s >= t, g)


def pr_curve(s, g) -> np.ndarray:
    """(precision, recall) at thresholds i/255, i = 0..255; shape (256, 2)."""
    s, g = _pair(s, g)
    # counts of s >= t for every threshold via a reverse cumulative histogram
    bins = np.searchsorted(THRESHOLDS, s.ravel(), side="right") - 1
    fg = g.ravel()
    hist_all = np.bincount(bins, minlength=N_THRESHOLDS)
    hist_fg = np.bincount(bins[fg], minlength=N_THRESHOLDS)
    npred = np.cumsum(hist_all[::-1])[::-1]
    tp = np.cumsum(hist_fg[::-1])[::-1]
    npos = fg.sum()
    precision = np.divide(tp, npred, out=np.zeros(N_THRESHOLDS), where=npred > 0)
    recall = tp / npos if npos else np.zeros(N_THRESHOLDS)
    return np.stack([precision, recall], axis=1)


def f_measure(precision, recall, beta2: float = BETA2):
    """Weighted harmonic mean of precision and recall; 0 where undefined."""
    p = np.asarray(precision, dtype=np.float64)
    r = np.asarray(recall, dtype=np.float64)
    num = (1 + beta2) * p * r
    den = beta2 * p + r
    out = np.divide(num, den, out=np.zeros(np.broadcast(p, r).shape), where=den > 0)
    return float(out) if out.ndim == 0 else out


def adaptive_threshold(s) -> float:
    return min(1.0, 2.0 * float(np.mean(s)))


def adaptive_binarize(s: np.ndarray) -> np.ndarray:
    """``s >= min(1, 2 mean(s))``; an all-zero map predicts nothing."""
    t = adaptive_threshold(s)
    if t == 0.0:
        return np.zeros(s.shape, dtype=bool)
    return s >= t


def avg_f(s, g) -> float:
    """F-measure of the map binarized at twice its mean value."""
    s, g = _pair(s, g)
    return f_measure(*_precision_recall(adaptive_binarize(s), g))


def _gaussian_kernel(size: int = 7, sigma: float = 5.0) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    k = np.exp(-(r[:, None] ** 2 + r[None, :] ** 2) / (2 * sigma**2))
    return k / k.sum()


_WF_KERNEL = _gaussian_kernel()


def weighted_f(s, g, beta2: float = 1.0, return_flag: bool = False):
    """Weighted F-measure with error dependency and location weighting.

    Background errors inherit the error of their nearest foreground pixel,
    are Gaussian-smoothed (7x7, sigma 5), and are weighted by
    2 - exp(ln(0.5)/5 * distance-to-foreground). An all-background ground
    truth is degenerate and scores 0 (flag set when ``return_flag``).
    """
    s, g = _pair(s, g)
    if not g.any():
        return (0.0, True) if return_flag else 0.0
    err = np.abs(s - g)
    dist, (iy, ix) = ndimage.distance_transform_edt(~g, return_indices=True)
    et = err.copy()
    bg = ~g
    et[bg] = err[iy[bg], ix[bg]]
    ea = ndimage.correlate(et, _WF_KERNEL, mode="nearest")
    min_e = err.copy()
    take = g & (ea < err)
    min_e[take] = ea[take]
    weight = np.ones_like(err)
    weight[bg] = 2.0 - np.exp(np.log(0.5) / 5.0 * dist[bg])
    ew = min_e * weight
    tpw = g.sum() - ew[g].sum()
    fpw = ew[bg].sum()
    recall = 1.0 - ew[g].mean()
    precision = tpw / (tpw + fpw) if (tpw + fpw) > 0 else 0.0
    den = beta2 * precision + recall
    q = (1 + beta2) * precision * recall / den if den > 0 else 0.0
    q = float(min(1.0, max(0.0, q)))
    return (q, False) if return_flag else q


def e_measure(s, g) -> float:
    """Enhanced-alignment measure of the adaptively binarized map."""
    s, g = _pair(s, g)
    fm = adaptive_binarize(s).astype(np.float64)
    gt = g.astype(np.float64)
    if not g.any():
        return float(np.mean(1.0 - fm))
    if g.all():
        return float(np.mean(fm))
    phi_s = fm - fm.mean()
    phi_g = gt - gt.mean()
    den = phi_s**2 + phi_g**2
    align = np.divide(2 * phi_s * phi_g, den, out=np.zeros_like(den), where=den > 0)
    return float(np.mean((1 + align) ** 2 / 4))


# --------------------------------------------------------------------------- #
# dataset level

@dataclass
class ImageMetrics:
    name: str
    avg_f: float
    wf: float
    e: float
    mae: float
    pr: np.ndarray


def image_metrics(name: str, s, g) -> ImageMetrics:
    s, g = _pair(s, g)
    return ImageMetrics(name, avg_f(s, g), weighted_f(s, g), e_measure(s, g), mae(s, g),
                        pr_curve(s, g))


@dataclass
class MetricReport:
    avg_f: float
    wf: float
    e: float
    mae: float
    pr_curve: np.ndarray  # (256, 2) precision, recall
    f_curve: np.ndarray  # (256, 2) threshold, F
    n_images: int
    per_image: list[ImageMetrics] = field(default_factory=list, repr=False)

    def table(self) -> str:
        return (
            "n_images\tavgF\twF\tE\tMAE\n"
            f"{self.n_images}\t{self.avg_f:.3f}\t{self.wf:.3f}\t{self.e:.3f}\t{self.mae:.3f}\n"
        )

    def write(self, report_path: str | Path) -> tuple[Path, Path]:
        """Write the summary table plus ``<stem>_pr.txt`` and ``<stem>_f.txt`` curves."""
        report_path = Path(report_path)
        report_path.write_text(self.table())
        pr_path = report_path.with_name(report_path.stem + "_pr.txt")
        f_path = report_path.with_name(report_path.stem + "_f.txt")
        with open(pr_path, "w") as fh:
            for t, (p, r) in zip(THRESHOLDS, self.pr_curve):
                fh.write(f"{t:.6f} {p:.6f} {r:.6f}\n")
        with open(f_path, "w") as fh:
            for t, f in self.f_curve:
                fh.write(f"{t:.6f} {f:.6f}\n")
        return pr_path, f_path


def aggregate(items: list[ImageMetrics]) -> MetricReport:
    if not items:
        raise ValueError("no images to aggregate")
    items = sorted(items, key=lambda m: m.name)
    pr = np.mean([m.pr for m in items], axis=0)
    f = f_measure(pr[:, 0], pr[:, 1])
    return MetricReport(
        avg_f=float(np.mean([m.avg_f for m in items])),
        wf=float(np.mean([m.wf for m in items])),
        e=float(np.mean([m.e for m in items])),
        mae=float(np.mean([m.mae for m in items])),
        pr_curve=pr,
        f_curve=np.stack([THRESHOLDS, f], axis=1),
        n_images=len(items),
        per_image=items,
    )


def resize_map(s: np.ndarray, h: int, w: int) -> np.ndarray:
    return interp_matrix(s.shape[0], h) @ s @ interp_matrix(s.shape[1], w).T


def evaluate_dataset(pred_dir, gt_dir, workers: int = 1) -> MetricReport:
    """Score every ``gt_dir/*.pgm`` against the same-stem prediction in ``pred_dir``."""
    from .data import read_pnm

    pred_dir, gt_dir = Path(pred_dir), Path(gt_dir)
    gt_files = sorted(gt_dir.glob("*.pgm"))
    if not gt_files:
        raise FileNotFoundError(f"no ground-truth .pgm files in {gt_dir}")

    def one(gt_path: Path) -> ImageMetrics:
        pred_path = pred_dir / gt_path.name
        if not pred_path.exists():
            raise FileNotFoundError(f"missing prediction for {gt_path.name}: {pred_path}")
        g = read_pnm(gt_path).pixels[..., 0] >= 128
        s = read_pnm(pred_path).pixels[..., 0] / 255.0
        if s.shape != g.shape:
            log.warning("resizing prediction %s from %s to %s", pred_path.name, s.shape, g.shape)
            s = np.clip(resize_map(s, *g.shape), 0.0, 1.0)
        return image_metrics(gt_path.stem, s, g)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            items = list(pool.map(one, gt_files))
    else:
        items = [one(p) for p in gt_files]
    return aggregate(items)
