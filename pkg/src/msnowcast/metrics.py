"""Verification metrics in dBZ: MAE, bias, F1 at reflectivity thresholds, PSNR and MS-SSIM."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.ndimage import correlate1d

F1_THRESHOLDS = (12.0, 18.0, 23.0)
DATA_RANGE = 70.0
PSNR_CAP = 100.0
MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
COLUMNS = ("lead_min", "mae", "f1_12", "f1_18", "f1_23", "bias", "ms_ssim", "psnr")


def _check_shapes(pred, truth):
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {truth.shape}")
    return pred, truth


def pointwise_errors(pred, truth) -> tuple[float, float, float]:
    """(mae, mse, bias) with bias = mean(pred - truth)."""
    pred, truth = _check_shapes(pred, truth)
    d = pred - truth
    return float(np.mean(np.abs(d))), float(np.mean(d * d)), float(np.mean(d))


def f1_at_threshold(pred, truth, thr_dbz: float) -> float:
    pred, truth = _check_shapes(pred, truth)
    p = pred >= thr_dbz
    t = truth >= thr_dbz
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    if tp + fp + fn == 0:
        return 1.0  # both masks empty
    return 2.0 * tp / (2.0 * tp + fp + fn)


def psnr(pred, truth, data_range: float = DATA_RANGE, cap: float = PSNR_CAP) -> float:
    if data_range <= 0:
        raise ValueError("data_range must be positive")
    _, mse, _ = pointwise_errors(pred, truth)
    if mse == 0.0:
        return cap
    return float(min(cap, 10.0 * np.log10(data_range**2 / mse)))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img: np.ndarray, win: np.ndarray) -> np.ndarray:
    n = win.size
    out = correlate1d(img, win, axis=-1, mode="constant")
    out = correlate1d(out, win, axis=-2, mode="constant")
    lo = n // 2
    hi_r = img.shape[-2] - (n - 1 - lo)
    hi_c = img.shape[-1] - (n - 1 - lo)
    return out[..., lo:hi_r, lo:hi_c]


def _ssim_terms(a: np.ndarray, b: np.ndarray, data_range: float, win: np.ndarray) -> tuple[float, float]:
    """Mean SSIM and mean contrast-structure term over valid windows."""
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    mu_a = _filter_valid(a, win)
    mu_b = _filter_valid(b, win)
    s_aa = _filter_valid(a * a, win) - mu_a * mu_a
    s_bb = _filter_valid(b * b, win) - mu_b * mu_b
    s_ab = _filter_valid(a * b, win) - mu_a * mu_b
    cs = (2.0 * s_ab + c2) / (s_aa + s_bb + c2)
    lum = (2.0 * mu_a * mu_b + c1) / (mu_a * mu_a + mu_b * mu_b + c1)
    return float(np.mean(lum * cs)), float(np.mean(cs))


def ms_ssim_scales(side: int, max_scales: int = len(MS_SSIM_WEIGHTS), win_size: int = 11) -> int:
    if side < win_size:
        raise ValueError(f"image side {side} is smaller than the {win_size}-pixel window")
    n = 1
    while n < max_scales and side >= win_size * 2**n:
        n += 1
    return n


def _downsample(img: np.ndarray) -> np.ndarray:
    h, w = img.shape[0] // 2 * 2, img.shape[1] // 2 * 2
    x = img[:h, :w]
    return 0.25 * (x[0::2, 0::2] + x[1::2, 0::2] + x[0::2, 1::2] + x[1::2, 1::2])


def ms_ssim(pred, truth, data_range: float = DATA_RANGE, weights: Sequence[float] = MS_SSIM_WEIGHTS) -> float:
    """Multiscale SSIM of two 2-d images.

    Uses as many dyadic scales as the image supports (at most ``len(weights)``)
    with the leading weights renormalized to sum to one. Negative per-scale
    terms are clamped to zero before the fractional powers.
    """
    a, b = _check_shapes(pred, truth)
    if a.ndim != 2:
        raise ValueError("ms_ssim expects 2-d images")
    n = ms_ssim_scales(min(a.shape), len(weights))
    w = np.asarray(weights[:n], dtype=np.float64)
    w = w / w.sum()
    win = gaussian_window()
    value = 1.0
    for j in range(n):
        ssim_j, cs_j = _ssim_terms(a, b, data_range, win)
        term = ssim_j if j == n - 1 else cs_j
        value *= max(term, 0.0) ** w[j]
        if j < n - 1:
            a, b = _downsample(a), _downsample(b)
    return float(value)


def frame_metrics(pred, truth, data_range: float = DATA_RANGE) -> dict[str, float]:
    mae, _, bias = pointwise_errors(pred, truth)
    return {
        "mae": mae,
        "f1_12": f1_at_threshold(pred, truth, 12.0),
        "f1_18": f1_at_threshold(pred, truth, 18.0),
        "f1_23": f1_at_threshold(pred, truth, 23.0),
        "bias": bias,
        "ms_ssim": ms_ssim(pred, truth, data_range),
        "psnr": psnr(pred, truth, data_range),
    }


@dataclass
class MetricsReport:
    lead_minutes: list[int]
    rows: list[dict[str, float]]
    aggregates: dict[str, dict[str, float]] = field(default_factory=dict)

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(COLUMNS)
            for lead, row in zip(self.lead_minutes, self.rows):
                wr.writerow([lead] + [repr(row[c]) for c in COLUMNS[1:]])
            for label, row in self.aggregates.items():
                wr.writerow([label] + [repr(row[c]) for c in COLUMNS[1:]])

    @classmethod
    def from_csv(cls, path) -> "MetricsReport":
        leads, rows, agg = [], [], {}
        with open(path, newline="") as fh:
            rd = csv.reader(fh)
            header = next(rd)
            if tuple(header) != COLUMNS:
                raise ValueError(f"unexpected report header {header}")
            for rec in rd:
                vals = {c: float(v) for c, v in zip(COLUMNS[1:], rec[1:])}
                if rec[0].startswith("agg_"):
                    agg[rec[0]] = vals
                else:
                    leads.append(int(rec[0]))
                    rows.append(vals)
        return cls(leads, rows, agg)


def _mean_rows(rows: list[dict[str, float]]) -> dict[str, float]:
    return {c: float(np.mean([r[c] for r in rows])) for c in COLUMNS[1:]}


def evaluate_run(forecasts, truths, lead_minutes: Sequence[int], data_range: float = DATA_RANGE) -> MetricsReport:
    """Per-lead means over samples plus 0-2 h and 0-6 h aggregates.

    ``forecasts`` and ``truths`` are iterables of [T_o, H, W] dBZ arrays.
    """
    leads = [int(m) for m in lead_minutes]
    per_lead: list[list[dict[str, float]]] = [[] for _ in leads]
    n = 0
    for f, t in zip(forecasts, truths, strict=True):
        f = np.asarray(f)
        t = np.asarray(t)
        if f.shape != t.shape or f.shape[0] != len(leads):
            raise ValueError(f"forecast {f.shape} / truth {t.shape} misaligned with {len(leads)} lead times")
        for j in range(len(leads)):
            per_lead[j].append(frame_metrics(f[j], t[j], data_range))
        n += 1
    if n == 0:
        raise ValueError("no samples to evaluate")
    rows = [_mean_rows(r) for r in per_lead]
    agg = {}
    early = [r for lead, r in zip(leads, rows) if lead <= 120]
    if early:
        agg["agg_0_2h"] = _mean_rows(early)
    agg["agg_0_6h"] = _mean_rows(rows)
    return MetricsReport(leads, rows, agg)
