"""Image and dynamics metrics: PSNR, SSIM, Horn-Schunck flow, flow-mask IoU, pose error."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import convolve, correlate1d

PSNR_CAP = 99.0
NOT_FOUND = -1.0  # pose_error sentinel: no ball pixels in a frame
LUMA = np.array([0.299, 0.587, 0.114])


@dataclass
class EvalConfig:
    alpha: float = 0.5
    ssim_window: int = 11
    ssim_sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    peak: float = 1.0
    flow_smoothness: float = 0.5
    flow_iters: int = 100
    color_tol: float = 0.25
    pooled_iou: bool = False

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("EvalConfig: alpha must be positive")
        if self.ssim_window < 1 or self.ssim_window % 2 == 0:
            raise ValueError("EvalConfig: ssim_window must be a positive odd number")


def _check_pair(a, b, name: str):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"{name}: shape mismatch {a.shape} vs {b.shape}")
    return a, b


def to_gray(img) -> np.ndarray:
    raw = np.asarray(img)
    img = raw.astype(np.float64) / 255.0 if raw.dtype == np.uint8 else raw.astype(np.float64)
    return img @ LUMA if img.ndim == 3 else img


def psnr(image, reference, peak: float = 1.0) -> float:
    a, b = _check_pair(image, reference, "psnr")
    if peak <= 0:
        raise ValueError("psnr: peak must be positive")
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-12:
        return PSNR_CAP
    return float(10.0 * np.log10(peak ** 2 / mse))


def masked_psnr(image, reference, mask, peak: float = 1.0) -> float:
    """PSNR over the pixels where ``mask`` is set (all channels)."""
    a, b = _check_pair(image, reference, "masked_psnr")
    m = np.asarray(mask, dtype=bool)
    if not m.any():
        return PSNR_CAP
    mse = float(np.mean((a[m] - b[m]) ** 2))
    return PSNR_CAP if mse < 1e-12 else float(10.0 * np.log10(peak ** 2 / mse))


def _gauss(window: int, sigma: float) -> np.ndarray:
    x = np.arange(window) - window // 2
    g = np.exp(-0.5 * (x / sigma) ** 2)
    return g / g.sum()


def _filter_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    r = len(g) // 2
    y = correlate1d(correlate1d(x, g, axis=0, mode="nearest"), g, axis=1, mode="nearest")
    return y[r:x.shape[0] - r, r:x.shape[1] - r]


def ssim(image, reference, config: EvalConfig | None = None) -> float:
    """Mean local SSIM of the luma channel over fully covered windows."""
    cfg = config or EvalConfig()
    a, b = _check_pair(to_gray(image), to_gray(reference), "ssim")
    if min(a.shape) < cfg.ssim_window:
        raise ValueError(f"ssim: image {a.shape} smaller than the {cfg.ssim_window}-pixel window")
    g = _gauss(cfg.ssim_window, cfg.ssim_sigma)
    c1, c2 = (cfg.k1 * cfg.peak) ** 2, (cfg.k2 * cfg.peak) ** 2
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    saa = _filter_valid(a * a, g) - mu_a ** 2
    sbb = _filter_valid(b * b, g) - mu_b ** 2
    sab = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (saa + sbb + c2)
    return float(np.mean(num / den))


_HS_AVG = np.array([[1 / 12, 1 / 6, 1 / 12], [1 / 6, 0.0, 1 / 6], [1 / 12, 1 / 6, 1 / 12]])


def estimate_flow(frame0, frame1, smoothness: float = 0.5, iters: int = 100) -> np.ndarray:
    """Horn-Schunck dense flow ``(H, W, 2)`` as (dx, dy) pixels from ``frame0`` to ``frame1``.

    Intensities are luma on the 8-bit scale [0, 255], the scale the smoothness
    weight is calibrated for.
    """
    a, b = _check_pair(to_gray(frame0) * 255.0, to_gray(frame1) * 255.0, "estimate_flow")
    mean = 0.5 * (a + b)
    Iy, Ix = np.gradient(mean)
    It = b - a
    denom = smoothness ** 2 + Ix ** 2 + Iy ** 2
    u = np.zeros_like(a)
    v = np.zeros_like(a)
    for _ in range(iters):
        ub = convolve(u, _HS_AVG, mode="nearest")
        vb = convolve(v, _HS_AVG, mode="nearest")
        k = (Ix * ub + Iy * vb + It) / denom
        u = ub - Ix * k
        v = vb - Iy * k
    return np.stack([u, v], axis=-1)


def flow_masks(video, alpha: float, smoothness: float = 0.5, iters: int = 100) -> np.ndarray:
    video = np.asarray(video)
    return np.stack([
        np.linalg.norm(estimate_flow(video[i], video[i + 1], smoothness, iters), axis=-1) > alpha
        for i in range(len(video) - 1)
    ])


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    """IoU of two boolean masks; NaN when both are empty."""
    union = np.logical_or(a, b).sum()
    if union == 0:
        return float("nan")
    return float(np.logical_and(a, b).sum() / union)


def flow_mask_iou(video_pred, video_gt, alpha: float, config: EvalConfig | None = None,
                  pooled: bool | None = None) -> tuple[np.ndarray, float]:
    """Per frame-pair IoU of thresholded flow-magnitude masks plus their mean.

    Pairs where both masks are empty are NaN and excluded from the mean.  In
    pooled mode the returned scalar is intersection / union summed over all pairs.
    """
    cfg = config or EvalConfig()
    pooled = cfg.pooled_iou if pooled is None else pooled
    if len(video_pred) != len(video_gt):
        raise ValueError(f"flow_mask_iou: {len(video_pred)} predicted vs {len(video_gt)} ground-truth frames")
    if len(video_gt) < 2:
        raise ValueError("flow_mask_iou: need at least two frames")
    mp = flow_masks(video_pred, alpha, cfg.flow_smoothness, cfg.flow_iters)
    mg = flow_masks(video_gt, alpha, cfg.flow_smoothness, cfg.flow_iters)
    per = np.array([mask_iou(a, b) for a, b in zip(mp, mg)])
    if pooled:
        union = np.logical_or(mp, mg).sum()
        mean = float(np.logical_and(mp, mg).sum() / union) if union else float("nan")
    else:
        valid = per[np.isfinite(per)]
        mean = float(valid.mean()) if valid.size else float("nan")
    return per, mean


def ball_centroid(frame, ball_color, tol: float = 0.25) -> np.ndarray | None:
    """Mean (x, y) pixel position (pixel centers at +0.5) of ball-colored pixels."""
    img = np.asarray(frame, dtype=np.float64)
    if np.asarray(frame).dtype == np.uint8:
        img = img / 255.0
    hit = np.max(np.abs(img - np.asarray(ball_color, dtype=np.float64)), axis=-1) < tol
    if not hit.any():
        return None
    r, c = np.nonzero(hit)
    return np.array([c.mean() + 0.5, r.mean() + 0.5])


def pose_error(frames_pred, frames_gt, ball_color, tol: float = 0.25) -> np.ndarray:
    """Per-frame pixel distance between ball centroids; ``NOT_FOUND`` when either is missing."""
    if len(frames_pred) != len(frames_gt):
        raise ValueError("pose_error: frame count mismatch")
    out = []
    for p, g in zip(frames_pred, frames_gt):
        cp, cg = ball_centroid(p, ball_color, tol), ball_centroid(g, ball_color, tol)
        out.append(NOT_FOUND if cp is None or cg is None else float(np.linalg.norm(cp - cg)))
    return np.array(out)


# ---------------------------------------------------------------- reports


def evaluate_video(pred, gt, ball_color, config: EvalConfig | None = None) -> tuple[list[dict], dict]:
    """Per-frame rows ``frame, psnr, ssim, iou, pose_err`` and a summary dictionary.

    ``iou`` of row ``i`` belongs to the frame pair ``(i, i + 1)``; the last row has none.
    """
    cfg = config or EvalConfig()
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"evaluate_video: shape mismatch {pred.shape} vs {gt.shape}")
    per_iou, mean_iou = flow_mask_iou(pred, gt, cfg.alpha, cfg) if len(gt) >= 2 else (np.array([]), float("nan"))
    perr = pose_error(pred, gt, ball_color, cfg.color_tol)
    rows = []
    for i in range(len(gt)):
        rows.append({
            "frame": i,
            "psnr": psnr(pred[i], gt[i], cfg.peak),
            "ssim": ssim(pred[i], gt[i], cfg),
            "iou": float(per_iou[i]) if i < len(per_iou) else float("nan"),
            "pose_err": float(perr[i]),
        })
    found = perr[perr != NOT_FOUND]
    summary = {
        "frames": len(gt),
        "psnr_mean": float(np.mean([r["psnr"] for r in rows])),
        "ssim_mean": float(np.mean([r["ssim"] for r in rows])),
        "iou_mean": mean_iou,
        "iou_pairs": int(np.isfinite(per_iou).sum()),
        "pose_err_mean": float(found.mean()) if found.size else None,
        "pose_not_found": int((perr == NOT_FOUND).sum()),
        "config": asdict(cfg),
    }
    return rows, summary


def write_metrics(out_dir, rows: list[dict], summary: dict, stem: str = "metrics") -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path, json_path = out_dir / f"{stem}.csv", out_dir / f"{stem}_summary.json"
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame", "psnr", "ssim", "iou", "pose_err"])
        for r in rows:
            w.writerow([r["frame"]] + [repr(float(r[k])) for k in ("psnr", "ssim", "iou", "pose_err")])
    json_path.write_text(json.dumps(summary, indent=2, sort_keys=True, allow_nan=True) + "\n")
    return csv_path, json_path
