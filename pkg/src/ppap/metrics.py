"""PCK and OKS-based AP/AR for ground-truth-box, one-prediction-per-instance evaluation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ppap.errors import InvalidArgument, InvalidState

OKS_THRESHOLDS = np.linspace(0.5, 0.95, 10)
DEFAULT_KAPPA = 0.08
AREA_MEDIUM = (32**2, 96**2)


@dataclass
class EvalResult:
    pck: float
    ap: float
    ap50: float
    ap75: float
    ar: float
    per_keypoint_pck: list[float]
    counts: dict = field(default_factory=dict)
    ap_m: float | None = None
    ap_l: float | None = None

    def to_dict(self) -> dict:
        d = {
            "pck": self.pck, "ap": self.ap, "ap50": self.ap50, "ap75": self.ap75, "ar": self.ar,
            "per_keypoint_pck": list(self.per_keypoint_pck), "counts": dict(self.counts),
        }
        if self.ap_m is not None and self.ap_l is not None:
            d["ap_m"] = self.ap_m
            d["ap_l"] = self.ap_l
        return d


def pck_counts(preds, gts, bboxes, alpha: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-keypoint (correct, visible) counts.

    preds ``(N, K, >=2)``, gts ``(N, K, 3)``, bboxes ``(N, 4)`` as ``x, y, w, h``.
    """
    if alpha <= 0:
        raise InvalidArgument("alpha must be positive")
    preds = np.asarray(preds, dtype=np.float64)
    gts = np.asarray(gts, dtype=np.float64)
    bboxes = np.asarray(bboxes, dtype=np.float64)
    dist = np.linalg.norm(preds[..., :2] - gts[..., :2], axis=-1)
    thr = alpha * np.maximum(bboxes[:, 2], bboxes[:, 3])
    visible = gts[..., 2] > 0
    correct = (dist <= thr[:, None]) & visible
    return correct.sum(axis=0), visible.sum(axis=0)


def pck(preds, gts, bboxes, alpha: float = 0.05) -> float:
    """Fraction of visible keypoints within ``alpha * max(w, h)``; NaN if none are visible."""
    correct, total = pck_counts(preds, gts, bboxes, alpha)
    n = total.sum()
    return float(correct.sum() / n) if n else math.nan


def oks(pred, gt, bbox_area: float, kappas) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    visible = gt[:, 2] > 0
    if not visible.any():
        raise InvalidState("OKS undefined without visible keypoints")
    kappas = np.broadcast_to(np.asarray(kappas, dtype=np.float64), visible.shape)
    d2 = ((pred[:, :2] - gt[:, :2]) ** 2).sum(axis=-1)
    e = np.exp(-d2 / (2.0 * bbox_area * kappas**2))
    return float(e[visible].mean())


@dataclass
class APResult:
    ap: float
    ap50: float
    ap75: float
    ar: float
    count: int


def average_precision(oks_values, thresholds=OKS_THRESHOLDS) -> APResult:
    """With one candidate per instance, precision and recall at a threshold both
    equal the fraction of instances whose OKS reaches it."""
    v = np.asarray(oks_values, dtype=np.float64)
    if v.size == 0:
        return APResult(math.nan, math.nan, math.nan, math.nan, 0)
    th = np.asarray(thresholds, dtype=np.float64)
    passed = (v[None, :] >= th[:, None]).mean(axis=1)
    ap = float(passed.mean())
    return APResult(
        ap=ap,
        ap50=float((v >= 0.5).mean()),
        ap75=float((v >= 0.75).mean()),
        ar=ap,
        count=int(v.size),
    )


def evaluate_predictions(preds, gts, bboxes, alpha: float = 0.05, kappas=DEFAULT_KAPPA,
                         areas=None) -> EvalResult:
    """Combine PCK and OKS-AP over a set of instances."""
    preds = np.asarray(preds, dtype=np.float64)
    gts = np.asarray(gts, dtype=np.float64)
    bboxes = np.asarray(bboxes, dtype=np.float64)
    if areas is None:
        areas = bboxes[:, 2] * bboxes[:, 3]
    areas = np.asarray(areas, dtype=np.float64)
    correct, total = pck_counts(preds, gts, bboxes, alpha)
    n = int(total.sum())
    per_kp = [float(c / t) if t else math.nan for c, t in zip(correct, total)]

    keep = (gts[..., 2] > 0).any(axis=1)
    oks_values = np.array([oks(p, g, a, kappas) for p, g, a, k in zip(preds, gts, areas, keep) if k])
    res = average_precision(oks_values)
    kept_areas = areas[keep]
    ap_m = ap_l = None
    medium = (kept_areas >= AREA_MEDIUM[0]) & (kept_areas < AREA_MEDIUM[1])
    large = kept_areas >= AREA_MEDIUM[1]
    if medium.any() and large.any():
        ap_m = average_precision(oks_values[medium]).ap
        ap_l = average_precision(oks_values[large]).ap
    return EvalResult(
        pck=float(correct.sum() / n) if n else math.nan,
        ap=res.ap, ap50=res.ap50, ap75=res.ap75, ar=res.ar,
        per_keypoint_pck=per_kp,
        counts={"instances": int(len(gts)), "visible_keypoints": n, "oks_instances": res.count},
        ap_m=ap_m, ap_l=ap_l,
    )
