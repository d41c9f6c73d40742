"""Pixel confusion matrices and the metrics derived from them."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class UndefinedMetricsError(ValueError):
    pass


class ConfusionMatrix:
    """K x K pixel counts, rows = reference class, columns = prediction."""

    def __init__(self, K: int, counts=None):
        self.K = K
        self.counts = np.zeros((K, K), dtype=np.int64) if counts is None else np.array(counts, dtype=np.int64)

    def update(self, pred, ref, ignore_label=None) -> "ConfusionMatrix":
        pred, ref = np.asarray(pred), np.asarray(ref)
        if pred.shape != ref.shape:
            raise ValueError(f"prediction {pred.shape} and reference {ref.shape} differ in shape")
        keep = np.ones(ref.shape, dtype=bool) if ignore_label is None else ref != ignore_label
        p, r = pred[keep].astype(np.int64), ref[keep].astype(np.int64)
        if p.size and (p.min() < 0 or p.max() >= self.K or r.min() < 0 or r.max() >= self.K):
            raise ValueError(f"class id outside [0, {self.K})")
        self.counts += np.bincount(r * self.K + p, minlength=self.K * self.K).reshape(self.K, self.K)
        return self

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.K != self.K:
            raise ValueError("cannot merge matrices with different K")
        return ConfusionMatrix(self.K, self.counts + other.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def tp(self):
        return np.diag(self.counts)

    @property
    def fp(self):
        return self.counts.sum(axis=0) - self.tp

    @property
    def fn(self):
        return self.counts.sum(axis=1) - self.tp

    @property
    def tn(self):
        return self.total - self.tp - self.fp - self.fn


def confusion_update(cm: ConfusionMatrix, pred, ref, ignore_label=None) -> ConfusionMatrix:
    return cm.update(pred, ref, ignore_label)


def _ratio(num, den):
    num = num.astype(float)
    den = den.astype(float)
    out = np.full(num.shape, np.nan)
    ok = den > 0
    out[ok] = num[ok] / den[ok]
    return out


@dataclass
class MetricReport:
    oa: float
    miou: float
    precision: float
    recall: float
    f1: float
    iou: np.ndarray  # per class, NaN where undefined
    class_precision: np.ndarray
    class_recall: np.ndarray
    class_f1: np.ndarray
    class_names: list = field(default_factory=list)

    def flat(self) -> dict:
        out = {"oa": self.oa, "miou": self.miou, "precision": self.precision,
               "recall": self.recall, "f1": self.f1}
        names = self.class_names or [str(k) for k in range(len(self.iou))]
        for key, arr in (("iou", self.iou), ("precision", self.class_precision),
                         ("recall", self.class_recall), ("f1", self.class_f1)):
            for n, v in zip(names, arr):
                out[f"{key}.{n}"] = float(v)
        return out


def _nanmean(a):
    a = a[~np.isnan(a)]
    return float(a.mean()) if a.size else float("nan")


def derive_metrics(cm: ConfusionMatrix, class_names=None) -> MetricReport:
    """OA = trace/total; per-class IoU, precision, recall; macro means over
    classes whose denominator is non-zero; F1 from macro precision/recall."""
    if cm.total == 0:
        raise UndefinedMetricsError("confusion matrix is empty")
    tp, fp, fn = cm.tp, cm.fp, cm.fn
    iou = _ratio(tp, tp + fp + fn)
    prec = _ratio(tp, tp + fp)
    rec = _ratio(tp, tp + fn)
    with np.errstate(invalid="ignore", divide="ignore"):
        cf1 = np.where(prec + rec > 0, 2 * prec * rec / (prec + rec), 0.0)
    cf1[np.isnan(prec) | np.isnan(rec)] = np.nan
    P, R = _nanmean(prec), _nanmean(rec)
    f1 = 2 * P * R / (P + R) if (P + R) > 0 else 0.0
    return MetricReport(
        oa=float(np.trace(cm.counts) / cm.total),
        miou=_nanmean(iou), precision=P, recall=R, f1=float(f1),
        iou=iou, class_precision=prec, class_recall=rec, class_f1=cf1,
        class_names=list(class_names) if class_names is not None else [],
    )


def write_report(report: MetricReport, path) -> None:
    """Flat ``metric=value`` lines plus a per-class CSV next to it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"{k}={v:.10g}" for k, v in report.flat().items()]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    names = report.class_names or [str(k) for k in range(len(report.iou))]
    rows = ["class,iou,precision,recall,f1"]
    for i, n in enumerate(names):
        rows.append(f"{n},{report.iou[i]:.10g},{report.class_precision[i]:.10g},"
                    f"{report.class_recall[i]:.10g},{report.class_f1[i]:.10g}")
    path.with_name(path.stem + "_classes.csv").write_text("\n".join(rows) + "\n", encoding="utf-8")


def read_report(path) -> dict:
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            k, v = line.split("=", 1)
            out[k] = float(v)
    return out
