"""Segmentation metrics: confusion matrix, accuracy, IoU, mIoU and HM.

Classes that never occur in either truth or prediction have no defined IoU;
such entries are NaN and are left out of every mean.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Dict, Iterable, Optional, Sequence, Tuple

import numpy as np

from .data import CLASS_NAMES, SplitConfig


class ConfusionMatrix:
    """Counts with rows = ground truth and columns = prediction.

    ``class_ids[i]`` is the class id of row/column ``i``.
    """

    def __init__(self, class_ids: Sequence[int], counts=None):
        self.class_ids = tuple(int(c) for c in class_ids)
        if len(set(self.class_ids)) != len(self.class_ids):
            raise ValueError("duplicate class id in confusion matrix")
        c = len(self.class_ids)
        if counts is None:
            self.counts = np.zeros((c, c), dtype=np.int64)
        else:
            self.counts = np.array(counts, dtype=np.int64)
            if self.counts.shape != (c, c):
                raise ValueError(f"counts must be {c}x{c}")
            if (self.counts < 0).any():
                raise ValueError("negative count")
        self._index = {cid: i for i, cid in enumerate(self.class_ids)}

    @property
    def n_classes(self):
        return len(self.class_ids)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def index_of(self, labels) -> np.ndarray:
        labels = np.asarray(labels, dtype=np.int64).reshape(-1)
        out = np.empty(labels.shape, dtype=np.int64)
        for j, lab in enumerate(labels):
            try:
                out[j] = self._index[int(lab)]
            except KeyError:
                raise ValueError(f"label {int(lab)} out of range for classes {self.class_ids}") from None
        return out

    def accumulate(self, truths, predictions) -> "ConfusionMatrix":
        t = np.asarray(truths, dtype=np.int64).reshape(-1)
        p = np.asarray(predictions, dtype=np.int64).reshape(-1)
        if t.shape != p.shape:
            raise ValueError("truths and predictions differ in length")
        if t.size == 0:
            return self
        ti, pi = self.index_of(t), self.index_of(p)
        c = self.n_classes
        self.counts += np.bincount(ti * c + pi, minlength=c * c).reshape(c, c)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        """Elementwise sum; order independent."""
        if other.class_ids != self.class_ids:
            raise ValueError("cannot merge matrices over different classes")
        return ConfusionMatrix(self.class_ids, self.counts + other.counts)

    def __eq__(self, other):
        return (isinstance(other, ConfusionMatrix) and other.class_ids == self.class_ids
                and np.array_equal(other.counts, self.counts))

    def to_csv(self, names: Optional[Dict[int, str]] = None) -> str:
        names = names or CLASS_NAMES
        labels = [names.get(c, str(c)) for c in self.class_ids]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["truth\\pred", *labels])
        for lab, row in zip(labels, self.counts):
            w.writerow([lab, *(int(v) for v in row)])
        return buf.getvalue()


def accumulate(cm: ConfusionMatrix, truths, predictions) -> ConfusionMatrix:
    return cm.accumulate(truths, predictions)


def iou_per_class(cm: ConfusionMatrix) -> np.ndarray:
    """TP / (TP + FP + FN) per class; NaN where the denominator is 0."""
    m = cm.counts.astype(np.float64)
    tp = np.diag(m)
    denom = m.sum(axis=0) + m.sum(axis=1) - tp
    out = np.full(cm.n_classes, np.nan)
    ok = denom > 0
    out[ok] = tp[ok] / denom[ok]
    return out


def recall_per_class(cm: ConfusionMatrix) -> np.ndarray:
    """diag / row sum; NaN for classes with no ground-truth points."""
    m = cm.counts.astype(np.float64)
    rows = m.sum(axis=1)
    out = np.full(cm.n_classes, np.nan)
    ok = rows > 0
    out[ok] = np.diag(m)[ok] / rows[ok]
    return out


def _nanmean(values) -> float:
    v = np.asarray(values, dtype=np.float64)
    v = v[~np.isnan(v)]
    return float(v.mean()) if v.size else math.nan


def _subset_mask(cm: ConfusionMatrix, classes) -> np.ndarray:
    classes = {int(c) for c in classes}
    return np.array([c in classes for c in cm.class_ids], dtype=bool)


def _check_split(cm: ConfusionMatrix, split: SplitConfig):
    missing = set(cm.class_ids) - set(split.seen) - set(split.unseen)
    if missing:
        raise ValueError(f"split does not cover classes {sorted(missing)}")


def miou_subsets(cm: ConfusionMatrix, split: SplitConfig) -> Tuple[float, float, float]:
    """(mIoU seen, mIoU unseen, mIoU all); NaN marks an undefined mean.

    The overall value averages every defined class directly, not the two
    subset means.
    """
    _check_split(cm, split)
    iou = iou_per_class(cm)
    return (_nanmean(iou[_subset_mask(cm, split.seen)]),
            _nanmean(iou[_subset_mask(cm, split.unseen)]),
            _nanmean(iou))


def harmonic_mean(a: float, b: float) -> float:
    if a < 0 or b < 0:
        raise ValueError("harmonic mean needs nonnegative inputs")
    if a + b == 0:
        return 0.0
    return 2.0 * a * b / (a + b)


def _hm_or_nan(a, b):
    return math.nan if math.isnan(a) or math.isnan(b) else harmonic_mean(a, b)


@dataclass
class MetricsReport:
    class_ids: Tuple[int, ...]
    overall_acc: float
    per_class_acc: np.ndarray
    per_class_iou: np.ndarray
    acc_seen: float
    acc_unseen: float
    miou_seen: float
    miou_unseen: float
    miou_all: float
    hm_acc: float
    hm_miou: float

    def rows(self):
        """``(metric, value)`` pairs in a fixed order; NaN means undefined."""
        out = [("overall_acc", self.overall_acc)]
        for c, v in zip(self.class_ids, self.per_class_acc):
            out.append((f"acc_{CLASS_NAMES.get(c, c)}", v))
        for c, v in zip(self.class_ids, self.per_class_iou):
            out.append((f"iou_{CLASS_NAMES.get(c, c)}", v))
        out += [("acc_seen", self.acc_seen), ("acc_unseen", self.acc_unseen),
                ("hm_acc", self.hm_acc), ("miou_seen", self.miou_seen),
                ("miou_unseen", self.miou_unseen), ("miou_all", self.miou_all),
                ("hm_miou", self.hm_miou)]
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "value"])
        for name, v in self.rows():
            w.writerow([name, "undefined" if math.isnan(v) else repr(float(v))])
        return buf.getvalue()

    def to_text(self) -> str:
        lines = [f"{'class':<8}{'acc':>9}{'iou':>9}"]
        for c, a, i in zip(self.class_ids, self.per_class_acc, self.per_class_iou):
            lines.append(f"{CLASS_NAMES.get(c, str(c)):<8}{_fmt(a):>9}{_fmt(i):>9}")
        lines.append("")
        lines.append(f"overall acc  {_fmt(self.overall_acc)}")
        lines.append(f"acc seen     {_fmt(self.acc_seen)}   unseen {_fmt(self.acc_unseen)}"
                     f"   HM {_fmt(self.hm_acc)}")
        lines.append(f"mIoU seen    {_fmt(self.miou_seen)}   unseen {_fmt(self.miou_unseen)}"
                     f"   all {_fmt(self.miou_all)}   HM {_fmt(self.hm_miou)}")
        lines.append("(undefined classes are excluded from every mean)")
        return "\n".join(lines) + "\n"


def _fmt(v):
    return "n/a" if math.isnan(v) else f"{v:.4f}"


def build_report(cm: ConfusionMatrix, split: SplitConfig) -> MetricsReport:
    if cm.total == 0:
        raise ValueError("empty confusion matrix")
    _check_split(cm, split)
    recall = recall_per_class(cm)
    iou = iou_per_class(cm)
    seen, unseen = _subset_mask(cm, split.seen), _subset_mask(cm, split.unseen)
    acc_s, acc_u = _nanmean(recall[seen]), _nanmean(recall[unseen])
    mi_s, mi_u, mi_all = miou_subsets(cm, split)
    return MetricsReport(
        class_ids=cm.class_ids,
        overall_acc=float(np.trace(cm.counts)) / cm.total,
        per_class_acc=recall,
        per_class_iou=iou,
        acc_seen=acc_s,
        acc_unseen=acc_u,
        miou_seen=mi_s,
        miou_unseen=mi_u,
        miou_all=mi_all,
        hm_acc=_hm_or_nan(acc_s, acc_u),
        hm_miou=_hm_or_nan(mi_s, mi_u),
    )
