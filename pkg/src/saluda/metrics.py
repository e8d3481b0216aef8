"""Segmentation metrics accumulated globally over a dataset."""
from __future__ import annotations

import json
from fractions import Fraction

import numpy as np

from .geometry import IGNORE_ID
from .model import Network, predict
from .nn import BNMode

DEFAULT_BANDS = ((0.0, 7.5), (7.5, 15.0), (15.0, 30.0), (30.0, 50.0))


class MetricError(ValueError):
    pass


class ConfusionMatrix:
    """``counts[gt, pred]`` over non-ignored points."""

    def __init__(self, num_classes, ignore_id=IGNORE_ID):
        self.num_classes = int(num_classes)
        self.ignore_id = ignore_id
        self.counts = np.zeros((self.num_classes, self.num_classes), dtype=np.int64)

    def accumulate(self, predictions, labels):
        predictions = np.asarray(predictions, dtype=np.int64).reshape(-1)
        labels = np.asarray(labels, dtype=np.int64).reshape(-1)
        if predictions.shape != labels.shape:
            raise MetricError(f"{len(predictions)} predictions for {len(labels)} labels")
        keep = labels != self.ignore_id
        p, g = predictions[keep], labels[keep]
        c = self.num_classes
        if np.any((g < 0) | (g >= c)) or np.any((p < 0) | (p >= c)):
            raise MetricError(f"class id outside [0, {c})")
        self.counts += np.bincount(g * c + p, minlength=c * c).reshape(c, c)
        return self

    def __add__(self, other):
        out = ConfusionMatrix(self.num_classes, self.ignore_id)
        out.counts = self.counts + other.counts
        return out

    @property
    def total(self):
        return int(self.counts.sum())

    def iou_per_class(self):
        """IoU per class; NaN where TP + FP + FN = 0."""
        tp = np.diag(self.counts).astype(np.float64)
        denom = self.counts.sum(axis=0) + self.counts.sum(axis=1) - tp
        out = np.full(self.num_classes, np.nan)
        ok = denom > 0
        out[ok] = tp[ok] / denom[ok]
        return out

    def _exact_iou(self):
        tp = np.diag(self.counts)
        denom = self.counts.sum(axis=0) + self.counts.sum(axis=1) - tp
        return {k: Fraction(int(tp[k]), int(denom[k])) for k in range(self.num_classes) if denom[k] > 0}

    def miou(self):
        """Mean IoU over defined classes, rounded once from the exact rational value."""
        iou = self._exact_iou()
        if not iou:
            raise MetricError("mIoU undefined: no class has any prediction or ground truth")
        return float(sum(iou.values()) / len(iou))

    def fw_iou(self):
        iou = self._exact_iou()
        gt = self.counts.sum(axis=1)
        total = int(gt.sum())
        if total == 0:
            raise MetricError("fw-IoU undefined on an empty matrix")
        return float(sum(Fraction(int(gt[k]), total) * v for k, v in iou.items() if gt[k] > 0))


def iou_per_class(cm):
    return cm.iou_per_class()


def miou(cm):
    return cm.miou()


def fw_iou(cm):
    return cm.fw_iou()


def predict_raw(net: Network, frame, bn_mode=BNMode.EVAL_FROZEN):
    """Arg-max class of every raw point, projected back from its voxel representative."""
    probs = predict(net, frame.graph(net.config), bn_mode)
    return probs.argmax(axis=1)[frame.mapping]


def evaluate(net: Network, frames, num_classes=None):
    cm = ConfusionMatrix(num_classes or net.config.num_classes)
    for f in frames:
        if f.raw.labels is None:
            raise MetricError(f"frame {f.frame_id!r} has no labels")
        cm.accumulate(predict_raw(net, f), f.raw.labels)
    return cm


def point_distance(cloud, mode="3d"):
    d = cloud.positions - cloud.sensor_origin
    if mode == "xy":
        d = d[:, :2]
    elif mode != "3d":
        raise MetricError(f"unknown distance mode {mode!r}")
    return np.linalg.norm(d, axis=1)


def band_matrices(predictions, frames, bands=DEFAULT_BANDS, num_classes=6, distance="3d"):
    """One confusion matrix per ``[lo, hi)`` distance band; points beyond the bands are dropped."""
    bands = [tuple(b) for b in bands]
    for (lo, hi), nxt in zip(bands, bands[1:] + [None]):
        if not lo < hi or (nxt is not None and nxt[0] < hi):
            raise MetricError("bands must be sorted and disjoint")
    cms = [ConfusionMatrix(num_classes) for _ in bands]
    for pred, f in zip(predictions, frames):
        dist = point_distance(f.raw, distance)
        for cm, (lo, hi) in zip(cms, bands):
            sel = (dist >= lo) & (dist < hi)
            cm.accumulate(pred[sel], f.raw.labels[sel])
    return cms


def per_distance_eval(frames, net: Network, bands=DEFAULT_BANDS, distance="3d"):
    preds = [predict_raw(net, f) for f in frames]
    cms = band_matrices(preds, frames, bands, net.config.num_classes, distance)
    out = []
    for (lo, hi), cm in zip(bands, cms):
        try:
            value = cm.miou()
        except MetricError:
            value = None
        out.append({"band": [lo, hi], "miou": value, "points": cm.total})
    return out


def report(cm: ConfusionMatrix, class_names=None, bands=None):
    names = class_names or [str(k) for k in range(cm.num_classes)]
    iou = cm.iou_per_class()
    doc = {
        "iou": {n: (None if np.isnan(v) else float(v)) for n, v in zip(names, iou)},
        "miou": cm.miou(),
        "fw_iou": cm.fw_iou(),
        "points": cm.total,
    }
    if bands is not None:
        doc["per_distance"] = bands
    return doc


def report_json(doc):
    return json.dumps(doc, indent=2)
