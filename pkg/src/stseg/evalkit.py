"""Segmentation scoring: confusion counts, cluster-to-class mapping, mIoU.

Predicted labels are cluster ids with no inherent class meaning, so scoring
first builds a K_pred x C_true confusion matrix, then maps each cluster to a
truth class (optimal assignment when the shapes match, majority vote
otherwise), and finally reads per-class IoU off the mapped counts.
"""

import json

import numpy as np

from .tracking import solve_assignment


class ConfusionMatrix:
    """K_pred x C_true count table accumulated over (pred, truth) pairs.

    Rows are predicted cluster ids, columns are ground-truth classes.
    Supports shard-and-merge: accumulate two halves separately and merge,
    the result equals accumulating the concatenation.
    """

    def __init__(self, n_pred, n_true):
        if n_pred < 1 or n_true < 1:
            raise ValueError("confusion matrix needs at least one row and column")
        self.counts = np.zeros((n_pred, n_true), dtype=np.int64)

    @property
    def n_pred(self):
        return self.counts.shape[0]

    @property
    def n_true(self):
        return self.counts.shape[1]

    def total(self):
        return int(self.counts.sum())

    def accumulate(self, pred, truth, ignore=()):
        """Add one batch of label pairs. Truth classes in `ignore` are
        skipped entirely. Out-of-range labels raise."""
        pred = np.asarray(pred, dtype=np.int64).ravel()
        truth = np.asarray(truth, dtype=np.int64).ravel()
        if pred.shape != truth.shape:
            raise ValueError("pred and truth must have equal length")
        if pred.size == 0:
            return self
        keep = np.ones(pred.size, dtype=bool)
        for cls in ignore:
            keep &= truth != cls
        pred = pred[keep]
        truth = truth[keep]
        if pred.size == 0:
            return self
        if pred.min() < 0 or pred.max() >= self.n_pred:
            raise ValueError("predicted label out of range")
        if truth.min() < 0 or truth.max() >= self.n_true:
            raise ValueError("truth label out of range")
        flat = np.bincount(pred * self.n_true + truth,
                           minlength=self.n_pred * self.n_true)
        self.counts += flat.reshape(self.n_pred, self.n_true)
        return self

    def merge(self, other):
        if other.counts.shape != self.counts.shape:
            raise ValueError("shape mismatch")
        self.counts += other.counts
        return self


def map_clusters_to_classes(conf):
    """Assign each predicted cluster a truth class.

    Square case (K_pred == C_true): optimal one-to-one assignment
    maximizing the mapped diagonal mass. Otherwise each cluster votes for
    its majority truth class (ties to the lowest class id).

    Returns an int array of length K_pred.
    """
    counts = conf.counts
    if counts.sum() == 0:
        raise ValueError("empty confusion matrix")
    if conf.n_pred == conf.n_true:
        pairs, _, _ = solve_assignment(-counts.astype(np.float64))
        mapping = np.empty(conf.n_pred, dtype=np.int64)
        for r, c in pairs:
            mapping[r] = c
        return mapping
    return counts.argmax(axis=1)


def miou(conf, mapping):
    """Per-class IoU and the mean over classes actually present.

    A class with TP + FP + FN = 0 never appears in prediction or truth and
    is excluded from the mean. All classes absent raises.

    Returns (iou array of length C_true with NaN for absent classes, mIoU).
    """
    mapping = np.asarray(mapping, dtype=np.int64)
    if mapping.shape != (conf.n_pred,):
        raise ValueError("mapping must assign every cluster a class")
    counts = conf.counts
    c = conf.n_true
    # fold clusters mapped to the same class together
    mapped = np.zeros((c, c), dtype=np.int64)
    np.add.at(mapped, mapping, counts)
    tp = np.diag(mapped).astype(np.float64)
    fp = mapped.sum(axis=1) - tp
    fn = mapped.sum(axis=0) - tp
    denom = tp + fp + fn
    present = denom > 0
    if not present.any():
        raise ValueError("no class present in prediction or truth")
    iou = np.full(c, np.nan)
    iou[present] = tp[present] / denom[present]
    return iou, float(iou[present].mean())


def evaluate_labels(pred, truth, n_pred, n_true, ignore=()):
    """One-call scoring: confusion, mapping, per-class IoU, mIoU."""
    conf = ConfusionMatrix(n_pred, n_true)
    conf.accumulate(pred, truth, ignore=ignore)
    mapping = map_clusters_to_classes(conf)
    iou, mean = miou(conf, mapping)
    return conf, mapping, iou, mean


def write_report(path, iou, mean_iou, mapping, conf, class_names=None,
                 extra=None):
    """Serialize scores to JSON: per-class IoU, mIoU, the cluster mapping,
    and per-class point counts. NaN IoUs (absent classes) become null."""
    iou = np.asarray(iou, dtype=np.float64)
    names = (list(class_names) if class_names is not None
             else [str(i) for i in range(len(iou))])
    if len(names) != len(iou):
        raise ValueError("one name per class required")
    per_class = {
        name: (None if np.isnan(v) else float(v))
        for name, v in zip(names, iou)
    }
    truth_counts = conf.counts.sum(axis=0)
    report = {
        "miou": float(mean_iou),
        "per_class_iou": per_class,
        "cluster_to_class": [int(m) for m in np.asarray(mapping)],
        "truth_point_counts": {n: int(c) for n, c in zip(names, truth_counts)},
        "total_points": conf.total(),
    }
    if extra:
        report.update(extra)
    with open(path, "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)
        f.write("\n")
    return report
