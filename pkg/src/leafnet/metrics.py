"""Multiclass evaluation: confusion matrices, accuracy/precision/recall/F1,
support-weighted averages, one-vs-rest AUC, and report rendering.

Zero-denominator metrics are defined as 0 and flagged rather than NaN, so
summaries never crash on never-predicted classes. Report JSON rounds
metric values to 4 decimals; comparison tables display 2.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import AllOneClass, EmptyMatrix, SchemaMismatch


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # [K, K] int64, rows = true class, cols = predicted
    class_names: list

    @property
    def k(self):
        return self.counts.shape[0]

    @property
    def total(self):
        return int(self.counts.sum())

    def supports(self):
        return self.counts.sum(axis=1)


def confusion_from_predictions(y_true, y_pred, class_names):
    k = len(class_names)
    counts = np.zeros((k, k), dtype=np.int64)
    for t, p in zip(np.asarray(y_true), np.asarray(y_pred)):
        counts[t, p] += 1
    return ConfusionMatrix(counts, list(class_names))


def accuracy(cm):
    """Correct classifications over all cases: trace / total."""
    total = cm.total
    if total == 0:
        raise EmptyMatrix("confusion matrix holds no samples")
    return float(np.trace(cm.counts)) / total


def precision_per_class(cm):
    """Per-class TP/(TP+FP). Returns (values, defined) where defined marks
    classes with a nonzero denominator; undefined values are 0."""
    diag = np.diag(cm.counts).astype(np.float64)
    denom = cm.counts.sum(axis=0).astype(np.float64)
    defined = denom > 0
    values = np.where(defined, diag / np.where(defined, denom, 1.0), 0.0)
    return values, defined


def recall_per_class(cm):
    """Per-class TP/(TP+FN) with the same zero-denominator convention."""
    diag = np.diag(cm.counts).astype(np.float64)
    denom = cm.counts.sum(axis=1).astype(np.float64)
    defined = denom > 0
    values = np.where(defined, diag / np.where(defined, denom, 1.0), 0.0)
    return values, defined


def f1(precision, recall):
    """Harmonic mean 2PR/(P+R); 0 when P+R = 0. Accepts scalars or arrays."""
    p = np.asarray(precision, dtype=np.float64)
    r = np.asarray(recall, dtype=np.float64)
    denom = p + r
    out = np.where(denom > 0, 2.0 * p * r / np.where(denom > 0, denom, 1.0), 0.0)
    return float(out) if out.ndim == 0 else out


def weighted_average(values, supports):
    supports = np.asarray(supports, dtype=np.float64)
    total = supports.sum()
    if total <= 0:
        raise ValueError("supports must sum to a positive count")
    return float(np.dot(np.asarray(values, dtype=np.float64), supports) / total)


def _midranks(x):
    """1-based ranks with ties sharing their average rank."""
    _, inv, counts = np.unique(x, return_inverse=True, return_counts=True)
    starts = np.concatenate(([0], np.cumsum(counts)[:-1]))
    return starts[inv] + (counts[inv] + 1) / 2.0


@dataclass
class AucResult:
    per_class: np.ndarray  # nan where undefined
    defined: np.ndarray
    weighted: float


def ovr_auc(scores, labels):
    """One-vs-rest AUC per class via the rank (Mann-Whitney) statistic with
    midrank tie handling, plus the support-weighted aggregate.

    Classes lacking positives or negatives are undefined (nan, flagged) and
    excluded from the weighted average. Raises AllOneClass when no class
    has a defined AUC.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n, k = scores.shape
    per_class = np.full(k, np.nan)
    defined = np.zeros(k, dtype=bool)
    supports = np.zeros(k, dtype=np.int64)
    for c in range(k):
        pos = labels == c
        n1 = int(pos.sum())
        n0 = n - n1
        supports[c] = n1
        if n1 == 0 or n0 == 0:
            continue
        ranks = _midranks(scores[:, c])
        auc = (ranks[pos].sum() - n1 * (n1 + 1) / 2.0) / (n1 * n0)
        per_class[c] = auc
        defined[c] = True
    if not defined.any():
        raise AllOneClass("every sample carries the same label; no OvR problem exists")
    w = supports[defined].astype(np.float64)
    weighted = float(np.dot(per_class[defined], w) / w.sum())
    return AucResult(per_class, defined, weighted)


@dataclass
class EvalReport:
    model_id: str
    dataset_id: str
    overall: dict  # accuracy, precision_w, recall_w, f1_w, auc_w (or None)
    per_class: list  # dicts: name, precision, recall, f1, support, flags
    confusion: np.ndarray
    timestamp: str | None = field(default=None, compare=False)

    def to_json_dict(self):
        return {
            "model": self.model_id,
            "dataset": self.dataset_id,
            "overall": dict(self.overall),
            "per_class": [dict(row) for row in self.per_class],
            "confusion": [[int(v) for v in row] for row in self.confusion],
        }

    def to_json(self):
        return json.dumps(self.to_json_dict(), indent=2)


_REPORT_KEYS = {"model", "dataset", "overall", "per_class", "confusion"}
_OVERALL_KEYS = {"accuracy", "precision_w", "recall_w", "f1_w", "auc_w"}


def report_from_json(text):
    d = json.loads(text) if isinstance(text, str) else dict(text)
    if set(d) != _REPORT_KEYS:
        raise SchemaMismatch(f"report keys {sorted(d)} != {sorted(_REPORT_KEYS)}")
    if set(d["overall"]) != _OVERALL_KEYS:
        raise SchemaMismatch("overall block keys do not match the schema")
    return EvalReport(
        model_id=d["model"],
        dataset_id=d["dataset"],
        overall=d["overall"],
        per_class=d["per_class"],
        confusion=np.asarray(d["confusion"], dtype=np.int64),
    )


def _round4(x):
    return round(float(x), 4)


def build_report(cm, scores, labels, model_id="model", dataset_id="dataset",
                 timestamp=None):
    """Assemble the full report; scores may be None (AUC omitted)."""
    prec, prec_def = precision_per_class(cm)
    rec, rec_def = recall_per_class(cm)
    f1s = f1(prec, rec)
    supports = cm.supports()

    auc = None
    auc_degenerate = False
    if scores is not None:
        try:
            auc = ovr_auc(scores, labels)
        except AllOneClass:
            auc_degenerate = True  # single-class data: report without AUC

    per_class = []
    for i, name in enumerate(cm.class_names):
        flags = []
        if not prec_def[i]:
            flags.append("precision_undefined")
        if not rec_def[i]:
            flags.append("recall_undefined")
        if auc_degenerate or (auc is not None and not auc.defined[i]):
            flags.append("auc_undefined")
        per_class.append(
            {
                "name": name,
                "precision": _round4(prec[i]),
                "recall": _round4(rec[i]),
                "f1": _round4(f1s[i]),
                "support": int(supports[i]),
                "flags": flags,
            }
        )

    overall = {
        "accuracy": _round4(accuracy(cm)),
        "precision_w": _round4(weighted_average(prec, supports)),
        "recall_w": _round4(weighted_average(rec, supports)),
        "f1_w": _round4(weighted_average(f1s, supports)),
        "auc_w": _round4(auc.weighted) if auc is not None else None,
    }
    return EvalReport(
        model_id=model_id,
        dataset_id=dataset_id,
        overall=overall,
        per_class=per_class,
        confusion=cm.counts.copy(),
        timestamp=timestamp,
    )


def render_comparison(reports):
    """Aligned text table: Model | Accuracy | Precision | Recall | F1 at
    2-decimal display, one row per report."""
    headers = ["Model", "Accuracy", "Precision", "Recall", "F1-Score"]
    rows = []
    for r in reports:
        o = r.overall
        rows.append(
            [
                r.model_id,
                f"{o['accuracy']:.2f}",
                f"{o['precision_w']:.2f}",
                f"{o['recall_w']:.2f}",
                f"{o['f1_w']:.2f}",
            ]
        )
    widths = [max(len(h), *(len(row[i]) for row in rows)) if rows else len(h)
              for i, h in enumerate(headers)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(headers, widths))]
    for row in rows:
        lines.append("  ".join(v.ljust(w) for v, w in zip(row, widths)))
    return "\n".join(lines)


def comparison_csv(reports):
    lines = ["model,accuracy,precision,recall,f1"]
    for r in reports:
        o = r.overall
        lines.append(
            f"{r.model_id},{o['accuracy']:.2f},{o['precision_w']:.2f},"
            f"{o['recall_w']:.2f},{o['f1_w']:.2f}"
        )
    return "\n".join(lines) + "\n"
