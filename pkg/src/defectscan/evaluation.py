"""Binary detection metrics, the contamination sweep, and arithmetic checks
on externally reported benchmark results."""

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .iforest import rethreshold


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self):
        return self.tp + self.fp + self.tn + self.fn


@dataclass
class MetricsReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    counts: ConfusionCounts
    warnings: list = field(default_factory=list)


def compute_metrics(verdicts):
    """Standard accuracy/precision/recall/F1 from (predicted, actual) pairs.

    Positive class is 'anomalous' (1).  Zero denominators yield 0.0 with a
    recorded warning instead of aborting, so sweeps always complete.
    """
    pairs = list(verdicts)
    if not pairs:
        raise ContractError("compute_metrics: empty verdict list")
    tp = fp = tn = fn = 0
    for pred, actual in pairs:
        p, a = int(pred), int(actual)
        if p not in (0, 1) or a not in (0, 1):
            raise ContractError(f"compute_metrics: labels must be binary, got ({pred}, {actual})")
        if p and a:
            tp += 1
        elif p and not a:
            fp += 1
        elif not p and a:
            fn += 1
        else:
            tn += 1
    counts = ConfusionCounts(tp, fp, tn, fn)
    warnings = []

    def safe_div(num, den, name):
        if den == 0:
            warnings.append(f"{name} denominator is zero; reporting 0.0")
            return 0.0
        return num / den

    precision = safe_div(tp, tp + fp, "precision")
    recall = safe_div(tp, tp + fn, "recall")
    accuracy = (tp + tn) / counts.total
    f1 = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    return MetricsReport(accuracy=accuracy, precision=precision, recall=recall,
                         f1=f1, counts=counts, warnings=warnings)


def sensitivity_sweep(test_scores, actual, train_scores, grid):
    """Rethreshold cached training scores per contamination value (no refit).

    Returns one row per grid value: contamination, threshold, flagged count,
    and the four metrics against `actual`.
    """
    scores = np.asarray(test_scores, dtype=np.float64)
    labels = [int(a) for a in actual]
    if scores.size != len(labels):
        raise ContractError(f"sweep: {scores.size} scores vs {len(labels)} labels")
    rows = []
    for cont in grid:
        if not 0.0 <= cont <= 0.5:
            raise ContractError(f"sweep: contamination {cont} outside [0, 0.5]")
        thr = rethreshold(train_scores, float(cont))
        preds = (scores > thr).astype(int)
        report = compute_metrics(zip(preds, labels))
        rows.append({
            "contamination": float(cont),
            "threshold": thr,
            "flagged": int(preds.sum()),
            "accuracy": report.accuracy,
            "precision": report.precision,
            "recall": report.recall,
            "f1": report.f1,
        })
    return rows


def write_metrics_csv(report, path):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["accuracy", "precision", "recall", "f1",
                         "tp", "fp", "tn", "fn", "warnings"])
        c = report.counts
        writer.writerow([repr(report.accuracy), repr(report.precision),
                         repr(report.recall), repr(report.f1),
                         c.tp, c.fp, c.tn, c.fn, ";".join(report.warnings)])


def write_sweep_csv(rows, path):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["contamination", "threshold", "flagged",
                         "accuracy", "precision", "recall", "f1"])
        for r in rows:
            writer.writerow([repr(r["contamination"]), repr(r["threshold"]), r["flagged"],
                             repr(r["accuracy"]), repr(r["precision"]),
                             repr(r["recall"]), repr(r["f1"])])


# ---------------------------------------------------------------------------
# reference results reported for this detector family (rounded to 2 decimals);
# the F1 column must equal the harmonic mean of precision and recall
# ---------------------------------------------------------------------------

REFERENCE_RESULTS = {
    # dataset -> method -> (accuracy, precision, recall, f1)
    "prints": {
        "b+a": (0.73, 0.77, 0.68, 0.72),
        "l+f": (0.67, 0.70, 0.64, 0.67),
        "diffusionad": (0.42, 0.39, 0.20, 0.27),
        "anoddpm": (0.46, 0.45, 0.11, 0.18),
        "ddpm": (0.50, 0.60, 0.14, 0.22),
        "radar": (0.82, 0.77, 0.93, 0.85),
    },
    "tile": {
        "b+a": (0.51, 0.87, 0.35, 0.50),
        "l+f": (0.36, 1.00, 0.07, 0.13),
        "diffusionad": (0.35, 0.58, 0.20, 0.30),
        "anoddpm": (0.47, 0.63, 0.57, 0.60),
        "ddpm": (0.43, 0.59, 0.57, 0.58),
        "radar": (0.64, 0.95, 0.51, 0.67),
    },
}


def harmonic_f1(precision, recall):
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def reference_consistency(tolerance=0.01):
    """Check every reference cell: reported F1 vs recomputed harmonic mean.

    Returns one row per (dataset, method) with the recomputed value, the
    absolute deviation, and an 'ok' flag at the given tolerance.
    """
    rows = []
    for dataset, methods in REFERENCE_RESULTS.items():
        for method, (acc, precision, recall, f1) in methods.items():
            recomputed = harmonic_f1(precision, recall)
            deviation = abs(recomputed - f1)
            rows.append({
                "dataset": dataset,
                "method": method,
                "accuracy": acc,
                "precision": precision,
                "recall": recall,
                "reported_f1": f1,
                "recomputed_f1": recomputed,
                "deviation": deviation,
                "ok": bool(deviation <= tolerance + 1e-12),
            })
    return rows
