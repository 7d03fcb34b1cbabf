"""Detection metrics and per-condition reporting."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .nnet import CostReport


@dataclass
class ScoredUtterance:
    score: float
    is_target: bool
    condition: str = ""


def accuracy(predictions, labels) -> float:
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape:
        raise DataError(f"shape mismatch {predictions.shape} vs {labels.shape}")
    if predictions.size == 0:
        raise DataError("empty prediction set")
    return float(np.mean(predictions == labels))


def frr_at_far(scores, is_target, far_target: float):
    """(FRR, threshold) at the best operating point with FAR <= far_target.

    A detection fires when score >= threshold. Candidate thresholds are the
    distinct observed scores plus +inf (never fire). Among the feasible
    candidates the pair with minimum FRR wins; ties go to the largest
    threshold, the most conservative operating point with that FRR.
    """
    scores = np.asarray(scores, dtype=np.float64)
    is_target = np.asarray(is_target, dtype=bool)
    if scores.shape != is_target.shape or scores.ndim != 1:
        raise DataError("scores and is_target must be equal-length 1-D")
    if not 0.0 <= far_target <= 1.0:
        raise DataError(f"far_target {far_target} outside [0, 1]")
    n_pos = int(is_target.sum())
    n_neg = scores.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DataError("need at least one target and one non-target score")

    candidates = np.unique(scores)
    best_frr, best_theta = None, None
    for theta in list(candidates) + [np.inf]:
        fires = scores >= theta
        far = np.count_nonzero(fires & ~is_target) / n_neg
        if far > far_target:
            continue
        frr = np.count_nonzero(~fires & is_target) / n_pos
        if best_frr is None or frr < best_frr or (frr == best_frr and theta > best_theta):
            best_frr, best_theta = frr, theta
    return float(best_frr), float(best_theta)


def report_by_condition(rows, far_target: float = 0.1,
                        cost: CostReport | None = None,
                        cost_non_playback: CostReport | None = None):
    """Per-condition accuracy/FRR table; returns (text, records).

    Each row needs condition, prediction, label, score, is_target. Records
    are dicts (one per condition plus 'overall'); text is an aligned table.
    When CostReports are given, parameter and FLOP columns are appended
    (playback costs on playback conditions, non-playback costs otherwise).
    """
    if not rows:
        raise DataError("no rows to report")
    by_cond: dict = {}
    for r in rows:
        by_cond.setdefault(r["condition"], []).append(r)

    def _stats(subset):
        acc = accuracy([r["prediction"] for r in subset], [r["label"] for r in subset])
        scores = [r["score"] for r in subset]
        tags = [r["is_target"] for r in subset]
        if any(tags) and not all(tags):
            frr, theta = frr_at_far(scores, tags, far_target)
        else:
            frr, theta = float("nan"), float("nan")
        return acc, frr, theta

    records = []
    for cond in sorted(by_cond):
        acc, frr, theta = _stats(by_cond[cond])
        rec = {"condition": cond, "n": len(by_cond[cond]), "accuracy": acc,
               "frr_at_far": frr, "threshold": theta, "far_target": far_target}
        if cost is not None:
            c = cost_non_playback if (cond == "non_playback" and cost_non_playback) else cost
            rec["params"] = c.params
            rec["flops_per_output_frame"] = c.flops_per_output_frame
        records.append(rec)
    all_rows = [r for rs in by_cond.values() for r in rs]
    acc, frr, theta = _stats(all_rows)
    overall = {"condition": "overall", "n": len(all_rows), "accuracy": acc,
               "frr_at_far": frr, "threshold": theta, "far_target": far_target}
    if cost is not None:
        overall["params"] = cost.params
        overall["flops_per_output_frame"] = cost.flops_per_output_frame
    records.append(overall)

    headers = ["condition", "n", "accuracy", f"frr@far={far_target:g}"]
    if cost is not None:
        headers += ["params", "flops/frame"]
    lines = []
    for rec in records:
        cells = [rec["condition"], str(rec["n"]), f"{rec['accuracy']:.4f}",
                 "-" if np.isnan(rec["frr_at_far"]) else f"{rec['frr_at_far']:.4f}"]
        if cost is not None:
            cells += [str(rec["params"]), str(rec["flops_per_output_frame"])]
        lines.append(cells)
    widths = [max(len(h), *(len(row[i]) for row in lines)) for i, h in enumerate(headers)]
    fmt = "  ".join("{:<%d}" % w for w in widths)
    text = "\n".join([fmt.format(*headers)] + [fmt.format(*row) for row in lines])
    return text, records
