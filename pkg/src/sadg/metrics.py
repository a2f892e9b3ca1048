"""ROC, AUC and HTER-at-EER for recapture scores (label 1 = recapture, the positive class).

A sample is flagged as recaptured when its score is >= the threshold.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata


def _check(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.size != y.size:
        raise ValueError(f"{s.size} scores but {y.size} labels")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    if not (y == 1).any() or not (y == 0).any():
        raise ValueError("both classes must be present")
    if not np.isfinite(s).all():
        raise ValueError("scores must be finite")
    return s, y.astype(np.int64)


def roc_curve(scores, labels) -> list[tuple[float, float, float]]:
    """(fpr, tpr, threshold) at every distinct score, plus the (0, 0) anchor at +inf."""
    s, y = _check(scores, labels)
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    tp = np.cumsum(y == 1)
    fp = np.cumsum(y == 0)
    # last index of each run of equal scores
    ends = np.r_[np.flatnonzero(np.diff(s) != 0), s.size - 1]
    npos, nneg = tp[-1], fp[-1]
    points = [(0.0, 0.0, float("inf"))]
    points += [(fp[i] / nneg, tp[i] / npos, float(s[i])) for i in ends]
    return points


def auc(scores, labels) -> float:
    """Area under ROC in percent: P(positive outranks negative), ties counted 1/2."""
    s, y = _check(scores, labels)
    ranks = rankdata(s, method="average")
    npos = int((y == 1).sum())
    nneg = y.size - npos
    u = ranks[y == 1].sum() - npos * (npos + 1) / 2.0
    return float(u / (npos * nneg) * 100.0)


def error_rates(scores, labels, threshold: float) -> tuple[float, float]:
    """(FAR, FRR): recaptures passed as genuine, genuine captures rejected."""
    s, y = _check(scores, labels)
    far = float(np.mean(s[y == 1] < threshold))
    frr = float(np.mean(s[y == 0] >= threshold))
    return far, frr


def candidate_thresholds(scores) -> np.ndarray:
    """Below-min, midpoints between consecutive distinct scores, above-max; ascending."""
    u = np.unique(np.asarray(scores, dtype=np.float64))
    return np.r_[u[0] - 1.0, (u[:-1] + u[1:]) / 2.0, u[-1] + 1.0]


def eer_threshold(scores, labels) -> float:
    """Threshold minimising |FAR - FRR|; ties resolve to the lowest threshold."""
    s, y = _check(scores, labels)
    cand = candidate_thresholds(s)
    pos = np.sort(s[y == 1])
    neg = np.sort(s[y == 0])
    far = np.searchsorted(pos, cand, side="left") / pos.size
    frr = (neg.size - np.searchsorted(neg, cand, side="left")) / neg.size
    gap = np.abs(far - frr)
    return float(cand[int(np.argmin(gap))])


def hter_at_eer(scores, labels, threshold_scores, threshold_labels) -> tuple[float, float]:
    """HTER (percent) on (scores, labels) at the EER threshold of the threshold source."""
    thr = eer_threshold(threshold_scores, threshold_labels)
    far, frr = error_rates(scores, labels, thr)
    return (far + frr) / 2.0 * 100.0, thr


@dataclass
class MetricsReport:
    hter: float
    auc: float
    eer_threshold: float
    roc: list[tuple[float, float, float]] = field(repr=False)
    run_id: str = ""
    target: str = ""
    threshold_policy: str = "source"
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.hter <= 100.0 or not 0.0 <= self.auc <= 100.0:
            raise ValueError(f"metrics out of range: hter={self.hter}, auc={self.auc}")

    def to_record(self) -> dict:
        rec = {"hter": round(self.hter, 6), "auc": round(self.auc, 6),
               "eer_threshold": round(self.eer_threshold, 9), "run_id": self.run_id,
               "target": self.target, "threshold_policy": self.threshold_policy}
        rec.update({k: round(v, 9) if isinstance(v, float) else v for k, v in self.extra.items()})
        return rec

    def to_json_line(self) -> str:
        return json.dumps(self.to_record(), sort_keys=False)

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json_line() + "\n", encoding="utf-8")

    def write_roc(self, path: str | Path) -> None:
        write_roc_csv(path, self.roc)


def write_roc_csv(path: str | Path, roc: list[tuple[float, float, float]]) -> None:
    lines = ["fpr,tpr,threshold"]
    lines += [f"{f:.6f},{t:.6f},{th:.9g}" for f, t, th in roc]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_report(path: str | Path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def evaluate_scores(scores, labels, threshold_scores=None, threshold_labels=None, *,
                    run_id: str = "", target: str = "", extra: dict | None = None) -> MetricsReport:
    """Full report; without a threshold source the evaluation set picks its own EER threshold."""
    policy = "source"
    if threshold_scores is None:
        threshold_scores, threshold_labels, policy = scores, labels, "target"
    hter, thr = hter_at_eer(scores, labels, threshold_scores, threshold_labels)
    return MetricsReport(hter=hter, auc=auc(scores, labels), eer_threshold=thr,
                         roc=roc_curve(scores, labels), run_id=run_id, target=target,
                         threshold_policy=policy, extra=dict(extra or {}))
