"""Evaluation metrics: Dice similarity coefficient and the 95th-percentile Hausdorff distance."""
from __future__ import annotations

import csv
import io
import math
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree


def dsc(pred, truth, k: int | None = None) -> float:
    """``2|A & B| / (|A| + |B|)``; 1.0 when both masks are empty.

    With ``k`` given, ``pred``/``truth`` are label maps and the masks are ``== k``.
    """
    a = np.asarray(pred) == k if k is not None else np.asarray(pred, dtype=bool)
    b = np.asarray(truth) == k if k is not None else np.asarray(truth, dtype=bool)
    sa, sb = int(a.sum()), int(b.sum())
    if sa + sb == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / (sa + sb)


def boundary(mask: np.ndarray) -> np.ndarray:
    """Foreground pixels with an axis-neighbour outside the mask or on the array edge."""
    mask = np.asarray(mask, dtype=bool)
    padded = np.pad(mask, 1, constant_values=False)
    interior = mask.copy()
    for ax in range(mask.ndim):
        for shift in (-1, 1):
            interior &= np.roll(padded, shift, axis=ax)[tuple(slice(1, -1) for _ in range(mask.ndim))]
    return mask & ~interior


def nearest_rank(values: np.ndarray, q: float = 95.0) -> float:
    v = np.sort(np.asarray(values, dtype=np.float64))
    rank = max(1, math.ceil(q / 100.0 * v.size))
    return float(v[rank - 1])


def hd95(pred, truth, k: int | None = None, spacing=None, q: float = 95.0):
    """Robust Hausdorff distance in spacing units; ``None`` if either mask is empty."""
    a = np.asarray(pred) == k if k is not None else np.asarray(pred, dtype=bool)
    b = np.asarray(truth) == k if k is not None else np.asarray(truth, dtype=bool)
    if not a.any() or not b.any():
        return None
    spacing = np.ones(a.ndim) if spacing is None else np.asarray(spacing, dtype=np.float64)
    pa = np.argwhere(boundary(a)) * spacing
    pb = np.argwhere(boundary(b)) * spacing
    d_ab, _ = cKDTree(pb).query(pa)
    d_ba, _ = cKDTree(pa).query(pb)
    return max(nearest_rank(d_ab, q), nearest_rank(d_ba, q))


@dataclass
class CaseMetrics:
    case_id: str
    dsc: dict = field(default_factory=dict)      # class -> value, absent-in-both classes omitted
    hd95: dict = field(default_factory=dict)     # class -> value or None (sentinel)


@dataclass
class MetricReport:
    num_classes: int
    cases: list = field(default_factory=list)
    include_background: bool = False

    @property
    def classes(self) -> list:
        return list(range(0 if self.include_background else 1, self.num_classes))

    def per_class_dsc(self) -> dict:
        return {k: _mean([c.dsc[k] for c in self.cases if k in c.dsc]) for k in self.classes}

    def per_class_hd95(self) -> dict:
        return {k: _mean([c.hd95[k] for c in self.cases if c.hd95.get(k) is not None]) for k in self.classes}

    @property
    def mean_dsc(self) -> float:
        return _mean([c.dsc[k] for c in self.cases for k in self.classes if k in c.dsc])

    @property
    def mean_hd95(self) -> float:
        return _mean([c.hd95[k] for c in self.cases for k in self.classes if c.hd95.get(k) is not None])

    @property
    def sentinel_count(self) -> int:
        return sum(1 for c in self.cases for k in self.classes if k in c.hd95 and c.hd95[k] is None)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["case_id", "class_id", "dsc", "hd95"])
        for c in self.cases:
            for k in self.classes:
                if k not in c.dsc and k not in c.hd95:
                    continue
                d = c.dsc.get(k)
                h = c.hd95.get(k)
                w.writerow([c.case_id, k, "" if d is None else repr(d), "" if h is None else repr(h)])
        md, mh = self.mean_dsc, self.mean_hd95
        w.writerow(["mean", "", "" if math.isnan(md) else repr(md), "" if math.isnan(mh) else repr(mh)])
        return buf.getvalue()

    def summary(self) -> str:
        lines = [f"cases: {len(self.cases)}  mean DSC: {self.mean_dsc:.4f}  mean HD95: {self.mean_hd95:.3f}"
                 f"  (hd95 sentinels: {self.sentinel_count})"]
        hds = self.per_class_hd95()
        for k, d in self.per_class_dsc().items():
            lines.append(f"  class {k}: DSC {d:.4f}  HD95 {hds[k]:.3f}")
        return "\n".join(lines)


def _mean(values) -> float:
    values = list(values)
    return float(np.mean(values)) if values else float("nan")


def case_metrics(case_id: str, pred: np.ndarray, truth: np.ndarray, num_classes: int, spacing=None,
                 include_background: bool = False) -> CaseMetrics:
    out = CaseMetrics(case_id)
    for k in range(0 if include_background else 1, num_classes):
        a, b = pred == k, truth == k
        if not a.any() and not b.any():
            continue
        out.dsc[k] = dsc(a, b)
        out.hd95[k] = hd95(a, b, spacing=spacing)
    return out


def report(preds, truths, num_classes: int, case_ids=None, slice_indices=None, spacing=(1.0, 1.0),
           slice_thickness: float = 1.0, mode: str = "3d", include_background: bool = False) -> MetricReport:
    """Group 2-d slices by case and score each case.

    ``mode="3d"`` stacks a case's slices (ordered by slice index) into a
    volume; ``mode="2d"`` scores every slice as its own case. Without case ids
    each slice is its own case.
    """
    preds = [np.asarray(p) for p in preds]
    truths = [np.asarray(t) for t in truths]
    rep = MetricReport(num_classes, include_background=include_background)
    if case_ids is None or mode == "2d":
        ids = case_ids if case_ids is not None else [f"slice{i}" for i in range(len(preds))]
        for i, (p, t) in enumerate(zip(preds, truths)):
            name = f"{ids[i]}:{slice_indices[i]}" if (case_ids is not None and slice_indices is not None) else str(ids[i])
            rep.cases.append(case_metrics(name, p, t, num_classes, spacing, include_background))
        return rep
    groups = defaultdict(list)
    for i, cid in enumerate(case_ids):
        groups[cid].append(i)
    for cid in sorted(groups):
        idx = groups[cid]
        if slice_indices is not None:
            idx = sorted(idx, key=lambda i: slice_indices[i])
        p = np.stack([preds[i] for i in idx])
        t = np.stack([truths[i] for i in idx])
        sp = (slice_thickness, *spacing)
        rep.cases.append(case_metrics(cid, p, t, num_classes, sp, include_background))
    return rep
