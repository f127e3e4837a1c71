"""Detection accuracy against a ground-truth mask."""

from __future__ import annotations

import csv
import io
from collections import defaultdict
from dataclasses import dataclass

import numpy as np

from .corevol import Mask

__all__ = ["ContingencyTable", "MetricRow", "contingency", "metrics", "experiment_table",
           "write_table_csv"]


@dataclass(frozen=True)
class ContingencyTable:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


@dataclass
class MetricRow:
    dice: float
    sensitivity: float
    specificity: float
    sample_size: int = 0
    method: str = ""
    noise_percent: float = 0.0
    degenerate: tuple = ()


def _arr(m):
    return m.data if isinstance(m, Mask) else np.asarray(m, dtype=bool)


def contingency(detected, truth, evaluable=None) -> ContingencyTable:
    d, t = _arr(detected), _arr(truth)
    e = np.ones_like(d, dtype=bool) if evaluable is None else _arr(evaluable)
    if d.shape != t.shape or d.shape != e.shape:
        raise ValueError(f"mask dims mismatch: {d.shape}, {t.shape}, {e.shape}")
    d, t = d[e], t[e]
    return ContingencyTable(
        tp=int(np.sum(d & t)), fp=int(np.sum(d & ~t)),
        fn=int(np.sum(~d & t)), tn=int(np.sum(~d & ~t)),
    )


def _ratio(num, den, errors):
    # 0/0 counts as perfect when there is nothing to get wrong
    if den == 0:
        return (1.0 if errors == 0 else 0.0), True
    return num / den, False


def metrics(t: ContingencyTable, sample_size: int = 0, method: str = "",
            noise_percent: float = 0.0) -> MetricRow:
    dice, d0 = _ratio(2 * t.tp, 2 * t.tp + t.fp + t.fn, t.fp + t.fn)
    sen, d1 = _ratio(t.tp, t.tp + t.fn, t.fn)
    spc, d2 = _ratio(t.tn, t.tn + t.fp, t.fp)
    flags = tuple(name for name, f in (("dice", d0), ("sensitivity", d1), ("specificity", d2)) if f)
    return MetricRow(dice, sen, spc, sample_size, method, noise_percent, flags)


def experiment_table(rows) -> list:
    """Mean and sample standard deviation per (method, size, noise, metric).

    Returns a list of dicts with keys method, sample_size, noise_percent,
    metric, mean, sd, n.
    """
    cells = defaultdict(list)
    for r in rows:
        cells[(r.method, r.sample_size, r.noise_percent)].append(r)
    out = []
    for (method, size, noise), group in sorted(cells.items(), key=lambda kv: (str(kv[0][0]),) + kv[0][1:]):
        for name in ("dice", "sensitivity", "specificity"):
            vals = np.array([getattr(r, name) for r in group], dtype=np.float64)
            sd = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
            out.append({
                "method": method, "sample_size": size, "noise_percent": noise,
                "metric": name, "mean": float(vals.mean()), "sd": sd, "n": len(vals),
            })
    return out


def write_table_csv(table, path=None) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["method", "sample_size", "noise_percent", "metric", "mean", "sd"])
    for row in table:
        writer.writerow([row["method"], row["sample_size"], f"{row['noise_percent']:g}",
                         row["metric"], f"{row['mean']:.6f}", f"{row['sd']:.6f}"])
    text = buf.getvalue()
    if path is not None:
        with open(path, "w") as fh:
            fh.write(text)
    return text
