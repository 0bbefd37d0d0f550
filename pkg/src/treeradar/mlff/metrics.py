"""Binary confusion matrix and macro-averaged scores."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class ConfusionMatrix:
    """``counts[actual][predicted]``; class 0 healthy, 1 defective."""

    counts: tuple

    def __post_init__(self):
        arr = np.asarray(self.counts, dtype=np.int64)
        if arr.shape != (2, 2):
            raise ValueError("confusion matrix must be 2x2")
        if np.any(arr < 0):
            raise ValueError("counts must be non-negative")
        object.__setattr__(self, "counts", tuple(tuple(int(v) for v in r) for r in arr))

    @classmethod
    def from_labels(cls, actual, predicted) -> "ConfusionMatrix":
        actual = np.asarray(actual, dtype=int)
        predicted = np.asarray(predicted, dtype=int)
        cm = np.zeros((2, 2), dtype=np.int64)
        np.add.at(cm, (actual, predicted), 1)
        return cls(cm)

    @property
    def array(self) -> np.ndarray:
        return np.asarray(self.counts, dtype=np.int64)

    @property
    def total(self) -> int:
        return int(self.array.sum())

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.array + other.array)


@dataclass
class MetricsReport:
    acc: float
    prec: float
    rec: float
    f1: float
    per_class: dict = field(default_factory=dict)
    flags: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"acc": self.acc, "prec": self.prec, "rec": self.rec, "f1": self.f1,
                "per_class": self.per_class, "flags": list(self.flags)}


def metrics(cm: ConfusionMatrix) -> MetricsReport:
    a = cm.array.astype(float)
    total = a.sum()
    if total == 0:
        raise ValueError("empty confusion matrix")
    tp = np.diag(a)
    predicted = a.sum(axis=0)
    actual = a.sum(axis=1)
    flags = []
    prec, rec, f1 = [], [], []
    for i in range(2):
        if predicted[i] == 0:
            p = 0.0
            flags.append(f"class {i} never predicted; precision set to 0")
        else:
            p = tp[i] / predicted[i]
        if actual[i] == 0:
            r = 0.0
            flags.append(f"class {i} absent; recall set to 0")
        else:
            r = tp[i] / actual[i]
        prec.append(p)
        rec.append(r)
        f1.append(0.0 if p + r == 0 else 2 * p * r / (p + r))
    per_class = {str(i): {"prec": float(prec[i]), "rec": float(rec[i]), "f1": float(f1[i])}
                 for i in range(2)}
    return MetricsReport(acc=float(tp.sum() / total), prec=float(np.mean(prec)),
                         rec=float(np.mean(rec)), f1=float(np.mean(f1)),
                         per_class=per_class, flags=flags)
