"""Metrics on a 100-scale and side-by-side comparison tables.

Headline metric per task: F1 for ED/SM/EM (positive class = Yes), accuracy
for DI, micro-F1 for CTA, F1 for AVE. Unparseable predictions (``None``)
always count as wrong and are also tallied separately.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from .core import DPError, Label, TaskKind


class IdMismatch(DPError):
    pass


class EmptySet(DPError):
    pass


class KeyMismatch(DPError):
    pass


@dataclass(frozen=True)
class Confusion:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0
    unparseable: int = 0  # already folded into fp/fn

    def __post_init__(self) -> None:
        if min(self.tp, self.fp, self.fn, self.tn, self.unparseable) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: "Confusion") -> "Confusion":
        return Confusion(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn,
                         self.tn + other.tn, self.unparseable + other.unparseable)


def _align(preds, gold) -> list[tuple[str, object, object]]:
    """Pair predictions and gold by instance id.

    Both sides may be mappings or sequences of ``(id, label)`` pairs.
    """
    def as_dict(side, name):
        if isinstance(side, Mapping):
            return dict(side)
        out = {}
        for key, value in side:
            if key in out:
                raise IdMismatch(f"duplicate id {key!r} in {name}")
            out[key] = value
        return out

    p, g = as_dict(preds, "predictions"), as_dict(gold, "gold")
    if p.keys() != g.keys():
        missing = sorted(g.keys() - p.keys())[:3]
        extra = sorted(p.keys() - g.keys())[:3]
        raise IdMismatch(f"ids differ: missing predictions {missing}, unknown ids {extra}")
    return [(k, p[k], g[k]) for k in sorted(g)]


def _is_yes(label) -> bool:
    if isinstance(label, Label):
        return label.is_yes
    return str(label).strip().casefold() == "yes"


def score_binary(preds, gold) -> Confusion:
    """Confusion for Yes/No labels; a ``None`` prediction is scored as the wrong class."""
    tp = fp = fn = tn = bad = 0
    for _, pred, truth in _align(preds, gold):
        truth_yes = _is_yes(truth)
        if pred is None:
            bad += 1
            if truth_yes:
                fn += 1
            else:
                fp += 1
            continue
        pred_yes = _is_yes(pred)
        if pred_yes and truth_yes:
            tp += 1
        elif pred_yes:
            fp += 1
        elif truth_yes:
            fn += 1
        else:
            tn += 1
    return Confusion(tp, fp, fn, tn, bad)


def f1_score(precision: float, recall: float) -> float:
    if precision + recall <= 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def prf1(confusion: Confusion) -> tuple[float, float, float]:
    c = confusion
    p = 100.0 * c.tp / (c.tp + c.fp) if c.tp + c.fp else 0.0
    r = 100.0 * c.tp / (c.tp + c.fn) if c.tp + c.fn else 0.0
    return p, r, f1_score(p, r)


def fold(text: str) -> str:
    """Case-fold and collapse whitespace for value comparison."""
    return " ".join(str(text).split()).casefold()


def _text(label) -> str:
    return label.value if isinstance(label, Label) else str(label)


def accuracy(preds, gold) -> float:
    pairs = _align(preds, gold)
    if not pairs:
        raise EmptySet("no instances to score")
    correct = sum(1 for _, p, g in pairs if p is not None and fold(_text(p)) == fold(_text(g)))
    return 100.0 * correct / len(pairs)


def micro_prf1(preds: Sequence, gold: Sequence) -> tuple[float, float, float]:
    """Micro-averaged P/R/F1 for single-label classification.

    ``None`` is an abstention: it adds a false negative for the gold class
    but no prediction, so precision and recall drift apart.
    """
    if len(preds) != len(gold):
        raise IdMismatch(f"{len(preds)} predictions for {len(gold)} gold labels")
    tp = fp = fn = 0
    for p, g in zip(preds, gold):
        if p is None:
            fn += 1
        elif fold(_text(p)) == fold(_text(g)):
            tp += 1
        else:
            fp += 1
            fn += 1
    return prf1(Confusion(tp, fp, fn, 0))


def micro_f1(preds: Sequence, gold: Sequence) -> float:
    return micro_prf1(preds, gold)[2]


NOT_APPLICABLE = "N/A"


def score_ave(preds, gold) -> tuple[float, float, float]:
    """P/R/F1 for attribute extraction.

    A wrong extracted value counts against both precision and recall; N/A
    against N/A is a true negative.
    """
    tp = fp = fn = 0
    for _, p, g in _align(preds, gold):
        g_na = fold(_text(g)) == fold(NOT_APPLICABLE)
        p_na = p is None or fold(_text(p)) == fold(NOT_APPLICABLE)
        if g_na and p_na:
            continue
        if g_na:
            fp += 1
        elif p_na:
            fn += 1
        elif fold(_text(p)) == fold(_text(g)):
            tp += 1
        else:
            fp += 1
            fn += 1
    return prf1(Confusion(tp, fp, fn, 0))


# -- reports ----------------------------------------------------------------

HEADLINE = {
    TaskKind.ED: "f1",
    TaskKind.SM: "f1",
    TaskKind.EM: "f1",
    TaskKind.DI: "accuracy",
    TaskKind.CTA: "micro_f1",
    TaskKind.AVE: "f1",
}


def fmt2(x: float) -> str:
    return f"{x:.2f}"


@dataclass(frozen=True)
class DatasetScore:
    dataset: str
    task: TaskKind
    metrics: dict
    count: int
    unparseable: int = 0

    @property
    def headline(self) -> float:
        return self.metrics[HEADLINE[self.task]]

    def to_json(self) -> dict:
        return {
            "dataset": self.dataset,
            "task": self.task.value,
            "count": self.count,
            "unparseable": self.unparseable,
            **{k: round(v, 2) for k, v in self.metrics.items()},
        }


def score_dataset(dataset: str, task: TaskKind, preds: Mapping, gold: Mapping) -> DatasetScore:
    """Score one dataset's predictions (id -> Label or None) with its task's metrics."""
    pairs = _align(preds, gold)
    bad = sum(1 for _, p, _ in pairs if p is None)
    if task.is_binary:
        p, r, f = prf1(score_binary(preds, gold))
        metrics = {"precision": p, "recall": r, "f1": f}
    elif task is TaskKind.DI:
        metrics = {"accuracy": accuracy(preds, gold)}
    elif task is TaskKind.CTA:
        p, r, f = micro_prf1([x[1] for x in pairs], [x[2] for x in pairs])
        metrics = {"micro_precision": p, "micro_recall": r, "micro_f1": f}
    else:
        p, r, f = score_ave(preds, gold)
        metrics = {"precision": p, "recall": r, "f1": f}
    return DatasetScore(dataset, task, metrics, len(pairs), bad)


@dataclass
class MetricReport:
    scores: dict[str, DatasetScore] = field(default_factory=dict)

    def add(self, score: DatasetScore) -> "MetricReport":
        self.scores[score.dataset] = score
        return self

    @property
    def average(self) -> float:
        if not self.scores:
            return 0.0
        return sum(s.headline for s in self.scores.values()) / len(self.scores)

    @property
    def unparseable_count(self) -> int:
        return sum(s.unparseable for s in self.scores.values())

    def render(self) -> str:
        lines = [f"{'dataset':<22}{'task':<6}{'metric':<10}{'value':>8}  details"]
        for name, s in self.scores.items():
            details = " ".join(f"{k}={fmt2(v)}" for k, v in s.metrics.items() if k != HEADLINE[s.task])
            lines.append(f"{name:<22}{s.task.value:<6}{HEADLINE[s.task]:<10}{fmt2(s.headline):>8}  {details}".rstrip())
        lines.append(f"{'Average':<38}{fmt2(self.average):>8}")
        lines.append(f"unparseable predictions: {self.unparseable_count}")
        return "\n".join(lines)

    def to_records(self) -> list[str]:
        return [json.dumps(s.to_json(), sort_keys=True) for s in self.scores.values()]


@dataclass(frozen=True)
class ComparisonRow:
    dataset: str
    values: tuple[float, ...]

    @property
    def winners(self) -> tuple[int, ...]:
        """Indexes of the systems holding the best value (ties share the win)."""
        best = max(round(v, 2) for v in self.values)
        return tuple(i for i, v in enumerate(self.values) if round(v, 2) == best)


@dataclass(frozen=True)
class Comparison:
    systems: tuple[str, ...]
    rows: tuple[ComparisonRow, ...]
    average: ComparisonRow

    def render(self) -> str:
        width = max(10, *(len(s) + 2 for s in self.systems))
        head = f"{'dataset':<22}" + "".join(f"{s:>{width}}" for s in self.systems)
        out = [head]
        for row in (*self.rows, self.average):
            cells = []
            for i, v in enumerate(row.values):
                mark = "*" if i in row.winners else " "
                cells.append(f"{fmt2(v) + mark:>{width}}")
            out.append(f"{row.dataset:<22}" + "".join(cells))
        out.append("* best per row; Average is the unweighted mean of each dataset's headline metric")
        out.append("  (accuracy for DI, micro-F1 for CTA, F1 otherwise).")
        return "\n".join(out)


def compare_report(reports: Iterable[tuple[str, MetricReport]]) -> Comparison:
    reports = list(reports)
    if not reports:
        raise ValueError("nothing to compare")
    keys = list(reports[0][1].scores)
    for name, rep in reports[1:]:
        if set(rep.scores) != set(keys):
            raise KeyMismatch(f"{name} covers {sorted(rep.scores)}, expected {sorted(keys)}")
    rows = tuple(ComparisonRow(k, tuple(rep.scores[k].headline for _, rep in reports)) for k in keys)
    avg = ComparisonRow("Average", tuple(rep.average for _, rep in reports))
    return Comparison(tuple(n for n, _ in reports), rows, avg)


def average_of(values: Iterable[float]) -> float:
    values = list(values)
    if not values:
        raise EmptySet("no values")
    return sum(values) / len(values)
