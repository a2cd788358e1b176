"""Binary classification metrics; label 1 is the positive class."""

from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence

from veille.errors import ContractError

REPORT_FIELDS = ("accuracy", "tpr", "fpr", "precision", "recall", "f1", "f05")

_TABLE_COLUMNS = {
    "fraction": ("accuracy", "f1", "f05"),
    "percent": ("accuracy", "f1", "tpr", "fpr"),
}

_DISPLAY_NAMES = {
    "accuracy": "Accuracy",
    "tpr": "TPR",
    "fpr": "FPR",
    "precision": "Precision",
    "recall": "Recall",
    "f1": "F1",
    "f05": "F0.5",
}


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    def to_dict(self) -> Dict[str, int]:
        return asdict(self)


@dataclass(frozen=True)
class MetricsReport:
    accuracy: Optional[float]
    tpr: Optional[float]
    fpr: Optional[float]
    precision: Optional[float]
    recall: Optional[float]
    f1: Optional[float]
    f05: Optional[float]

    def to_dict(self) -> Dict[str, Optional[float]]:
        return asdict(self)


def confusion(predictions: Sequence[int], labels: Sequence[int]) -> ConfusionMatrix:
    if len(predictions) != len(labels):
        raise ContractError(f"confusion: {len(predictions)} predictions for {len(labels)} labels")
    if not labels:
        raise ContractError("confusion: nothing to evaluate")
    tp = tn = fp = fn = 0
    for i, (p, y) in enumerate(zip(predictions, labels)):
        if p not in (0, 1) or y not in (0, 1):
            raise ContractError(f"confusion: entry {i} has prediction {p} and label {y}, expected 0 or 1")
        if p == 1 and y == 1:
            tp += 1
        elif p == 0 and y == 0:
            tn += 1
        elif p == 1:
            fp += 1
        else:
            fn += 1
    return ConfusionMatrix(tp=tp, tn=tn, fp=fp, fn=fn)


def swap_positive_class(cm: ConfusionMatrix) -> ConfusionMatrix:
    return ConfusionMatrix(tp=cm.tn, tn=cm.tp, fp=cm.fn, fn=cm.fp)


def _ratio(num: int, den: int) -> Optional[float]:
    return None if den == 0 else num / den


def tnr(cm: ConfusionMatrix) -> Optional[float]:
    return _ratio(cm.tn, cm.tn + cm.fp)


def npv(cm: ConfusionMatrix) -> Optional[float]:
    return _ratio(cm.tn, cm.tn + cm.fn)


def f_beta(precision: float, recall: float, beta: float) -> float:
    if beta <= 0:
        raise ContractError(f"f_beta: beta must be positive, got {beta}")
    if precision == 0 and recall == 0:
        return 0.0
    b2 = beta * beta
    return (1 + b2) * precision * recall / (b2 * precision + recall)


def report(cm: ConfusionMatrix) -> MetricsReport:
    if cm.total == 0:
        raise ContractError("report: confusion matrix is empty")
    precision = _ratio(cm.tp, cm.tp + cm.fp)
    recall = _ratio(cm.tp, cm.tp + cm.fn)
    both = precision is not None and recall is not None
    return MetricsReport(
        accuracy=(cm.tp + cm.tn) / cm.total,
        tpr=recall,
        fpr=_ratio(cm.fp, cm.fp + cm.tn),
        precision=precision,
        recall=recall,
        f1=f_beta(precision, recall, 1.0) if both else None,
        f05=f_beta(precision, recall, 0.5) if both else None,
    )


def render_table(rep: MetricsReport, style: str = "fraction") -> str:
    """Fraction tables use two decimals, percent tables one decimal of a percentage."""
    if style not in _TABLE_COLUMNS:
        raise ContractError(f"render_table: unknown style '{style}', expected one of {sorted(_TABLE_COLUMNS)}")
    columns = _TABLE_COLUMNS[style]
    values = rep.to_dict()
    cells = []
    for name in columns:
        v = values[name]
        if v is None:
            cells.append("n/a")
        elif style == "fraction":
            cells.append(f"{v:.2f}")
        else:
            cells.append(f"{100.0 * v:.1f}")
    header = [_DISPLAY_NAMES[c] + (" (%)" if style == "percent" else "") for c in columns]
    widths = [max(len(h), len(c)) for h, c in zip(header, cells)]
    lines = [
        "  ".join(h.ljust(w) for h, w in zip(header, widths)).rstrip(),
        "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip(),
    ]
    return "\n".join(lines) + "\n"


def report_records(rep: MetricsReport, cm: Optional[ConfusionMatrix] = None) -> List[Dict]:
    """One record per metric at full precision, absent values as null."""
    records: List[Dict] = []
    if cm is not None:
        records += [{"metric": k, "value": v} for k, v in cm.to_dict().items()]
    values = rep.to_dict()
    records += [{"metric": name, "value": values[name]} for name in REPORT_FIELDS]
    return records
