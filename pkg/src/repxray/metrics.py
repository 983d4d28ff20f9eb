"""Confusion matrix, one-vs-rest class metrics, ROC/AUC and the comparison report."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import ValidationError
from .model import CLASS_NAMES

METRIC_COLUMNS = ("precision", "sensitivity", "f1", "accuracy")
PROPOSED_MODEL = "RepVGG (this run)"

# Published comparison numbers. Only accuracies appear in the text; cells
# without a printed value stay None and render as "n/a".
PUBLISHED_FIXTURES = {
    "covid": {
        "RepVGG (published)": 0.9579,
        "InceptionResNetV2": 0.9334,
        "DenseNet": 0.9281,
        "VGG16": 0.9089,
        "InceptionV3": 0.8844,
        "ResNet50": 0.8563,
    },
    "pneumonia": {
        "RepVGG (published)": 0.9579,
        "InceptionResNetV2": None,
        "DenseNet": None,
        "VGG16": None,
        "InceptionV3": None,
        "ResNet50": None,
    },
    "normal": {
        "RepVGG (published)": None,
        "InceptionResNetV2": None,
        "DenseNet": None,
        "VGG16": None,
        "InceptionV3": None,
        "ResNet50": None,
    },
}


class ConfusionMatrix:
    """Counts indexed ``[actual, predicted]`` in class order covid, pneumonia, normal."""

    def __init__(self, counts):
        counts = np.asarray(counts)
        if counts.ndim != 2 or counts.shape[0] != counts.shape[1]:
            raise ValidationError("confusion matrix must be square")
        if np.any(counts < 0):
            raise ValidationError("confusion matrix counts must be non-negative")
        self.counts = counts.astype(np.int64)

    @property
    def total(self):
        return int(self.counts.sum())

    @property
    def num_classes(self):
        return self.counts.shape[0]

    def tolist(self):
        return self.counts.tolist()

    def __eq__(self, other):
        return isinstance(other, ConfusionMatrix) and np.array_equal(self.counts, other.counts)

    def __repr__(self):
        return f"ConfusionMatrix({self.tolist()})"


@dataclass
class ClassMetrics:
    tp: int
    tn: int
    fp: int
    fn: int
    precision: float
    sensitivity: float
    f1: float
    accuracy: float
    zero_division: bool = False


@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray
    auc: float

    @property
    def points(self):
        return list(zip(self.fpr.tolist(), self.tpr.tolist()))

    def to_csv(self):
        return "fpr,tpr\n" + "".join(f"{f!r},{t!r}\n" for f, t in self.points)


def confusion_matrix(actual, predicted, num_classes=len(CLASS_NAMES)) -> ConfusionMatrix:
    actual = np.asarray(actual)
    predicted = np.asarray(predicted)
    if actual.shape != predicted.shape or actual.ndim != 1:
        raise ValidationError(f"label arrays differ in length: {actual.shape} vs {predicted.shape}")
    for name, arr in (("actual", actual), ("predicted", predicted)):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise ValidationError(f"{name} labels must lie in [0, {num_classes})")
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (actual.astype(np.intp), predicted.astype(np.intp)), 1)
    return ConfusionMatrix(counts)


def _ratio(num, den):
    return (num / den, False) if den else (0.0, True)


def class_metrics(cm: ConfusionMatrix, class_index) -> ClassMetrics:
    if not 0 <= class_index < cm.num_classes:
        raise ValidationError(f"class index must lie in [0, {cm.num_classes})")
    c = cm.counts
    tp = int(c[class_index, class_index])
    fp = int(c[:, class_index].sum()) - tp
    fn = int(c[class_index, :].sum()) - tp
    tn = cm.total - tp - fp - fn
    precision, z1 = _ratio(tp, tp + fp)
    sensitivity, z2 = _ratio(tp, tp + fn)
    f1, z3 = _ratio(2 * tp, 2 * tp + fp + fn)
    accuracy, z4 = _ratio(tp + tn, tp + tn + fp + fn)
    return ClassMetrics(tp, tn, fp, fn, precision, sensitivity, f1, accuracy, z1 or z2 or z3 or z4)


def overall_accuracy(cm: ConfusionMatrix) -> float:
    if cm.total == 0:
        raise ValidationError("confusion matrix is empty")
    return float(np.trace(cm.counts)) / cm.total


def roc_curve(scores, actual, positive_class) -> RocCurve:
    """One-vs-rest ROC by sweeping the distinct scores from high to low.

    Tied scores move the curve in a single (diagonal) step, so the
    trapezoidal area credits ties by one half.
    """
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(actual) == positive_class
    if scores.shape != positive.shape:
        raise ValidationError("scores and labels differ in length")
    n_pos = int(positive.sum())
    n_neg = positive.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValidationError("ROC curve is undefined when only one class is present")
    order = np.argsort(-scores, kind="stable")
    s, p = scores[order], positive[order]
    tps = np.cumsum(p)
    fps = np.cumsum(~p)
    last_of_run = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    tpr = np.r_[0.0, tps[last_of_run] / n_pos]
    fpr = np.r_[0.0, fps[last_of_run] / n_neg]
    thresholds = np.r_[np.inf, s[last_of_run]]
    auc = float(np.sum((fpr[1:] - fpr[:-1]) * (tpr[1:] + tpr[:-1]) / 2.0))
    return RocCurve(fpr, tpr, thresholds, auc)


def metrics_table(cm: ConfusionMatrix, aucs=None):
    """Per-class dicts in the report schema."""
    rows = []
    for i, name in enumerate(CLASS_NAMES[:cm.num_classes]):
        m = asdict(class_metrics(cm, i))
        m.pop("zero_division")
        rows.append({"name": name, **m, "auc": None if aucs is None else aucs[i]})
    return rows


def fixture_rows():
    out = []
    for cls, models in PUBLISHED_FIXTURES.items():
        for model, acc in models.items():
            out.append({"class": cls, "model": model, "precision": None, "sensitivity": None, "f1": None,
                        "accuracy": acc, "source": "published comparison table"})
    return out


def render_report(results, include_fixtures=True):
    """Build the comparison tables.

    ``results`` maps model name -> list of three ClassMetrics (or dicts with
    the metric columns). Returns ``(text, document)`` where ``document`` holds,
    per class, the rows and the best-in-column flags.
    """
    if not results:
        raise ValidationError("at least one model's metrics are required")
    doc = {}
    lines = []
    for ci, cls in enumerate(CLASS_NAMES):
        rows = []
        for model, per_class in results.items():
            m = per_class[ci]
            m = m if isinstance(m, dict) else asdict(m)
            rows.append({"model": model, **{k: m.get(k) for k in METRIC_COLUMNS}, "fixture": False})
        if include_fixtures:
            for model, acc in PUBLISHED_FIXTURES[cls].items():
                rows.append({"model": model, "precision": None, "sensitivity": None, "f1": None, "accuracy": acc,
                             "fixture": True})
        best = {}
        for col in METRIC_COLUMNS:
            vals = [r[col] for r in rows if r[col] is not None]
            best[col] = max(vals) if vals else None
        for r in rows:
            r["best"] = [col for col in METRIC_COLUMNS if r[col] is not None and r[col] == best[col]]
        doc[cls] = rows

        lines.append(f"{cls.upper()}")
        lines.append(f"{'model':<24}" + "".join(f"{c:>14}" for c in METRIC_COLUMNS))
        for r in rows:
            cells = []
            for col in METRIC_COLUMNS:
                v = r[col]
                cell = "n/a" if v is None else f"{v:.4f}"
                cells.append(f"{cell + ('*' if col in r['best'] else ''):>14}")
            lines.append(f"{r['model']:<24}" + "".join(cells))
        lines.append("")
    lines.append("* best value in column")
    return "\n".join(lines), doc
