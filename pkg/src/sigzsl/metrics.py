"""Open-set / zero-shot evaluation: outcome counts, rates, precisions, F1 and
the discrimination interval.

Rates that would divide by zero are reported as ``None`` rather than 0 or 1.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from fractions import Fraction

import numpy as np


def _rate(num: float, den: float) -> float | None:
    return None if den == 0 else num / den


@dataclass
class OutcomeCounts:
    tk: int
    tu: int
    fk: int
    fu: int
    s_correct: int  # known samples assigned to their own known class
    class_correct: dict[int, int]  # known classes only
    class_total: dict[int, int]
    contingency: np.ndarray  # (discovered unknown labels, true unknown classes)
    known_classes: tuple[int, ...]
    unknown_classes: tuple[int, ...]


def tally(pred_known, pred_index, truth, known_classes, unknown_classes) -> OutcomeCounts:
    """Count outcomes of a discrimination run.

    ``pred_known[i]`` says whether sample ``i`` was tagged known; ``pred_index``
    is then the known-class position in ``known_classes`` or the unknown
    registry index (-1 for unassigned). ``truth`` holds corpus class ids.
    """
    pred_known = np.asarray(pred_known, dtype=bool)
    pred_index = np.asarray(pred_index, dtype=np.int64)
    truth = np.asarray(truth)
    known_classes, unknown_classes = tuple(known_classes), tuple(unknown_classes)
    if set(known_classes) & set(unknown_classes):
        raise ValueError("known and unknown class sets overlap")
    is_known = np.isin(truth, known_classes)
    is_unknown = np.isin(truth, unknown_classes)
    if not np.all(is_known | is_unknown):
        bad = sorted(set(truth[~(is_known | is_unknown)].tolist()))
        raise ValueError(f"samples with classes outside K and U: {bad}")
    hit = np.zeros(len(truth), dtype=bool)
    sel = is_known & pred_known
    if sel.any():
        if pred_index[sel].min() < 0 or pred_index[sel].max() >= len(known_classes):
            raise ValueError("known prediction index outside K")
        hit[sel] = np.asarray(known_classes)[pred_index[sel]] == truth[sel]
    n_labels = int(pred_index[~pred_known].max()) + 1 if np.any(~pred_known & (pred_index >= 0)) else 0
    contingency = np.zeros((n_labels, len(unknown_classes)), dtype=np.int64)
    col = {c: j for j, c in enumerate(unknown_classes)}
    for lab, t in zip(pred_index[~pred_known & is_unknown], truth[~pred_known & is_unknown]):
        if lab >= 0:
            contingency[lab, col[t]] += 1
    return OutcomeCounts(
        tk=int(np.sum(is_known & pred_known)),
        tu=int(np.sum(is_unknown & ~pred_known)),
        fk=int(np.sum(is_unknown & pred_known)),
        fu=int(np.sum(is_known & ~pred_known)),
        s_correct=int(hit.sum()),
        class_correct={c: int(np.sum(hit & (truth == c))) for c in known_classes},
        class_total={c: int(np.sum(truth == c)) for c in known_classes + unknown_classes},
        contingency=contingency,
        known_classes=known_classes,
        unknown_classes=unknown_classes,
    )


def dominant_labels(contingency: np.ndarray) -> dict[int, int]:
    """Match each true unknown class to at most one discovered label.

    Cells are taken greedily by descending count (ties: lower label, then
    lower class), and each label and class is used once, so a label that
    dominates two classes is only credited to the larger one.
    """
    order = sorted(
        ((int(-contingency[lab, j]), lab, j) for lab in range(contingency.shape[0]) for j in range(contingency.shape[1])
         if contingency[lab, j] > 0)
    )
    used_labels, match = set(), {}
    for _, lab, j in order:
        if j not in match and lab not in used_labels:
            match[j] = lab
            used_labels.add(lab)
    return match


def isotopic_census(contingency: np.ndarray) -> list[int]:
    """For each true unknown class, the number of discovered labels whose
    plurality of unknown members belongs to it."""
    census = [0] * contingency.shape[1]
    for row in contingency:
        if row.sum():
            census[int(np.argmax(row))] += 1
    return census


def precision_scores(counts: OutcomeCounts) -> tuple[float | None, float | None]:
    """(KP, UP); UP counts only the dominant label of each true unknown class."""
    match = dominant_labels(counts.contingency)
    u_dom = sum(int(counts.contingency[lab, j]) for j, lab in match.items())
    return _rate(counts.s_correct, counts.tk + counts.fk), _rate(u_dom, counts.tu + counts.fu)


def class_accuracies(counts: OutcomeCounts) -> dict[int, float | None]:
    """Known: correct / total. Unknown: members under the dominant label / total."""
    out = {c: _rate(counts.class_correct[c], counts.class_total[c]) for c in counts.known_classes}
    match = dominant_labels(counts.contingency)
    for j, c in enumerate(counts.unknown_classes):
        got = int(counts.contingency[match[j], j]) if j in match else 0
        out[c] = _rate(got, counts.class_total[c])
    return out


def f1(accuracy: float | None, precision: float | None) -> float | None:
    if accuracy is None or precision is None or accuracy + precision == 0:
        return None
    return 2 * accuracy * precision / (accuracy + precision)


def wtr(tkr: float | None, tur: float | None) -> float | None:
    """``0.4 TKR + 0.6 TUR``, evaluated exactly and rounded once."""
    if tkr is None or tur is None:
        return None
    return float(Fraction(tkr) * Fraction(2, 5) + Fraction(tur) * Fraction(3, 5))


def discrimination_interval(sweep, threshold: float = 0.8) -> tuple[list[tuple[float, float]], float]:
    """Maximal runs of consecutive grid points with WTR above ``threshold``.

    Each run spans from its first to its last grid point; the total width is
    the sum of the run spans. ``sweep`` is a list of ``(lambda1, wtr)`` sorted
    by lambda1; undefined WTR values break runs.
    """
    if not len(sweep):
        raise ValueError("empty sweep")
    lams = [s[0] for s in sweep]
    if any(b < a for a, b in zip(lams, lams[1:])):
        raise ValueError("sweep must be sorted by lambda1")
    runs, start, prev = [], None, None
    for lam, w in sweep:
        above = w is not None and w > threshold
        if above and start is None:
            start = lam
        if not above and start is not None:
            runs.append((start, prev))
            start = None
        prev = lam
    if start is not None:
        runs.append((start, prev))
    return runs, float(sum(b - a for a, b in runs))


def _mean(values) -> float | None:
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


@dataclass
class ZslReport:
    lambda1: float
    tk: int
    tu: int
    fk: int
    fu: int
    tkr: float | None
    tur: float | None
    wtr: float | None
    kp: float | None
    up: float | None
    known_accuracy: float | None
    unknown_accuracy: float | None
    f1_known: float | None
    f1_unknown: float | None
    n_unknown_labels: int
    class_accuracy: dict[str, float | None] = field(default_factory=dict)
    isotopic: dict[str, int] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ZslReport":
        return cls(**json.loads(text))

    _FLAT = ("lambda1", "tk", "tu", "fk", "fu", "tkr", "tur", "wtr", "kp", "up", "known_accuracy",
             "unknown_accuracy", "f1_known", "f1_unknown", "n_unknown_labels")

    def csv_row(self) -> dict[str, str]:
        row = {k: _fmt(getattr(self, k)) for k in self._FLAT}
        row.update({f"acc:{k}": _fmt(v) for k, v in self.class_accuracy.items()})
        row.update({f"iso:{k}": _fmt(v) for k, v in self.isotopic.items()})
        return row

    @classmethod
    def from_csv_row(cls, row: dict[str, str]) -> "ZslReport":
        ints = {"tk", "tu", "fk", "fu", "n_unknown_labels"}
        kw = {k: _parse(row[k], int if k in ints else float) for k in cls._FLAT}
        kw["class_accuracy"] = {k[4:]: _parse(v, float) for k, v in row.items() if k.startswith("acc:")}
        kw["isotopic"] = {k[4:]: _parse(v, int) for k, v in row.items() if k.startswith("iso:")}
        return cls(**kw)


UNDEFINED = "NA"


def _fmt(v) -> str:
    return UNDEFINED if v is None else repr(v)


def _parse(s: str, kind):
    return None if s == UNDEFINED else kind(s)


def write_csv(reports: list[ZslReport], path=None) -> str:
    rows = [r.csv_row() for r in reports]
    fields = list(dict.fromkeys(k for row in rows for k in row))
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    if path is not None:
        with open(path, "w", newline="") as f:
            f.write(buf.getvalue())
    return buf.getvalue()


def read_csv(path) -> list[ZslReport]:
    with open(path, newline="") as f:
        return [ZslReport.from_csv_row(row) for row in csv.DictReader(f)]


def build_report(counts: OutcomeCounts, lambda1: float, class_names=None) -> ZslReport:
    name = (lambda c: str(c)) if class_names is None else (lambda c: class_names[c])
    kp, up = precision_scores(counts)
    acc = class_accuracies(counts)
    known_acc = _mean(acc[c] for c in counts.known_classes)
    unknown_acc = _mean(acc[c] for c in counts.unknown_classes)
    tkr = _rate(counts.tk, counts.tk + counts.fu)
    tur = _rate(counts.tu, counts.tu + counts.fk)
    census = isotopic_census(counts.contingency)
    return ZslReport(
        lambda1=float(lambda1),
        tk=counts.tk, tu=counts.tu, fk=counts.fk, fu=counts.fu,
        tkr=tkr, tur=tur, wtr=wtr(tkr, tur), kp=kp, up=up,
        known_accuracy=known_acc, unknown_accuracy=unknown_acc,
        f1_known=f1(known_acc, kp), f1_unknown=f1(unknown_acc, up),
        n_unknown_labels=int(counts.contingency.shape[0]),
        class_accuracy={name(c): v for c, v in acc.items()},
        isotopic={name(c): n for c, n in zip(counts.unknown_classes, census)},
    )
