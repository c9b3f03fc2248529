"""Average precision, per-mask evaluation and the feature-combination sweep.

AP uses the interpolation-free discrete estimator: mean precision at the
ranks of the positives after a stable descending sort (ties broken by
ascending original index). Attributes without positives in a split have
undefined AP; they are excluded from means and rendered as n/a.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .model import HybridNet, net_forward, normalize_mask


class UndefinedAPError(ValueError):
    """AP is undefined when a split has no positives for an attribute."""


def average_precision(scores: np.ndarray, labels: np.ndarray) -> float:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1 or scores.size == 0:
        raise ValueError(f"need matching 1-D score/label arrays, got "
                         f"{scores.shape} and {labels.shape}")
    if not labels.any():
        raise UndefinedAPError("no positive labels")
    order = np.argsort(-scores, kind="stable")
    hits = labels[order].astype(np.float64)
    precision_at = np.cumsum(hits) / np.arange(1, len(hits) + 1)
    return float(precision_at[hits == 1].mean())


def evaluate_mask(net: HybridNet, dataset: Dataset, split: str,
                  mask) -> tuple[np.ndarray, float]:
    """Per-attribute APs (NaN where undefined) and their mean for one mask."""
    active = normalize_mask(mask, net)
    _, xs, y = dataset.arrays(split, kinds=active)
    _, scores = net_forward(xs, active, net)
    return scores_to_aps(scores, y)


def scores_to_aps(scores: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, float]:
    n_attr = labels.shape[1]
    aps = np.full(n_attr, np.nan)
    for a in range(n_attr):
        try:
            aps[a] = average_precision(scores[:, a], labels[:, a])
        except UndefinedAPError:
            pass
    defined = aps[~np.isnan(aps)]
    if defined.size == 0:
        raise UndefinedAPError("every attribute has undefined AP on this split")
    return aps, float(defined.mean())


@dataclass
class EvalReport:
    kind_names: list[str]
    attribute_names: list[str]
    masks: list[tuple[str, ...]]       # evaluated mask per row, kind order
    per_attribute: list[np.ndarray]    # APs per mask, NaN = undefined
    mean_ap: list[float]               # mean AP per mask

    @property
    def aggregate_mean(self) -> float:
        return float(np.mean(self.mean_ap))

    @property
    def aggregate_std(self) -> float:
        return float(np.std(self.mean_ap))  # population std across masks

    def mask_label(self, mask) -> str:
        present = set(mask)
        return "".join(k[0].upper() if k in present else "x" for k in self.kind_names)


def combination_sweep(net: HybridNet, dataset: Dataset, split: str) -> EvalReport:
    """Evaluate every nonempty feature combination (2^K - 1 masks)."""
    kinds = net.kind_names()
    masks, per_attr, means = [], [], []
    for bits in range(1, 1 << len(kinds)):
        mask = tuple(k for i, k in enumerate(kinds) if bits & (1 << i))
        aps, mean = evaluate_mask(net, dataset, split, mask)
        masks.append(mask)
        per_attr.append(aps)
        means.append(mean)
    return EvalReport(kinds, list(dataset.table.names), masks, per_attr, means)


def report_emit(report: EvalReport, fmt: str) -> str:
    if fmt == "csv":
        return _emit_csv(report)
    if fmt == "markdown":
        return _emit_markdown(report)
    raise ValueError(f"unknown report format {fmt!r}")


def _emit_csv(report: EvalReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["mask", "attribute", "ap"])
    for mask, aps in zip(report.masks, report.per_attribute):
        label = report.mask_label(mask)
        for name, ap in zip(report.attribute_names, aps):
            w.writerow([label, name, "n/a" if np.isnan(ap) else f"{ap:.6g}"])
    for mask, mean in zip(report.masks, report.mean_ap):
        w.writerow([report.mask_label(mask), "mean_ap", f"{mean:.6g}"])
    w.writerow(["aggregate", f"{report.aggregate_mean:.6g}", f"{report.aggregate_std:.6g}"])
    return buf.getvalue()


def _emit_markdown(report: EvalReport) -> str:
    headers = ["mask"] + report.attribute_names + ["mean AP"]
    rows = []
    for mask, aps, mean in zip(report.masks, report.per_attribute, report.mean_ap):
        cells = ["n/a" if np.isnan(a) else f"{a:.4f}" for a in aps]
        rows.append([report.mask_label(mask)] + cells + [f"{mean:.4f}"])
    rows.append(["aggregate"] + [""] * len(report.attribute_names)
                + [f"{report.aggregate_mean:.4f} +/- {report.aggregate_std:.4f}"])
    widths = [max(len(h), *(len(r[i]) for r in rows)) for i, h in enumerate(headers)]
    def line(cells):
        return "| " + " | ".join(c.ljust(w) for c, w in zip(cells, widths)) + " |"
    out = [line(headers), "|" + "|".join("-" * (w + 2) for w in widths) + "|"]
    out.extend(line(r) for r in rows)
    return "\n".join(out) + "\n"


def parse_report_csv(text: str) -> dict:
    """Reparse an emitted CSV into {(mask, attribute): ap, ...} plus aggregates."""
    out = {"rows": {}, "mean_ap": {}, "aggregate": None}
    for row in csv.reader(io.StringIO(text)):
        if not row or row[0] == "mask":
            continue
        if row[0] == "aggregate":
            out["aggregate"] = (float(row[1]), float(row[2]))
        elif row[1] == "mean_ap":
            out["mean_ap"][row[0]] = float(row[2])
        else:
            out["rows"][(row[0], row[1])] = None if row[2] == "n/a" else float(row[2])
    return out
