"""Analysis outputs: accuracy-vs-ratio curves, random baselines, top patches, per-class tables."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from fractions import Fraction

import numpy as np

from .network import Conv, Dataset, MaxPool, Network, ResidualBlock, evaluate_accuracy, predict
from .network import per_class_accuracy
from .pruner import PruneConfig, format_ratio, greedy_prune, structural_ratio
from .surgery import FilterRef, conv_layer
from .tensor import relu

CURVE_COLUMNS = ["ratio", "n_kept", "accuracy", "kind", "fine_tuned", "seed"]
BASELINE_COLUMNS = ["ratio", "mean", "std", "repeats", "degenerate", "min", "max"]
PATCH_SCHEMA = "carprune-patches/1"


@dataclass(frozen=True)
class CurvePoint:
    ratio: float
    n_kept: int
    accuracy: float
    kind: str
    fine_tuned: bool
    seed: int


def build_curve(*traces) -> list[CurvePoint]:
    points = []
    for trace in traces:
        for r in trace.records:
            acc = r.accuracy_tuned if r.accuracy_tuned is not None else r.accuracy_pruned
            points.append(CurvePoint(float(r.r_iter), r.n_iter, acc, trace.index,
                                     r.accuracy_tuned is not None, trace.seed))
    return points


def write_curve_csv(path, points) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(CURVE_COLUMNS)
        for p in points:
            w.writerow([repr(p.ratio), p.n_kept, repr(p.accuracy), p.kind, int(p.fine_tuned), p.seed])


@dataclass(frozen=True)
class BaselinePoint:
    ratio: float
    mean: float
    std: float
    repeats: int
    degenerate: bool
    accuracies: tuple


def random_baseline(net: Network, layer_id: str, ratios, data: Dataset, repeats: int = 10,
                    seed: int = 0) -> list[BaselinePoint]:
    """Accuracy of ``repeats`` random-index pruning runs per ratio (sample std, n-1)."""
    if repeats < 1:
        raise ValueError("repeats must be at least 1")
    out = []
    for ratio in ratios:
        accs = []
        for rep in range(repeats):
            pruned, _ = greedy_prune(net, PruneConfig(layer_id, ratio, "random", seed=seed * 1000 + rep))
            accs.append(evaluate_accuracy(pruned, data))
        a = np.asarray(accs)
        std = float(a.std(ddof=1)) if repeats > 1 else 0.0
        out.append(BaselinePoint(float(ratio), float(a.mean()), std, repeats, repeats == 1, tuple(accs)))
    return out


def write_baseline_csv(path, points) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(BASELINE_COLUMNS)
        for p in points:
            w.writerow([repr(p.ratio), repr(p.mean), repr(p.std), p.repeats, int(p.degenerate),
                        repr(min(p.accuracies)), repr(max(p.accuracies))])


# --------------------------------------------------------------------------- patches


@dataclass(frozen=True)
class PatchEntry:
    example: int
    y: int
    x: int
    activation: float
    box: tuple  # (top, left, bottom, right) in input pixels, bottom/right exclusive


@dataclass(frozen=True)
class PatchRecord:
    filter: FilterRef
    entries: tuple


def _path_to(net: Network, layer_id: str) -> list:
    """Layers traversed from the input up to and including ``layer_id``."""
    path = []
    for layer in net.layers:
        if layer.id == layer_id:
            return path + [layer]
        if isinstance(layer, ResidualBlock):
            ids = [l.id for l in layer.branch]
            if layer_id in ids:
                return path + [("enter", layer)] + layer.branch[: ids.index(layer_id) + 1]
        path.append(layer)
    raise KeyError(f"no layer with id {layer_id!r}")


def receptive_field(net: Network, layer_id: str) -> tuple[int, int, int]:
    """``(size, step, offset)``: unit (y, x) sees input rows ``offset + y*step`` onward."""
    size, step, offset = 1, 1, 0

    def visit(layer):
        nonlocal size, step, offset
        if isinstance(layer, Conv):
            k, s, p = layer.kernel, layer.params.stride, layer.params.padding
        elif isinstance(layer, MaxPool):
            k, s, p = layer.window, layer.stride, 0
        elif isinstance(layer, ResidualBlock):
            for inner in layer.branch:
                visit(inner)
            return
        else:
            return
        offset -= p * step
        size += (k - 1) * step
        step *= s

    for layer in _path_to(net, layer_id):
        if not isinstance(layer, tuple):
            visit(layer)
    return size, step, offset


def filter_activations(net: Network, layer_id: str, images: np.ndarray) -> np.ndarray:
    """Post-ReLU activations of conv layer ``layer_id``, shape ``[N, filters, H, W]``."""
    conv_layer(net, layer_id)
    y = np.asarray(images, np.float32)
    for layer in _path_to(net, layer_id):
        if isinstance(layer, tuple):
            continue
        y = layer.forward(y)
    return relu(y)


def top_patches(net: Network, layer_id: str, data: Dataset, k: int = 9) -> list[PatchRecord]:
    """The ``k`` highest activations per filter over every example and location.

    Ties go to the lower example index, then the lower (row-major) location.
    """
    acts = np.concatenate([filter_activations(net, layer_id, data.images[i : i + 500])
                           for i in range(0, len(data), 500)])
    n, c, h, w = acts.shape
    size, step, offset = receptive_field(net, layer_id)
    _, ih, iw = net.input_shape
    ex = np.repeat(np.arange(n), h * w)
    loc = np.tile(np.arange(h * w), n)
    records = []
    for f in range(c):
        vals = acts[:, f].reshape(-1)
        order = np.lexsort((loc, ex, -vals.astype(np.float64)))[:k]
        entries = []
        for j in order:
            y, x = divmod(int(loc[j]), w)
            top, left = offset + y * step, offset + x * step
            box = (max(top, 0), max(left, 0), min(top + size, ih), min(left + size, iw))
            entries.append(PatchEntry(int(ex[j]), y, x, float(vals[j]), box))
        records.append(PatchRecord(FilterRef(layer_id, f), tuple(entries)))
    return records


def patches_json(records) -> str:
    return json.dumps({
        "schema": PATCH_SCHEMA,
        "records": [
            {"layer_id": r.filter.layer_id, "filter_index": r.filter.index,
             "entries": [asdict(e) for e in r.entries]}
            for r in records
        ],
    }, indent=2, sort_keys=True)


# --------------------------------------------------------------------------- per-class


@dataclass(frozen=True)
class PerClassComparison:
    rows: dict  # class -> (acc_a, acc_b)
    absent: tuple
    fraction_within: float
    threshold: float


def per_class_compare(net_a: Network, net_b: Network, test: Dataset, threshold: float = 0.03,
                      preds_a=None, preds_b=None) -> PerClassComparison:
    """Per-class accuracy of two networks and the share of classes where b is within ``threshold`` of a."""
    pa = per_class_accuracy(net_a, test, preds_a)
    pb = per_class_accuracy(net_b, test, preds_b)
    absent = tuple(c for c, v in pa.items() if v is None)
    rows = {c: (pa[c], pb[c]) for c in pa if pa[c] is not None}
    within = sum(1 for a, b in rows.values() if b >= a - threshold)
    frac = within / len(rows) if rows else float("nan")
    return PerClassComparison(rows, absent, frac, threshold)


def write_per_class_csv(path, cmp: PerClassComparison) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["class", "accuracy_a", "accuracy_b", "within_threshold"])
        for c, (a, b) in cmp.rows.items():
            w.writerow([c, repr(a), repr(b), int(b >= a - cmp.threshold)])
        for c in cmp.absent:
            w.writerow([c, "absent", "absent", ""])


def audit_ratio_labels(entries) -> list[dict]:
    """Recompute ``(n_original, n_kept, printed_label)`` rows and flag mismatched labels."""
    out = []
    for n_original, n_kept, printed in entries:
        computed = format_ratio(structural_ratio(n_original, n_kept))
        out.append({"n_original": n_original, "n_kept": n_kept, "computed": computed,
                    "printed": printed, "discrepancy": computed != printed,
                    "exact": str(Fraction(n_original, n_kept))})
    return out


def accuracy_summary(net: Network, data: Dataset) -> dict:
    preds = predict(net, data)
    return {"overall": int((preds == data.labels).sum()) / len(data),
            "per_class": per_class_accuracy(net, data, preds)}
