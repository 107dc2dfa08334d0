"""Filter importance indices.

``car``
    classification accuracy reduction: accuracy of the network minus the
    accuracy once the filter and its outgoing connections are removed.
``incoming`` / ``outgoing``
    mean absolute weight of the filter's own kernel, or of the next layer's
    weights that read the filter's channel.
``random``
    a seeded random permutation expressed as scores.

Lower scores mean less important; pruning removes the argmin.
"""
from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .network import Dataset, Network, evaluate_accuracy
from .surgery import FilterRef, conv_layer, prune_surgery, successor

KINDS = ("car", "incoming", "outgoing", "random")
SCORE_COLUMNS = ["layer_id", "filter_index", "kind", "value", "eval_split", "eval_size", "seed"]


@dataclass(frozen=True)
class ImportanceScore:
    filter: FilterRef
    kind: str
    value: float


def ablate(net: Network, f: FilterRef) -> Network:
    """Network without filter ``f``; a lone filter is zeroed instead of deleted."""
    conv = conv_layer(net, f.layer_id)
    if conv.n_filters > 1:
        return prune_surgery(net, f)
    # zero weights and bias give a zero channel, which its successor reads as absent
    out = net.copy()
    layer = out.layer(f.layer_id)
    layer.weights = np.zeros_like(layer.weights)
    layer.bias = np.zeros_like(layer.bias)
    return out


def car_index(net: Network, f: FilterRef, eval_data: Dataset,
              base_accuracy: float | None = None) -> ImportanceScore:
    conv = conv_layer(net, f.layer_id)
    if not 0 <= f.index < conv.n_filters:
        raise IndexError(f"filter {f.index} out of range for {f.layer_id}")
    if base_accuracy is None:
        base_accuracy = evaluate_accuracy(net, eval_data)
    return ImportanceScore(f, "car", base_accuracy - evaluate_accuracy(ablate(net, f), eval_data))


def car_all(net: Network, layer_id: str, eval_data: Dataset, workers: int = 1) -> list[ImportanceScore]:
    """CAR for every filter of ``layer_id``; candidates may be scored concurrently."""
    n = conv_layer(net, layer_id).n_filters
    base = evaluate_accuracy(net, eval_data)
    refs = [FilterRef(layer_id, i) for i in range(n)]
    if workers <= 1:
        return [car_index(net, r, eval_data, base) for r in refs]
    with ThreadPoolExecutor(workers) as pool:
        return list(pool.map(lambda r: car_index(net, r, eval_data, base), refs))


def avg_weight_index(net: Network, f: FilterRef, direction: str) -> ImportanceScore:
    conv = conv_layer(net, f.layer_id)
    if direction == "incoming":
        w = conv.weights[f.index]
    elif direction == "outgoing":
        w = successor(net, f.layer_id).input_slice(f.index)
    else:
        raise ValueError(f"direction must be 'incoming' or 'outgoing', got {direction!r}")
    return ImportanceScore(f, direction, float(np.abs(w.astype(np.float64)).mean()))


def random_index(layer_id: str, n_filters: int, seed) -> list[ImportanceScore]:
    perm = np.random.default_rng(seed).permutation(n_filters)
    return [ImportanceScore(FilterRef(layer_id, i), "random", float(perm[i])) for i in range(n_filters)]


def score_layer(net: Network, layer_id: str, kind: str, eval_data: Dataset | None = None,
                seed=0, workers: int = 1) -> list[ImportanceScore]:
    """Scores for every current filter of ``layer_id`` under index ``kind``."""
    n = conv_layer(net, layer_id).n_filters
    if kind == "car":
        if eval_data is None:
            raise ValueError("the car index needs an evaluation dataset")
        return car_all(net, layer_id, eval_data, workers)
    if kind in ("incoming", "outgoing"):
        return [avg_weight_index(net, FilterRef(layer_id, i), kind) for i in range(n)]
    if kind == "random":
        return random_index(layer_id, n, seed)
    raise ValueError(f"unknown index kind {kind!r}; expected one of {KINDS}")


def write_scores_csv(path, scores, eval_split: str = "", eval_size: int | str = "", seed="") -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(SCORE_COLUMNS)
        for s in scores:
            w.writerow([s.filter.layer_id, s.filter.index, s.kind, repr(s.value),
                        eval_split, eval_size, seed])
