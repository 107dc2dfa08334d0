"""Greedy and one-pass filter pruning with compression-ratio bookkeeping."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from fractions import Fraction
from typing import Callable

import numpy as np

from .importance import KINDS, score_layer
from .network import Dataset, Network, SgdConfig, evaluate_accuracy, train_sgd
from .surgery import FilterRef, PruneError, conv_layer, prune_branch, prune_filters, prune_surgery

FINE_TUNE_MODES = ("each-iter", "final", "off")
TRACE_COLUMNS = ["iteration", "layer_id", "pruned_filter", "n_iter", "r_iter",
                 "accuracy_pruned", "accuracy_tuned", "scores"]

__all__ = [
    "FilterRef", "PruneError", "PruneConfig", "TraceRecord", "ImportanceTrace",
    "prune_surgery", "prune_branch", "prune_filters", "greedy_prune", "one_pass_prune",
    "structural_ratio", "format_ratio",
]


def structural_ratio(n_original: int, n_kept: int) -> Fraction:
    if not 1 <= n_kept <= n_original:
        raise ValueError(f"need 1 <= n_kept <= n_original, got {n_kept} of {n_original}")
    return Fraction(n_original, n_kept)


def format_ratio(ratio, places: int = 2) -> str:
    """Decimal rendering with round-half-up (``Fraction(96, 67)`` -> ``'1.43'``)."""
    r = Fraction(ratio)
    exact = Decimal(r.numerator) / Decimal(r.denominator)
    return str(exact.quantize(Decimal(1).scaleb(-places), rounding=ROUND_HALF_UP))


@dataclass(frozen=True)
class PruneConfig:
    layer_id: str
    target_ratio: float | Fraction
    index: str = "car"
    fine_tune: SgdConfig | None = None
    fine_tune_mode: str = "each-iter"
    seed: int = 0
    eval_split: str = "validation"
    eval_size: int | None = None

    def __post_init__(self):
        if self.index not in KINDS:
            raise ValueError(f"unknown index kind {self.index!r}")
        if self.fine_tune_mode not in FINE_TUNE_MODES:
            raise ValueError(f"fine_tune_mode must be one of {FINE_TUNE_MODES}")
        if self.target_ratio < 1:
            raise ValueError(f"target ratio must be >= 1, got {self.target_ratio}")

    @property
    def tunes(self) -> bool:
        return self.fine_tune is not None and self.fine_tune_mode != "off"


@dataclass(frozen=True)
class TraceRecord:
    iteration: int
    pruned: FilterRef
    scores: tuple
    accuracy_pruned: float
    accuracy_tuned: float | None
    n_iter: int
    r_iter: Fraction


@dataclass
class ImportanceTrace:
    layer_id: str
    n_original: int
    index: str
    fine_tuned: bool
    seed: int
    records: list = field(default_factory=list)

    def rows(self) -> list[dict]:
        return [
            {
                "iteration": r.iteration,
                "layer_id": r.pruned.layer_id,
                "pruned_filter": r.pruned.index,
                "n_iter": r.n_iter,
                "r_iter": float(r.r_iter),
                "accuracy_pruned": r.accuracy_pruned,
                "accuracy_tuned": r.accuracy_tuned,
                "scores": list(r.scores),
            }
            for r in self.records
        ]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(TRACE_COLUMNS)
            for row in self.rows():
                row["scores"] = " ".join(repr(s) for s in row["scores"])
                row["accuracy_tuned"] = "" if row["accuracy_tuned"] is None else repr(row["accuracy_tuned"])
                row["r_iter"] = repr(row["r_iter"])
                row["accuracy_pruned"] = repr(row["accuracy_pruned"])
                w.writerow([row[c] for c in TRACE_COLUMNS])

    def to_json(self) -> str:
        meta = {k: v for k, v in asdict(self).items() if k != "records"}
        return json.dumps({**meta, "records": self.rows()}, indent=2, sort_keys=True)


def _argmin(values) -> int:
    # np.argmin returns the first minimum, i.e. the lowest filter index on ties
    return int(np.argmin(np.asarray(values, np.float64)))


def greedy_prune(net: Network, cfg: PruneConfig, eval_data: Dataset | None = None,
                 train_data: Dataset | None = None, test_data: Dataset | None = None,
                 on_iteration: Callable[[TraceRecord, Network], None] | None = None,
                 workers: int = 1) -> tuple[Network, ImportanceTrace]:
    """Remove the least important filter of ``cfg.layer_id`` until the target ratio is met.

    Scores are recomputed on the current network every iteration. Accuracies in
    the trace are measured on ``test_data`` when given, else on ``eval_data``.
    ``on_iteration(record, network)`` sees each finished iteration; the network
    passed is never modified afterwards, so it can be kept as a checkpoint.
    """
    n_l = conv_layer(net, cfg.layer_id).n_filters
    # floats such as 8/7 are snapped back to the small rational they were meant as
    target = Fraction(cfg.target_ratio).limit_denominator(10**6)
    if target > n_l:
        raise PruneError(f"target ratio {cfg.target_ratio} needs fewer than one of {n_l} filters")
    if cfg.tunes and train_data is None:
        raise ValueError("fine-tuning needs training data")
    if cfg.index == "car" and eval_data is None:
        raise ValueError("the car index needs an evaluation dataset")
    scoring = eval_data.sample(cfg.eval_size, cfg.seed) if eval_data is not None else None
    measure = test_data if test_data is not None else scoring

    trace = ImportanceTrace(cfg.layer_id, n_l, cfg.index, cfg.tunes, cfg.seed)
    n_iter, r_iter = n_l, Fraction(1)
    while r_iter < target:
        t = len(trace.records) + 1
        scores = score_layer(net, cfg.layer_id, cfg.index, scoring, seed=[cfg.seed, t],
                             workers=workers)
        values = tuple(s.value for s in scores)
        victim = FilterRef(cfg.layer_id, _argmin(values))
        net = prune_surgery(net, victim)
        acc = evaluate_accuracy(net, measure) if measure is not None else float("nan")
        tuned = None
        if cfg.tunes and cfg.fine_tune_mode == "each-iter":
            sgd = cfg.fine_tune
            net, _ = train_sgd(net, train_data, SgdConfig(
                sgd.learning_rate, sgd.momentum, sgd.batch_size, sgd.epochs, sgd.seed + 1000 * t))
            tuned = evaluate_accuracy(net, measure) if measure is not None else float("nan")
        n_iter -= 1
        r_iter = Fraction(n_l, n_iter)
        record = TraceRecord(t, victim, values, acc, tuned, n_iter, r_iter)
        trace.records.append(record)
        if on_iteration is not None:
            on_iteration(record, net)
    if cfg.tunes and cfg.fine_tune_mode == "final" and trace.records:
        net, _ = train_sgd(net, train_data, cfg.fine_tune)
        last = trace.records[-1]
        tuned = evaluate_accuracy(net, measure) if measure is not None else float("nan")
        trace.records[-1] = TraceRecord(last.iteration, last.pruned, last.scores,
                                        last.accuracy_pruned, tuned, last.n_iter, last.r_iter)
    return net, trace


def one_pass_prune(net: Network, layer_id: str, k: int, index: str,
                   eval_data: Dataset | None = None, seed=0) -> Network:
    """Score once on the intact network and remove the ``k`` lowest-scoring filters."""
    n = conv_layer(net, layer_id).n_filters
    if not 1 <= k < n:
        raise PruneError(f"k must satisfy 1 <= k < {n}, got {k}")
    scores = score_layer(net, layer_id, index, eval_data, seed=seed)
    order = np.argsort(np.asarray([s.value for s in scores], np.float64), kind="stable")
    return prune_filters(net, layer_id, order[:k])
