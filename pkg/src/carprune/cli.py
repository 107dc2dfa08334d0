"""Command-line entry point: ``carprune {train,prune,compress,report,eval}``.

Every command reads a JSON run config (``--config``); flags override the
matching config keys. Artifacts land in the output directory together with a
provenance record per command. Failures print one line,
``error: <category>: <message>``, and exit with 2 (config), 3 (I/O or file
format), 4 (numerical divergence) or 1 (anything else).
"""
from __future__ import annotations

import argparse
import contextlib
import fcntl
import hashlib
import json
import os
import sys
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from . import compress as wc
from .datasets import SplitSpec, export_mlxtend_mnist, load_idx, split_dataset, synth_dataset
from .formats import (FormatError, build_report, load_compressed, load_model, model_bytes,
                      save_compressed, write_report_json)
from .network import (Architecture, SgdConfig, TrainingDiverged, evaluate_accuracy, load_preset,
                      parse_architecture, predict, train_sgd)
from .pruner import ImportanceTrace, PruneConfig, TraceRecord, greedy_prune
from .report import (accuracy_summary, audit_ratio_labels, build_curve, patches_json,
                     per_class_compare, random_baseline, top_patches, write_baseline_csv,
                     write_curve_csv, write_per_class_csv)
from .surgery import FilterRef

RUN_SCHEMA = "carprune-run/1"
EXIT_CONFIG, EXIT_IO, EXIT_DIVERGED = 2, 3, 4


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SplitSection(_Strict):
    train: float = 0.7
    validation: float = 0.1
    test: float = 0.2


class DataSection(_Strict):
    source: Literal["synth", "idx", "mnist5k"] = "synth"
    images: Optional[str] = None
    labels: Optional[str] = None
    test_images: Optional[str] = None
    test_labels: Optional[str] = None
    cache_dir: str = "data"
    synth_n: int = Field(600, ge=1)
    synth_classes: int = Field(4, ge=2)
    split: SplitSection = SplitSection()


class SgdSection(_Strict):
    learning_rate: float = Field(0.01, ge=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    batch_size: int = Field(32, ge=1)
    epochs: int = Field(10, ge=0)


class PruneSection(_Strict):
    layer: str = "conv1"
    target_ratio: float = Field(2.0, ge=1)
    index: Literal["car", "incoming", "outgoing", "random"] = "car"
    fine_tune: Literal["each-iter", "final", "off"] = "off"
    fine_tune_sgd: SgdSection = SgdSection(learning_rate=0.005, epochs=1)
    eval_split: Literal["validation", "test"] = "validation"
    eval_size: Optional[int] = Field(None, ge=1)
    workers: int = Field(1, ge=1)


class CompressSection(_Strict):
    layers: Optional[list[str]] = None
    sparsity: float = Field(0.9, ge=0, lt=1)
    code_bits: int = Field(8, ge=1, le=16)
    idx_bits: int = Field(8, ge=1, le=16)
    retrain: bool = False
    retrain_sgd: SgdSection = SgdSection(learning_rate=0.005, epochs=1)


class ReportSection(_Strict):
    patch_layer: Optional[str] = None
    patch_k: int = Field(9, ge=1)
    baseline_ratios: list[float] = [1.0, 2.0]
    baseline_repeats: int = Field(10, ge=1)
    threshold: float = 0.03
    # (n_original, n_kept, printed label) triples to recheck against the rounding rule
    ratio_labels: list[tuple[int, int, str]] = []


class RunConfig(_Strict):
    schema_id: Literal["carprune-run/1"] = Field(RUN_SCHEMA, alias="schema")
    architecture: str = "lenet-desk"
    seed: int = 0
    out: str = "run"
    model: Optional[str] = None
    data: DataSection = DataSection()
    train: SgdSection = SgdSection()
    prune: PruneSection = PruneSection()
    compress: CompressSection = CompressSection()
    report: ReportSection = ReportSection()


class ConfigError(ValueError):
    pass


# --------------------------------------------------------------------------- helpers


def load_config(path: str | None, overrides: dict) -> RunConfig:
    raw: dict = {}
    if path:
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    for dotted, value in overrides.items():
        if value is None:
            continue
        node = raw
        *parents, leaf = dotted.split(".")
        for key in parents:
            node = node.setdefault(key, {})
        node[leaf] = value
    try:
        return RunConfig.model_validate(raw)
    except ValidationError as exc:
        first = exc.errors()[0]
        where = ".".join(str(p) for p in first["loc"])
        raise ConfigError(f"{where}: {first['msg']}") from None


def config_hash(cfg: RunConfig) -> str:
    # where artifacts are written is not part of the experiment
    canon = json.dumps(cfg.model_dump(mode="json", by_alias=True, exclude={"out"}), sort_keys=True)
    return hashlib.sha256(canon.encode()).hexdigest()


def resolve_architecture(name: str) -> Architecture:
    if Path(name).is_file():
        return parse_architecture(Path(name).read_text())
    try:
        return load_preset(name)
    except KeyError:
        raise ConfigError(f"architecture {name!r} is neither a file nor a preset") from None


def load_splits(cfg: RunConfig) -> dict:
    d = cfg.data
    s = d.split
    if d.source == "synth":
        base = synth_dataset(cfg.seed, d.synth_n, d.synth_classes)
    elif d.source == "mnist5k":
        images, labels = export_mlxtend_mnist(d.cache_dir)
        base = load_idx(images, labels)
    else:
        if not (d.images and d.labels):
            raise ConfigError("data.images and data.labels are required for source 'idx'")
        base = load_idx(d.images, d.labels)
    if d.test_images and d.test_labels:
        parts = split_dataset(base, SplitSpec(1 - s.validation, s.validation, 0.0, cfg.seed))
        parts["test"] = load_idx(d.test_images, d.test_labels, split="test")
        return parts
    return split_dataset(base, SplitSpec(s.train, s.validation, s.test, cfg.seed))


def sgd(section: SgdSection, seed: int) -> SgdConfig:
    return SgdConfig(section.learning_rate, section.momentum, section.batch_size, section.epochs, seed)


def sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_provenance(out: Path, command: str, cfg: RunConfig, artifacts: list[str]) -> None:
    record = {
        "command": command,
        "config_sha256": config_hash(cfg),
        "seed": cfg.seed,
        "artifacts": {name: sha256(out / name) for name in sorted(artifacts)},
    }
    (out / f"provenance-{command}.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")


@contextlib.contextmanager
def locked_dir(path: Path):
    path.mkdir(parents=True, exist_ok=True)
    fd = os.open(path, os.O_RDONLY)
    try:
        try:
            fcntl.flock(fd, fcntl.LOCK_EX | fcntl.LOCK_NB)
        except BlockingIOError:
            raise OSError(f"output directory {path} is locked by another run") from None
        yield path
    finally:
        os.close(fd)


def _model_path(cfg: RunConfig, out: Path, default: str) -> Path:
    return Path(cfg.model) if cfg.model else out / default


# --------------------------------------------------------------------------- commands


def cmd_train(cfg: RunConfig) -> None:
    with locked_dir(Path(cfg.out)) as out:
        parts = load_splits(cfg)
        net = resolve_architecture(cfg.architecture).build(cfg.seed)
        net, log = train_sgd(net, parts["train"], sgd(cfg.train, cfg.seed))
        (out / "model.pkm").write_bytes(model_bytes(net))
        lines = ["epoch,loss"] + [f"{i},{loss!r}" for i, loss in enumerate(log)]
        (out / "train_log.csv").write_text("\n".join(lines) + "\n")
        acc = evaluate_accuracy(net, parts["test"])
        write_provenance(out, "train", cfg, ["model.pkm", "train_log.csv"])
        print(f"trained {net.name}: test accuracy {acc:.4f}")


def cmd_prune(cfg: RunConfig) -> None:
    with locked_dir(Path(cfg.out)) as out:
        parts = load_splits(cfg)
        net = load_model(_model_path(cfg, out, "model.pkm"))
        p = cfg.prune
        pcfg = PruneConfig(
            p.layer, p.target_ratio, p.index,
            fine_tune=sgd(p.fine_tune_sgd, cfg.seed) if p.fine_tune != "off" else None,
            fine_tune_mode=p.fine_tune, seed=cfg.seed, eval_split=p.eval_split, eval_size=p.eval_size,
        )
        pruned, trace = greedy_prune(net, pcfg, parts[p.eval_split], parts["train"], parts["test"],
                                     workers=p.workers)
        (out / "pruned.pkm").write_bytes(model_bytes(pruned))
        trace.write_csv(out / "trace.csv")
        (out / "trace.json").write_text(trace.to_json() + "\n")
        write_provenance(out, "prune", cfg, ["pruned.pkm", "trace.csv", "trace.json"])
        print(f"pruned {p.layer}: {trace.n_original} -> {pruned.layer(p.layer).n_filters} filters "
              f"in {len(trace.records)} iterations")


def compress_network(net, layers, sparsity: float, code_bits: int, idx_bits: int,
                     retrain: SgdConfig | None = None, train_data=None):
    """Magnitude-prune, optionally retrain with pruned weights frozen at zero, then quantize."""
    work = net.copy()
    masks = {}
    for lid in layers:
        layer = work.layer(lid)
        layer.weights = wc.magnitude_prune(layer.weights, sparsity)
        masks[lid] = layer.weights != 0
    if retrain is not None:
        work, _ = train_sgd(work, train_data, retrain, masks=masks)
    stores = {lid: wc.kmeans_quantize(work.layer(lid).weights, code_bits, lid, idx_bits)
              for lid in layers}
    for lid, store in stores.items():
        work.layer(lid).weights = store.decode()
    return work, stores


def cmd_compress(cfg: RunConfig) -> None:
    with locked_dir(Path(cfg.out)) as out:
        c = cfg.compress
        original = load_model(out / "model.pkm")
        pruned_path = _model_path(cfg, out, "pruned.pkm")
        net = load_model(pruned_path if pruned_path.exists() else out / "model.pkm")
        layers = c.layers or [cfg.prune.layer]
        retrain, train = None, None
        if c.retrain:
            retrain, train = sgd(c.retrain_sgd, cfg.seed), load_splits(cfg)["train"]
        _, stores = compress_network(net, layers, c.sparsity, c.code_bits, c.idx_bits, retrain, train)
        save_compressed(out / "compressed.pkc", net, stores, original)
        _, _, manifest = load_compressed(out / "compressed.pkc")
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        write_provenance(out, "compress", cfg, ["compressed.pkc", "manifest.json"])
        for lid in layers:
            print(f"{lid}: {wc.combined_ratio(original, lid, stores[lid]):.1f}x")


def cmd_report(cfg: RunConfig) -> None:
    with locked_dir(Path(cfg.out)) as out:
        parts = load_splits(cfg)
        test = parts["test"]
        original = load_model(out / "model.pkm")
        final = load_model(out / "pruned.pkm") if (out / "pruned.pkm").exists() else original
        stores = {}
        if (out / "compressed.pkc").exists():
            final, stores, _ = load_compressed(out / "compressed.pkc")
        artifacts = []
        if (out / "trace.json").exists():
            t = json.loads((out / "trace.json").read_text())
            trace = ImportanceTrace(t["layer_id"], t["n_original"], t["index"], t["fine_tuned"], t["seed"])
            for r in t["records"]:
                trace.records.append(TraceRecord(
                    r["iteration"], FilterRef(r["layer_id"], r["pruned_filter"]), tuple(r["scores"]),
                    r["accuracy_pruned"], r["accuracy_tuned"], r["n_iter"], r["r_iter"]))
            write_curve_csv(out / "curve.csv", build_curve(trace))
            artifacts.append("curve.csv")
        r = cfg.report
        layer = cfg.prune.layer
        baseline = random_baseline(original, layer, r.baseline_ratios, test, r.baseline_repeats, cfg.seed)
        write_baseline_csv(out / "baseline.csv", baseline)
        cmp = per_class_compare(original, final, test, r.threshold)
        write_per_class_csv(out / "per_class.csv", cmp)
        patch_layer = r.patch_layer or layer
        (out / "patches.json").write_text(
            patches_json(top_patches(final, patch_layer, parts["validation"], r.patch_k)) + "\n")
        before, after = accuracy_summary(original, test), accuracy_summary(final, test)
        report = build_report(
            original, final,
            accuracy={"original": before["overall"], "final": after["overall"],
                      "fraction_classes_within_threshold": cmp.fraction_within},
            per_class={c: {"original": before["per_class"][c], "final": after["per_class"][c]}
                       for c in before["per_class"]},
            stores=stores, trace_path="trace.csv" if (out / "trace.csv").exists() else None,
        )
        if r.ratio_labels:
            report["ratio_audit"] = audit_ratio_labels(r.ratio_labels)
        write_report_json(out / "report.json", report)
        artifacts += ["baseline.csv", "per_class.csv", "patches.json", "report.json"]
        write_provenance(out, "report", cfg, artifacts)
        print(f"report: accuracy {before['overall']:.4f} -> {after['overall']:.4f}")


def cmd_eval(cfg: RunConfig, split: str = "test") -> None:
    out = Path(cfg.out)
    path = _model_path(cfg, out, "model.pkm")
    if cfg.model is None and not path.exists():
        net = resolve_architecture(cfg.architecture).build(cfg.seed)
    else:
        net = load_model(path)
    data = load_splits(cfg)[split]
    preds = predict(net, data)
    correct = int((preds == data.labels).sum())
    print(f"accuracy={correct / len(data):.6f} correct={correct} total={len(data)} split={split}")


COMMANDS = {"train": cmd_train, "prune": cmd_prune, "compress": cmd_compress,
            "report": cmd_report, "eval": cmd_eval}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="carprune", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON run config")
        p.add_argument("--seed", type=int)
        p.add_argument("--out")
        p.add_argument("--model", help="input model file (default: from --out)")
        p.add_argument("--architecture", help="preset name or architecture file")
        p.add_argument("--eval-split", choices=["validation", "test"])
        p.add_argument("--index", choices=["car", "incoming", "outgoing", "random"])
        p.add_argument("--fine-tune", choices=["each-iter", "final", "off"])
        p.add_argument("--target-ratio", type=float)
        p.add_argument("--layer")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    overrides = {
        "seed": args.seed, "out": args.out, "model": args.model, "architecture": args.architecture,
        "prune.eval_split": args.eval_split, "prune.index": args.index,
        "prune.fine_tune": args.fine_tune, "prune.target_ratio": args.target_ratio,
        "prune.layer": args.layer,
    }
    try:
        cfg = load_config(args.config, overrides)
        if args.command == "eval":
            cmd_eval(cfg, args.eval_split or "test")
        else:
            COMMANDS[args.command](cfg)
    except ConfigError as exc:
        return _fail("config", exc, EXIT_CONFIG)
    except (OSError, FormatError) as exc:
        return _fail("io", exc, EXIT_IO)
    except TrainingDiverged as exc:
        return _fail("divergence", exc, EXIT_DIVERGED)
    except (ValueError, KeyError) as exc:
        return _fail("usage", exc, 1)
    return 0


def _fail(category: str, exc: Exception, code: int) -> int:
    msg = " ".join(str(exc).split())
    print(f"error: {category}: {msg}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
