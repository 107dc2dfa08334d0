"""Layer graph, architecture configs, SGD training and top-1 evaluation."""
from __future__ import annotations

import copy
import math
import re
import zlib
from dataclasses import dataclass, field
from importlib import resources
from typing import ClassVar, Iterator

import numpy as np

from .tensor import (
    DTYPE,
    ConvParams,
    DimensionError,
    affine_backward,
    affine_forward,
    conv2d_backward,
    conv2d_forward,
    maxpool_backward,
    maxpool_forward,
    relu,
    relu_backward,
    softmax_cross_entropy,
)

ARCH_SCHEMA = "carprune-arch/1"
EVAL_CHUNK = 500


class TrainingDiverged(ArithmeticError):
    def __init__(self, epoch: int, batch: int, loss: float):
        super().__init__(f"loss became {loss} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch
        self.loss = loss


# --------------------------------------------------------------------------- layers


@dataclass(eq=False)
class Conv:
    id: str
    weights: np.ndarray
    bias: np.ndarray
    params: ConvParams = ConvParams()
    kind: ClassVar[str] = "conv"

    def __post_init__(self):
        if self.weights.ndim != 4 or self.weights.shape[0] != self.bias.shape[0]:
            raise DimensionError(
                f"layer {self.id}: filter axis of weights {self.weights.shape} "
                f"does not match bias {self.bias.shape}"
            )

    @property
    def n_filters(self) -> int:
        return self.weights.shape[0]

    @property
    def kernel(self) -> int:
        return self.weights.shape[2]

    def forward(self, x):
        return conv2d_forward(x, self.weights, self.bias, self.params)


@dataclass(eq=False)
class ReLU:
    id: str
    kind: ClassVar[str] = "relu"

    def forward(self, x):
        return relu(x)


@dataclass(eq=False)
class MaxPool:
    id: str
    window: int = 2
    stride: int = 2
    kind: ClassVar[str] = "maxpool"

    def forward(self, x):
        return maxpool_forward(x, self.window, self.stride)[0]


@dataclass(eq=False)
class Flatten:
    id: str
    kind: ClassVar[str] = "flatten"

    def forward(self, x):
        return x.reshape(x.shape[0], -1)


@dataclass(eq=False)
class Affine:
    id: str
    weights: np.ndarray
    bias: np.ndarray
    kind: ClassVar[str] = "affine"

    def forward(self, x):
        return affine_forward(x, self.weights, self.bias)


@dataclass(eq=False)
class ResidualBlock:
    """``relu(x + branch(x))``; the branch must preserve the input shape."""

    id: str
    branch: list
    kind: ClassVar[str] = "residual"

    def forward(self, x):
        y = x
        for layer in self.branch:
            y = layer.forward(y)
        return relu(x + y)


PARAMETERIZED = (Conv, Affine)


def _shape_after(layer, shape: tuple) -> tuple:
    if isinstance(layer, Conv):
        if len(shape) != 3:
            raise DimensionError(f"layer {layer.id}: conv expects [C,H,W], got {shape}")
        c, h, w = shape
        if layer.weights.shape[1] != c:
            raise DimensionError(
                f"layer {layer.id}: channel axis is {c} but weights read {layer.weights.shape[1]}"
            )
        oh = layer.params.out_extent(h, layer.kernel)
        ow = layer.params.out_extent(w, layer.kernel)
        if oh < 1 or ow < 1:
            raise DimensionError(f"layer {layer.id}: spatial axes {h}x{w} too small for kernel")
        return (layer.n_filters, oh, ow)
    if isinstance(layer, MaxPool):
        c, h, w = shape
        if layer.window > h or layer.window > w:
            raise DimensionError(f"layer {layer.id}: pool window exceeds spatial axes {h}x{w}")
        return (c, (h - layer.window) // layer.stride + 1, (w - layer.window) // layer.stride + 1)
    if isinstance(layer, Flatten):
        return (math.prod(shape),)
    if isinstance(layer, Affine):
        if len(shape) != 1 or shape[0] != layer.weights.shape[1]:
            raise DimensionError(
                f"layer {layer.id}: feature axis is {shape} but weights read {layer.weights.shape[1]}"
            )
        return (layer.weights.shape[0],)
    if isinstance(layer, ResidualBlock):
        out = shape
        for inner in layer.branch:
            out = _shape_after(inner, out)
        if out != shape:
            raise DimensionError(
                f"layer {layer.id}: branch output {out} does not match block input {shape}"
            )
        return shape
    return shape


# --------------------------------------------------------------------------- network


@dataclass(eq=False)
class Network:
    layers: list
    input_shape: tuple
    class_count: int
    name: str = "net"

    def __post_init__(self):
        self.input_shape = tuple(self.input_shape)
        ids = [layer.id for layer in self.walk()]
        dupes = {i for i in ids if ids.count(i) > 1}
        if dupes:
            raise ValueError(f"duplicate layer ids: {sorted(dupes)}")
        out = self.shapes()[-1]
        if out != (self.class_count,):
            raise DimensionError(f"network output {out} does not match class_count {self.class_count}")

    def walk(self) -> Iterator:
        """All layers depth-first, residual blocks before their branch layers."""
        for layer in self.layers:
            yield layer
            if isinstance(layer, ResidualBlock):
                yield from layer.branch

    def layer(self, layer_id: str):
        for layer in self.walk():
            if layer.id == layer_id:
                return layer
        raise KeyError(f"no layer with id {layer_id!r}")

    def parameterized(self) -> list:
        return [layer for layer in self.walk() if isinstance(layer, PARAMETERIZED)]

    def shapes(self) -> list[tuple]:
        """Output shape of every top-level layer for one example."""
        shape, out = self.input_shape, []
        for layer in self.layers:
            shape = _shape_after(layer, shape)
            out.append(shape)
        return out

    def input_shape_of(self, layer_id: str) -> tuple:
        shape = self.input_shape
        for layer in self.layers:
            if layer.id == layer_id:
                return shape
            if isinstance(layer, ResidualBlock):
                inner = shape
                for sub in layer.branch:
                    if sub.id == layer_id:
                        return inner
                    inner = _shape_after(sub, inner)
            shape = _shape_after(layer, shape)
        raise KeyError(f"no layer with id {layer_id!r}")

    def copy(self) -> "Network":
        return copy.deepcopy(self)

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, DTYPE)
        single = x.shape == self.input_shape
        if not single and x.shape[1:] != self.input_shape:
            raise DimensionError(
                f"layer {self.layers[0].id}: input shape {x.shape} does not match {self.input_shape}"
            )
        y = x[None] if single else x
        for layer in self.layers:
            y = layer.forward(y)
        return y[0] if single else y

    def forward_until(self, x: np.ndarray, layer_id: str) -> np.ndarray:
        """Batch output of the top-level layer ``layer_id``."""
        y = np.asarray(x, DTYPE)
        for layer in self.layers:
            y = layer.forward(y)
            if layer.id == layer_id:
                return y
        raise KeyError(f"no top-level layer with id {layer_id!r}")

    def architecture(self) -> "Architecture":
        return Architecture(
            name=self.name,
            input_shape=self.input_shape,
            class_count=self.class_count,
            layers=[_spec_of(layer) for layer in self.layers],
        )

    def param_count(self) -> int:
        return sum(layer.weights.size + layer.bias.size for layer in self.parameterized())


def forward(net: Network, image: np.ndarray) -> np.ndarray:
    return net.forward(image)


# --------------------------------------------------------------------------- architecture config


@dataclass
class LayerSpec:
    id: str
    kind: str
    attrs: dict = field(default_factory=dict)
    branch: list = field(default_factory=list)


@dataclass
class Architecture:
    name: str
    input_shape: tuple
    class_count: int
    layers: list

    def to_text(self) -> str:
        lines = [
            f"schema = {ARCH_SCHEMA}",
            f"name = {self.name}",
            "input = " + "x".join(str(d) for d in self.input_shape),
            f"classes = {self.class_count}",
            "",
        ]
        for spec in self.layers:
            if spec.kind == "residual":
                lines.append(f"block {spec.id}")
                lines.extend("  " + _spec_line(s) for s in spec.branch)
                lines.append("end")
            else:
                lines.append(_spec_line(spec))
        return "\n".join(lines) + "\n"

    def build(self, seed: int = 0) -> Network:
        shape = tuple(self.input_shape)
        layers = []
        for spec in self.layers:
            layer, shape = _build_layer(spec, shape, seed)
            layers.append(layer)
        return Network(layers, self.input_shape, self.class_count, self.name)


_INT_ATTRS = {"filters", "kernel", "stride", "padding", "window", "out"}
_KINDS = {"conv", "relu", "maxpool", "flatten", "affine"}


def _spec_line(spec: LayerSpec) -> str:
    attrs = " ".join(f"{k}={v}" for k, v in spec.attrs.items())
    return f"layer {spec.id} {spec.kind}" + (f" {attrs}" if attrs else "")


def _spec_of(layer) -> LayerSpec:
    if isinstance(layer, Conv):
        return LayerSpec(layer.id, "conv", {
            "filters": layer.n_filters, "kernel": layer.kernel,
            "stride": layer.params.stride, "padding": layer.params.padding,
        })
    if isinstance(layer, MaxPool):
        return LayerSpec(layer.id, "maxpool", {"window": layer.window, "stride": layer.stride})
    if isinstance(layer, Affine):
        return LayerSpec(layer.id, "affine", {"out": layer.weights.shape[0]})
    if isinstance(layer, ResidualBlock):
        return LayerSpec(layer.id, "residual", branch=[_spec_of(s) for s in layer.branch])
    return LayerSpec(layer.id, layer.kind)


def parse_architecture(text: str) -> Architecture:
    header: dict[str, str] = {}
    layers: list[LayerSpec] = []
    block: LayerSpec | None = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        words = line.split()
        if words[0] == "layer":
            if len(words) < 3:
                raise ValueError(f"line {lineno}: expected 'layer <id> <kind> [key=value...]'")
            _, lid, kind, *rest = words
            if kind not in _KINDS:
                raise ValueError(f"line {lineno}: unknown layer kind {kind!r}")
            attrs = {}
            for item in rest:
                key, sep, value = item.partition("=")
                if not sep or key not in _INT_ATTRS:
                    raise ValueError(f"line {lineno}: bad attribute {item!r}")
                attrs[key] = int(value)
            (block.branch if block else layers).append(LayerSpec(lid, kind, attrs))
        elif words[0] == "block":
            if block is not None or len(words) != 2:
                raise ValueError(f"line {lineno}: malformed or nested block")
            block = LayerSpec(words[1], "residual")
        elif words[0] == "end":
            if block is None:
                raise ValueError(f"line {lineno}: 'end' without 'block'")
            layers.append(block)
            block = None
        elif "=" in line:
            key, _, value = line.partition("=")
            header[key.strip()] = value.strip()
        else:
            raise ValueError(f"line {lineno}: cannot parse {raw!r}")
    if block is not None:
        raise ValueError(f"block {block.id} is not closed")
    if header.get("schema") != ARCH_SCHEMA:
        raise ValueError(f"architecture schema must be {ARCH_SCHEMA!r}, got {header.get('schema')!r}")
    unknown = set(header) - {"schema", "name", "input", "classes"}
    if unknown:
        raise ValueError(f"unknown architecture keys: {sorted(unknown)}")
    try:
        input_shape = tuple(int(d) for d in re.split(r"[x,]", header["input"]))
        classes = int(header["classes"])
    except KeyError as exc:
        raise ValueError(f"architecture is missing key {exc}") from None
    return Architecture(header.get("name", "net"), input_shape, classes, layers)


def load_preset(name: str) -> Architecture:
    path = resources.files("carprune") / "presets" / f"{name}.arch"
    if not path.is_file():
        raise KeyError(f"no preset named {name!r}")
    return parse_architecture(path.read_text())


def layer_rng(seed: int, layer_id: str) -> np.random.Generator:
    # keyed by layer id so removing one layer leaves the others' initial weights unchanged
    return np.random.default_rng([seed, zlib.crc32(layer_id.encode())])


def _build_layer(spec: LayerSpec, shape: tuple, seed: int):
    a = spec.attrs
    if spec.kind == "conv":
        c_in = shape[0]
        k = a["kernel"]
        fan_in = c_in * k * k
        rng = layer_rng(seed, spec.id)
        w = rng.normal(0.0, math.sqrt(2.0 / fan_in), (a["filters"], c_in, k, k)).astype(DTYPE)
        layer = Conv(spec.id, w, np.zeros(a["filters"], DTYPE),
                     ConvParams(a.get("stride", 1), a.get("padding", 0)))
    elif spec.kind == "affine":
        if len(shape) != 1:
            raise DimensionError(f"layer {spec.id}: affine needs a flat input, got {shape}")
        rng = layer_rng(seed, spec.id)
        w = rng.normal(0.0, math.sqrt(2.0 / shape[0]), (a["out"], shape[0])).astype(DTYPE)
        layer = Affine(spec.id, w, np.zeros(a["out"], DTYPE))
    elif spec.kind == "relu":
        layer = ReLU(spec.id)
    elif spec.kind == "maxpool":
        layer = MaxPool(spec.id, a.get("window", 2), a.get("stride", a.get("window", 2)))
    elif spec.kind == "flatten":
        layer = Flatten(spec.id)
    elif spec.kind == "residual":
        inner, branch = shape, []
        for sub in spec.branch:
            built, inner = _build_layer(sub, inner, seed)
            branch.append(built)
        layer = ResidualBlock(spec.id, branch)
    else:
        raise ValueError(f"unknown layer kind {spec.kind!r}")
    return layer, _shape_after(layer, shape)


def build_network(arch: Architecture | str, seed: int = 0) -> Network:
    if isinstance(arch, str):
        arch = load_preset(arch) if "\n" not in arch else parse_architecture(arch)
    return arch.build(seed)


# --------------------------------------------------------------------------- data


@dataclass(eq=False)
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    class_count: int
    split: str = "train"

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, DTYPE)
        self.labels = np.asarray(self.labels, np.int64)
        if self.images.ndim != 4:
            raise DimensionError(f"images must be [N,C,H,W], got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise DimensionError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ValueError(f"labels must lie in [0, {self.class_count})")

    def __len__(self):
        return len(self.labels)

    def __getitem__(self, i):
        return self.images[i], int(self.labels[i])

    def subset(self, indices, split: str | None = None) -> "Dataset":
        idx = np.asarray(indices, np.int64)
        return Dataset(self.images[idx], self.labels[idx], self.class_count, split or self.split)

    def sample(self, size: int | None, seed: int) -> "Dataset":
        """Fixed-seed subsample without replacement; ``None`` or oversize returns self."""
        if size is None or size >= len(self):
            return self
        idx = np.sort(np.random.default_rng(seed).choice(len(self), size, replace=False))
        return self.subset(idx)


# --------------------------------------------------------------------------- evaluation


def predict(net: Network, data: Dataset) -> np.ndarray:
    """Top-1 predictions; ``argmax`` resolves ties toward the lowest class index."""
    if len(data) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    out = [
        net.forward(data.images[i : i + EVAL_CHUNK]).argmax(axis=1)
        for i in range(0, len(data), EVAL_CHUNK)
    ]
    return np.concatenate(out)


def evaluate_accuracy(net: Network, data: Dataset) -> float:
    preds = predict(net, data)
    return int((preds == data.labels).sum()) / len(data)


def per_class_accuracy(net: Network, data: Dataset, preds: np.ndarray | None = None) -> dict:
    """Accuracy per class; classes with no examples map to ``None``."""
    if preds is None:
        preds = predict(net, data)
    out = {}
    for c in range(data.class_count):
        mask = data.labels == c
        n = int(mask.sum())
        out[c] = None if n == 0 else int((preds[mask] == c).sum()) / n
    return out


# --------------------------------------------------------------------------- training


@dataclass(frozen=True)
class SgdConfig:
    learning_rate: float = 0.05
    momentum: float = 0.9
    batch_size: int = 32
    epochs: int = 1
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning rate must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch size must be at least 1")
        if self.epochs < 0:
            raise ValueError("epoch count must be non-negative")


def _forward_tape(layers, x, tape):
    for layer in layers:
        if isinstance(layer, Conv):
            tape.append((layer, x))
            x = layer.forward(x)
        elif isinstance(layer, ReLU):
            tape.append((layer, x))
            x = relu(x)
        elif isinstance(layer, MaxPool):
            out, arg = maxpool_forward(x, layer.window, layer.stride)
            tape.append((layer, (x.shape, arg)))
            x = out
        elif isinstance(layer, Flatten):
            tape.append((layer, x.shape))
            x = x.reshape(x.shape[0], -1)
        elif isinstance(layer, Affine):
            tape.append((layer, x))
            x = layer.forward(x)
        elif isinstance(layer, ResidualBlock):
            inner: list = []
            y = _forward_tape(layer.branch, x, inner)
            pre = x + y
            tape.append((layer, (inner, pre)))
            x = relu(pre)
    return x


def _backward_tape(tape, g, grads):
    for layer, cache in reversed(tape):
        if isinstance(layer, Conv):
            g, gw, gb = conv2d_backward(cache, layer.weights, layer.params, g)
            grads[layer.id] = (gw, gb)
        elif isinstance(layer, ReLU):
            g = relu_backward(cache, g)
        elif isinstance(layer, MaxPool):
            shape, arg = cache
            g = maxpool_backward(shape, arg, layer.window, layer.stride, g)
        elif isinstance(layer, Flatten):
            g = g.reshape(cache)
        elif isinstance(layer, Affine):
            g, gw, gb = affine_backward(cache, layer.weights, g)
            grads[layer.id] = (gw, gb)
        elif isinstance(layer, ResidualBlock):
            inner, pre = cache
            g = relu_backward(pre, g)
            g = g + _backward_tape(inner, g, grads)
    return g


def loss_and_grads(net: Network, images: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy over a batch and per-layer ``(grad_weights, grad_bias)``."""
    tape: list = []
    logits = _forward_tape(net.layers, np.asarray(images, DTYPE), tape)
    loss, g = softmax_cross_entropy(logits, labels)
    grads: dict = {}
    _backward_tape(tape, g, grads)
    return loss, grads


def train_sgd(net: Network, train: Dataset, cfg: SgdConfig,
              masks: dict | None = None) -> tuple[Network, list[float]]:
    """Momentum SGD on a copy of ``net``; returns the trained copy and per-epoch mean loss.

    ``masks`` maps layer id to a boolean array shaped like that layer's weights;
    masked-out weights are held at zero throughout.
    """
    if len(train) == 0:
        raise ValueError("cannot train on an empty dataset")
    net = net.copy()
    masks = masks or {}
    layers = net.parameterized()
    velocity = {l.id: (np.zeros_like(l.weights), np.zeros_like(l.bias)) for l in layers}
    for layer in layers:
        if layer.id in masks:
            layer.weights *= masks[layer.id]
    lr, mom = np.float32(cfg.learning_rate), np.float32(cfg.momentum)
    log: list[float] = []
    with np.errstate(over="ignore", invalid="ignore"):
        for epoch in range(cfg.epochs):
            log.append(_train_epoch(net, layers, train, cfg, epoch, lr, mom, velocity, masks))
    return net, log


def _train_epoch(net, layers, train, cfg, epoch, lr, mom, velocity, masks) -> float:
    order = np.random.default_rng([cfg.seed, epoch]).permutation(len(train))
    total, batches = 0.0, 0
    for b, start in enumerate(range(0, len(train), cfg.batch_size)):
        idx = order[start : start + cfg.batch_size]
        loss, grads = loss_and_grads(net, train.images[idx], train.labels[idx])
        if not math.isfinite(loss):
            raise TrainingDiverged(epoch, b, loss)
        for layer in layers:
            gw, gb = grads[layer.id]
            vw, vb = velocity[layer.id]
            vw *= mom
            vw -= lr * gw
            vb *= mom
            vb -= lr * gb
            layer.weights += vw
            layer.bias += vb
            if layer.id in masks:
                layer.weights *= masks[layer.id]
        total += loss
        batches += 1
    if not all(np.isfinite(l.weights).all() for l in layers):
        raise TrainingDiverged(epoch, batches - 1, float("nan"))
    return total / max(batches, 1)
