"""Filter removal: delete a filter and every connection that reads its channel."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .network import Affine, Conv, Flatten, MaxPool, Network, ReLU, ResidualBlock


class PruneError(ValueError):
    pass


@dataclass(frozen=True, order=True)
class FilterRef:
    layer_id: str
    index: int


@dataclass(frozen=True)
class Successor:
    """The layer that reads a conv layer's output channels.

    For an affine successor, ``columns_per_channel`` is the spatial size H*W
    at the flatten, so channel ``c`` feeds columns ``[c*HW, (c+1)*HW)``.
    """

    layer: Conv | Affine
    columns_per_channel: int = 1

    def input_slice(self, channel: int) -> np.ndarray:
        if isinstance(self.layer, Conv):
            return self.layer.weights[:, channel]
        return self.layer.weights[:, channel_columns(self, channel)]


def channel_columns(succ: Successor, channel: int) -> np.ndarray:
    hw = succ.columns_per_channel
    return np.arange(channel * hw, (channel + 1) * hw)


def conv_layer(net: Network, layer_id: str) -> Conv:
    try:
        layer = net.layer(layer_id)
    except KeyError:
        raise PruneError(f"no layer with id {layer_id!r}") from None
    if not isinstance(layer, Conv):
        raise PruneError(f"layer {layer_id!r} is {layer.kind}, not conv")
    return layer


def successor(net: Network, layer_id: str) -> Successor:
    """Locate the next parameterized layer reading ``layer_id``'s channels."""
    conv_layer(net, layer_id)
    for block in net.layers:
        if isinstance(block, ResidualBlock):
            ids = [l.id for l in block.branch]
            if layer_id in ids:
                convs = [l for l in block.branch if isinstance(l, Conv)]
                pos = [c.id for c in convs].index(layer_id)
                if pos == len(convs) - 1:
                    raise PruneError(
                        f"layer {layer_id!r} is the last conv of residual block {block.id!r}; its "
                        "filter count must equal the block input channels (use prune_branch)"
                    )
                return Successor(convs[pos + 1])
    top = [l.id for l in net.layers]
    start = top.index(layer_id) + 1
    shapes = net.shapes()
    for j in range(start, len(net.layers)):
        layer = net.layers[j]
        if isinstance(layer, (ReLU, MaxPool)):
            continue
        if isinstance(layer, Conv):
            return Successor(layer)
        if isinstance(layer, Flatten):
            c, h, w = shapes[j - 1]
            nxt = next((l for l in net.layers[j + 1 :] if isinstance(l, Affine)), None)
            if nxt is None:
                break
            return Successor(nxt, h * w)
        if isinstance(layer, ResidualBlock):
            raise PruneError(
                f"layer {layer_id!r} feeds residual block {layer.id!r}; its filter count is tied "
                "to the identity path"
            )
    raise PruneError(f"layer {layer_id!r} has no parameterized successor")


def prune_surgery(net: Network, f: FilterRef) -> Network:
    """Return a copy of ``net`` without filter ``f`` and its outgoing connections."""
    conv = conv_layer(net, f.layer_id)
    if not 0 <= f.index < conv.n_filters:
        raise PruneError(f"filter {f.index} out of range for {f.layer_id} ({conv.n_filters} filters)")
    if conv.n_filters < 2:
        raise PruneError(f"cannot remove the last filter of {f.layer_id}")
    succ = successor(net, f.layer_id)
    out = net.copy()
    conv = out.layer(f.layer_id)
    nxt = out.layer(succ.layer.id)
    conv.weights = np.delete(conv.weights, f.index, axis=0)
    conv.bias = np.delete(conv.bias, f.index)
    if isinstance(nxt, Conv):
        nxt.weights = np.delete(nxt.weights, f.index, axis=1)
    else:
        nxt.weights = np.delete(nxt.weights, channel_columns(succ, f.index), axis=1)
    out.__post_init__()
    return out


def prune_filters(net: Network, layer_id: str, indices) -> Network:
    """Remove several filters of one layer (indices refer to the current network)."""
    for i in sorted(set(int(i) for i in indices), reverse=True):
        net = prune_surgery(net, FilterRef(layer_id, i))
    return net


def prune_branch(net: Network, block_id: str) -> Network:
    """Replace residual block ``block_id`` by ``relu(identity)``."""
    try:
        block = net.layer(block_id)
    except KeyError:
        raise PruneError(f"no layer with id {block_id!r}") from None
    if not isinstance(block, ResidualBlock):
        raise PruneError(f"layer {block_id!r} is {block.kind}, not a residual block")
    out = net.copy()
    out.layers = [ReLU(block_id) if l.id == block_id else l for l in out.layers]
    out.__post_init__()
    return out
