"""Reversible coupling layers and the three MEFT constructions.

A coupling layer maps a stream pair ``(h1, h2)`` to::

    y1 = lam * h1 + F(h2)
    y2 = beta * h2 + G(y1)

and optionally swaps the outputs. Because the map is invertible, a stack of
such layers only has to keep its final pair; the backward pass rebuilds each
layer's inputs from its outputs while it walks down the stack.

The three MEFT variants differ in what F and G contain:

======  ===========================  ===========================  ======
kind    F                            G                            switch
======  ===========================  ===========================  ======
meft1   pretrained layer + adapter   adapter                      yes
meft2   adapter                      pretrained layer + adapter   yes
meft3   attention block + adapter    MLP block + adapter          no
======  ===========================  ===========================  ======

Only adapter weights are trainable; the pretrained weights are shared,
frozen arrays.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from revft.blocks import (
    AdapterParams,
    AttentionParams,
    BlockCache,
    MlpParams,
    PlmLayerParams,
    adapter_apply,
    adapter_backward,
    attention_block_apply,
    attention_block_backward,
    init_adapter,
    mlp_block_apply,
    mlp_block_backward,
    named_tensors,
    plm_layer_apply,
    plm_layer_backward,
)
from revft.exceptions import ScalingDegenerate, ShapeMismatch
from revft.memory import MemoryLedger
from revft.tensor import Precision, check_precision, ensure_finite

MIN_SCALE = 1e-6


class MeftKind(str, enum.Enum):
    MEFT1 = "meft1"
    MEFT2 = "meft2"
    MEFT3 = "meft3"


@dataclass(frozen=True)
class ScalingConfig:
    lam: float
    beta: float
    gamma: float = 0.1

    def check_invertible(self) -> None:
        for name, value in (("lambda", self.lam), ("beta", self.beta)):
            if abs(value) < MIN_SCALE:
                raise ScalingDegenerate(
                    f"ScalingDegenerate: |{name}| = {abs(value)} is below {MIN_SCALE}; "
                    "the layer cannot be inverted"
                )


DEFAULT_SCALING = {
    MeftKind.MEFT1: ScalingConfig(lam=0.1, beta=1.0),
    MeftKind.MEFT2: ScalingConfig(lam=1.0, beta=0.1),
    MeftKind.MEFT3: ScalingConfig(lam=0.1, beta=0.1),
}

# Exact forms of the "-> 0" / "-> 1" settings; only usable forward.
LIMIT_SCALING = {
    MeftKind.MEFT1: ScalingConfig(lam=0.0, beta=1.0),
    MeftKind.MEFT2: ScalingConfig(lam=1.0, beta=0.0),
    MeftKind.MEFT3: ScalingConfig(lam=0.0, beta=0.0),
}

SWITCH = {MeftKind.MEFT1: True, MeftKind.MEFT2: True, MeftKind.MEFT3: False}


class StreamPair(NamedTuple):
    h1: np.ndarray
    h2: np.ndarray


# ---------------------------------------------------------------------------
# sub-networks used as F and G


class AdapterNet:
    def __init__(self, adapter: AdapterParams):
        self.adapter = adapter

    def forward(self, x, cache=None):
        return adapter_apply(x, self.adapter, None if cache is None else cache.child("adapter"))

    def backward(self, cache, dy):
        dx, grads = adapter_backward(cache["adapter"], dy, self.adapter)
        return dx, {f"adapter.{k}": v for k, v in grads.items()}

    def named_parameters(self):
        yield from named_tensors(self.adapter, "adapter.")


class PlmNet:
    """A full pretrained layer with an adapter parallel to its MLP core."""

    def __init__(self, base: PlmLayerParams, adapter: AdapterParams):
        self.base = base
        self.adapter = adapter

    def forward(self, x, cache=None):
        return plm_layer_apply(x, self.base.attn, self.base.mlp, self.adapter, cache)

    def backward(self, cache, dy):
        return plm_layer_backward(cache, dy, self.base.attn, self.base.mlp, self.adapter)

    def named_parameters(self):
        yield from named_tensors(self.base.attn, "attn.")
        yield from named_tensors(self.base.mlp, "mlp.")
        yield from named_tensors(self.adapter, "adapter.")


class AttentionNet:
    def __init__(self, attn: AttentionParams, adapter: AdapterParams):
        self.attn = attn
        self.adapter = adapter

    def forward(self, x, cache=None):
        return attention_block_apply(x, self.attn, self.adapter, cache)

    def backward(self, cache, dy):
        return attention_block_backward(cache, dy, self.attn, self.adapter)

    def named_parameters(self):
        yield from named_tensors(self.attn, "attn.")
        yield from named_tensors(self.adapter, "adapter.")


class MlpNet:
    def __init__(self, mlp: MlpParams, adapter: AdapterParams):
        self.mlp = mlp
        self.adapter = adapter

    def forward(self, x, cache=None):
        return mlp_block_apply(x, self.mlp, self.adapter, cache)

    def backward(self, cache, dy):
        return mlp_block_backward(cache, dy, self.mlp, self.adapter)

    def named_parameters(self):
        yield from named_tensors(self.mlp, "mlp.")
        yield from named_tensors(self.adapter, "adapter.")


def is_trainable(name: str) -> bool:
    return name.split(".")[1] == "adapter" if "." in name else False


@dataclass
class ReversibleLayer:
    """One coupling cell.

    ``f`` and ``g`` are any objects with ``forward(x, cache)``,
    ``backward(cache, dy) -> (dx, grads)`` and ``named_parameters()``.
    ``kind`` is None for a plain coupling that is not one of the MEFT rows.
    """

    f: object
    g: object
    scaling: ScalingConfig
    switch: bool
    kind: MeftKind | None = None

    def __post_init__(self):
        if self.kind is not None:
            self.kind = MeftKind(self.kind)
            if self.switch != SWITCH[self.kind]:
                raise ValueError(f"{self.kind.value} requires switch={SWITCH[self.kind]}")

    def named_parameters(self):
        for name, arr in self.f.named_parameters():
            yield f"f.{name}", arr
        for name, arr in self.g.named_parameters():
            yield f"g.{name}", arr

    def trainable_parameters(self):
        return {n: a for n, a in self.named_parameters() if is_trainable(n)}

    def _unswitch(self, pair):
        a, b = pair
        return (b, a) if self.switch else (a, b)


@dataclass
class LayerCache:
    f: BlockCache
    g: BlockCache

    @property
    def nbytes(self) -> int:
        return self.f.nbytes + self.g.nbytes

    def tensors(self):
        yield from (("f." + n, a) for n, a in self.f.tensors())
        yield from (("g." + n, a) for n, a in self.g.tensors())


def build_meft_layer(kind, base: PlmLayerParams, r: int = 8, sigma: float = 0.02,
                     scaling: ScalingConfig | None = None, rng=None, mean: float = 0.0):
    """Wrap a frozen pretrained layer as a MEFT coupling cell.

    Adapters are drawn from N(mean, sigma^2); F's adapter is drawn first.
    """
    kind = MeftKind(kind)
    if r < 1:
        raise ValueError(f"adapter rank must be >= 1, got {r}")
    if rng is None:
        raise ValueError("build_meft_layer needs an rng")
    d = base.attn.wq.shape[0]
    precision = Precision.of(base.attn.wq)
    fa = init_adapter(d, r, rng, sigma, mean, precision)
    ga = init_adapter(d, r, rng, sigma, mean, precision)
    if kind is MeftKind.MEFT1:
        f, g = PlmNet(base, fa), AdapterNet(ga)
    elif kind is MeftKind.MEFT2:
        f, g = AdapterNet(fa), PlmNet(base, ga)
    else:
        f, g = AttentionNet(base.attn, fa), MlpNet(base.mlp, ga)
    return ReversibleLayer(f, g, scaling or DEFAULT_SCALING[kind], SWITCH[kind], kind)


# ---------------------------------------------------------------------------
# single-layer forward / inverse / backward


def _scalars(layer, dtype):
    return dtype.type(layer.scaling.lam), dtype.type(layer.scaling.beta)


def _check_pair(pair):
    h1, h2 = pair
    if h1.shape != h2.shape:
        raise ShapeMismatch(f"stream shapes differ: {h1.shape} vs {h2.shape}")
    return check_precision(h1, h2)


def rev_forward(layer: ReversibleLayer, pair, cache: LayerCache | None = None) -> StreamPair:
    """Apply one coupling cell. With ``cache`` the sub-network caches are kept."""
    dtype = _check_pair(pair)
    h1, h2 = pair
    lam, beta = _scalars(layer, dtype)
    y1 = lam * h1 + layer.f.forward(h2, None if cache is None else cache.f)
    y2 = beta * h2 + layer.g.forward(y1, None if cache is None else cache.g)
    return StreamPair(y2, y1) if layer.switch else StreamPair(y1, y2)


def rev_inverse(layer: ReversibleLayer, out) -> StreamPair:
    layer.scaling.check_invertible()
    dtype = _check_pair(out)
    lam, beta = _scalars(layer, dtype)
    y1, y2 = layer._unswitch(out)
    x2 = (y2 - layer.g.forward(y1)) / beta
    x1 = (y1 - layer.f.forward(x2)) / lam
    return StreamPair(ensure_finite(x1, "reconstruction"), ensure_finite(x2, "reconstruction"))


def _trainable(grads: dict, prefix: str) -> dict:
    return {f"{prefix}{k}": v for k, v in grads.items() if k.startswith("adapter.")}


def rev_backward(layer: ReversibleLayer, out, dout, ledger: MemoryLedger | None = None):
    """Backward through one cell by reconstructing its inputs.

    Returns ``(inputs, input_grads, adapter_grads)``. Each sub-network is
    re-run with a local cache that is dropped as soon as its gradient is
    taken, so at most one sub-network cache is alive at a time.
    """
    layer.scaling.check_invertible()
    dtype = _check_pair(out)
    lam, beta = _scalars(layer, dtype)
    y1, y2 = layer._unswitch(out)
    dy1, dy2 = layer._unswitch(dout)

    cache = BlockCache("g")
    g_y1 = layer.g.forward(y1, cache)
    dg, g_grads = layer.g.backward(cache, dy2)
    if ledger is not None:
        ledger.note_transient(cache.nbytes)
    cache.clear()
    x2 = (y2 - g_y1) / beta
    del g_y1
    dy1 = dy1 + dg

    cache = BlockCache("f")
    f_x2 = layer.f.forward(x2, cache)
    df, f_grads = layer.f.backward(cache, dy1)
    if ledger is not None:
        ledger.note_transient(cache.nbytes)
    cache.clear()
    x1 = (y1 - f_x2) / lam
    del f_x2

    dx2 = beta * dy2 + df
    dx1 = lam * dy1
    grads = _trainable(f_grads, "f.") | _trainable(g_grads, "g.")
    ensure_finite(x1, "reconstruction")
    ensure_finite(x2, "reconstruction")
    return StreamPair(x1, x2), StreamPair(dx1, dx2), grads


def rev_backward_cached(layer: ReversibleLayer, cache: LayerCache, dout):
    """Ordinary backward from caches recorded by :func:`rev_forward`."""
    lam, beta = _scalars(layer, dout[0].dtype)
    dy1, dy2 = layer._unswitch(dout)
    dg, g_grads = layer.g.backward(cache.g, dy2)
    dy1 = dy1 + dg
    df, f_grads = layer.f.backward(cache.f, dy1)
    dx2 = beta * dy2 + df
    dx1 = lam * dy1
    return StreamPair(dx1, dx2), _trainable(f_grads, "f.") | _trainable(g_grads, "g.")


# ---------------------------------------------------------------------------
# stacks

CACHE_MODES = ("vanilla", "reversible")


def new_layer_cache() -> LayerCache:
    return LayerCache(BlockCache("f"), BlockCache("g"))


def stack_forward(layers, h0, cache_mode: str = "reversible"):
    """Seed both streams with ``h0`` and run the cells in order.

    Returns ``(final_pair, caches)``; ``caches`` is empty in reversible mode.
    """
    if cache_mode not in CACHE_MODES:
        raise ValueError(f"unknown cache mode {cache_mode!r}")
    pair = StreamPair(h0, h0)
    caches = []
    for layer in layers:
        cache = new_layer_cache() if cache_mode == "vanilla" else None
        pair = rev_forward(layer, pair, cache)
        if cache is not None:
            caches.append(cache)
    return pair, caches


def stack_backward(layers, final, dfinal, ledger: MemoryLedger | None = None):
    """Reversible backward through a whole stack.

    Returns ``(dh0, grads)`` where ``grads[i]`` holds layer ``i``'s adapter
    gradients and ``dh0`` sums both stream gradients.
    """
    pair, dpair = StreamPair(*final), StreamPair(*dfinal)
    grads = [None] * len(layers)
    for i in range(len(layers) - 1, -1, -1):
        pair, dpair, grads[i] = rev_backward(layers[i], pair, dpair, ledger)
    return dpair.h1 + dpair.h2, grads


def stack_backward_cached(layers, caches, dfinal):
    dpair = StreamPair(*dfinal)
    grads = [None] * len(layers)
    for i in range(len(layers) - 1, -1, -1):
        dpair, grads[i] = rev_backward_cached(layers[i], caches[i], dpair)
    return dpair.h1 + dpair.h2, grads


def stack_inverse(layers, final) -> StreamPair:
    pair = StreamPair(*final)
    for layer in reversed(layers):
        pair = rev_inverse(layer, pair)
    return pair
