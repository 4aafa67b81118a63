"""Full MEFT network: embedding, frozen / reversible / vanilla segments, merge, head.

Layer plan, bottom to top::

    embedding -> frozen base layers -> reversible MEFT layers -> vanilla MEFT layers
              -> merge of the two streams -> head

The frozen segment is a fixed feature extractor and caches nothing. The
reversible segment keeps only its output pair and reconstructs everything
else during backward. The vanilla segment caches normally, which is why it
has to sit above the reversible one.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from revft.blocks import (
    BlockCache,
    ClassifierHead,
    EmbeddingParams,
    PlmLayerParams,
    embed_apply,
    embed_backward,
    head_apply,
    head_backward,
    init_classifier,
    init_embedding,
    init_plm_layer,
    named_tensors,
    plm_layer_apply,
    plm_layer_backward,
)
from revft.checkpoint import load_checkpoint, save_checkpoint
from revft.exceptions import ConfigError, ShapeMismatch
from revft.memory import MemoryLedger
from revft.reversible import (
    DEFAULT_SCALING,
    MeftKind,
    ReversibleLayer,
    ScalingConfig,
    StreamPair,
    build_meft_layer,
    new_layer_cache,
    rev_backward_cached,
    rev_forward,
    stack_backward,
    stack_backward_cached,
    stack_forward,
)
from revft.tensor import Precision, make_rng

SEGMENTS = ("frozen", "reversible", "vanilla")


@dataclass(frozen=True)
class SegmentPlan:
    n_frozen: int = 0
    n_reversible: int = 0
    n_vanilla: int = 0

    def __post_init__(self):
        for name in ("n_frozen", "n_reversible", "n_vanilla"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 0:
                raise ConfigError(f"{name} must be a non-negative integer, got {value!r}")

    @property
    def total(self) -> int:
        return self.n_frozen + self.n_reversible + self.n_vanilla

    @classmethod
    def from_layout(cls, layout) -> "SegmentPlan":
        """Build a plan from per-layer labels, bottom first.

        Labels are ``frozen``/``reversible``/``vanilla`` or their initials.
        The labels must appear in that order: frozen layers first, then
        reversible, then vanilla.
        """
        names = {"f": "frozen", "r": "reversible", "v": "vanilla"}
        seen = []
        for label in layout:
            label = names.get(str(label).lower(), str(label).lower())
            if label not in SEGMENTS:
                raise ConfigError(f"unknown segment label {label!r}")
            seen.append(SEGMENTS.index(label))
        if any(a > b for a, b in zip(seen, seen[1:])):
            raise ConfigError(
                "invalid segment order: layers must go frozen -> reversible -> vanilla "
                "(vanilla layers cannot sit below reversible ones)"
            )
        return cls(seen.count(0), seen.count(1), seen.count(2))


@dataclass(frozen=True)
class MergeMode:
    """``mean`` averages the streams; ``gamma_lm`` down-weights the non-designated one."""

    kind: str = "mean"
    gamma: float = 0.1

    def __post_init__(self):
        if self.kind not in ("mean", "gamma_lm"):
            raise ConfigError(f"unknown merge mode {self.kind!r}")


@dataclass(frozen=True)
class ModelDims:
    vocab: int = 16
    max_len: int = 32
    d_model: int = 64
    heads: int = 4
    n_classes: int = 2
    causal: bool = False

    def __post_init__(self):
        if self.vocab < 2 or self.max_len < 1 or self.d_model < 1 or self.n_classes < 1:
            raise ConfigError(f"invalid model dimensions {self}")
        if self.heads < 1 or self.d_model % self.heads:
            raise ConfigError(f"heads={self.heads} must divide d_model={self.d_model}")


@dataclass
class BaseModel:
    """The unmodified "pretrained" network: embedding plus a stack of layers."""

    embedding: EmbeddingParams
    layers: list[PlmLayerParams]
    dims: ModelDims

    def named_parameters(self):
        yield from named_tensors(self.embedding, "embed.")
        for i, layer in enumerate(self.layers):
            yield from named_tensors(layer, f"layers.{i}.")

    @property
    def precision(self) -> Precision:
        return Precision.of(self.embedding.tok)


def init_base_model(dims: ModelDims, n_layers: int, rng, precision=Precision.DOUBLE,
                    ln_std: float = 0.0) -> BaseModel:
    """Seeded stand-in for a pretrained network.

    ``ln_std`` jitters the layer-norm affine parameters away from identity,
    as trained networks have; with identity layer norms every block output
    has exactly zero feature mean.
    """
    embedding = init_embedding(dims.vocab, dims.max_len, dims.d_model, rng, precision)
    layers = [
        init_plm_layer(dims.d_model, dims.heads, rng, precision, causal=dims.causal, ln_std=ln_std)
        for _ in range(n_layers)
    ]
    return BaseModel(embedding, layers, dims)


def base_forward(base: BaseModel, tokens, caches: list | None = None) -> list[np.ndarray]:
    """Return ``[h0, h1, ..., hN]``; fills ``caches`` (embedding first) when given."""
    cache = None if caches is None else BlockCache("embed")
    hs = [embed_apply(tokens, base.embedding, cache)]
    if caches is not None:
        caches.append(cache)
    for layer in base.layers:
        cache = None if caches is None else BlockCache("layer")
        hs.append(plm_layer_apply(hs[-1], layer.attn, layer.mlp, None, cache))
        if caches is not None:
            caches.append(cache)
    return hs


def base_backward(base: BaseModel, caches: list, dh) -> dict[str, np.ndarray]:
    """Gradients of every base parameter given ``dh`` at the top activation."""
    grads = {}
    for i in range(len(base.layers) - 1, -1, -1):
        layer = base.layers[i]
        dh, g = plm_layer_backward(caches[i + 1], dh, layer.attn, layer.mlp)
        grads.update({f"layers.{i}.{k}": v for k, v in g.items()})
    grads.update({f"embed.{k}": v for k, v in embed_backward(caches[0], dh, base.embedding).items()})
    return grads


def save_base_model(path, base: BaseModel) -> None:
    meta = {"kind": "base_model", "n_layers": len(base.layers), "dims": base.dims.__dict__}
    save_checkpoint(path, dict(base.named_parameters()), meta)


def load_base_model(path) -> BaseModel:
    tensors, meta = load_checkpoint(path)
    if meta.get("kind") != "base_model":
        raise ConfigError(f"{path} does not hold a base model")
    dims = ModelDims(**meta["dims"])
    precision = Precision.of(tensors["embed.tok"])
    base = init_base_model(dims, meta["n_layers"], make_rng(0), precision)
    load_state(base.named_parameters(), tensors)
    return base


def load_state(named, tensors: dict) -> None:
    """Copy ``tensors`` into the arrays yielded by ``named`` (in place)."""
    for name, arr in named:
        if name not in tensors:
            raise ConfigError(f"checkpoint lacks tensor {name}")
        src = tensors[name]
        if src.shape != arr.shape or src.dtype != arr.dtype:
            raise ConfigError(f"checkpoint tensor {name} has shape {src.shape} {src.dtype}")
        arr[...] = src


class BaseClassifier:
    """The base network plus a classifier head, every weight trainable.

    Used to "pretrain" a base in-artifact before it is frozen.
    """

    head_mode = "classify"

    def __init__(self, base: BaseModel, head: ClassifierHead):
        self.base = base
        self.head = head

    def named_parameters(self):
        yield from self.base.named_parameters()
        yield from named_tensors(self.head, "head.")

    def trainable_parameters(self) -> dict[str, np.ndarray]:
        return dict(self.named_parameters())

    def forward(self, tokens, cache_mode: str = "vanilla"):
        caches = []
        h = base_forward(self.base, tokens, caches)[-1]
        head_cache = BlockCache("head")
        logits = head_apply(h, "classify", self.head, head_cache)
        return logits, (caches, head_cache, h.shape[1])

    def backward(self, record, dlogits, ledger=None):
        caches, head_cache, seq_len = record
        dh, hg = head_backward(head_cache, dlogits, "classify", self.head, seq_len)
        grads = base_backward(self.base, caches, dh)
        grads.update({f"head.{k}": v for k, v in hg.items()})
        return grads


@dataclass
class MeftModel:
    base: BaseModel
    frozen: list[PlmLayerParams]
    reversible: list[ReversibleLayer]
    vanilla: list[ReversibleLayer]
    merge: MergeMode
    head_mode: str
    head: ClassifierHead | None
    kind: MeftKind

    @property
    def embedding(self) -> EmbeddingParams:
        return self.base.embedding

    @property
    def plan(self) -> SegmentPlan:
        return SegmentPlan(len(self.frozen), len(self.reversible), len(self.vanilla))

    def named_parameters(self):
        yield from named_tensors(self.embedding, "embed.")
        for i, layer in enumerate(self.frozen):
            yield from named_tensors(layer, f"frozen.{i}.")
        for seg, layers in (("rev", self.reversible), ("van", self.vanilla)):
            for i, layer in enumerate(layers):
                for name, arr in layer.named_parameters():
                    yield f"{seg}.{i}.{name}", arr
        if self.head is not None:
            yield from named_tensors(self.head, "head.")

    def trainable_names(self) -> list[str]:
        return [n for n, _ in self.named_parameters() if _is_trainable(n)]

    def trainable_parameters(self) -> dict[str, np.ndarray]:
        return {n: a for n, a in self.named_parameters() if _is_trainable(n)}

    @property
    def precision(self) -> Precision:
        return self.base.precision

    def forward(self, tokens, cache_mode: str = "reversible"):
        return model_forward(self, tokens, cache_mode)

    def backward(self, record, dlogits, ledger: MemoryLedger | None = None):
        return model_backward(self, record, dlogits, ledger)


def _is_trainable(name: str) -> bool:
    return name.startswith("head.") or ".adapter." in name


def assemble_model(plan: SegmentPlan, kind, dims: ModelDims, r: int = 8, sigma: float = 0.02,
                   scaling: ScalingConfig | None = None, merge: MergeMode = MergeMode(),
                   head_mode: str = "classify", rng=None, precision=Precision.DOUBLE,
                   base: BaseModel | None = None, n_layers: int | None = None,
                   mu: float = 0.0) -> MeftModel:
    """Build a MEFT model over ``base`` (a fresh seeded base when omitted)."""
    kind = MeftKind(kind)
    if not isinstance(plan, SegmentPlan):
        plan = SegmentPlan.from_layout(plan) if isinstance(plan, (str, list)) else SegmentPlan(*plan)
    if n_layers is not None and n_layers != plan.total:
        raise ConfigError(f"plan covers {plan.total} layers but the base has {n_layers}")
    if head_mode not in ("classify", "lm_tied"):
        raise ConfigError(f"unknown head mode {head_mode!r}")
    if merge.kind == "gamma_lm" and head_mode != "lm_tied":
        raise ConfigError("gamma_lm merge requires the lm_tied head")
    if rng is None:
        rng = make_rng(0)
    if base is None:
        base = init_base_model(dims, plan.total, rng, precision)
    elif len(base.layers) != plan.total:
        raise ConfigError(f"plan covers {plan.total} layers but the base has {len(base.layers)}")
    elif base.dims.d_model != dims.d_model:
        raise ShapeMismatch(f"base width {base.dims.d_model} differs from {dims.d_model}")
    precision = base.precision
    scaling = scaling or DEFAULT_SCALING[kind]
    layers = list(base.layers)
    frozen = layers[: plan.n_frozen]
    meft = [build_meft_layer(kind, layer, r, sigma, scaling, rng, mu) for layer in layers[plan.n_frozen:]]
    head = init_classifier(dims.d_model, dims.n_classes, rng, precision) if head_mode == "classify" else None
    return MeftModel(base, frozen, meft[: plan.n_reversible], meft[plan.n_reversible:],
                     merge, head_mode, head, kind)


# ---------------------------------------------------------------------------
# merge


def merge_outputs(pair, mode: MergeMode, kind) -> np.ndarray:
    h1, h2 = pair
    if mode.kind == "mean":
        return (h1 + h2) / h1.dtype.type(2)
    g = h1.dtype.type(mode.gamma)
    if MeftKind(kind) is MeftKind.MEFT2:
        return h1 + g * h2
    return g * h1 + h2


def merge_backward(dh, mode: MergeMode, kind) -> StreamPair:
    if mode.kind == "mean":
        half = dh * dh.dtype.type(0.5)
        return StreamPair(half, half)
    g = dh.dtype.type(mode.gamma)
    if MeftKind(kind) is MeftKind.MEFT2:
        return StreamPair(dh, g * dh)
    return StreamPair(g * dh, dh)


# ---------------------------------------------------------------------------
# forward / backward


@dataclass
class RunRecord:
    """Everything a forward pass keeps for the backward pass."""

    cache_mode: str
    seq_len: int
    boundary: StreamPair | None = None
    reversible_caches: list = field(default_factory=list)
    vanilla_caches: list = field(default_factory=list)
    head_cache: BlockCache | None = None

    def retained(self):
        """Yield ``(category, name, array)`` for every retained tensor."""
        if self.boundary is not None:
            for i, arr in enumerate(self.boundary):
                yield "reversible_boundary", f"boundary.h{i + 1}", arr
        for seg, caches in (("rev", self.reversible_caches), ("van", self.vanilla_caches)):
            for i, cache in enumerate(caches):
                for name, arr in cache.tensors():
                    yield "vanilla_caches", f"{seg}.{i}.{name}", arr
        if self.head_cache is not None:
            for name, arr in self.head_cache.tensors():
                yield "head", f"head.{name}", arr

    def ledger(self) -> MemoryLedger:
        ledger = MemoryLedger()
        for category, _, arr in self.retained():
            ledger.add(category, arr.nbytes)
        return ledger


def frozen_forward(m: MeftModel, tokens) -> np.ndarray:
    h = embed_apply(tokens, m.embedding)
    for layer in m.frozen:
        h = plm_layer_apply(h, layer.attn, layer.mlp)
    return h


def model_forward(m: MeftModel, tokens, cache_mode: str = "reversible"):
    """Returns ``(logits, RunRecord)``."""
    tokens = np.asarray(tokens)
    h = frozen_forward(m, tokens)
    record = RunRecord(cache_mode, tokens.shape[1])
    pair, record.reversible_caches = stack_forward(m.reversible, h, cache_mode)
    if cache_mode == "reversible" and m.reversible:
        record.boundary = pair
    for layer in m.vanilla:
        cache = new_layer_cache()
        pair = rev_forward(layer, pair, cache)
        record.vanilla_caches.append(cache)
    merged = merge_outputs(pair, m.merge, m.kind)
    record.head_cache = BlockCache("head")
    head_params = m.head if m.head_mode == "classify" else m.embedding
    logits = head_apply(merged, m.head_mode, head_params, record.head_cache)
    return logits, record


def model_backward(m: MeftModel, record: RunRecord, dlogits, ledger: MemoryLedger | None = None):
    """Gradients of the trainable parameters (adapters and classifier head).

    Nothing below the reversible segment is differentiated.
    """
    grads = {}
    if m.head_mode == "classify":
        dh, hg = head_backward(record.head_cache, dlogits, "classify", m.head, record.seq_len)
        grads.update({f"head.{k}": v for k, v in hg.items()})
    else:
        dh, _ = head_backward(record.head_cache, dlogits, "lm_tied", m.embedding)
    dpair = merge_backward(dh, m.merge, m.kind)
    for i in range(len(m.vanilla) - 1, -1, -1):
        dpair, g = rev_backward_cached(m.vanilla[i], record.vanilla_caches[i], dpair)
        grads.update({f"van.{i}.{k}": v for k, v in g.items()})
    if m.reversible:
        if record.cache_mode == "reversible":
            _, layer_grads = stack_backward(m.reversible, record.boundary, dpair, ledger)
        else:
            _, layer_grads = stack_backward_cached(m.reversible, record.reversible_caches, dpair)
        for i, g in enumerate(layer_grads):
            grads.update({f"rev.{i}.{k}": v for k, v in g.items()})
    return grads


def trace_streams(m: MeftModel, tokens) -> list[StreamPair]:
    """Stream pair after every MEFT layer (reversible then vanilla), forward only."""
    h = frozen_forward(m, tokens)
    pair = StreamPair(h, h)
    pairs = []
    for layer in m.reversible + m.vanilla:
        pair = rev_forward(layer, pair)
        pairs.append(pair)
    return pairs


def save_model(path, m: MeftModel, metadata: dict | None = None) -> None:
    meta = {"kind": "meft_model", "meft_kind": m.kind.value,
            "plan": list(m.plan.__dict__.values()), **(metadata or {})}
    save_checkpoint(path, dict(m.named_parameters()), meta)


def load_model_state(path, m: MeftModel) -> dict:
    tensors, meta = load_checkpoint(path)
    load_state(m.named_parameters(), tensors)
    return meta
