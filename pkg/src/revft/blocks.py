"""Transformer building blocks with explicit forward caches.

Every block comes as an ``*_apply`` / ``*_backward`` pair. ``*_apply`` takes
an optional :class:`BlockCache`; when one is given, the block records the
tensors its backward needs. Passing no cache computes exactly the same
output while retaining nothing, which is what reversible layers rely on.

Activations are row-major ``(B, T, d)`` arrays and weights act on the right
(``x @ W``). Blocks are post-layer-norm: ``LN(x + core(x) + adapter(x))``.
Backward functions return ``(dx, grads)`` where ``grads`` maps parameter
names to gradients; adapter gradients use the ``adapter.`` prefix.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from revft.exceptions import ShapeMismatch
from revft.tensor import (
    Precision,
    check_precision,
    ensure_finite,
    gaussian_fill,
    gelu,
    gelu_grad,
    layer_norm,
    layer_norm_backward,
    matmul,
    relu,
    softmax_rows,
    softmax_rows_backward,
)

LN_EPS = 1e-5


class BlockCache:
    """Tensors recorded by a forward call, keyed by the producing step.

    Entries may be arrays or nested caches (for composite blocks).
    """

    def __init__(self, tag: str = ""):
        self.tag = tag
        self.entries: dict[str, object] = {}

    def put(self, name: str, value: np.ndarray) -> None:
        self.entries[name] = value

    def child(self, name: str) -> "BlockCache":
        sub = BlockCache(f"{self.tag}.{name}" if self.tag else name)
        self.entries[name] = sub
        return sub

    def __getitem__(self, name):
        return self.entries[name]

    def __contains__(self, name) -> bool:
        return name in self.entries

    def tensors(self) -> Iterator[tuple[str, np.ndarray]]:
        for name, value in self.entries.items():
            if isinstance(value, BlockCache):
                for sub, arr in value.tensors():
                    yield f"{name}.{sub}", arr
            else:
                yield name, value

    @property
    def nbytes(self) -> int:
        return sum(arr.nbytes for _, arr in self.tensors())

    def clear(self) -> None:
        self.entries.clear()


def _child(cache: BlockCache | None, name: str) -> BlockCache | None:
    return None if cache is None else cache.child(name)


def _flat(x: np.ndarray) -> np.ndarray:
    return x.reshape(-1, x.shape[-1])


def _weight_grad(x: np.ndarray, dy: np.ndarray) -> np.ndarray:
    """Gradient of ``x @ W`` with respect to W, summed over leading axes."""
    return _flat(x).T @ _flat(dy)


# ---------------------------------------------------------------------------
# parameter bundles


@dataclass
class AdapterParams:
    w_down: np.ndarray  # d x r
    w_up: np.ndarray  # r x d

    def __post_init__(self):
        d, r = self.w_down.shape
        if r < 1 or self.w_up.shape != (r, d):
            raise ShapeMismatch(f"adapter shapes {self.w_down.shape} and {self.w_up.shape}")

    @property
    def rank(self) -> int:
        return self.w_down.shape[1]


@dataclass
class AttentionParams:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    ln_gamma: np.ndarray
    ln_beta: np.ndarray
    heads: int = 1
    causal: bool = False

    def __post_init__(self):
        d = self.wq.shape[0]
        if self.heads < 1 or d % self.heads:
            raise ShapeMismatch(f"{self.heads} heads do not divide width {d}")
        for w in (self.wq, self.wk, self.wv, self.wo):
            if w.shape != (d, d):
                raise ShapeMismatch(f"attention projection of shape {w.shape}, expected {(d, d)}")


@dataclass
class MlpParams:
    w1: np.ndarray  # d x 4d
    w2: np.ndarray  # 4d x d
    ln_gamma: np.ndarray
    ln_beta: np.ndarray

    def __post_init__(self):
        d, h = self.w1.shape
        if self.w2.shape != (h, d):
            raise ShapeMismatch(f"mlp shapes {self.w1.shape} and {self.w2.shape}")


@dataclass
class PlmLayerParams:
    attn: AttentionParams
    mlp: MlpParams


@dataclass
class EmbeddingParams:
    tok: np.ndarray  # V x d
    pos: np.ndarray  # L_max x d
    ln_gamma: np.ndarray
    ln_beta: np.ndarray

    def __post_init__(self):
        if self.tok.shape[0] < 2 or self.pos.shape[0] < 1:
            raise ShapeMismatch("embedding needs V >= 2 and L_max >= 1")
        if self.tok.shape[1] != self.pos.shape[1]:
            raise ShapeMismatch("token and position widths differ")


@dataclass
class ClassifierHead:
    w: np.ndarray  # d x k
    b: np.ndarray  # k


def named_tensors(params, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
    """Walk a parameter dataclass and yield ``(dotted_name, array)``."""
    for f in dataclasses.fields(params):
        value = getattr(params, f.name)
        name = f"{prefix}{f.name}"
        if isinstance(value, np.ndarray):
            yield name, value
        elif dataclasses.is_dataclass(value):
            yield from named_tensors(value, name + ".")


def _prefixed(grads: dict, prefix: str) -> dict:
    return {f"{prefix}{k}": v for k, v in grads.items()}


# ---------------------------------------------------------------------------
# initializers


def _ln(d, dtype, rng=None, std=0.0):
    """Layer-norm affine: identity, or jittered by N(0, std^2) around it."""
    if not std:
        return np.ones(d, dtype=dtype), np.zeros(d, dtype=dtype)
    return (1.0 + gaussian_fill((d,), 0.0, std, rng)).astype(dtype), gaussian_fill((d,), 0.0, std, rng).astype(dtype)


def init_adapter(d, r, rng, sigma=0.02, mean=0.0, precision=Precision.DOUBLE) -> AdapterParams:
    if r < 1:
        raise ValueError(f"adapter rank must be >= 1, got {r}")
    return AdapterParams(
        gaussian_fill((d, r), mean, sigma, rng, precision),
        gaussian_fill((r, d), mean, sigma, rng, precision),
    )


def init_attention(d, heads, rng, precision=Precision.DOUBLE, std=None, causal=False, ln_std=0.0):
    """Projections default to N(0, 1/d)."""
    std = 1.0 / np.sqrt(d) if std is None else std
    ws = [gaussian_fill((d, d), 0.0, std, rng, precision) for _ in range(4)]
    ln = _ln(d, Precision.of(precision).dtype, rng, ln_std)
    return AttentionParams(*ws, *ln, heads=heads, causal=causal)


def init_mlp(d, rng, precision=Precision.DOUBLE, std=None, expansion=4, ln_std=0.0):
    h = expansion * d
    w1 = gaussian_fill((d, h), 0.0, 1.0 / np.sqrt(d) if std is None else std, rng, precision)
    w2 = gaussian_fill((h, d), 0.0, 1.0 / np.sqrt(h) if std is None else std, rng, precision)
    return MlpParams(w1, w2, *_ln(d, Precision.of(precision).dtype, rng, ln_std))


def init_plm_layer(d, heads, rng, precision=Precision.DOUBLE, std=None, causal=False, ln_std=0.0):
    return PlmLayerParams(
        init_attention(d, heads, rng, precision, std, causal, ln_std),
        init_mlp(d, rng, precision, std, ln_std=ln_std),
    )


def init_embedding(vocab, max_len, d, rng, precision=Precision.DOUBLE):
    return EmbeddingParams(
        gaussian_fill((vocab, d), 0.0, 1.0, rng, precision),
        gaussian_fill((max_len, d), 0.0, 0.1, rng, precision),
        *_ln(d, Precision.of(precision).dtype),
    )


def init_classifier(d, k, rng, precision=Precision.DOUBLE, std=0.02):
    return ClassifierHead(
        gaussian_fill((d, k), 0.0, std, rng, precision),
        np.zeros(k, dtype=Precision.of(precision).dtype),
    )


# ---------------------------------------------------------------------------
# adapter


def adapter_apply(x, p: AdapterParams, cache: BlockCache | None = None):
    """relu(x @ w_down) @ w_up, without a residual path."""
    if x.shape[-1] != p.w_down.shape[0]:
        raise ShapeMismatch(f"adapter of width {p.w_down.shape[0]} applied to {x.shape}")
    u = matmul(x, p.w_down)
    a = relu(u)
    out = matmul(a, p.w_up)
    if cache is not None:
        cache.put("x", x)
        cache.put("u", u)
        cache.put("a", a)
    return out


def adapter_backward(cache: BlockCache, dy, p: AdapterParams):
    x, u, a = cache["x"], cache["u"], cache["a"]
    dw_up = _weight_grad(a, dy)
    du = (dy @ p.w_up.T) * (u > 0)
    dw_down = _weight_grad(x, du)
    dx = du @ p.w_down.T
    return dx, {"w_down": dw_down, "w_up": dw_up}


# ---------------------------------------------------------------------------
# attention


def _causal_mask(t: int) -> np.ndarray:
    return np.tril(np.ones((t, t), dtype=bool))


def attention_block_apply(x, p: AttentionParams, adapter=None, cache=None):
    """LN(x + MHA(x) [+ adapter(x)]) with scaled dot-product heads."""
    if x.ndim != 3 or x.shape[-1] != p.wq.shape[0]:
        raise ShapeMismatch(f"attention of width {p.wq.shape[0]} applied to {x.shape}")
    check_precision(x, p.wq)
    b, t, d = x.shape
    h = p.heads
    dh = d // h
    scale = x.dtype.type(1.0 / np.sqrt(dh))

    def split(z):
        return z.reshape(b, t, h, dh).transpose(0, 2, 1, 3)

    q = split(matmul(x, p.wq))
    k = split(matmul(x, p.wk))
    v = split(matmul(x, p.wv))
    scores = np.matmul(q, k.transpose(0, 1, 3, 2)) * scale
    probs = softmax_rows(scores, _causal_mask(t) if p.causal else None)
    o = np.matmul(probs, v).transpose(0, 2, 1, 3).reshape(b, t, d)
    z = x + matmul(o, p.wo)
    if adapter is not None:
        z = z + adapter_apply(x, adapter, _child(cache, "adapter"))
    y, xhat, rstd = layer_norm(z, p.ln_gamma, p.ln_beta, LN_EPS)
    if cache is not None:
        for name, value in (("x", x), ("q", q), ("k", k), ("v", v), ("probs", probs),
                            ("o", o), ("xhat", xhat), ("rstd", rstd)):
            cache.put(name, value)
    return y


def attention_block_backward(cache: BlockCache, dy, p: AttentionParams, adapter=None):
    x, q, k, v, probs, o = (cache[n] for n in ("x", "q", "k", "v", "probs", "o"))
    b, t, d = x.shape
    h = p.heads
    dh = d // h
    scale = x.dtype.type(1.0 / np.sqrt(dh))

    dz, dgamma, dbeta = layer_norm_backward(dy, cache["xhat"], cache["rstd"], p.ln_gamma)
    grads = {"ln_gamma": dgamma, "ln_beta": dbeta, "wo": _weight_grad(o, dz)}
    do = (dz @ p.wo.T).reshape(b, t, h, dh).transpose(0, 2, 1, 3)
    dprobs = np.matmul(do, v.transpose(0, 1, 3, 2))
    dv = np.matmul(probs.transpose(0, 1, 3, 2), do)
    dscores = softmax_rows_backward(probs, dprobs) * scale
    dq = np.matmul(dscores, k)
    dk = np.matmul(dscores.transpose(0, 1, 3, 2), q)

    def merge(z):
        return z.transpose(0, 2, 1, 3).reshape(b, t, d)

    dq, dk, dv = merge(dq), merge(dk), merge(dv)
    grads["wq"] = _weight_grad(x, dq)
    grads["wk"] = _weight_grad(x, dk)
    grads["wv"] = _weight_grad(x, dv)
    dx = dz + dq @ p.wq.T + dk @ p.wk.T + dv @ p.wv.T
    if adapter is not None:
        dxa, ga = adapter_backward(cache["adapter"], dz, adapter)
        dx = dx + dxa
        grads.update(_prefixed(ga, "adapter."))
    return ensure_finite(dx, "attention backward"), grads


# ---------------------------------------------------------------------------
# mlp


def mlp_block_apply(x, p: MlpParams, adapter=None, cache=None):
    """LN(x + gelu(x @ w1) @ w2 [+ adapter(x)])."""
    if x.shape[-1] != p.w1.shape[0]:
        raise ShapeMismatch(f"mlp of width {p.w1.shape[0]} applied to {x.shape}")
    pre = matmul(x, p.w1)
    act = gelu(pre)
    z = x + matmul(act, p.w2)
    if adapter is not None:
        z = z + adapter_apply(x, adapter, _child(cache, "adapter"))
    y, xhat, rstd = layer_norm(z, p.ln_gamma, p.ln_beta, LN_EPS)
    if cache is not None:
        for name, value in (("x", x), ("pre", pre), ("act", act), ("xhat", xhat), ("rstd", rstd)):
            cache.put(name, value)
    return y


def mlp_block_backward(cache: BlockCache, dy, p: MlpParams, adapter=None):
    x, pre, act = cache["x"], cache["pre"], cache["act"]
    dz, dgamma, dbeta = layer_norm_backward(dy, cache["xhat"], cache["rstd"], p.ln_gamma)
    grads = {"ln_gamma": dgamma, "ln_beta": dbeta, "w2": _weight_grad(act, dz)}
    dpre = (dz @ p.w2.T) * gelu_grad(pre)
    grads["w1"] = _weight_grad(x, dpre)
    dx = dz + dpre @ p.w1.T
    if adapter is not None:
        dxa, ga = adapter_backward(cache["adapter"], dz, adapter)
        dx = dx + dxa
        grads.update(_prefixed(ga, "adapter."))
    return ensure_finite(dx, "mlp backward"), grads


# ---------------------------------------------------------------------------
# full pretrained layer


def plm_layer_apply(x, attn: AttentionParams, mlp: MlpParams, adapter=None, cache=None):
    """Attention block then MLP block; the adapter sits parallel to the MLP core."""
    h = attention_block_apply(x, attn, None, _child(cache, "attn"))
    return mlp_block_apply(h, mlp, adapter, _child(cache, "mlp"))


def plm_layer_backward(cache: BlockCache, dy, attn, mlp, adapter=None):
    dh, gm = mlp_block_backward(cache["mlp"], dy, mlp, adapter)
    dx, ga = attention_block_backward(cache["attn"], dh, attn)
    grads = _prefixed(ga, "attn.")
    for name, g in gm.items():
        grads[name if name.startswith("adapter.") else f"mlp.{name}"] = g
    return dx, grads


# ---------------------------------------------------------------------------
# embedding and heads


def embed_apply(tokens, p: EmbeddingParams, cache=None):
    """LN(tok[id] + pos[position]) for an integer (B, T) batch."""
    tokens = np.asarray(tokens)
    if tokens.ndim != 2 or not np.issubdtype(tokens.dtype, np.integer):
        raise ShapeMismatch(f"tokens must be a 2-D integer array, got {tokens.dtype} {tokens.shape}")
    vocab, max_len = p.tok.shape[0], p.pos.shape[0]
    t = tokens.shape[1]
    if t > max_len:
        raise ShapeMismatch(f"sequence length {t} exceeds maximum {max_len}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= vocab):
        raise ShapeMismatch(f"token id out of range [0, {vocab})")
    z = p.tok[tokens] + p.pos[:t]
    y, xhat, rstd = layer_norm(z, p.ln_gamma, p.ln_beta, LN_EPS)
    if cache is not None:
        cache.put("tokens", tokens)
        cache.put("xhat", xhat)
        cache.put("rstd", rstd)
    return y


def embed_backward(cache: BlockCache, dy, p: EmbeddingParams):
    tokens = cache["tokens"]
    dz, dgamma, dbeta = layer_norm_backward(dy, cache["xhat"], cache["rstd"], p.ln_gamma)
    dtok = np.zeros_like(p.tok)
    np.add.at(dtok, tokens, dz)
    dpos = np.zeros_like(p.pos)
    dpos[: tokens.shape[1]] = dz.sum(axis=0)
    return {"tok": dtok, "pos": dpos, "ln_gamma": dgamma, "ln_beta": dbeta}


HEAD_MODES = ("classify", "lm_tied")


def head_apply(h, mode: str, params, cache=None):
    """Task head.

    ``classify`` pools the first position and applies ``ClassifierHead``;
    ``lm_tied`` projects every position onto the token embedding rows.
    """
    if mode == "classify":
        if not isinstance(params, ClassifierHead):
            raise ShapeMismatch("classify head needs ClassifierHead params")
        pooled = h[:, 0, :]
        if cache is not None:
            cache.put("pooled", pooled)
        return matmul(pooled, params.w) + params.b
    if mode == "lm_tied":
        if not isinstance(params, EmbeddingParams):
            raise ShapeMismatch("lm_tied head needs EmbeddingParams")
        if cache is not None:
            cache.put("h", h)
        return matmul(h, params.tok.T)
    raise ShapeMismatch(f"unknown head mode {mode!r}")


def head_backward(cache: BlockCache, dlogits, mode: str, params, seq_len: int | None = None):
    """Returns ``(dh, grads)``; classify needs ``seq_len`` to rebuild ``dh``."""
    if mode == "classify":
        pooled = cache["pooled"]
        b, d = pooled.shape
        dh = np.zeros((b, seq_len, d), dtype=pooled.dtype)
        dh[:, 0, :] = dlogits @ params.w.T
        return dh, {"w": pooled.T @ dlogits, "b": dlogits.sum(axis=0)}
    h = cache["h"]
    return dlogits @ params.tok, {"tok": _weight_grad(dlogits, h)}
