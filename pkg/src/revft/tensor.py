"""Dense numeric primitives.

Tensors are plain ``numpy.ndarray`` objects of dtype float32 ("single") or
float64 ("double"). Every primitive here checks that its operands share one
precision and that finite inputs produce finite outputs.

Random numbers come from NumPy's Philox generator, a counter-based
bit generator whose stream depends only on the seed. Normal samples are
always drawn in float64 and then cast, so a seed yields the same values
(up to rounding) in either precision.
"""

from __future__ import annotations

import enum

import numpy as np
from scipy.special import erf

from revft.exceptions import NonFiniteError, PrecisionMismatch, ShapeMismatch

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class Precision(str, enum.Enum):
    SINGLE = "single"
    DOUBLE = "double"

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(np.float32 if self is Precision.SINGLE else np.float64)

    @classmethod
    def of(cls, value) -> "Precision":
        """Coerce a name, dtype or array to a Precision."""
        if isinstance(value, Precision):
            return value
        if isinstance(value, str):
            try:
                return cls(value)
            except ValueError:
                pass
        dtype = value.dtype if isinstance(value, np.ndarray) else np.dtype(value)
        if dtype == np.float32:
            return cls.SINGLE
        if dtype == np.float64:
            return cls.DOUBLE
        raise PrecisionMismatch(f"unsupported precision {value!r}")


def make_rng(seed: int, *keys: int) -> np.random.Generator:
    """Philox generator for ``seed``; extra ``keys`` select independent sub-streams."""
    seed = int(seed) & 0xFFFFFFFFFFFFFFFF
    if not keys:
        return np.random.Generator(np.random.Philox(seed))
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, *keys])))


def check_precision(*arrays: np.ndarray) -> np.dtype:
    """Return the shared dtype of ``arrays`` or raise PrecisionMismatch."""
    dtype = arrays[0].dtype
    if dtype not in (np.float32, np.float64):
        raise PrecisionMismatch(f"unsupported dtype {dtype}")
    for a in arrays[1:]:
        if a.dtype != dtype:
            raise PrecisionMismatch(f"mixed precisions {dtype} and {a.dtype}")
    return dtype


def ensure_finite(x: np.ndarray, what: str = "result") -> np.ndarray:
    if not np.isfinite(x).all():
        raise NonFiniteError(f"non-finite values in {what}")
    return x


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product over the last two axes of ``a`` and the 2-D ``b``.

    Leading axes of ``a`` are treated as batch axes. NumPy dispatches to the
    same BLAS kernel for identical shapes, so repeated calls on identical
    inputs are bitwise identical.
    """
    check_precision(a, b)
    if a.ndim < 1 or b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ShapeMismatch(f"cannot multiply {a.shape} by {b.shape}")
    with np.errstate(over="ignore", invalid="ignore"):
        out = np.matmul(a, b)
    return ensure_finite(out, "matmul")


def softmax_rows(x: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Softmax over the last axis with max subtraction.

    ``mask`` is a boolean array broadcastable to ``x``; False entries get
    probability exactly zero. Every row must keep at least one entry.
    """
    if x.shape[-1] == 0:
        raise ShapeMismatch("softmax over an empty axis")
    ensure_finite(x, "softmax input")
    if mask is None:
        shifted = x - x.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
    else:
        neg_inf = np.array(-np.inf, dtype=x.dtype)
        masked = np.where(mask, x, neg_inf)
        shifted = masked - masked.max(axis=-1, keepdims=True)
        e = np.where(mask, np.exp(shifted), np.zeros((), dtype=x.dtype))
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rows_backward(p: np.ndarray, dp: np.ndarray) -> np.ndarray:
    return p * (dp - (dp * p).sum(axis=-1, keepdims=True))


def layer_norm(x, gamma, bias, eps=1e-5):
    """Normalize the last axis (population variance) and apply the affine.

    Returns ``(y, xhat, rstd)``; the last two are what the backward needs.
    """
    if x.shape[-1] == 0:
        raise ShapeMismatch("layer_norm over an empty axis")
    if eps <= 0:
        raise ValueError("eps must be positive")
    check_precision(x, gamma, bias)
    if gamma.shape != x.shape[-1:] or bias.shape != x.shape[-1:]:
        raise ShapeMismatch(f"layer_norm params {gamma.shape}/{bias.shape} for input {x.shape}")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc * rstd
    y = xhat * gamma + bias
    return ensure_finite(y, "layer_norm"), xhat, rstd


def layer_norm_backward(dy, xhat, rstd, gamma):
    """Gradients ``(dx, dgamma, dbias)`` of :func:`layer_norm`."""
    lead = tuple(range(dy.ndim - 1))
    dgamma = (dy * xhat).sum(axis=lead)
    dbias = dy.sum(axis=lead)
    dxhat = dy * gamma
    dx = rstd * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, dgamma, dbias


def gelu(x: np.ndarray) -> np.ndarray:
    """x * Phi(x) with the exact normal CDF."""
    return x * (0.5 * (1.0 + erf(x / _SQRT2))).astype(x.dtype, copy=False)


def gelu_grad(x: np.ndarray) -> np.ndarray:
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return (cdf + x * pdf).astype(x.dtype, copy=False)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, np.zeros((), dtype=x.dtype))


def gaussian_fill(shape, mean, std, rng: np.random.Generator, precision=Precision.DOUBLE):
    if std < 0:
        raise ValueError(f"std must be non-negative, got {std}")
    dtype = Precision.of(precision).dtype
    z = rng.standard_normal(size=tuple(shape), dtype=np.float64)
    return (mean + std * z).astype(dtype)
