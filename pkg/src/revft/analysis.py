"""Oracles and measurements.

* central finite differences for every analytic backward pass;
* the vanilla-vs-reversible gradient comparison and its parameter sweeps;
* activation-memory accounting for a model run.
"""

from __future__ import annotations

import itertools
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from revft import blocks as B
from revft.exceptions import NonFiniteError, RevftError
from revft.memory import MemoryLedger
from revft.model import MeftModel, ModelDims, SegmentPlan, assemble_model
from revft.reversible import (
    MeftKind,
    ScalingConfig,
    build_meft_layer,
    new_layer_cache,
    rev_backward,
    rev_backward_cached,
    rev_forward,
    stack_backward,
    stack_backward_cached,
    stack_forward,
)
from revft.tensor import Precision, gaussian_fill, make_rng
from revft.train import cross_entropy_loss

# One table for every numeric tolerance used by the checks.
TOLERANCES = {
    "roundtrip_single": 1e-4,  # relative, rev_inverse . rev_forward
    "roundtrip_double": 1e-10,
    "grad_equiv_single": 1e-6,  # max abs, reversible vs vanilla gradients
    "grad_equiv_double": 1e-12,
    "fd_relative": 1e-5,  # relative L2, analytic vs central differences
    "fd_relative_block": 1e-6,
    "fd_epsilon": 1e-5,
}


@dataclass
class GradReport:
    max_abs: float
    mean_abs: float
    n_params: int

    @classmethod
    def compare(cls, a: dict, b: dict, names=None) -> "GradReport":
        names = sorted(a) if names is None else names
        diffs = np.concatenate([np.abs(a[n].astype(np.float64) - b[n].astype(np.float64)).ravel()
                                for n in names])
        return cls(float(diffs.max(initial=0.0)), float(diffs.mean()) if diffs.size else 0.0, int(diffs.size))


# ---------------------------------------------------------------------------
# finite differences


def finite_diff_grad(loss_fn, params: dict, epsilon: float = TOLERANCES["fd_epsilon"]) -> dict:
    """Central differences of ``loss_fn()`` with respect to each array in ``params``.

    The arrays are perturbed in place and restored. Needs double precision.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    grads = {}
    for name, arr in params.items():
        if arr.dtype != np.float64:
            raise TypeError(f"finite differences need double precision, {name} is {arr.dtype}")
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            up = loss_fn()
            flat[i] = orig - epsilon
            down = loss_fn()
            flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise NonFiniteError(f"non-finite loss while perturbing {name}[{i}]")
            gflat[i] = (up - down) / (2.0 * epsilon)
        grads[name] = g
    return grads


def relative_error(analytic: dict, numeric: dict, floor: float = 1e-10) -> float:
    """Worst per-tensor ``||a - n|| / max(||a||, ||n||, floor)``.

    The floor keeps a gradient that is zero in exact arithmetic (and ~1e-18
    after rounding) from counting as a 100% error.
    """
    worst = 0.0
    for name, a in analytic.items():
        n = numeric[name]
        scale = max(np.linalg.norm(a), np.linalg.norm(n), floor)
        worst = max(worst, float(np.linalg.norm(a - n) / scale))
    return worst


@dataclass
class Check:
    name: str
    value: float
    tol: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.value) and self.value <= self.tol)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: {self.value:.3e} (tol {self.tol:.0e})"


def _probe(shape, rng):
    return gaussian_fill(shape, 0.0, 1.0, rng)


def _fd_check(name, forward, backward, params: dict, rng, out_shape_fn=None, tol=None) -> Check:
    """Compare ``backward`` with finite differences of ``sum(forward() * R)``."""
    y = forward()
    weights = _probe(y.shape, rng)

    def loss():
        return float(np.sum(forward() * weights))

    analytic = backward(weights)
    numeric = finite_diff_grad(loss, params)
    return Check(name, relative_error({k: analytic[k] for k in params}, numeric),
                 TOLERANCES["fd_relative_block"] if tol is None else tol)


def gradcheck_blocks(seed: int = 0, d: int = 8, heads: int = 2, batch: int = 2, seq: int = 4) -> list[Check]:
    """Finite-difference checks of every block's input and parameter gradients."""
    rng = make_rng(seed, 100)
    prec = Precision.DOUBLE
    x = gaussian_fill((batch, seq, d), 0.0, 1.0, rng)
    adapter = B.init_adapter(d, 2, rng, sigma=0.5)
    attn = B.init_attention(d, heads, rng, prec, ln_std=0.3)
    attn_causal = B.init_attention(d, heads, rng, prec, causal=True, ln_std=0.3)
    mlp = B.init_mlp(d, rng, prec, ln_std=0.3)
    emb = B.init_embedding(7, 6, d, rng, prec)
    emb.ln_gamma[...] += gaussian_fill((d,), 0.0, 0.3, rng)
    head = B.ClassifierHead(gaussian_fill((d, 3), 0.0, 0.5, rng), gaussian_fill((3,), 0.0, 0.5, rng))
    tokens = np.array([[1, 3, 3, 0], [6, 1, 3, 2]])
    checks = []

    def with_x(params):
        return {"x": x, **params}

    def block(name, fwd, bwd, params):
        def forward():
            return fwd(None)

        def backward(w):
            cache = B.BlockCache()
            fwd(cache)
            dx, grads = bwd(cache, w)
            return {"x": dx, **grads}

        checks.append(_fd_check(name, forward, backward, with_x(params), rng))

    block("adapter", lambda c: B.adapter_apply(x, adapter, c),
          lambda c, w: B.adapter_backward(c, w, adapter), dict(B.named_tensors(adapter)))
    for label, a in (("attention", attn), ("attention_causal", attn_causal)):
        block(f"{label}+adapter", lambda c, a=a: B.attention_block_apply(x, a, adapter, c),
              lambda c, w, a=a: B.attention_block_backward(c, w, a, adapter),
              {**dict(B.named_tensors(a)), **dict(B.named_tensors(adapter, "adapter."))})
    block("mlp+adapter", lambda c: B.mlp_block_apply(x, mlp, adapter, c),
          lambda c, w: B.mlp_block_backward(c, w, mlp, adapter),
          {**dict(B.named_tensors(mlp)), **dict(B.named_tensors(adapter, "adapter."))})
    block("plm_layer+adapter", lambda c: B.plm_layer_apply(x, attn, mlp, adapter, c),
          lambda c, w: B.plm_layer_backward(c, w, attn, mlp, adapter),
          {**dict(B.named_tensors(attn, "attn.")), **dict(B.named_tensors(mlp, "mlp.")),
           **dict(B.named_tensors(adapter, "adapter."))})

    def emb_backward(w):
        cache = B.BlockCache()
        B.embed_apply(tokens, emb, cache)
        return B.embed_backward(cache, w, emb)

    checks.append(_fd_check("embedding", lambda: B.embed_apply(tokens, emb), emb_backward,
                            dict(B.named_tensors(emb)), rng))

    def cls_backward(w):
        cache = B.BlockCache()
        B.head_apply(x, "classify", head, cache)
        dh, g = B.head_backward(cache, w, "classify", head, x.shape[1])
        return {"x": dh, **g}

    checks.append(_fd_check("head_classify", lambda: B.head_apply(x, "classify", head), cls_backward,
                            {"x": x, "w": head.w, "b": head.b}, rng))

    def tied_forward():
        return B.head_apply(B.embed_apply(tokens, emb), "lm_tied", emb)

    def tied_backward(w):
        ec, hc = B.BlockCache(), B.BlockCache()
        h = B.embed_apply(tokens, emb, ec)
        B.head_apply(h, "lm_tied", emb, hc)
        dh, hg = B.head_backward(hc, w, "lm_tied", emb)
        eg = B.embed_backward(ec, dh, emb)
        return {**eg, "tok": eg["tok"] + hg["tok"]}

    checks.append(_fd_check("head_lm_tied(embedding+head)", tied_forward, tied_backward,
                            dict(B.named_tensors(emb)), rng))
    return checks


def gradcheck_meft(kind, seed: int = 0, d: int = 8, heads: int = 2, depth: int = 2,
                   scaling: ScalingConfig | None = None) -> list[Check]:
    """Finite differences against both backward routes of a MEFT stack."""
    rng = make_rng(seed, 101)
    scaling = scaling or ScalingConfig(0.7, 0.9)
    layers = [build_meft_layer(kind, B.init_plm_layer(d, heads, rng, ln_std=0.3), 2, 0.3, scaling, rng)
              for _ in range(depth)]
    h0 = gaussian_fill((2, 3, d), 0.0, 1.0, rng)
    w1, w2 = gaussian_fill(h0.shape, 0.0, 1.0, rng), gaussian_fill(h0.shape, 0.0, 1.0, rng)
    params = {f"{i}.{n}": a for i, layer in enumerate(layers) for n, a in layer.trainable_parameters().items()}

    def loss():
        out, _ = stack_forward(layers, h0)
        return float(np.sum(out.h1 * w1) + np.sum(out.h2 * w2))

    numeric = finite_diff_grad(loss, params)
    out, caches = stack_forward(layers, h0, "vanilla")
    _, vanilla = stack_backward_cached(layers, caches, (w1, w2))
    _, reversible = stack_backward(layers, out, (w1, w2))
    flat = {}
    for tag, grads in (("vanilla", vanilla), ("reversible", reversible)):
        flat[tag] = {f"{i}.{n}": g for i, gs in enumerate(grads) for n, g in gs.items()}
    name = MeftKind(kind).value
    return [Check(f"{name} {tag} backward vs finite differences",
                  relative_error(flat[tag], numeric), TOLERANCES["fd_relative"])
            for tag in ("vanilla", "reversible")]


def gradcheck_model(plan=SegmentPlan(2, 2, 2), kind=MeftKind.MEFT1, seed: int = 0, d: int = 8,
                    head_mode: str = "classify", merge=None) -> list[Check]:
    """Finite differences of the cross-entropy loss of a whole model."""
    from revft.model import MergeMode

    merge = merge or MergeMode()
    dims = ModelDims(vocab=11, max_len=6, d_model=d, heads=2, n_classes=3, causal=head_mode == "lm_tied")
    rng = make_rng(seed, 102)
    m = assemble_model(plan, kind, dims, r=2, sigma=0.3, scaling=ScalingConfig(0.7, 0.9),
                       merge=merge, head_mode=head_mode, rng=rng)
    tokens = rng.integers(0, dims.vocab, size=(2, 4))
    targets = rng.integers(0, dims.n_classes if head_mode == "classify" else dims.vocab,
                           size=(2,) if head_mode == "classify" else (2, 4))
    params = m.trainable_parameters()

    def loss():
        logits, _ = m.forward(tokens)
        return cross_entropy_loss(logits, targets)[0]

    numeric = finite_diff_grad(loss, params)
    checks = []
    label = f"model {kind.value if isinstance(kind, MeftKind) else kind} plan={tuple(asdict(m.plan).values())}"
    for mode in ("vanilla", "reversible"):
        logits, record = m.forward(tokens, mode)
        grads = m.backward(record, cross_entropy_loss(logits, targets)[1])
        checks.append(Check(f"{label} {head_mode} {mode} vs finite differences",
                            relative_error(grads, numeric), TOLERANCES["fd_relative"]))
    return checks


def gradcheck_suite(seed: int = 0) -> list[Check]:
    """Every block, every MEFT kind, and a mixed-plan model."""
    checks = gradcheck_blocks(seed)
    for kind in MeftKind:
        checks += gradcheck_meft(kind, seed)
    checks += gradcheck_model(SegmentPlan(2, 2, 2), MeftKind.MEFT1, seed)
    return checks


# ---------------------------------------------------------------------------
# reconstruction error


@dataclass(frozen=True)
class ReconConfig:
    """A random MEFT stack probed with standard-normal inputs."""

    kind: str = "meft3"
    depth: int = 8
    d_model: int = 64
    heads: int = 4
    r: int = 8
    lam: float = 1.0
    beta: float = 1.0
    mu: float = 0.0
    sigma: float = 0.02
    precision: str = "single"
    batch: int = 2
    seq_len: int = 8


def build_recon_case(config: ReconConfig, seed: int):
    """Layers, input ``h0`` and upstream gradients for one report.

    The probe loss is ``mean(R1 * h1_N) + mean(R2 * h2_N)`` with standard
    normal ``R``, so the upstream gradient is ``R / n`` per stream.
    """
    rng = make_rng(seed, 200)
    prec = Precision(config.precision)
    scaling = ScalingConfig(config.lam, config.beta)
    layers = [build_meft_layer(config.kind, B.init_plm_layer(config.d_model, config.heads, rng, prec),
                               config.r, config.sigma, scaling, rng, config.mu)
              for _ in range(config.depth)]
    shape = (config.batch, config.seq_len, config.d_model)
    h0 = gaussian_fill(shape, 0.0, 1.0, rng, prec)
    n = prec.dtype.type(h0.size)
    dout = (gaussian_fill(shape, 0.0, 1.0, rng, prec) / n, gaussian_fill(shape, 0.0, 1.0, rng, prec) / n)
    return layers, h0, dout


def gradient_pair(config: ReconConfig, seed: int):
    """Adapter gradients from the vanilla and the reversible backward."""
    layers, h0, dout = build_recon_case(config, seed)
    out, caches = stack_forward(layers, h0, "vanilla")
    _, vanilla = stack_backward_cached(layers, caches, dout)
    del caches
    out, _ = stack_forward(layers, h0, "reversible")
    _, reversible = stack_backward(layers, out, dout)
    return vanilla, reversible


def reconstruction_error_report(config: ReconConfig, seed: int = 0, probe: str = "first") -> GradReport:
    """Vanilla vs reversible gradient difference.

    ``probe="first"`` compares the first layer's F-adapter (the parameters
    with the longest reconstruction path); ``probe="all"`` every adapter.
    """
    vanilla, reversible = gradient_pair(config, seed)
    if probe == "first":
        names = sorted(n for n in vanilla[0] if n.startswith("f.adapter."))
        return GradReport.compare(vanilla[0], reversible[0], names)
    flat_v = {f"{i}.{n}": g for i, gs in enumerate(vanilla) for n, g in gs.items()}
    flat_r = {f"{i}.{n}": g for i, gs in enumerate(reversible) for n, g in gs.items()}
    return GradReport.compare(flat_v, flat_r)


def roundtrip_error(config: ReconConfig, seed: int = 0) -> float:
    """Relative error of inverting a whole stack back to its input pair."""
    from revft.reversible import stack_inverse

    layers, h0, _ = build_recon_case(config, seed)
    out, _ = stack_forward(layers, h0)
    back = stack_inverse(layers, out)
    scale = float(np.abs(h0).max())
    return max(float(np.abs(back.h1.astype(np.float64) - h0).max()),
               float(np.abs(back.h2.astype(np.float64) - h0).max())) / scale


# ---------------------------------------------------------------------------
# sweeps

SWEEP_COLUMNS = ("depth", "lambda", "beta", "mu", "sigma", "precision", "seed", "max_abs", "mean_abs")


@dataclass(frozen=True)
class SweepSpec:
    """Axes of a reconstruction-error sweep.

    Cells are enumerated as the nested product depth > lambda > beta > mu >
    sigma > precision > seed (seed varies fastest). ``beta=None`` ties beta
    to lambda in every cell.
    """

    depth: tuple = (8,)
    lam: tuple = (1.0,)
    beta: tuple | None = (1.0,)
    mu: tuple = (0.0,)
    sigma: tuple = (0.02,)
    precision: tuple = ("single",)
    seeds: tuple = (0, 1, 2)
    base: ReconConfig = field(default_factory=ReconConfig)

    def __post_init__(self):
        for name in ("depth", "lam", "mu", "sigma", "precision", "seeds"):
            if not tuple(getattr(self, name)):
                raise ValueError(f"sweep axis {name} is empty")
        if self.beta is not None and not tuple(self.beta):
            raise ValueError("sweep axis beta is empty")

    def cells(self):
        betas = (None,) if self.beta is None else tuple(self.beta)
        for depth, lam, beta, mu, sigma, prec, seed in itertools.product(
                self.depth, self.lam, betas, self.mu, self.sigma, self.precision, self.seeds):
            cfg = replace(self.base, depth=int(depth), lam=float(lam),
                          beta=float(lam if beta is None else beta), mu=float(mu),
                          sigma=float(sigma), precision=str(prec))
            yield cfg, int(seed)


@dataclass
class SweepRow:
    config: ReconConfig
    seed: int
    report: GradReport | None
    error: str | None = None

    def as_record(self) -> dict:
        c = self.config
        rep = self.report
        return {
            "depth": c.depth, "lambda": c.lam, "beta": c.beta, "mu": c.mu, "sigma": c.sigma,
            "precision": c.precision, "seed": self.seed,
            "max_abs": rep.max_abs if rep else float("nan"),
            "mean_abs": rep.mean_abs if rep else float("nan"),
        }


def worker_threads() -> int:
    try:
        return max(1, int(os.environ.get("REVFT_THREADS", "1")))
    except ValueError:
        return 1


def sweep_run(spec: SweepSpec, threads: int | None = None) -> list[SweepRow]:
    """One report per cell; a failing cell is recorded and the sweep goes on."""
    cells = list(spec.cells())

    def run(cell):
        cfg, seed = cell
        try:
            return SweepRow(cfg, seed, reconstruction_error_report(cfg, seed))
        except (RevftError, FloatingPointError, ValueError) as exc:
            name, msg = type(exc).__name__, str(exc)
            return SweepRow(cfg, seed, None, msg if msg.startswith(name) else f"{name}: {msg}")

    threads = threads or worker_threads()
    if threads == 1:
        return [run(c) for c in cells]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(run, cells))


# ---------------------------------------------------------------------------
# memory


def memory_ledger_capture(model: MeftModel, tokens, mode: str = "reversible", targets=None) -> MemoryLedger:
    """Forward and backward once; persistent bytes come from the run record."""
    logits, record = model.forward(tokens, mode)
    ledger = record.ledger()
    if targets is None:
        dlogits = np.zeros_like(logits)
    else:
        dlogits = cross_entropy_loss(logits, targets)[1]
    model.backward(record, dlogits, ledger)
    return ledger


def retained_bytes_by_walk(record) -> dict:
    """Independent tally of a record's retained tensors, walking its fields."""
    totals = {"reversible_boundary": 0, "vanilla_caches": 0, "head": 0, "other": 0}
    if record.boundary is not None:
        totals["reversible_boundary"] = sum(a.nbytes for a in record.boundary)
    for caches in (record.reversible_caches, record.vanilla_caches):
        for cache in caches:
            for sub in (cache.f, cache.g):
                totals["vanilla_caches"] += _walk(sub)
    if record.head_cache is not None:
        totals["head"] = _walk(record.head_cache)
    return totals


def _walk(cache) -> int:
    total = 0
    for value in cache.entries.values():
        total += _walk(value) if isinstance(value, B.BlockCache) else value.nbytes
    return total


# re-exported for callers that drive single layers
__all__ = [
    "TOLERANCES", "GradReport", "Check", "finite_diff_grad", "relative_error", "gradcheck_blocks",
    "gradcheck_meft", "gradcheck_model", "gradcheck_suite", "ReconConfig", "build_recon_case",
    "gradient_pair", "reconstruction_error_report", "roundtrip_error", "SweepSpec", "SweepRow",
    "SWEEP_COLUMNS", "sweep_run", "memory_ledger_capture", "retained_bytes_by_walk",
    "rev_forward", "rev_backward", "rev_backward_cached", "new_layer_cache",
]
