"""LoRA and (IA)^3 weight modifications with controllable initialization.

Both act on a frozen weight ``W`` (``d_in x d_out``, used as ``h @ W``):

* LoRA:   ``h @ (W + alpha / r * w_down @ w_up)``
* (IA)^3: ``h @ (W * (alpha * l))``, scaling each output feature.

The probe initializations control how far the modified model starts from
the pretrained one. ``lora_probe`` sets ``w_down`` to ones and ``w_up`` to
the constant ``c`` (or ``N(c, 0.02^2)``), giving ``delta W = alpha * c``
everywhere; ``ia3_probe`` sets ``l = c`` so the effective scale is
``alpha * c``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from revft.blocks import (
    BlockCache,
    ClassifierHead,
    MlpParams,
    head_apply,
    head_backward,
    init_classifier,
    named_tensors,
    plm_layer_apply,
    plm_layer_backward,
)
from revft.blocks import embed_apply
from revft.exceptions import ConfigError, ShapeMismatch
from revft.model import BaseModel
from revft.tensor import Precision, check_precision, gaussian_fill, matmul

PROBE_STD = 0.02


@dataclass
class LoraParams:
    w_down: np.ndarray  # d_in x r
    w_up: np.ndarray  # r x d_out
    alpha: np.ndarray  # 0-d
    train_alpha: bool = False

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=self.w_down.dtype)
        if self.w_down.shape[1] < 1 or self.w_up.shape[0] != self.w_down.shape[1]:
            raise ShapeMismatch(f"lora shapes {self.w_down.shape} and {self.w_up.shape}")

    @property
    def r(self) -> int:
        return self.w_down.shape[1]

    def trainable_fields(self):
        return ("w_down", "w_up", "alpha") if self.train_alpha else ("w_down", "w_up")


@dataclass
class Ia3Params:
    l: np.ndarray  # d_out
    alpha: np.ndarray  # 0-d
    train_alpha: bool = False

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=self.l.dtype)

    def trainable_fields(self):
        return ("l", "alpha") if self.train_alpha else ("l",)


# ---------------------------------------------------------------------------
# effective weights and their chain rule


def lora_delta(p: LoraParams) -> np.ndarray:
    return (p.alpha / p.w_down.dtype.type(p.r)) * (p.w_down @ p.w_up)


def lora_weight(w, p: LoraParams) -> np.ndarray:
    check_precision(w, p.w_down, p.w_up)
    if p.w_down.shape[0] != w.shape[0] or p.w_up.shape[1] != w.shape[1]:
        raise ShapeMismatch(f"lora {p.w_down.shape}/{p.w_up.shape} on weight {w.shape}")
    return w + lora_delta(p)


def lora_weight_backward(dw_eff, p: LoraParams) -> dict:
    scale = p.alpha / p.w_down.dtype.type(p.r)
    grads = {"w_down": scale * (dw_eff @ p.w_up.T), "w_up": scale * (p.w_down.T @ dw_eff)}
    if p.train_alpha:
        grads["alpha"] = np.asarray((dw_eff * (p.w_down @ p.w_up)).sum() / p.r, dtype=dw_eff.dtype)
    return grads


def ia3_weight(w, p: Ia3Params) -> np.ndarray:
    check_precision(w, p.l)
    if p.l.shape != (w.shape[1],):
        raise ShapeMismatch(f"ia3 vector {p.l.shape} on weight {w.shape}")
    return w * (p.alpha * p.l)


def ia3_weight_backward(dw_eff, w, p: Ia3Params) -> dict:
    col = (dw_eff * w).sum(axis=0)
    grads = {"l": p.alpha * col}
    if p.train_alpha:
        grads["alpha"] = np.asarray((col * p.l).sum(), dtype=dw_eff.dtype)
    return grads


def effective_weight(w, p) -> np.ndarray:
    return lora_weight(w, p) if isinstance(p, LoraParams) else ia3_weight(w, p)


def weight_backward(dw_eff, w, p) -> dict:
    if isinstance(p, LoraParams):
        return lora_weight_backward(dw_eff, p)
    return ia3_weight_backward(dw_eff, w, p)


def lora_apply(w, p: LoraParams, h) -> np.ndarray:
    return matmul(h, lora_weight(w, p))


def ia3_apply(w, p: Ia3Params, h) -> np.ndarray:
    return matmul(h, ia3_weight(w, p))


def _flat(x):
    return x.reshape(-1, x.shape[-1])


def lora_backward(w, p: LoraParams, h, dy):
    """Returns ``(dh, grads)``; ``w`` gets no gradient."""
    dh = dy @ lora_weight(w, p).T
    return dh, lora_weight_backward(_flat(h).T @ _flat(dy), p)


def ia3_backward(w, p: Ia3Params, h, dy):
    dh = dy @ ia3_weight(w, p).T
    return dh, ia3_weight_backward(_flat(h).T @ _flat(dy), w, p)


# ---------------------------------------------------------------------------
# init schemes

SCHEMES = ("lora_default", "lora_probe", "ia3_default", "ia3_probe")


@dataclass(frozen=True)
class InitScheme:
    """How to initialize the added parameters.

    ``alpha`` is trainable when ``train_alpha`` is set, and always when it is
    exactly zero (otherwise the modification could never move).
    """

    kind: str = "lora_default"
    c: float = 0.0
    alpha: float = 1.0
    dist: str = "constant"
    sigma: float = PROBE_STD
    train_alpha: bool = False

    def __post_init__(self):
        if self.kind not in SCHEMES:
            raise ConfigError(f"unknown init scheme {self.kind!r}")
        if self.dist not in ("constant", "gaussian"):
            raise ConfigError(f"unknown probe distribution {self.dist!r}")
        if self.sigma < 0:
            raise ConfigError("sigma must be non-negative")

    @property
    def is_lora(self) -> bool:
        return self.kind.startswith("lora")

    @property
    def alpha_trainable(self) -> bool:
        return self.train_alpha or self.alpha == 0.0


def make_init_scheme(scheme: InitScheme, d_in: int, d_out: int, r: int = 8, rng=None,
                     precision=Precision.DOUBLE):
    """Construct ``LoraParams`` or ``Ia3Params`` following ``scheme``."""
    dtype = Precision.of(precision).dtype
    if scheme.is_lora and r < 1:
        raise ConfigError(f"lora rank must be >= 1, got {r}")
    if scheme.kind == "lora_default":
        if rng is None:
            raise ConfigError("lora_default needs an rng")
        return LoraParams(gaussian_fill((d_in, r), 0.0, scheme.sigma, rng, precision),
                          np.zeros((r, d_out), dtype=dtype), scheme.alpha, scheme.alpha_trainable)
    if scheme.kind == "lora_probe":
        if scheme.dist == "gaussian":
            if rng is None:
                raise ConfigError("gaussian probe needs an rng")
            w_up = gaussian_fill((r, d_out), scheme.c, scheme.sigma, rng, precision)
        else:
            w_up = np.full((r, d_out), scheme.c, dtype=dtype)
        return LoraParams(np.ones((d_in, r), dtype=dtype), w_up, scheme.alpha, scheme.alpha_trainable)
    if scheme.kind == "ia3_default":
        return Ia3Params(np.ones(d_out, dtype=dtype), 1.0, scheme.train_alpha)
    return Ia3Params(np.full(d_out, scheme.c, dtype=dtype), scheme.alpha, scheme.alpha_trainable)


# ---------------------------------------------------------------------------
# base model with modified MLP projections

MLP_TARGETS = ("w1", "w2")


class PeftModel:
    """A frozen base network whose MLP projections carry LoRA or (IA)^3.

    Exposes the same ``forward`` / ``backward`` / ``trainable_parameters``
    surface as :class:`revft.model.MeftModel` so the training loop drives
    either.
    """

    def __init__(self, base: BaseModel, scheme: InitScheme, r: int = 8, rng=None,
                 n_classes: int | None = None, head: ClassifierHead | None = None):
        self.base = base
        self.scheme = scheme
        precision = base.precision
        self.mods = []
        for layer in base.layers:
            mods = {}
            for name in MLP_TARGETS:
                w = getattr(layer.mlp, name)
                mods[name] = make_init_scheme(scheme, w.shape[0], w.shape[1], r, rng, precision)
            self.mods.append(mods)
        if head is None:
            if rng is None:
                raise ConfigError("PeftModel needs an rng (or a head) to build its classifier")
            head = init_classifier(base.dims.d_model, n_classes or base.dims.n_classes, rng, precision)
        self.head = head
        self.head_mode = "classify"

    def mlp_params(self, i: int) -> MlpParams:
        mlp = self.base.layers[i].mlp
        mods = self.mods[i]
        return MlpParams(effective_weight(mlp.w1, mods["w1"]), effective_weight(mlp.w2, mods["w2"]),
                         mlp.ln_gamma, mlp.ln_beta)

    def named_parameters(self):
        yield from self.base.named_parameters()
        for i, mods in enumerate(self.mods):
            for name, p in mods.items():
                yield from named_tensors(p, f"mods.{i}.{name}.")
        yield from named_tensors(self.head, "head.")

    def trainable_parameters(self) -> dict[str, np.ndarray]:
        out = {}
        for i, mods in enumerate(self.mods):
            for name, p in mods.items():
                for f in p.trainable_fields():
                    out[f"mods.{i}.{name}.{f}"] = getattr(p, f)
        out.update(named_tensors(self.head, "head."))
        return out

    def hidden(self, tokens, caches=None):
        h = embed_apply(tokens, self.base.embedding)
        for i, layer in enumerate(self.base.layers):
            cache = None if caches is None else BlockCache(f"layer{i}")
            h = plm_layer_apply(h, layer.attn, self.mlp_params(i), None, cache)
            if caches is not None:
                caches.append(cache)
        return h

    def forward(self, tokens, cache_mode: str = "vanilla"):
        tokens = np.asarray(tokens)
        caches = []
        h = self.hidden(tokens, caches)
        head_cache = BlockCache("head")
        logits = head_apply(h, "classify", self.head, head_cache)
        return logits, (caches, head_cache, tokens.shape[1])

    def backward(self, record, dlogits, ledger=None):
        caches, head_cache, seq_len = record
        dh, hg = head_backward(head_cache, dlogits, "classify", self.head, seq_len)
        grads = {f"head.{k}": v for k, v in hg.items()}
        for i in range(len(self.base.layers) - 1, -1, -1):
            layer = self.base.layers[i]
            dh, g = plm_layer_backward(caches[i], dh, layer.attn, self.mlp_params(i))
            for name, p in self.mods[i].items():
                w = getattr(layer.mlp, name)
                for f, gv in weight_backward(g[f"mlp.{name}"], w, p).items():
                    grads[f"mods.{i}.{name}.{f}"] = gv
        return grads


# ---------------------------------------------------------------------------
# starting-point probes


@dataclass(frozen=True)
class ProbeExperiment:
    """Desk-scale protocol for comparing initializations of the added parameters.

    A small base network is first pretrained (all weights, with its own
    head) on a synth_classify sample. Each probe then freezes that base,
    attaches a fresh head plus the scheme's modifications, and fine-tunes on
    the same sample. ``pretrain_epochs=0`` gives the random-base baseline.
    Nonzero ``ln_std`` jitters the LayerNorm affines so a constant weight
    offset is not normalized away (identity LayerNorm maps every
    ``alpha * c`` LoRA offset on its input to the same output).
    """

    vocab: int = 8
    seq_len: int = 4
    d_model: int = 32
    heads: int = 4
    n_layers: int = 2
    ln_std: float = 0.5
    n_train: int = 256
    n_dev: int = 128
    pretrain_epochs: int = 40
    pretrain_lr: float = 3e-3
    finetune_epochs: int = 3
    finetune_lr: float = 1e-3
    r: int = 8

    def dims(self):
        from revft.model import ModelDims

        return ModelDims(vocab=self.vocab, max_len=self.seq_len, d_model=self.d_model, heads=self.heads)


def pretrain_base(exp: ProbeExperiment, seed: int):
    """Pretrained base network and its ``(train, dev)`` data for ``seed``."""
    from revft.model import BaseClassifier, init_base_model
    from revft.tensor import make_rng
    from revft.train import TaskSpec, TrainConfig, generate_synthetic_task, train_loop

    base = init_base_model(exp.dims(), exp.n_layers, make_rng(seed, 10), Precision.DOUBLE,
                           ln_std=exp.ln_std)
    task = TaskSpec("synth_classify", exp.vocab, exp.seq_len, exp.n_train, exp.n_dev)
    data = generate_synthetic_task(task, make_rng(seed, 11))
    if exp.pretrain_epochs > 0:
        clf = BaseClassifier(base, init_classifier(exp.d_model, 2, make_rng(seed, 12)))
        train_loop(clf, data, TrainConfig(lr=exp.pretrain_lr, epochs=exp.pretrain_epochs,
                                          patience=exp.pretrain_epochs, seed=seed, weight_decay=0.0))
    return base, data


def run_probe(base: BaseModel, data, scheme: InitScheme, exp: ProbeExperiment, seed: int):
    """Fine-tune one scheme over the frozen ``base``; returns the history."""
    from revft.tensor import make_rng
    from revft.train import TrainConfig, train_loop

    model = PeftModel(base, scheme, r=exp.r, rng=make_rng(seed, 13))
    config = TrainConfig(lr=exp.finetune_lr, epochs=exp.finetune_epochs,
                         patience=exp.finetune_epochs, seed=seed)
    return train_loop(model, data, config)


INIT_SWEEP_COLUMNS = ("scheme", "c", "alpha", "seed", "final_loss", "best_dev_metric")


def init_sweep(exp: ProbeExperiment, schemes, seeds) -> list[dict]:
    """One row per (seed, scheme); seeds vary slowest so each base is pretrained once."""
    rows = []
    for seed in seeds:
        base, data = pretrain_base(exp, int(seed))
        for scheme in schemes:
            hist = run_probe(base, data, scheme, exp, int(seed))
            rows.append({"scheme": scheme.kind, "c": float(scheme.c), "alpha": float(scheme.alpha),
                         "seed": int(seed), "final_loss": hist.final_loss,
                         "best_dev_metric": hist.best_dev_metric})
    return rows
