"""Optimizer, schedule, loss, synthetic tasks and the training loop.

The loop drives any model exposing ``forward(tokens, cache_mode)``,
``backward(record, dlogits, ledger)``, ``trainable_parameters()`` and a
``head_mode`` attribute; :class:`~revft.model.MeftModel`,
:class:`~revft.peft.PeftModel` and :class:`~revft.model.BaseClassifier` all do.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from revft.exceptions import ConfigError, NonFiniteError, ShapeMismatch
from revft.memory import MemoryLedger
from revft.tensor import make_rng

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    """AdamW state. ``weight_decay`` is decoupled from the gradient."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    max_grad_norm: float | None = 1.0
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def global_norm(grads: dict) -> float:
    return math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))


def clip_grad_norm(grads: dict, max_norm: float) -> tuple[dict, float]:
    """Scale ``grads`` so their joint L2 norm is at most ``max_norm``."""
    norm = global_norm(grads)
    if norm <= max_norm or norm == 0.0:
        return grads, norm
    scale = max_norm / (norm + 1e-6)
    return {k: g * g.dtype.type(scale) for k, g in grads.items()}, norm


def adam_step(state: AdamState, params: dict, grads: dict, lr: float) -> None:
    """One bias-corrected AdamW update, in place on ``params``.

    Only names present in ``params`` are touched; ``grads`` must cover them.
    """
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name}")
        if g.shape != params[name].shape:
            raise ShapeMismatch(f"gradient {name} has shape {g.shape}, parameter {params[name].shape}")
        if not np.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for {name}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, p in params.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        if state.weight_decay:
            update = update + state.weight_decay * p
        p -= (lr * update).astype(p.dtype, copy=False)


def warmup_steps(total_steps: int, warmup_ratio: float) -> int:
    return int(round(warmup_ratio * total_steps))


def lr_schedule(step: int, total_steps: int, warmup_ratio: float, peak: float) -> float:
    """Linear warmup to ``peak`` then linear decay to zero at ``total_steps``."""
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if step >= total_steps:
        return 0.0
    warm = warmup_steps(total_steps, warmup_ratio)
    if step < warm:
        return peak * step / warm
    return peak * (total_steps - step) / (total_steps - warm)


# ---------------------------------------------------------------------------
# loss


def cross_entropy_loss(logits: np.ndarray, targets) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood over every target position, and its gradient."""
    targets = np.asarray(targets)
    k = logits.shape[-1]
    flat = logits.reshape(-1, k)
    t = targets.reshape(-1)
    if flat.shape[0] != t.shape[0]:
        raise ShapeMismatch(f"{t.shape[0]} targets for {flat.shape[0]} logit rows")
    if t.size and (t.min() < 0 or t.max() >= k):
        raise ShapeMismatch(f"target out of range [0, {k})")
    shifted = flat - flat.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    n = t.shape[0]
    loss = -float(logp[np.arange(n), t].mean())
    grad = np.exp(logp)
    grad[np.arange(n), t] -= 1.0
    grad /= n
    return loss, grad.reshape(logits.shape)


# ---------------------------------------------------------------------------
# tasks

TASK_KINDS = ("synth_classify", "synth_lm", "jsonl_dataset")


@dataclass(frozen=True)
class TaskSpec:
    kind: str = "synth_classify"
    vocab: int = 16
    seq_len: int = 8
    n_train: int = 256
    n_dev: int = 64
    path: str | None = None
    dev_path: str | None = None

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ConfigError(f"unknown task kind {self.kind!r}")
        if self.vocab < 2 or self.seq_len < 1 or self.n_train <= 0 or self.n_dev <= 0:
            raise ConfigError(f"invalid task spec {self}")
        if self.kind == "jsonl_dataset" and not self.path:
            raise ConfigError("jsonl_dataset needs a path")


@dataclass
class Dataset:
    tokens: np.ndarray  # N x T int64
    targets: np.ndarray  # N (classify) or N x T (lm)
    task: str = "classify"

    def __len__(self) -> int:
        return self.tokens.shape[0]


def parity_labels(tokens) -> np.ndarray:
    return (np.asarray(tokens).sum(axis=-1) % 2).astype(np.int64)


def markov_chain(vocab: int, rng) -> np.ndarray:
    """Row-stochastic transition matrix with a few favoured successors per state."""
    logits = rng.standard_normal((vocab, vocab)) * 2.0
    p = np.exp(logits - logits.max(axis=1, keepdims=True))
    return p / p.sum(axis=1, keepdims=True)


def _sample_markov(trans, n, length, rng) -> np.ndarray:
    vocab = trans.shape[0]
    cum = np.cumsum(trans, axis=1)
    seqs = np.empty((n, length), dtype=np.int64)
    seqs[:, 0] = rng.integers(0, vocab, size=n)
    for t in range(1, length):
        u = rng.random(n)
        rows = cum[seqs[:, t - 1]]
        seqs[:, t] = np.minimum((rows < u[:, None]).sum(axis=1), vocab - 1)
    return seqs


def read_jsonl(path, vocab: int) -> Dataset:
    """Read ``{"tokens": [...], "label": k}`` (or LM-style ``{"tokens": [...]}``) lines."""
    tokens, labels = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}:{lineno}: {exc}") from None
            seq = obj.get("tokens") if isinstance(obj, dict) else None
            if not isinstance(seq, list) or not all(isinstance(i, int) for i in seq):
                raise ConfigError(f"{path}:{lineno}: 'tokens' must be a list of integers")
            if any(i < 0 or i >= vocab for i in seq):
                raise ConfigError(f"{path}:{lineno}: token id outside [0, {vocab})")
            if tokens and len(seq) != len(tokens[0]):
                raise ConfigError(f"{path}:{lineno}: sequence length {len(seq)} != {len(tokens[0])}")
            tokens.append(seq)
            labels.append(obj.get("label"))
    if not tokens:
        raise ConfigError(f"{path}: no examples")
    arr = np.asarray(tokens, dtype=np.int64)
    has_label = [lab is not None for lab in labels]
    if all(has_label):
        if not all(isinstance(lab, int) and lab >= 0 for lab in labels):
            raise ConfigError(f"{path}: labels must be non-negative integers")
        return Dataset(arr, np.asarray(labels, dtype=np.int64), "classify")
    if any(has_label):
        raise ConfigError(f"{path}: mixes labelled and unlabelled examples")
    if arr.shape[1] < 2:
        raise ConfigError(f"{path}: LM sequences need at least two tokens")
    return Dataset(arr[:, :-1], arr[:, 1:], "lm")


def generate_synthetic_task(spec: TaskSpec, rng) -> tuple[Dataset, Dataset]:
    """Return ``(train, dev)``.

    ``synth_classify``: uniform token sequences labelled by the parity of
    their id sum. ``synth_lm``: next-token prediction on an order-1 Markov
    chain. ``jsonl_dataset``: read from ``spec.path`` (and ``spec.dev_path``
    if set, otherwise the last ``n_dev`` lines are held out).
    """
    if spec.kind == "synth_classify":
        n = spec.n_train + spec.n_dev
        toks = rng.integers(0, spec.vocab, size=(n, spec.seq_len), dtype=np.int64)
        labels = parity_labels(toks)
        return (Dataset(toks[: spec.n_train], labels[: spec.n_train]),
                Dataset(toks[spec.n_train:], labels[spec.n_train:]))
    if spec.kind == "synth_lm":
        trans = markov_chain(spec.vocab, rng)
        seqs = _sample_markov(trans, spec.n_train + spec.n_dev, spec.seq_len + 1, rng)
        train, dev = seqs[: spec.n_train], seqs[spec.n_train:]
        return (Dataset(train[:, :-1], train[:, 1:], "lm"), Dataset(dev[:, :-1], dev[:, 1:], "lm"))
    data = read_jsonl(spec.path, spec.vocab)
    if spec.dev_path:
        return data, read_jsonl(spec.dev_path, spec.vocab)
    if len(data) <= spec.n_dev:
        raise ConfigError(f"{spec.path}: {len(data)} examples cannot hold out {spec.n_dev}")
    cut = len(data) - spec.n_dev
    return (Dataset(data.tokens[:cut], data.targets[:cut], data.task),
            Dataset(data.tokens[cut:], data.targets[cut:], data.task))


# ---------------------------------------------------------------------------
# training loop


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 5e-4
    batch_size: int = 16
    epochs: int = 20
    warmup_ratio: float = 0.06
    seed: int = 0
    weight_decay: float = 0.1
    max_grad_norm: float = 1.0
    patience: int = 5
    max_steps: int | None = None
    grad_mode: str = "reversible"

    def __post_init__(self):
        if not 0.0 <= self.warmup_ratio < 1.0:
            raise ConfigError("warmup_ratio must lie in [0, 1)")
        if self.batch_size < 1 or self.epochs < 1 or self.patience < 1 or self.lr <= 0:
            raise ConfigError(f"invalid training config {self}")
        if self.max_steps is not None and self.max_steps < 1:
            raise ConfigError("max_steps must be positive")
        if self.grad_mode not in ("vanilla", "reversible"):
            raise ConfigError(f"unknown grad_mode {self.grad_mode!r}")


@dataclass
class TrainHistory:
    step_losses: list = field(default_factory=list)
    epoch_losses: list = field(default_factory=list)
    dev_metrics: list = field(default_factory=list)
    best_dev_metric: float = -math.inf
    best_epoch: int = -1
    stopped_early: bool = False
    steps: int = 0
    initial_loss: float = math.nan
    final_loss: float = math.nan
    ledger: MemoryLedger | None = None

    def to_dict(self) -> dict:
        return {
            "steps": self.steps,
            "initial_loss": self.initial_loss,
            "final_loss": self.final_loss,
            "best_dev_metric": self.best_dev_metric,
            "best_epoch": self.best_epoch,
            "stopped_early": self.stopped_early,
            "step_losses": self.step_losses,
            "epoch_losses": self.epoch_losses,
            "dev_metrics": self.dev_metrics,
            "memory": None if self.ledger is None else self.ledger.to_dict(),
        }


def evaluate(model, data: Dataset, batch_size: int = 64) -> tuple[float, float]:
    """Mean loss and accuracy over ``data`` (forward only)."""
    total_loss, correct, count = 0.0, 0, 0
    for start in range(0, len(data), batch_size):
        toks = data.tokens[start : start + batch_size]
        tgt = data.targets[start : start + batch_size]
        logits, _ = model.forward(toks)
        loss, _ = cross_entropy_loss(logits, tgt)
        n = tgt.size
        total_loss += loss * n
        correct += int((logits.argmax(axis=-1) == tgt).sum())
        count += n
    return total_loss / count, correct / count


def total_train_steps(n_train: int, config: TrainConfig) -> int:
    per_epoch = -(-n_train // config.batch_size)
    total = per_epoch * config.epochs
    return min(total, config.max_steps) if config.max_steps else total


def train_loop(model, task, config: TrainConfig) -> TrainHistory:
    """Minibatch AdamW with warmup/decay, per-epoch dev accuracy and early stopping.

    ``task`` is a :class:`TaskSpec` (generated from ``config.seed``) or a
    ``(train, dev)`` pair of datasets. Stops after ``patience`` epochs
    without dev improvement, or at ``max_steps``.
    """
    if isinstance(task, TaskSpec):
        train, dev = generate_synthetic_task(task, make_rng(config.seed, 1))
    else:
        train, dev = task
    params = model.trainable_parameters()
    state = AdamState(weight_decay=config.weight_decay, max_grad_norm=config.max_grad_norm)
    shuffle_rng = make_rng(config.seed, 2)
    total = total_train_steps(len(train), config)
    hist = TrainHistory()
    hist.initial_loss, _ = evaluate(model, train)
    bad_epochs = 0
    step = 0
    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(len(train))
        epoch_loss, n_batches = 0.0, 0
        for start in range(0, len(train), config.batch_size):
            if step >= total:
                break
            idx = order[start : start + config.batch_size]
            ledger = MemoryLedger() if hist.ledger is None else None
            logits, record = model.forward(train.tokens[idx], config.grad_mode)
            loss, dlogits = cross_entropy_loss(logits, train.targets[idx])
            grads = model.backward(record, dlogits, ledger)
            if ledger is not None and hasattr(record, "ledger"):
                hist.ledger = record.ledger()
                hist.ledger.peak_transient_bytes = ledger.peak_transient_bytes
            grads, _ = clip_grad_norm(grads, config.max_grad_norm)
            adam_step(state, params, grads, lr_schedule(step, total, config.warmup_ratio, config.lr))
            hist.step_losses.append(loss)
            epoch_loss += loss
            n_batches += 1
            step += 1
        if n_batches == 0:
            break
        hist.epoch_losses.append(epoch_loss / n_batches)
        _, metric = evaluate(model, dev)
        hist.dev_metrics.append(metric)
        log.debug("epoch %d loss %.6f dev %.4f", epoch, hist.epoch_losses[-1], metric)
        if metric > hist.best_dev_metric:
            hist.best_dev_metric, hist.best_epoch = metric, epoch
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= config.patience:
                hist.stopped_early = True
                break
        if step >= total:
            break
    hist.steps = step
    hist.final_loss, _ = evaluate(model, train)
    return hist


def write_metrics(path, history: TrainHistory, extra: dict | None = None) -> None:
    data = {**(extra or {}), **history.to_dict()}
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")
