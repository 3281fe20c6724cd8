"""Objective, optimizer, schedules, and the training loop.

The objective is mean cross-entropy plus two regularizers: an entropy
penalty on the routing distribution (weighted by ``lambda_``) that pushes
each routing row toward one-hot, and a plain L2 penalty over every trainable
tensor including the routing logits (weighted by ``alpha``). The entropy is
always evaluated at temperature 1, independent of the annealed temperature
used in the forward pass, and carries a 1/d outer factor.

Two schedules run per epoch: the softmax temperature decays geometrically
from ``tau_start`` to ``tau_end`` across the configured epoch budget, and the
learning rate divides by ``plateau_factor`` whenever the best validation
accuracy has not improved for ``plateau_patience`` epochs.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, fields

import numpy as np

from . import tensor as T
from .data import Dataset, batches
from .errors import ConfigError, TrainingDiverged
from .model import Model
from .tensor import Tensor


@dataclass
class TrainConfig:
    epochs: int = 300
    batch_size: int = 64
    lambda_: float = 1.0  # entropy weight
    alpha: float = 1e-4  # L2 weight
    lr0: float = 0.001
    plateau_patience: int = 10
    plateau_factor: float = 5.0
    tau_start: float = 1.0
    tau_end: float = 0.01
    seed: int = 0
    anneal_entropy: bool = True  # ablation switch: include the entropy term
    anneal_temperature: bool = True  # ablation switch: decay the temperature
    val_fraction: float = 0.1

    def validate(self) -> None:
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.lambda_ < 0 or self.alpha < 0:
            raise ConfigError("lambda and alpha must be non-negative")
        if not self.lr0 > 0:
            raise ConfigError(f"lr0 must be positive, got {self.lr0}")
        if not self.plateau_factor > 1:
            raise ConfigError(f"plateau_factor must exceed 1, got {self.plateau_factor}")
        if not 0 < self.tau_end <= self.tau_start:
            raise ConfigError(
                f"need 0 < tau_end <= tau_start, got {self.tau_end}, {self.tau_start}"
            )
        if not 0 <= self.val_fraction < 1:
            raise ConfigError(f"val_fraction must be in [0, 1), got {self.val_fraction}")


def entropy_term(tape, psi: Tensor) -> Tensor:
    """Routing entropy: -(1/d) * sum over rows and columns of p*log(p).

    p is the row softmax of psi at temperature 1, whatever temperature the
    forward pass is using. The outer factor averages over the d feature
    columns, not over the k*m rows, so the value ranges in
    [0, (km/d)*log d].
    """
    d = psi.shape[1]
    return T.scale(tape, T.neg_entropy_rows(tape, psi), -1.0 / d)


def loss_terms(
    tape,
    logits: Tensor,
    targets: np.ndarray,
    psi: Tensor | None,
    params: list[tuple[str, Tensor]],
    cfg: TrainConfig,
):
    """Total objective plus its cross-entropy and entropy components.

    With lambda and alpha both zero the total is exactly the cross-entropy.
    The L2 sum runs over every tensor in ``params`` (the routing logits
    included: they only ever appear through a softmax, so nothing else
    bounds their magnitude).
    """
    ce = T.cross_entropy_logits(tape, logits, targets)
    total = ce
    ent = None
    if psi is not None and cfg.anneal_entropy and cfg.lambda_ > 0.0:
        ent = entropy_term(tape, psi)
        total = T.add(tape, total, T.scale(tape, ent, cfg.lambda_))
    if cfg.alpha > 0.0:
        l2 = None
        for _, p in params:
            sq = T.sum_squares(tape, p)
            l2 = sq if l2 is None else T.add(tape, l2, sq)
        if l2 is not None:
            total = T.add(tape, total, T.scale(tape, l2, cfg.alpha))
    return total, ce, ent


@dataclass
class AdamState:
    """First/second moment estimates per named parameter."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def create(cls, params: list[tuple[str, Tensor]]) -> "AdamState":
        state = cls()
        for name, p in params:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        return state


def adam_step(params: list[tuple[str, Tensor]], state: AdamState, lr: float) -> None:
    """One bias-corrected update, in place; parameters without grads are left alone."""
    state.step += 1
    bc1 = 1.0 - state.beta1**state.step
    bc2 = 1.0 - state.beta2**state.step
    for name, p in params:
        g = p.grad
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ConfigError(f"gradient shape {g.shape} != parameter {p.data.shape} ({name})")
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * np.square(g)
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


def temperature_at(epoch: int, cfg: TrainConfig) -> float:
    """Geometric interpolation from tau_start (epoch 0) to tau_end (last epoch)."""
    if not cfg.anneal_temperature:
        return cfg.tau_start
    if cfg.epochs <= 1:
        return cfg.tau_start
    frac = epoch / (cfg.epochs - 1)
    return cfg.tau_start * (cfg.tau_end / cfg.tau_start) ** frac


def learning_rate_at(val_accuracy_history, cfg: TrainConfig) -> float:
    """Replay the plateau rule over completed epochs' validation accuracies."""
    lr = cfg.lr0
    best = -math.inf
    since = 0
    for acc in val_accuracy_history:
        if acc > best:
            best = acc
            since = 0
        else:
            since += 1
            if since >= cfg.plateau_patience:
                lr /= cfg.plateau_factor
                since = 0
    return lr


def schedule_step(epoch: int, val_accuracy_history, cfg: TrainConfig):
    """(learning rate, temperature) to use for this epoch."""
    if epoch >= cfg.epochs:
        raise ConfigError(f"epoch {epoch} outside the configured budget {cfg.epochs}")
    return learning_rate_at(val_accuracy_history, cfg), temperature_at(epoch, cfg)


# ---------------------------------------------------------------------------
# evaluation and the loop


def predictions(model: Model, X: np.ndarray, hard: bool = False, chunk: int = 8192) -> np.ndarray:
    """Eval-mode class predictions, batched to bound memory."""
    mode = "hard" if hard else "relaxed"
    out = []
    for start in range(0, X.shape[0], chunk):
        logits = model.forward(Tensor(X[start : start + chunk]), training=False, mode=mode)
        out.append(logits.data.argmax(axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def accuracy(model: Model, ds: Dataset, hard: bool = False) -> float:
    return float((predictions(model, ds.X, hard=hard) == ds.y).mean())


def per_class_accuracy(model: Model, ds: Dataset, hard: bool = False) -> dict[int, float]:
    pred = predictions(model, ds.X, hard=hard)
    out = {}
    for c in range(ds.n_classes):
        mask = ds.y == c
        if mask.any():
            out[c] = float((pred[mask] == c).mean())
    return out


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    ce_loss: float
    entropy_term: float
    val_accuracy: float
    test_accuracy: float
    lr: float
    tau: float
    sparsity_fraction: float
    wall_time: float


@dataclass
class FitResult:
    records: list[EpochRecord]
    best_val_accuracy: float
    best_epoch: int
    best_state: list[tuple[str, np.ndarray]] | None
    final_tau: float


def routing_sparsity(model: Model, threshold: float = 0.99) -> float:
    if model.routing is None:
        return 1.0
    s = T.softmax_rows(None, model.routing.psi, model.routing.temperature)
    return float((s.data.max(axis=1) >= threshold).mean())


def fit(
    model: Model,
    train: Dataset,
    val: Dataset,
    cfg: TrainConfig,
    test: Dataset | None = None,
    on_epoch=None,
) -> FitResult:
    """Full training loop: per-epoch schedules, Adam steps, metric records.

    ``val`` drives the plateau schedule and best-checkpoint tracking; ``test``
    is only ever measured for the learning curve. Raises
    :class:`TrainingDiverged` the moment a batch loss stops being finite.
    """
    cfg.validate()
    params = model.parameters()
    adam = AdamState.create(params)
    psi = model.routing.psi if model.routing is not None else None
    dropout_rng = np.random.default_rng((cfg.seed, 7919))
    val_history: list[float] = []
    records: list[EpochRecord] = []
    best_val = -math.inf
    best_epoch = -1
    best_state = None
    t0 = time.monotonic()

    for epoch in range(cfg.epochs):
        lr, tau = schedule_step(epoch, val_history, cfg)
        model.set_temperature(tau)
        loss_sum = ce_sum = ent_sum = 0.0
        n_batches = 0
        for xb, yb in batches(train, cfg.batch_size, cfg.seed, epoch, drop_last=True):
            for _, p in params:
                p.grad = None
            tape = T.Tape()
            logits = model.forward(Tensor(xb), training=True, tape=tape, rng=dropout_rng)
            total, ce, ent = loss_terms(tape, logits, yb, psi, params, cfg)
            value = total.item()
            if not math.isfinite(value):
                raise TrainingDiverged(epoch, value)
            tape.backward(total)
            adam_step(params, adam, lr)
            loss_sum += value
            ce_sum += ce.item()
            ent_sum += ent.item() if ent is not None else 0.0
            n_batches += 1
        if n_batches == 0:
            raise ConfigError(
                f"batch_size {cfg.batch_size} leaves no full training batch (n={train.n})"
            )

        val_acc = accuracy(model, val)
        test_acc = accuracy(model, test) if test is not None else math.nan
        record = EpochRecord(
            epoch=epoch,
            train_loss=loss_sum / n_batches,
            ce_loss=ce_sum / n_batches,
            entropy_term=ent_sum / n_batches,
            val_accuracy=val_acc,
            test_accuracy=test_acc,
            lr=lr,
            tau=tau,
            sparsity_fraction=routing_sparsity(model),
            wall_time=time.monotonic() - t0,
        )
        records.append(record)
        val_history.append(val_acc)
        if val_acc > best_val:
            best_val = val_acc
            best_epoch = epoch
            best_state = [(name, arr.copy()) for name, arr in model.state_arrays()]
        if on_epoch is not None:
            on_epoch(record)

    return FitResult(
        records=records,
        best_val_accuracy=best_val if records else math.nan,
        best_epoch=best_epoch,
        best_state=best_state,
        final_tau=model.temperature,
    )


def config_to_dict(cfg: TrainConfig) -> dict:
    return {f.name: getattr(cfg, f.name) for f in fields(cfg)}
