"""Loss functions, the Adam optimizer, and the training loop.

Training operates on loss units: a student sequence plus a per-step weight
vector saying which cells contribute to the loss. Observed-step weights come
from the step masks (partially observed setup) or are all ones (held-out
student setup); evaluation units instead weight exactly the held-out cells.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .data import NUM_OPTIONS, StudentSequence
from .errors import ConfigError, DataError, NumericError
from .models import BaseModel, flatten_cells, make_batch
from .seeding import substream

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    epochs: int = 200
    batch_size: int = 64
    patience: int = 10
    clip_norm: float = 5.0
    weight_decay: float = 0.0
    restore_best: bool = True
    seed: int = 0
    max_len: int = 200

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")
        if self.epochs < 1 or self.batch_size < 1 or self.patience < 1:
            raise ConfigError("epochs, batch_size and patience must be at least 1")
        if self.clip_norm <= 0:
            raise ConfigError(f"clip norm must be positive, got {self.clip_norm}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight decay must be nonnegative, "
                              f"got {self.weight_decay}")


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def nll_loss(logits: ad.Tensor, targets, weights) -> ad.Tensor:
    """Mean negative log-likelihood of the target options over weighted cells.

    Computed as log-softmax with the row max subtracted as a constant, so the
    result stays finite even when a row puts (float) probability zero on the
    target. Shifting by any constant leaves both value and gradient exact.
    """
    w = np.asarray(weights, dtype=float)
    count = w.sum()
    if count <= 0:
        raise DataError("no cells carry loss weight")
    onehot = np.eye(NUM_OPTIONS)[np.asarray(targets, dtype=int)]
    row_max = logits.values.max(axis=1, keepdims=True)
    shift = ad.constant(np.repeat(-row_max, logits.values.shape[1], axis=1))
    shifted = ad.add(logits, shift)
    lse = ad.log(ad.row_sum(ad.exp(shifted)))
    picked = ad.row_sum(ad.multiply(shifted, ad.constant(onehot)))
    logp = ad.add(picked, ad.scale(lse, -1.0))
    weighted = ad.multiply(logp, ad.constant(w[:, None]))
    return ad.scale(ad.sum_all(weighted), -1.0 / count)


def bce_loss(logits: ad.Tensor, labels, weights) -> ad.Tensor:
    """Mean binary cross-entropy for the correctness head.

    Uses -log sigmoid(z) = log(1 + e^-z) + (1 - y) z, which keeps a single
    exp in the graph and stays finite for the logit ranges clipping allows.
    """
    w = np.asarray(weights, dtype=float)
    count = w.sum()
    if count <= 0:
        raise DataError("no cells carry loss weight")
    y = np.asarray(labels, dtype=float)[:, None]
    ones = ad.constant(np.ones(logits.values.shape))
    softplus = ad.log(ad.add(ones, ad.exp(ad.scale(logits, -1.0))))
    per_cell = ad.add(softplus, ad.multiply(ad.constant(1.0 - y), logits))
    weighted = ad.multiply(per_cell, ad.constant(w[:, None]))
    return ad.scale(ad.sum_all(weighted), 1.0 / count)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def create(cls, params: dict) -> "AdamState":
        return cls(m={k: np.zeros_like(p.values) for k, p in params.items()},
                   v={k: np.zeros_like(p.values) for k, p in params.items()})


def global_norm(grads: dict) -> float:
    return float(np.sqrt(sum(float((g ** 2).sum()) for g in grads.values())))


def clip_gradients(grads: dict, clip_norm: float) -> float:
    """Scale all gradients down to the given global norm; returns the norm
    observed before clipping."""
    norm = global_norm(grads)
    if norm > clip_norm:
        factor = clip_norm / norm
        for g in grads.values():
            g *= factor
    return norm


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
    """One Adam update in place. Raises on non-finite gradients.

    Weight decay is decoupled from the moment estimates: the shrinkage
    term lr * decay * theta is added after the adaptive step is formed,
    so it is not rescaled by 1/sqrt(v) the way an L2 gradient would be.
    """
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for parameter {name!r}")
    state.t += 1
    correct1 = 1.0 - beta1 ** state.t
    correct2 = 1.0 - beta2 ** state.t
    for name, p in params.items():
        g = grads[name]
        state.m[name] = beta1 * state.m[name] + (1.0 - beta1) * g
        state.v[name] = beta2 * state.v[name] + (1.0 - beta2) * g ** 2
        m_hat = state.m[name] / correct1
        v_hat = state.v[name] / correct2
        step = m_hat / (np.sqrt(v_hat) + eps)
        if weight_decay:
            step = step + weight_decay * p.values
        p.values = p.values - lr * step


# ---------------------------------------------------------------------------
# loss units
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LossUnit:
    """One sequence plus the per-step loss weights that apply to it."""
    sequence: StudentSequence
    weights: np.ndarray

    def __post_init__(self):
        if len(self.weights) != len(self.sequence.events):
            raise DataError(f"student {self.sequence.student_id}: "
                            f"{len(self.weights)} weights for "
                            f"{len(self.sequence.events)} events")


def observed_units(sequences) -> list:
    """Weight each step by its own mask: train on what the model may see."""
    return [LossUnit(s, np.array([ev.mask for ev in s.events], dtype=float))
            for s in sequences]


def held_out_units(sequences, held_steps) -> list:
    """Weight exactly the (student, step) cells listed in held_steps."""
    units = []
    for s in sequences:
        w = np.array([(s.student_id, t) in held_steps for t in range(len(s.events))],
                     dtype=float)
        units.append(LossUnit(s, w))
    return units


def full_units(sequences) -> list:
    return [LossUnit(s, np.ones(len(s.events))) for s in sequences]


def chunk_units(units, max_len: int) -> list:
    """Split long sequences into consecutive windows, carrying weights along."""
    out = []
    for unit in units:
        events = unit.sequence.events
        for start in range(0, len(events), max_len):
            window = events[start:start + max_len]
            out.append(LossUnit(StudentSequence(unit.sequence.student_id, window),
                                unit.weights[start:start + max_len]))
    return out


def _weights_flat(units, batch, order: str) -> np.ndarray:
    B, T = batch.size
    w = np.zeros((B, T))
    for b, unit in enumerate(units):
        w[b, :len(unit.weights)] = unit.weights
    return flatten_cells(w * batch.pad, order)


def _targets_flat(model, batch, order: str) -> np.ndarray:
    if model.task == "option":
        return flatten_cells(batch.chosen, order)
    return flatten_cells(batch.correctness, order)


def _batches(units, batch_size):
    for start in range(0, len(units), batch_size):
        yield units[start:start + batch_size]


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    history: list = field(default_factory=list)
    best_epoch: int = -1
    best_val_loss: float = float("inf")
    stopped_early: bool = False


def evaluate_loss(model: BaseModel, units, batch_size: int = 64) -> float:
    """Weighted mean loss over the given units, no graph recorded."""
    units = [u for u in units if u.weights.sum() > 0]
    if not units:
        raise DataError("no cells carry loss weight")
    total, count = 0.0, 0.0
    for chunk in _batches(units, batch_size):
        batch = make_batch([u.sequence for u in chunk], model.config)
        flat, order = model.forward_batch(batch)
        w = _weights_flat(chunk, batch, order)
        targets = _targets_flat(model, batch, order)
        z = flat.values
        if model.task == "option":
            z = z - z.max(axis=1, keepdims=True)
            logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
            cell = -logp[np.arange(len(targets)), targets]
        else:
            z = z[:, 0]
            cell = np.logaddexp(0.0, -z) + (1.0 - targets) * z
        total += float((cell * w).sum())
        count += float(w.sum())
    return total / count


def train(model: BaseModel, train_units, val_units, config: TrainConfig,
          progress=None) -> TrainResult:
    """Adam with global-norm clipping and early stopping on validation loss.

    The model ends up holding the parameters of its best validation epoch,
    unless restore_best is off, in which case it keeps the final epoch.
    Keeping the final weights matters when the quantity of interest is not
    the validation loss itself; the pair-embedding rows keep organizing
    long after the option NLL has bottomed out.
    The returned history carries losses only; timing goes to the log so the
    artifact stays identical across machines.
    """
    train_units = chunk_units([u for u in train_units if u.weights.sum() > 0],
                              config.max_len)
    val_units = chunk_units([u for u in val_units if u.weights.sum() > 0],
                            config.max_len)
    if not train_units:
        raise DataError("no training cells carry loss weight")
    params = model.named_parameters()
    state = AdamState.create(params)
    result = TrainResult()
    best_params = None
    bad_epochs = 0
    for epoch in range(config.epochs):
        order = substream(config.seed, f"shuffle/{epoch}").permutation(len(train_units))
        total, count = 0.0, 0.0
        for idx in _batches(order, config.batch_size):
            chunk = [train_units[i] for i in idx]
            batch = make_batch([u.sequence for u in chunk], model.config)
            with ad.Graph() as graph:
                flat, cell_order = model.forward_batch(batch)
                w = _weights_flat(chunk, batch, cell_order)
                targets = _targets_flat(model, batch, cell_order)
                if model.task == "option":
                    loss = nll_loss(flat, targets, w)
                else:
                    loss = bce_loss(flat, targets, w)
                grads = ad.backward(graph, loss, wrt=list(params.values()))
            named_grads = {name: grads[p.node_id] for name, p in params.items()}
            clip_gradients(named_grads, config.clip_norm)
            adam_step(params, named_grads, state, config.lr,
                      weight_decay=config.weight_decay)
            total += float(loss.values) * w.sum()
            count += w.sum()
        train_loss = total / count
        val_loss = evaluate_loss(model, val_units, config.batch_size)
        result.history.append({"epoch": epoch, "train_loss": train_loss,
                               "val_loss": val_loss})
        if progress:
            progress(epoch, train_loss, val_loss)
        if val_loss < result.best_val_loss:
            result.best_val_loss = val_loss
            result.best_epoch = epoch
            best_params = {name: p.values.copy() for name, p in params.items()}
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= config.patience:
                result.stopped_early = True
                log.info("stopping at epoch %d; no improvement for %d epochs",
                         epoch, config.patience)
                break
    if config.restore_best and best_params is not None:
        for name, p in params.items():
            p.values = best_params[name]
    return result
