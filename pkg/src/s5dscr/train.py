"""Optimization loop: Adam, reduce-on-plateau scheduling, checkpointing.

The trainer owns one set of weight tensors and mutates them between steps;
``adam_step`` itself is functional over flat name -> array dicts.  All float32
arithmetic is single threaded and deterministic, so a checkpoint (weights +
optimizer moments + scheduler + RNG state) resumes bit-exactly.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .autograd import Tensor, backward, mse_loss
from .errors import DataError, NumericError
from .hsdata import BandDataset, PatchPair
from .model import (
    ModelConfig,
    ModelWeights,
    TensorWeights,
    forward,
    init_weights,
    load_weights,
    save_weights,
)


@dataclass
class AdamState:
    """First/second moment estimates plus the step counter and hyperparameters."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update; returns new params and new state."""
    t = state.t + 1
    new_params: dict[str, np.ndarray] = {}
    new_m: dict[str, np.ndarray] = {}
    new_v: dict[str, np.ndarray] = {}
    for name, theta in params.items():
        g = grads.get(name)
        if g is None:
            raise ValueError(f"missing gradient for parameter {name}")
        if g.shape != theta.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {theta.shape}")
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient in {name} at step {t}")
        m_prev = state.m.get(name)
        v_prev = state.v.get(name)
        if m_prev is None:
            m_prev = np.zeros_like(theta)
            v_prev = np.zeros_like(theta)
        one = theta.dtype.type(1.0)
        b1 = theta.dtype.type(state.beta1)
        b2 = theta.dtype.type(state.beta2)
        m = b1 * m_prev + (one - b1) * g
        v = b2 * v_prev + (one - b2) * (g * g)
        m_hat = m / (one - b1**t)
        v_hat = v / (one - b2**t)
        step = theta.dtype.type(state.lr) * m_hat / (np.sqrt(v_hat) + theta.dtype.type(state.eps))
        new_params[name] = theta - step
        new_m[name] = m
        new_v[name] = v
    return new_params, replace(state, t=t, m=new_m, v=new_v)


@dataclass(frozen=True)
class PlateauState:
    """Reduce-on-plateau bookkeeping: lr drops by ``factor`` after ``patience``
    consecutive epochs without relative improvement."""

    current_lr: float
    best_val: float = float("inf")
    epochs_since_improve: int = 0
    factor: float = 0.1
    patience: int = 3
    rel_threshold: float = 1e-4
    min_lr: float = 1e-7


def plateau_step(state: PlateauState, val_loss: float) -> PlateauState:
    if not np.isfinite(val_loss):
        raise NumericError(f"non-finite validation loss {val_loss}")
    if val_loss < state.best_val * (1.0 - state.rel_threshold):
        return replace(state, best_val=val_loss, epochs_since_improve=0)
    count = state.epochs_since_improve + 1
    if count >= state.patience:
        return replace(
            state,
            current_lr=max(state.current_lr * state.factor, state.min_lr),
            epochs_since_improve=0,
        )
    return replace(state, epochs_since_improve=count)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 16
    max_epochs: int = 50
    patience: int = 3
    factor: float = 0.1
    rel_threshold: float = 1e-4
    min_lr: float = 1e-7
    stop_lr: float = 1e-6
    seed: int = 0

    def to_dict(self) -> dict:
        return {
            "lr": self.lr,
            "batch_size": self.batch_size,
            "max_epochs": self.max_epochs,
            "patience": self.patience,
            "factor": self.factor,
            "rel_threshold": self.rel_threshold,
            "min_lr": self.min_lr,
            "stop_lr": self.stop_lr,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> TrainConfig:
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float


@dataclass
class TrainRun:
    band_id: int
    model_config: ModelConfig
    train_config: TrainConfig
    history: list[EpochStats]
    best_checkpoint: str
    last_checkpoint: str
    best_val_loss: float
    wall_clock_sec: float


def _stack_batch(patches: list[PatchPair], indices) -> tuple[np.ndarray, np.ndarray]:
    lr = np.stack([patches[i].lr for i in indices])
    hr = np.stack([patches[i].hr for i in indices])
    return lr, hr


def train_epoch(
    tw: TensorWeights,
    adam: AdamState,
    patches: list[PatchPair],
    batch_size: int,
    rng: np.random.Generator,
) -> tuple[AdamState, float]:
    """One pass over the shuffled patches; updates ``tw`` in place.

    Returns the new optimizer state and the mean of the per-batch losses.
    """
    if not patches:
        raise DataError("train_epoch called with no patches")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = rng.permutation(len(patches))
    losses = []
    params = tw.params()
    for b, start in enumerate(range(0, len(order), batch_size)):
        lr_batch, hr_batch = _stack_batch(patches, order[start : start + batch_size])
        tw.zero_grads()
        loss = mse_loss(forward(tw, lr_batch), Tensor(hr_batch))
        value = loss.item()
        if not np.isfinite(value):
            raise NumericError(f"non-finite training loss in batch {b}")
        backward(loss)
        grads = {}
        for name, t in params.items():
            if t.grad is None:
                raise NumericError(f"parameter {name} received no gradient in batch {b}")
            grads[name] = t.grad
        new_values, adam = adam_step({n: t.data for n, t in params.items()}, grads, adam)
        for name, t in params.items():
            t.data = new_values[name]
        losses.append(value)
    return adam, float(np.mean(losses))


def validation_loss(tw: TensorWeights, patches: list[PatchPair], batch_size: int) -> float:
    """Element-weighted MSE over all validation patches (no graph kept)."""
    if not patches:
        raise DataError("validation requested with no patches")
    snapshot = tw.to_model_weights()
    total_sq = 0.0
    total_n = 0
    for start in range(0, len(patches), batch_size):
        lr_batch, hr_batch = _stack_batch(patches, range(start, min(start + batch_size, len(patches))))
        out = forward(snapshot, lr_batch).data
        diff = out.astype(np.float64) - hr_batch.astype(np.float64)
        total_sq += float((diff * diff).sum())
        total_n += diff.size
    return total_sq / total_n


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(
    ckpt_dir,
    weights: ModelWeights,
    adam: AdamState,
    plateau: PlateauState,
    epoch: int,
    rng: np.random.Generator,
    best_val: float,
) -> None:
    ckpt_dir = Path(ckpt_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    save_weights(weights, ckpt_dir / "weights.dscw")
    moments = {}
    for name, arr in adam.m.items():
        moments[f"m::{name}"] = arr
    for name, arr in adam.v.items():
        moments[f"v::{name}"] = arr
    np.savez(ckpt_dir / "optim.npz", **moments)
    state = {
        "epoch": epoch,
        "best_val": best_val,
        "adam": {"lr": adam.lr, "beta1": adam.beta1, "beta2": adam.beta2,
                 "eps": adam.eps, "t": adam.t},
        "plateau": {
            "current_lr": plateau.current_lr,
            "best_val": plateau.best_val,
            "epochs_since_improve": plateau.epochs_since_improve,
            "factor": plateau.factor,
            "patience": plateau.patience,
            "rel_threshold": plateau.rel_threshold,
            "min_lr": plateau.min_lr,
        },
        "rng_state": rng.bit_generator.state,
    }
    (ckpt_dir / "state.json").write_text(json.dumps(state, indent=1))


def load_checkpoint(ckpt_dir):
    """Returns (weights, adam, plateau, epoch, rng, best_val)."""
    ckpt_dir = Path(ckpt_dir)
    weights = load_weights(ckpt_dir / "weights.dscw")
    state = json.loads((ckpt_dir / "state.json").read_text())
    moments = np.load(ckpt_dir / "optim.npz")
    m = {k[3:]: moments[k] for k in moments.files if k.startswith("m::")}
    v = {k[3:]: moments[k] for k in moments.files if k.startswith("v::")}
    a = state["adam"]
    adam = AdamState(lr=a["lr"], beta1=a["beta1"], beta2=a["beta2"], eps=a["eps"],
                     t=a["t"], m=m, v=v)
    p = state["plateau"]
    plateau = PlateauState(
        current_lr=p["current_lr"], best_val=p["best_val"],
        epochs_since_improve=p["epochs_since_improve"], factor=p["factor"],
        patience=p["patience"], rel_threshold=p["rel_threshold"], min_lr=p["min_lr"],
    )
    rng = np.random.default_rng()
    rng.bit_generator.state = state["rng_state"]
    return weights, adam, plateau, state["epoch"], rng, state["best_val"]


def write_history_csv(history: list[EpochStats], path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "train_loss", "val_loss", "lr"])
        for row in history:
            writer.writerow([row.epoch, f"{row.train_loss:.8e}", f"{row.val_loss:.8e}",
                             f"{row.lr:.8e}"])


def fit(
    dataset: BandDataset,
    model_config: ModelConfig,
    train_config: TrainConfig,
    out_dir,
    resume_from=None,
) -> TrainRun:
    """Train one band's model to plateau or the epoch budget.

    Checkpoints land under ``out_dir``: ``best/`` tracks the lowest validation
    loss, ``last/`` the most recent epoch (the resume point).
    """
    t_start = time.perf_counter()
    train_patches = dataset.patches.get("train", [])
    val_patches = dataset.patches.get("val", [])
    if not train_patches:
        raise DataError("training split is empty")
    if not val_patches:
        raise DataError("validation split is empty")

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    best_dir = out_dir / "best"
    last_dir = out_dir / "last"

    if resume_from is not None:
        weights, adam, plateau, start_epoch, rng, best_val = load_checkpoint(resume_from)
        if weights.config != model_config:
            raise DataError("checkpoint config does not match the requested model config")
        start_epoch += 1
    else:
        weights = init_weights(model_config, seed=train_config.seed)
        adam = AdamState(lr=train_config.lr)
        plateau = PlateauState(
            current_lr=train_config.lr,
            factor=train_config.factor,
            patience=train_config.patience,
            rel_threshold=train_config.rel_threshold,
            min_lr=train_config.min_lr,
        )
        rng = np.random.default_rng([train_config.seed, 1])
        best_val = float("inf")
        start_epoch = 0

    tw = weights.tensors(requires_grad=True)
    history: list[EpochStats] = []
    if start_epoch == 0:
        # initialized model is the baseline checkpoint, even at max_epochs=0
        save_checkpoint(best_dir, tw.to_model_weights(), adam, plateau, -1, rng, best_val)
        save_checkpoint(last_dir, tw.to_model_weights(), adam, plateau, -1, rng, best_val)

    for epoch in range(start_epoch, train_config.max_epochs):
        lr_in_effect = plateau.current_lr
        adam = replace(adam, lr=lr_in_effect)
        adam, train_loss = train_epoch(tw, adam, train_patches, train_config.batch_size, rng)
        val_loss = validation_loss(tw, val_patches, train_config.batch_size)
        plateau = plateau_step(plateau, val_loss)
        history.append(EpochStats(epoch=epoch, train_loss=train_loss,
                                  val_loss=val_loss, lr=lr_in_effect))
        snapshot = tw.to_model_weights()
        if val_loss < best_val:
            best_val = val_loss
            save_checkpoint(best_dir, snapshot, adam, plateau, epoch, rng, best_val)
        save_checkpoint(last_dir, snapshot, adam, plateau, epoch, rng, best_val)
        if plateau.current_lr < train_config.stop_lr:
            break

    write_history_csv(history, out_dir / "history.csv")
    return TrainRun(
        band_id=dataset.band.band_id,
        model_config=model_config,
        train_config=train_config,
        history=history,
        best_checkpoint=str(best_dir),
        last_checkpoint=str(last_dir),
        best_val_loss=best_val,
        wall_clock_sec=time.perf_counter() - t_start,
    )
