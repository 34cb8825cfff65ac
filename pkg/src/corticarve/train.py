"""Training loop: synthetic stream, batch-size-1 Adam steps, plateau LR halving.

Validation is a fixed list of synthesis seeds disjoint from the training
stream (seed namespaces (master, 0, i) for training, (master, 1, j) for
validation), so the validation loss is comparable across steps.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .losses import dice_loss, sdt_loss
from .synthesis import SynthesisConfig, synthesize_sample
from .unet import UNetModel, adam_step, save_checkpoint, unet_backward, unet_forward

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainState:
    step: int = 0
    lr: float = 1e-4
    best_val: float = float("inf")
    since_improve: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.step < 0 or self.since_improve < 0:
            raise ValueError("counters must be nonnegative")


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    lr: float = 1e-4
    val_interval: int = 250
    patience: int = 20000
    val_count: int = 8
    seed: int = 0
    checkpoint_every: int = 0  # 0 disables periodic checkpoints
    checkpoint_path: str = ""

    def __post_init__(self):
        if self.steps < 0 or self.val_interval < 1 or self.patience < 1 or self.val_count < 0:
            raise ValueError("invalid train config counts")
        if self.lr <= 0:
            raise ValueError("lr must be positive")


def update_lr_on_plateau(state: TrainState, val_loss: float, patience: int = 20000,
                         interval: int = 1) -> TrainState:
    """Halve the learning rate after `patience` steps without improvement.

    An improving validation loss resets the counter and records the best;
    otherwise the counter grows by the validation interval, and on reaching
    patience the rate halves and the counter restarts.
    """
    if patience < 1:
        raise ValueError("patience must be >= 1")
    if val_loss < state.best_val:
        return replace(state, best_val=val_loss, since_improve=0)
    counter = state.since_improve + interval
    if counter >= patience:
        return replace(state, lr=state.lr / 2.0, since_improve=0)
    return replace(state, since_improve=counter)


def _sample_loss(model, sample):
    """Forward a synth sample without caching; returns the configured loss value."""
    pred, _ = unet_forward(model, sample.image, train=False)
    if model.config.head == "sdt":
        return sdt_loss(pred, sample.sdt, sample.weights).value
    return dice_loss(pred, sample.mask).value


@dataclass
class TrainHistory:
    steps: list = field(default_factory=list)
    train_loss: list = field(default_factory=list)
    val_steps: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    lr: list = field(default_factory=list)


def train_loop(model: UNetModel, label_maps, synth_cfg: SynthesisConfig,
               train_cfg: TrainConfig):
    """Train in place; returns (model, TrainState, TrainHistory).

    Per step: pick a label map uniformly, synthesize a fresh sample from the
    training seed namespace, forward, loss, backward, Adam. Every
    val_interval steps the fixed validation seeds are scored and the plateau
    rule applied. Deterministic for fixed seeds and inputs.
    """
    if not label_maps:
        raise ValueError("need at least one training label map")
    master = int(train_cfg.seed)
    pick_rng = np.random.default_rng(np.random.SeedSequence([master, 2]))
    state = TrainState(step=0, lr=train_cfg.lr, seed=master)
    history = TrainHistory()
    val_specs = []
    for j in range(train_cfg.val_count):
        map_idx = j % len(label_maps)
        val_specs.append((map_idx, (master, 1, j)))
    t0 = time.perf_counter()
    for step in range(1, train_cfg.steps + 1):
        idx = int(pick_rng.integers(0, len(label_maps)))
        sample = synthesize_sample(label_maps[idx], synth_cfg, (master, 0, step))
        pred, cache = unet_forward(model, sample.image, train=True)
        if model.config.head == "sdt":
            res = sdt_loss(pred, sample.sdt, sample.weights)
        else:
            res = dice_loss(pred, sample.mask)
        if not np.isfinite(res.value):
            raise FloatingPointError(f"non-finite training loss at step {step}")
        grads = unet_backward(model, cache, res.gradient)
        adam_step(model, grads, state.lr)
        state = replace(state, step=step)
        history.steps.append(step)
        history.train_loss.append(res.value)
        history.lr.append(state.lr)
        if train_cfg.val_count and step % train_cfg.val_interval == 0:
            vals = [
                _sample_loss(model, synthesize_sample(label_maps[mi], synth_cfg, sk))
                for mi, sk in val_specs
            ]
            v = float(np.mean(vals))
            state = update_lr_on_plateau(
                state, v, patience=train_cfg.patience, interval=train_cfg.val_interval
            )
            history.val_steps.append(step)
            history.val_loss.append(v)
            log.info(
                "step %d/%d train %.5f val %.5f lr %.2e (%.1fs)",
                step, train_cfg.steps, res.value, v, state.lr,
                time.perf_counter() - t0,
            )
        if (
            train_cfg.checkpoint_every
            and train_cfg.checkpoint_path
            and step % train_cfg.checkpoint_every == 0
        ):
            save_checkpoint(model, train_cfg.checkpoint_path, train_state=_state_dict(state))
    return model, state, history


def _state_dict(state: TrainState):
    d = {
        "step": state.step,
        "lr": state.lr,
        "best_val": state.best_val,
        "since_improve": state.since_improve,
        "seed": state.seed,
    }
    if not np.isfinite(d["best_val"]):
        d["best_val"] = None  # JSON has no inf
    return d


def state_from_dict(d) -> TrainState:
    best = d.get("best_val")
    return TrainState(
        step=int(d.get("step", 0)),
        lr=float(d.get("lr", 1e-4)),
        best_val=float("inf") if best is None else float(best),
        since_improve=int(d.get("since_improve", 0)),
        seed=int(d.get("seed", 0)),
    )
