"""SGD-with-momentum training loop.

Defaults follow the reference protocol: batch 64, 20 epochs, lr 0.01
dropped by 10x entering epochs 8, 12 and 16, momentum 0.9.  Everything
is deterministic given the config seed; the shuffle stream is separate
from the init stream so ablations can share initialization.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .losses import CrossEntropy, LossKind, cross_entropy, margin_loss
from .models import PsnetModel, forward_embedding, forward_logits
from .psn import PsnMode
from .tensor import NonFiniteError, Tensor, backward

__all__ = [
    "TrainConfig",
    "EpochRow",
    "TrainingDiverged",
    "lr_at_epoch",
    "sgd_momentum_step",
    "train",
]


@dataclass
class TrainConfig:
    batch_size: int = 64
    epochs: int = 20
    lr0: float = 0.01
    drop_epochs: tuple[int, ...] = (8, 12, 16)
    drop_factor: float = 10.0
    momentum: float = 0.9
    weight_decay: float = 0.0
    seed: int = 0
    loss: LossKind = field(default_factory=CrossEntropy)
    psn_mode: PsnMode = PsnMode.FIXED

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        if self.drop_factor <= 0:
            raise ValueError("drop_factor must be positive")
        drops = tuple(self.drop_epochs)
        if any(b <= a for a, b in zip(drops, drops[1:])):
            raise ValueError("drop_epochs must be strictly increasing")
        if drops and (drops[0] < 1 or drops[-1] > self.epochs):
            raise ValueError("drop_epochs must lie within [1, epochs]")


@dataclass
class EpochRow:
    epoch: int
    lr: float
    train_loss: float
    train_acc: float
    alpha: float | None
    beta: float | None
    gamma: float | None


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, batch: int, detail: str):
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch}: {detail}")
        self.epoch = epoch
        self.batch = batch


def lr_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    """lr0 divided by drop_factor once per schedule epoch already reached."""
    if not 1 <= epoch <= cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [1, {cfg.epochs}]")
    k = sum(1 for d in cfg.drop_epochs if d <= epoch)
    return cfg.lr0 / cfg.drop_factor**k


def sgd_momentum_step(
    param: Tensor,
    grad: np.ndarray,
    velocity: np.ndarray,
    lr: float,
    momentum: float,
    weight_decay: float = 0.0,
) -> None:
    """In place: v <- momentum*v + (g + wd*p); p <- p - lr*v."""
    if not np.all(np.isfinite(grad)):
        raise NonFiniteError("NaN/Inf gradient in optimizer step")
    if weight_decay:
        grad = grad + weight_decay * param.data
    velocity *= momentum
    velocity += grad
    param.data -= lr * velocity


def _batch_loss(model: PsnetModel, x: Tensor, labels: np.ndarray, iteration: int):
    if isinstance(model.loss_kind, CrossEntropy):
        return cross_entropy(forward_logits(model, x), labels)
    emb = forward_embedding(model, x)
    return margin_loss(model.loss_kind, emb, model.classifier, labels, iteration)


def train(model: PsnetModel, data, cfg: TrainConfig) -> tuple[list[EpochRow], PsnetModel]:
    """Run the full protocol over `data` (needs .inputs and .labels).

    Returns one history row per epoch: loss/accuracy over the training
    pass plus the current squashing parameters.  Raises
    TrainingDiverged if the loss leaves the finite range.
    """
    inputs = np.asarray(data.inputs, dtype=np.float64)
    labels = np.asarray(data.labels, dtype=np.int64)
    n = len(labels)
    if n == 0:
        raise ValueError("empty dataset")
    if labels.min() < 0 or labels.max() >= model.num_classes:
        raise ValueError("dataset labels exceed the model's class count")

    shuffle_rng = np.random.default_rng([cfg.seed, 1])
    params = model.named_parameters()
    velocities = {name: np.zeros_like(t.data) for name, t in params}
    history: list[EpochRow] = []
    iteration = 0

    for epoch in range(1, cfg.epochs + 1):
        lr = lr_at_epoch(cfg, epoch)
        perm = shuffle_rng.permutation(n)
        model.set_training(True)
        loss_sum = 0.0
        correct = 0
        for bi, start in enumerate(range(0, n, cfg.batch_size)):
            idx = perm[start : start + cfg.batch_size]
            x = Tensor(inputs[idx])
            y = labels[idx]
            model.zero_grad()
            try:
                out = _batch_loss(model, x, y, iteration)
                if not np.isfinite(out.value):
                    raise NonFiniteError("loss value is NaN/Inf")
                backward(out.loss)
                for name, p in params:
                    if p.grad is None:
                        continue
                    sgd_momentum_step(p, p.grad, velocities[name], lr, cfg.momentum, cfg.weight_decay)
            except NonFiniteError as e:
                raise TrainingDiverged(epoch, bi, str(e)) from e
            if model.psn is not None:
                model.psn.project()
            loss_sum += out.value * len(idx)
            correct += out.correct_count
            iteration += 1
        alpha, beta, gamma = model.psn.current() if model.psn is not None else (None, None, None)
        history.append(EpochRow(epoch, lr, loss_sum / n, correct / n, alpha, beta, gamma))
    return history, model
