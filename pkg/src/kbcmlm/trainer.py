"""Adam training loop for re-pretraining and fine-tuning."""
from __future__ import annotations

import copy
import csv
import dataclasses
import logging
import math
import os
import random
from dataclasses import dataclass
from typing import Callable, Iterable, NamedTuple, Sequence

import torch
import torch.nn.functional as F

from kbcmlm.corpus import MaskedInstance
from kbcmlm.model import MlmModel, all_finite, collate, save_checkpoint

log = logging.getLogger(__name__)

PRETRAIN = "pretrain"
FINETUNE = "finetune"


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 2e-5
    epochs: int = 5
    batch_size: int = 16
    seed: int = 0
    regime: str = FINETUNE
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    grad_clip: float | None = None

    def validate(self) -> None:
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.regime not in (PRETRAIN, FINETUNE):
            raise ValueError(f"unknown regime {self.regime!r}")

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


PRESETS = {
    "paper-pretrain": TrainConfig(2e-5, epochs=20, batch_size=32, regime=PRETRAIN, grad_clip=1.0),
    "paper-finetune": TrainConfig(2e-5, epochs=5, batch_size=16, regime=FINETUNE),
}


def preset(name: str, **overrides) -> TrainConfig:
    try:
        return PRESETS[name].replace(**overrides)
    except KeyError:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


class TrainingDiverged(RuntimeError):
    pass


class TrainResult(NamedTuple):
    model: MlmModel
    history: list[float]


def _batch_tensors(batch: Sequence[MaskedInstance]):
    ids, keep = collate([inst.input for inst in batch])
    labels = torch.full_like(ids, -100)
    for row, inst in enumerate(batch):
        for pos, tid in inst.targets:
            labels[row, pos] = tid
    return ids, keep, labels


def _check_instances(model: MlmModel, instances: Sequence[MaskedInstance]) -> None:
    v = model.config.vocab_size
    for inst in instances:
        if any(not 0 <= t < v for t in inst.input.ids) or any(not 0 <= t < v for t in inst.target_ids):
            raise ValueError(f"instance id outside vocabulary of size {v}")
        if not inst.targets:
            raise ValueError("instance without targets")


def train(
    model: MlmModel,
    instances: Sequence[MaskedInstance],
    config: TrainConfig,
    *,
    checkpoint_dir: str | os.PathLike | None = None,
    checkpoint_every_epoch: bool = False,
    on_step: Callable[[int, float], None] | None = None,
) -> TrainResult:
    """Train a copy of ``model``; returns it with the mean loss of every epoch.

    The input model is left untouched. Shuffling uses ``config.seed`` only,
    so equal inputs give bit-identical results.
    """
    config.validate()
    instances = list(instances)
    if not instances:
        raise ValueError("no training instances")
    _check_instances(model, instances)
    model = copy.deepcopy(model)
    model.train()
    opt = torch.optim.Adam(
        model.parameters(), lr=config.learning_rate, betas=config.betas, eps=config.eps
    )
    rng = random.Random(config.seed)
    history: list[float] = []
    step = 0
    for epoch in range(1, config.epochs + 1):
        order = list(range(len(instances)))
        rng.shuffle(order)
        losses = []
        for b, start in enumerate(range(0, len(order), config.batch_size), start=1):
            batch = [instances[i] for i in order[start : start + config.batch_size]]
            ids, keep, labels = _batch_tensors(batch)
            logits = model(ids, keep)
            loss = F.cross_entropy(logits.reshape(-1, logits.shape[-1]), labels.reshape(-1))
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(f"divergence at epoch {epoch}/batch {b}")
            opt.zero_grad()
            loss.backward()
            if config.grad_clip is not None:
                torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
            opt.step()
            if not all_finite(model):
                raise TrainingDiverged(f"divergence at epoch {epoch}/batch {b}")
            losses.append(value)
            step += 1
            if on_step is not None:
                on_step(step, value)
        history.append(sum(losses) / len(losses))
        log.info("%s epoch %d: loss %.4f", config.regime, epoch, history[-1])
        if checkpoint_dir is not None and checkpoint_every_epoch:
            save_checkpoint(model, checkpoint_dir)
    model.eval()
    if checkpoint_dir is not None:
        save_checkpoint(model, checkpoint_dir)
    return TrainResult(model, history)


def instance_losses(model: MlmModel, instances: Sequence[MaskedInstance], batch_size: int = 64) -> list[float]:
    """Mean cross-entropy of each instance over its targets, without updates."""
    out: list[float] = []
    with torch.no_grad():
        for start in range(0, len(instances), batch_size):
            batch = instances[start : start + batch_size]
            ids, keep, labels = _batch_tensors(batch)
            logits = model(ids, keep)
            ce = F.cross_entropy(
                logits.reshape(-1, logits.shape[-1]), labels.reshape(-1), reduction="none"
            ).view(labels.shape)
            counted = (labels != -100).sum(dim=1)
            out.extend((ce.sum(dim=1) / counted).tolist())
    return out


def evaluate_mlm(model: MlmModel, instances: Sequence[MaskedInstance]) -> float:
    instances = list(instances)
    if not instances:
        raise ValueError("no instances")
    losses = instance_losses(model, instances)
    return sum(losses) / len(losses)


def write_loss_csv(path: str | os.PathLike, rows: Iterable[tuple[int, str, float]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "split", "loss"])
        for epoch, split, loss in rows:
            w.writerow([epoch, split, repr(float(loss))])
