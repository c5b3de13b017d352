"""Two-step training: teacher-forced staged generation, then smoothing on
gradient-free rollouts."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import nn as snn
from .depgraph import Schedule, derive_fdam, save_schedule
from .errors import InvalidInputError, SarError, StateError
from .inference import generate_chain, init_buffer
from .model import ModelConfig, SARModel, save_model

log = logging.getLogger(__name__)


class DivergenceError(SarError, RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 16
    steps1: int = 20000
    steps2: int = 5000
    lr: float = 1e-4
    seed: int = 0
    log_every: int = 100
    clip_norm: float = 1.0
    checkpoint_dir: str | None = None

    def __post_init__(self):
        if self.batch_size < 1 or self.log_every < 1 or self.steps1 < 0 or self.steps2 < 0:
            raise InvalidInputError(f"invalid training config: {self}")


def mse_loss(pred, target, select=None) -> torch.Tensor:
    """Mean squared axis-angle difference over the selected frames (axis -3)."""
    if select is not None:
        pred, target = pred[..., select, :, :], target[..., select, :, :]
    if pred.shape != target.shape:
        raise InvalidInputError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    if pred.numel() == 0:
        raise InvalidInputError("loss over an empty selection")
    return ((pred - target) ** 2).mean()


class Trainer:
    def __init__(self, model: SARModel, schedule: Schedule, lr: float = 1e-4, clip_norm: float = 1.0):
        if model.config.N != schedule.n_positions:
            raise InvalidInputError(
                f"model N={model.config.N} does not match schedule N={schedule.n_positions}")
        self.model = model
        self.schedule = schedule
        self.fdam = derive_fdam(schedule)
        self.mask = torch.as_tensor(self.fdam.mask)
        self.full_mask = torch.ones_like(self.mask)
        self.store = snn.ParamStore(model)
        self.lr = lr
        self.clip_norm = clip_norm
        self.rows = [schedule.source[t] for t in schedule.order]
        self.targets = list(schedule.order)
        self.step1_done = False

    def _as_batch(self, batch) -> torch.Tensor:
        batch = torch.as_tensor(np.asarray(batch), dtype=snn.DTYPE)
        c = self.model.config
        if batch.ndim != 4 or batch.shape[1:] != (c.N, c.J, 3):
            raise InvalidInputError(f"batch must be (B, {c.N}, {c.J}, 3), got {tuple(batch.shape)}")
        return batch

    def _update(self, loss: torch.Tensor) -> float:
        value = loss.item()
        if not math.isfinite(value):
            raise DivergenceError(f"non-finite loss {value} at optimizer step {self.store.step + 1}")
        self.store.zero_grad()
        loss.backward()
        if self.clip_norm:
            torch.nn.utils.clip_grad_norm_(self.store.params.values(), self.clip_norm)
        snn.adam_step(self.store, lr=self.lr)
        return value

    def teacher_forcing_loss(self, batch) -> torch.Tensor:
        batch = self._as_batch(batch)
        out = self.model(batch, self.mask)
        return mse_loss(out[:, self.rows], batch[:, self.targets])

    def teacher_forcing_step(self, batch) -> float:
        return self._update(self.teacher_forcing_loss(batch))

    def rollout(self, batch) -> torch.Tensor:
        """Stages 1-2 generated from the given frames alone, without gradients."""
        batch = self._as_batch(batch)
        buf, empty = init_buffer(batch[:, 0], batch[:, -1], self.schedule.n_positions)
        generate_chain(self.model, buf, empty, self.schedule, self.fdam)
        return buf

    def smoothing_loss(self, batch, trajectory=None) -> torch.Tensor:
        batch = self._as_batch(batch)
        if trajectory is None:
            trajectory = self.rollout(batch)
        out = self.model(trajectory, self.full_mask)
        return mse_loss(out[:, 1:-1], batch[:, 1:-1])

    def smoothing_finetune_step(self, batch) -> float:
        if not self.step1_done:
            raise StateError("smoothing fine-tuning needs a model from the teacher-forcing step")
        return self._update(self.smoothing_loss(batch))


@dataclass
class TrainResult:
    checkpoint: Path | None
    log: list = field(default_factory=list)  # (step, split, loss, seconds)

    def last(self, split: str) -> float:
        return [row[2] for row in self.log if row[1] == split][-1]


def _batch_indices(n: int, size: int, seed: int, phase: int, step: int) -> np.ndarray:
    rng = np.random.default_rng([seed, phase, step])
    return rng.choice(n, size=min(size, n), replace=False)


def _mean_loss(fn, data: np.ndarray, size: int) -> float:
    with torch.no_grad():
        total = 0.0
        for lo in range(0, len(data), size):
            chunk = data[lo:lo + size]
            total += float(fn(chunk)) * len(chunk)
    return total / len(data)


def train(train_data, schedule: Schedule, model_config: ModelConfig, config: TrainConfig,
          val_data=None, resume=None, log_path=None) -> tuple[SARModel, TrainResult]:
    """Run step 1 (teacher forcing) then step 2 (smoothing on rollouts).

    ``train_data``/``val_data`` are arrays ``(B, N, J, 3)``. Step 2 only runs
    when the schedule has a smoothing stage. The global step counter is the
    optimizer step count, so resuming from a checkpoint continues the same
    batch sequence.
    """
    train_data = np.asarray(train_data, dtype=np.float64)
    if len(train_data) == 0:
        raise InvalidInputError("empty training set")
    torch.manual_seed(config.seed)
    model = SARModel(model_config, seed=config.seed)
    trainer = Trainer(model, schedule, lr=config.lr, clip_norm=config.clip_norm)
    if resume is not None:
        snn.load_store(trainer.store, resume)
        trainer.step1_done = trainer.store.step >= config.steps1
    ckpt_dir = Path(config.checkpoint_dir) if config.checkpoint_dir else None
    if ckpt_dir is not None:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
        save_schedule(schedule, ckpt_dir / "schedule.json")
    result = TrainResult(None)
    t0 = time.perf_counter()
    csv_file = open(log_path, "a", newline="") if log_path else None
    writer = csv.writer(csv_file) if csv_file else None
    if writer and csv_file.tell() == 0:
        writer.writerow(["step", "split", "loss", "seconds"])

    def record(step, split, loss):
        row = (step, split, loss, round(time.perf_counter() - t0, 3))
        result.log.append(row)
        if writer:
            writer.writerow(row)
            csv_file.flush()

    steps2 = config.steps2 if schedule.smoothing else 0
    total = config.steps1 + steps2
    try:
        while trainer.store.step < total:
            step = trainer.store.step
            phase = 1 if step < config.steps1 else 2
            if phase == 2 and not trainer.step1_done:
                if config.steps1 == 0:
                    raise StateError("step 2 needs a step-1 model: train step 1 or resume from its checkpoint")
                trainer.step1_done = True
                if ckpt_dir is not None and config.steps1 > 0:
                    save_model(model, ckpt_dir / "step1.sarm", trainer.store)
            idx = _batch_indices(len(train_data), config.batch_size, config.seed, phase, step)
            batch = train_data[idx]
            if phase == 1:
                loss = trainer.teacher_forcing_step(batch)
            else:
                loss = trainer.smoothing_finetune_step(batch)
            step += 1
            if step % config.log_every == 0 or step == config.steps1 or step == total:
                record(step, f"train{phase}", loss)
                if val_data is not None and len(val_data):
                    fn = trainer.teacher_forcing_loss if phase == 1 else trainer.smoothing_loss
                    record(step, f"val{phase}", _mean_loss(fn, np.asarray(val_data), config.batch_size))
                log.info("step %d phase %d loss %.6g", step, phase, loss)
    finally:
        if csv_file:
            csv_file.close()
    trainer.step1_done = trainer.step1_done or trainer.store.step >= config.steps1
    if ckpt_dir is not None:
        if config.steps1 > 0 and steps2 == 0:
            save_model(model, ckpt_dir / "step1.sarm", trainer.store)
        result.checkpoint = ckpt_dir / "model.sarm"
        save_model(model, result.checkpoint, trainer.store)
    return model, result


def smoothing_finetune(checkpoint, train_data, schedule: Schedule, config: TrainConfig):
    """Step 2 alone, starting from a step-1 checkpoint on disk."""
    from .model import load_model

    checkpoint = Path(checkpoint)
    if not checkpoint.exists():
        raise StateError(f"step-1 checkpoint not found: {checkpoint}")
    model = load_model(checkpoint)
    trainer = Trainer(model, schedule, lr=config.lr, clip_norm=config.clip_norm)
    trainer.step1_done = True
    data = np.asarray(train_data, dtype=np.float64)
    losses = []
    for step in range(config.steps2):
        idx = _batch_indices(len(data), config.batch_size, config.seed, 2, step)
        losses.append(trainer.smoothing_finetune_step(data[idx]))
    return model, losses


def config_dict(config: TrainConfig) -> dict:
    return asdict(config)
