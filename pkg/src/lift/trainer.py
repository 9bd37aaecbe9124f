"""Stage-wise training with gradient accumulation, periodic validation and checkpoints."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import torch

from .errors import EmptyShard, MissingCheckpoint, MissingStageShard, NonFinite, NonFiniteLoss
from .model import LiftModel, save_checkpoint, state_hash
from .objectives import LossWeights, inverse_frequency_weights

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class StageSchedule:
    stage: int
    rank: int
    lr: float
    lr_schedule: str
    k: int = 0
    epochs: int = 2
    grad_accum: int = 32
    device_batch: int = 1
    grad_clip: float = 1.0
    val_split: float = 0.1
    checkpoint_every: int = 25
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    warmup_steps: int = 0
    optimizer: str = "adamw"

    def __post_init__(self):
        if self.lr_schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown lr schedule {self.lr_schedule!r}")

    def to_dict(self) -> dict:
        return asdict(self)


REFERENCE_SCHEDULES = (
    StageSchedule(1, rank=4, lr=2e-4, lr_schedule="cosine", k=1),
    StageSchedule(2, rank=8, lr=1e-4, lr_schedule="cosine", k=2),
    StageSchedule(3, rank=16, lr=5e-5, lr_schedule="constant", k=3),
)


def default_schedules(**overrides) -> dict[int, StageSchedule]:
    return {s.stage: replace(s, **overrides) for s in REFERENCE_SCHEDULES}


@dataclass
class CheckpointRecord:
    stage: int
    step: int
    val_loss: float
    state_hash: str
    state: dict = field(repr=False, default_factory=dict)
    path: str | None = None


@dataclass
class StageResult:
    stage: int
    schedule: StageSchedule
    checkpoints: list[CheckpointRecord]
    best: CheckpointRecord
    metrics: list[dict]
    optimizer_steps: int
    n_train: int
    n_val: int
    parent_hash: str | None = None
    initial_train_loss: float | None = None
    final_train_loss: float | None = None

    def summary(self) -> dict:
        return {
            "stage": self.stage,
            "schedule": self.schedule.to_dict(),
            "optimizer_steps": self.optimizer_steps,
            "n_train": self.n_train,
            "n_val": self.n_val,
            "checkpoint_steps": [c.step for c in self.checkpoints],
            "checkpoint_val_losses": [c.val_loss for c in self.checkpoints],
            "best_step": self.best.step,
            "best_val_loss": self.best.val_loss,
            "best_hash": self.best.state_hash,
            "parent_hash": self.parent_hash,
            "initial_train_loss": self.initial_train_loss,
            "final_train_loss": self.final_train_loss,
        }


def validation_split(examples: Sequence, frac: float, seed: int) -> tuple[list, list]:
    """Hold out whole timelines (by sequence key) for validation."""
    keys = sorted({ex.sequence_key for ex in examples})
    rng = np.random.RandomState(seed)
    rng.shuffle(keys)
    n_val = int(round(len(keys) * frac))
    if n_val == 0 and len(keys) > 1 and frac > 0:
        n_val = 1
    val_keys = set(keys[:n_val])
    train = [ex for ex in examples if ex.sequence_key not in val_keys]
    val = [ex for ex in examples if ex.sequence_key in val_keys]
    return train, val


def lr_lambda(schedule: StageSchedule, total_steps: int) -> Callable[[int], float]:
    def f(step: int) -> float:
        if schedule.warmup_steps and step < schedule.warmup_steps:
            return (step + 1) / schedule.warmup_steps
        if schedule.lr_schedule == "constant":
            return 1.0
        span = max(1, total_steps - schedule.warmup_steps)
        progress = min(1.0, (step - schedule.warmup_steps) / span)
        return 0.5 * (1.0 + math.cos(math.pi * progress))
    return f


@torch.no_grad()
def mean_loss(model: LiftModel, examples: Sequence, weights: LossWeights, class_weights=None) -> float:
    was_training = model.training
    model.eval()
    vals = [float(model.loss(ex, weights, class_weights).total) for ex in examples]
    model.train(was_training)
    return float(np.mean(vals)) if vals else float("nan")


def _dump_state(model: LiftModel, run_dir, stage: int, step: int) -> None:
    if run_dir is None:
        return
    save_checkpoint(model, Path(run_dir) / f"stage{stage}" / "nonfinite" / "checkpoint.pt",
                    {"stage": stage, "step": step, "reason": "non-finite loss"})


def run_stage(model: LiftModel, shard: Sequence, schedule: StageSchedule, *, weights: LossWeights | None = None,
              seed: int = 0, class_weighting: bool = True, run_dir=None, metrics_sink=None,
              parent_hash: str | None = None, track_train_loss: bool = False) -> StageResult:
    """Train one curriculum stage and restore its lowest-validation-loss checkpoint."""
    if not shard:
        raise EmptyShard(f"stage {schedule.stage} has no examples")
    if model.rank != schedule.rank:
        raise ValueError(f"adapter rank {model.rank} does not match stage rank {schedule.rank}")
    weights = weights or LossWeights()
    train, val = validation_split(shard, schedule.val_split, seed + schedule.stage)
    if not val:
        val = list(train)
    cw = inverse_frequency_weights([ex.global_label_id for ex in train], model.n_labels) if class_weighting else None

    torch.manual_seed(seed * 1000 + schedule.stage)
    rng = np.random.RandomState(seed * 1000 + schedule.stage)
    params = model.trainable_parameters()
    opt = torch.optim.AdamW(params, lr=schedule.lr, betas=schedule.betas, weight_decay=schedule.weight_decay)
    steps_per_epoch = math.ceil(len(train) / (schedule.grad_accum * schedule.device_batch))
    total_steps = steps_per_epoch * schedule.epochs
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lr_lambda(schedule, total_steps))

    initial = mean_loss(model, train, weights, cw) if track_train_loss else None
    stage_dir = Path(run_dir) / f"stage{schedule.stage}" if run_dir is not None else None
    checkpoints: list[CheckpointRecord] = []
    metrics: list[dict] = []
    step = 0

    def checkpoint() -> None:
        vl = mean_loss(model, val, weights, cw)
        state = model.trainable_state()
        path = None
        if stage_dir is not None:
            path = str(stage_dir / f"step{step}" / "checkpoint.pt")
            digest = save_checkpoint(model, path, {"stage": schedule.stage, "step": step, "val_loss": vl,
                                                   "parent_hash": parent_hash})
        else:
            digest = state_hash(state)
        checkpoints.append(CheckpointRecord(schedule.stage, step, vl, digest, state, path))
        metrics[-1]["val_loss"] = vl

    model.train()
    micro = schedule.grad_accum * schedule.device_batch
    for epoch in range(schedule.epochs):
        order = rng.permutation(len(train))
        for start in range(0, len(order), micro):
            group = [train[i] for i in order[start:start + micro]]
            acc = {"total": 0.0, "ce": 0.0, "focal_lm": 0.0, "focal_cls": 0.0, "hist_cls": 0.0}
            for ex in group:
                try:
                    lb = model.loss(ex, weights, cw)
                except NonFinite as e:
                    _dump_state(model, run_dir, schedule.stage, step)
                    raise NonFiniteLoss(f"stage {schedule.stage} step {step}: {e}") from e
                (lb.total / len(group)).backward()
                for k, v in lb.scalars().items():
                    if k in acc:
                        acc[k] += v / len(group)
            torch.nn.utils.clip_grad_norm_(params, schedule.grad_clip)
            opt.step()
            model.after_step()
            opt.zero_grad(set_to_none=True)
            lr_used = sched.get_last_lr()[0]
            sched.step()
            step += 1
            row = {"step": step, "stage": schedule.stage, "epoch": epoch, "lr": lr_used, **acc}
            metrics.append(row)
            if step % schedule.checkpoint_every == 0:
                checkpoint()
            if metrics_sink is not None:
                metrics_sink(row)
    if not checkpoints or checkpoints[-1].step != step:
        checkpoint()
        if metrics_sink is not None:
            metrics_sink({"step": step, "stage": schedule.stage, "val_loss": checkpoints[-1].val_loss, "event": "stage_end"})

    best = min(checkpoints, key=lambda c: (c.val_loss, c.step))
    model.load_trainable_state(best.state)
    final = mean_loss(model, train, weights, cw) if track_train_loss else None
    return StageResult(schedule.stage, schedule, checkpoints, best, metrics, step, len(train), len(val),
                       parent_hash, initial, final)


def run_curriculum(model: LiftModel, shards: Mapping[int, Sequence], schedules: Mapping[int, StageSchedule] | None = None,
                   *, start_stage: int = 1, parent_checkpoint: CheckpointRecord | None = None,
                   weights: LossWeights | None = None, seed: int = 0, run_dir=None, metrics_path=None,
                   on_growth: Callable[[LiftModel, int, int], None] | None = None, **stage_kw) -> list[StageResult]:
    """Run stages in order, growing adapter rank between stages.

    Resuming at ``start_stage > 1`` requires the previous stage's checkpoint.
    ``on_growth(model, r_old, r_new)`` is called right after each resize.
    """
    schedules = dict(schedules or default_schedules())
    order = sorted(s for s in schedules if s >= start_stage)
    if start_stage > 1:
        if parent_checkpoint is None:
            raise MissingCheckpoint(f"stage {start_stage} needs the stage {start_stage - 1} checkpoint")
        model.load_trainable_state(parent_checkpoint.state)
    missing = [s for s in order if s not in shards or not shards[s]]
    if missing:
        raise MissingStageShard(f"no shard for stage(s) {missing}")

    sink = None
    fh = None
    if metrics_path is not None:
        Path(metrics_path).parent.mkdir(parents=True, exist_ok=True)
        fh = open(metrics_path, "a")

        def sink(row: dict) -> None:
            fh.write(json.dumps(row) + "\n")
            fh.flush()

    results: list[StageResult] = []
    parent = parent_checkpoint.state_hash if parent_checkpoint is not None else None
    try:
        for s in order:
            sch = schedules[s]
            if model.rank < sch.rank:
                r_old = model.rank
                model.grow_rank(sch.rank)
                log.info("stage %d: adapter rank %d -> %d", s, r_old, sch.rank)
                if on_growth is not None:
                    on_growth(model, r_old, sch.rank)
            res = run_stage(model, shards[s], sch, weights=weights, seed=seed, run_dir=run_dir,
                            metrics_sink=sink, parent_hash=parent, **stage_kw)
            results.append(res)
            parent = res.best.state_hash
    finally:
        if fh is not None:
            fh.close()
    return results
