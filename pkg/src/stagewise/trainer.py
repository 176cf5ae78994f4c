"""The three-stage progressive-resizing fine-tuning protocol.

A protocol is an ordered list of stages, each with an image size and one or
two steps (a head-only warmup and/or a full fine-tune with discriminative
learning rates).  Before each stage the LR range test can propose a rate;
in interactive mode the run parks in ``awaiting_lr`` until an operator
submits one, with a timeout fallback to the automatic suggestion.
"""

from __future__ import annotations

import json
import logging
import math
import queue
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import ops
from .checkpoint import load_checkpoint, save_checkpoint
from .data import (
    AugmentPolicy,
    BatchStream,
    DatasetManifest,
    IMAGENET_STATS,
    NormalizationStats,
    load_manifest,
)
from .errors import ConfigError, StagewiseError
from .layers import Model, ResNetConfig, build_resnet, replace_head, \
    assign_layer_groups, set_frozen
from .metrics import evaluate
from .optim import Adam, LrCurve, LrFindConfig, discriminative_lrs, lr_range_test

log = logging.getLogger(__name__)

HEAD_ONLY = "head_only"
ALL_TRAINABLE = "all_trainable"


class TrainingDiverged(StagewiseError):
    """Raised when a training loss stops being finite."""

    def __init__(self, stage: int, step: int, epoch: int, loss: float):
        self.stage, self.step, self.epoch = stage, step, epoch
        super().__init__(
            f"non-finite loss {loss} at stage {stage} step {step} epoch {epoch}")


# ---------------------------------------------------------------------------
# plan types
# ---------------------------------------------------------------------------

@dataclass
class LrPolicy:
    kind: str                         # "fixed" | "discriminative"
    lr: Optional[float] = None        # fixed rate
    lr_first: Optional[float] = None  # discriminative endpoints; None = derive
    lr_last: Optional[float] = None
    mode: str = "linear"
    pinned: bool = False              # explicit values survive LR selection

    def __post_init__(self):
        if self.kind not in ("fixed", "discriminative"):
            raise ConfigError(f"unknown lr policy kind {self.kind!r}")
        if self.kind == "fixed" and self.lr is not None and self.lr <= 0:
            raise ConfigError("fixed lr must be positive")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "lr": self.lr, "lr_first": self.lr_first,
                "lr_last": self.lr_last, "mode": self.mode,
                "pinned": self.pinned}

    @staticmethod
    def from_dict(d: dict) -> "LrPolicy":
        return LrPolicy(**d)


@dataclass
class StepPlan:
    epochs: int
    freeze: str
    policy: LrPolicy

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"step epochs must be >= 1, got {self.epochs}")
        if self.freeze not in (HEAD_ONLY, ALL_TRAINABLE):
            raise ConfigError(f"unknown freeze mode {self.freeze!r}")

    def to_dict(self) -> dict:
        return {"epochs": self.epochs, "freeze": self.freeze,
                "policy": self.policy.to_dict()}

    @staticmethod
    def from_dict(d: dict) -> "StepPlan":
        return StepPlan(epochs=d["epochs"], freeze=d["freeze"],
                        policy=LrPolicy.from_dict(d["policy"]))


@dataclass
class StagePlan:
    image_size: tuple[int, int]
    steps: list[StepPlan]
    lr_find: bool = False

    def __post_init__(self):
        if isinstance(self.image_size, int):
            self.image_size = (self.image_size, self.image_size)
        self.image_size = tuple(self.image_size)
        if not self.steps:
            raise ConfigError("a stage needs at least one step")
        freezes = [s.freeze for s in self.steps]
        if freezes not in ([HEAD_ONLY], [ALL_TRAINABLE],
                           [HEAD_ONLY, ALL_TRAINABLE]):
            raise ConfigError(
                "a stage is at most one head_only step followed by at most "
                f"one all_trainable step, got {freezes}")

    @property
    def epochs(self) -> int:
        return sum(s.epochs for s in self.steps)

    def to_dict(self) -> dict:
        return {"image_size": list(self.image_size),
                "steps": [s.to_dict() for s in self.steps],
                "lr_find": self.lr_find}

    @staticmethod
    def from_dict(d: dict) -> "StagePlan":
        return StagePlan(image_size=tuple(d["image_size"]),
                         steps=[StepPlan.from_dict(s) for s in d["steps"]],
                         lr_find=d.get("lr_find", False))


@dataclass
class ProtocolConfig:
    stages: list[StagePlan]
    manifest_path: str
    checkpoint_dir: str
    model: ResNetConfig = field(default_factory=ResNetConfig)
    batch_size: int = 32
    seed: int = 0
    n_groups: int = 6
    stats: NormalizationStats = IMAGENET_STATS
    augment: AugmentPolicy = field(default_factory=AugmentPolicy)
    init_checkpoint: Optional[str] = None   # pretrained body import
    interactive_timeout_s: float = 60.0
    lr_find_config: LrFindConfig = field(default_factory=LrFindConfig)

    def __post_init__(self):
        if not self.stages:
            raise ConfigError("at least one stage required")
        sizes = [s.image_size for s in self.stages]
        for a, b in zip(sizes, sizes[1:]):
            if b[0] < a[0] or b[1] < a[1]:
                raise ConfigError(
                    f"stage image sizes must be nondecreasing, got {sizes}")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 for batch statistics")

    @property
    def total_epochs(self) -> int:
        return sum(s.epochs for s in self.stages)

    def to_dict(self) -> dict:
        return {
            "stages": [s.to_dict() for s in self.stages],
            "manifest_path": self.manifest_path,
            "checkpoint_dir": self.checkpoint_dir,
            "model": self.model.to_dict(),
            "batch_size": self.batch_size,
            "seed": self.seed,
            "n_groups": self.n_groups,
            "stats": self.stats.to_dict(),
            "augment": self.augment.to_dict(),
            "init_checkpoint": self.init_checkpoint,
            "interactive_timeout_s": self.interactive_timeout_s,
            "lr_find_config": {
                "lr_min": self.lr_find_config.lr_min,
                "lr_max": self.lr_find_config.lr_max,
                "n_iters": self.lr_find_config.n_iters,
                "smoothing": self.lr_find_config.smoothing,
                "divergence_factor": self.lr_find_config.divergence_factor,
            },
        }

    @staticmethod
    def from_dict(d: dict) -> "ProtocolConfig":
        try:
            return ProtocolConfig(
                stages=[StagePlan.from_dict(s) for s in d["stages"]],
                manifest_path=d["manifest_path"],
                checkpoint_dir=d["checkpoint_dir"],
                model=ResNetConfig.from_dict(d["model"]) if "model" in d
                else ResNetConfig(),
                batch_size=d.get("batch_size", 32),
                seed=d.get("seed", 0),
                n_groups=d.get("n_groups", 6),
                stats=NormalizationStats.from_dict(d["stats"])
                if "stats" in d else IMAGENET_STATS,
                augment=AugmentPolicy.from_dict(d["augment"])
                if "augment" in d else AugmentPolicy(),
                init_checkpoint=d.get("init_checkpoint"),
                interactive_timeout_s=d.get("interactive_timeout_s", 60.0),
                lr_find_config=LrFindConfig(**d["lr_find_config"])
                if "lr_find_config" in d else LrFindConfig(),
            )
        except KeyError as exc:
            raise ConfigError(f"config missing field {exc.args[0]!r}") from None

    @staticmethod
    def from_json(path: str | Path) -> "ProtocolConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}:{exc.lineno}: invalid JSON: {exc.msg}") \
                from None
        return ProtocolConfig.from_dict(d)


# ---------------------------------------------------------------------------
# canonical protocols
# ---------------------------------------------------------------------------

def default_protocol(manifest_path: str = "manifest.csv",
                     checkpoint_dir: str = "runs",
                     seed: int = 0) -> ProtocolConfig:
    """The published 41-epoch schedule: 128 -> 224 -> 229.

    Stage I trains the new head for 3 epochs at 1e-3 and fine-tunes all
    layers for 5; Stage II repeats at 224 with 1e-4; Stage III fine-tunes
    everything for 25 epochs between 1e-6 (earliest group) and 1e-4 (head).
    """
    def warm(lr):
        return StepPlan(3, HEAD_ONLY, LrPolicy("fixed", lr=lr))

    def full(first=None, last=None, pinned=False):
        return StepPlan(5, ALL_TRAINABLE,
                        LrPolicy("discriminative", lr_first=first,
                                 lr_last=last, pinned=pinned))

    stage3 = StepPlan(25, ALL_TRAINABLE,
                      LrPolicy("discriminative", lr_first=1e-6, lr_last=1e-4,
                               pinned=True))
    return ProtocolConfig(
        stages=[
            StagePlan((128, 128), [warm(1e-3), full()]),
            StagePlan((224, 224), [warm(1e-4), full()]),
            StagePlan((229, 229), [stage3]),
        ],
        manifest_path=manifest_path,
        checkpoint_dir=checkpoint_dir,
        seed=seed,
    )


def desk_protocol(manifest_path: str, checkpoint_dir: str,
                  seed: int = 0, lr_find: bool = False) -> ProtocolConfig:
    """Desk-scale preset: identical step structure at sizes 32/48/64 on the
    mini model, so the full protocol logic runs in minutes."""
    base = default_protocol(manifest_path, checkpoint_dir, seed)
    sizes = [(32, 32), (48, 48), (64, 64)]
    stages = [replace(stage, image_size=size, lr_find=lr_find)
              for stage, size in zip(base.stages, sizes)]
    return ProtocolConfig(
        stages=stages, manifest_path=manifest_path,
        checkpoint_dir=checkpoint_dir, model=ResNetConfig.mini(seed=seed),
        seed=seed, batch_size=32,
    )


# ---------------------------------------------------------------------------
# run state
# ---------------------------------------------------------------------------

@dataclass
class RunState:
    status: str = "idle"     # idle|lrfind|training|awaiting_lr|done|failed
    stage: int = 0
    step: int = 0
    epoch: int = 0           # epoch within the current step
    epochs_completed: int = 0
    total_epochs: int = 0
    history: list[dict] = field(default_factory=list)
    lr_choices: list[dict] = field(default_factory=list)
    error: Optional[str] = None

    def snapshot(self) -> dict:
        return {
            "status": self.status,
            "stage": self.stage,
            "step": self.step,
            "epoch": self.epoch,
            "epochs_completed": self.epochs_completed,
            "total_epochs": self.total_epochs,
            "history": [dict(h) for h in self.history],
            "lr_choices": [dict(c) for c in self.lr_choices],
            "error": self.error,
        }


@dataclass
class Hooks:
    """Observation points; every callback is optional."""

    on_status: Optional[Callable[[RunState], None]] = None
    on_epoch: Optional[Callable[[dict], None]] = None
    on_step_start: Optional[Callable[[int, int, list[float]], None]] = None
    on_step_end: Optional[Callable[[int, int, Model], None]] = None
    on_lr_curve: Optional[Callable[[int, LrCurve], None]] = None

    def status(self, state: RunState) -> None:
        if self.on_status:
            self.on_status(state)

    def epoch(self, record: dict) -> None:
        if self.on_epoch:
            self.on_epoch(record)

    def step_start(self, stage: int, step: int, lrs: list[float]) -> None:
        if self.on_step_start:
            self.on_step_start(stage, step, lrs)

    def step_end(self, stage: int, step: int, model: Model) -> None:
        if self.on_step_end:
            self.on_step_end(stage, step, model)

    def lr_curve(self, stage: int, curve: LrCurve) -> None:
        if self.on_lr_curve:
            self.on_lr_curve(stage, curve)


# ---------------------------------------------------------------------------
# LR resolution
# ---------------------------------------------------------------------------

def _resolve_step_lrs(plan: StagePlan, step: StepPlan, n_groups: int) -> list[float]:
    """Concrete per-group rates for one step; derivation must be complete."""
    policy = step.policy
    if policy.kind == "fixed":
        if policy.lr is None:
            raise ConfigError("fixed lr policy left unresolved")
        return [policy.lr] * n_groups
    first, last = policy.lr_first, policy.lr_last
    if last is None:
        # unquantified full fine-tune: a tenth of the stage's head-step rate
        head_steps = [s for s in plan.steps
                      if s.policy.kind == "fixed" and s.policy.lr is not None]
        if not head_steps:
            raise ConfigError(
                "discriminative policy has no endpoints and no fixed-rate "
                "step to derive them from")
        last = head_steps[0].policy.lr / 10.0
    if first is None:
        first = last / 100.0
    return discriminative_lrs(first, last, n_groups, policy.mode)


def apply_lr_selection(plan: StagePlan, chosen_lr: float) -> StagePlan:
    """Map a selected rate into the stage's steps, honoring pinned policies.

    Fixed steps adopt the rate directly; discriminative steps use it as
    their head endpoint with a hundredth of it at the earliest group.
    """
    new_steps = []
    for step in plan.steps:
        policy = step.policy
        if policy.pinned:
            new_steps.append(step)
            continue
        if policy.kind == "fixed":
            policy = replace(policy, lr=chosen_lr)
        else:
            policy = replace(policy, lr_first=chosen_lr / 100.0,
                             lr_last=chosen_lr)
        new_steps.append(replace(step, policy=policy))
    return replace(plan, steps=new_steps)


# ---------------------------------------------------------------------------
# execution
# ---------------------------------------------------------------------------

def _train_epoch(model: Model, stream: BatchStream, opt: Adam,
                 epoch_index: int) -> float:
    losses = []
    for batch in stream.epoch(epoch_index):
        opt.zero_grad()
        logits = model.forward(batch.images, training=True)
        loss = ops.cross_entropy(logits, batch.labels)
        value = loss.item()
        if not math.isfinite(value):
            raise ValueError(value)  # wrapped with coordinates by the caller
        loss.backward()
        opt.step()
        losses.append(value)
    return float(np.mean(losses))


def run_stage(model: Model, plan: StagePlan, stage_idx: int,
              config: ProtocolConfig, manifest: DatasetManifest,
              state: RunState, hooks: Hooks,
              cache: Optional[dict] = None) -> Adam:
    """Execute one stage's steps; returns the last step's optimizer."""
    train_stream = BatchStream(manifest, "train", plan.image_size,
                               config.batch_size, seed=config.seed,
                               augment_policy=config.augment,
                               stats=config.stats, cache=cache)
    test_stream = BatchStream(manifest, "test", plan.image_size,
                              config.batch_size, stats=config.stats,
                              cache=cache)
    opt: Optional[Adam] = None
    for step_idx, step in enumerate(plan.steps):
        set_frozen(model, step.freeze)
        lrs = _resolve_step_lrs(plan, step, model.n_groups)
        opt = Adam(model, lrs)
        hooks.step_start(stage_idx, step_idx, lrs)
        state.step = step_idx
        for epoch_idx in range(step.epochs):
            state.epoch = epoch_idx
            state.status = "training"
            hooks.status(state)
            try:
                train_loss = _train_epoch(model, train_stream, opt,
                                          state.epochs_completed)
            except ValueError as exc:
                state.status = "failed"
                state.error = f"stage {stage_idx} step {step_idx} epoch {epoch_idx}"
                hooks.status(state)
                raise TrainingDiverged(stage_idx, step_idx, epoch_idx,
                                       exc.args[0]) from None
            report = evaluate(model, test_stream)
            state.epochs_completed += 1
            record = {
                "stage": stage_idx,
                "step": step_idx,
                "epoch": state.epochs_completed,
                "train_loss": round(train_loss, 6),
                "test_accuracy": report.accuracy,
                "lrs": lrs,
            }
            state.history.append(record)
            hooks.epoch(record)
        hooks.step_end(stage_idx, step_idx, model)
    return opt


def _stage_checkpoint_path(config: ProtocolConfig, stage_idx: int) -> Path:
    return Path(config.checkpoint_dir) / f"stage{stage_idx + 1}.ckpt"


def run_protocol(config: ProtocolConfig,
                 model: Optional[Model] = None,
                 interactive: bool = False,
                 lr_choices: Optional[queue.Queue] = None,
                 hooks: Optional[Hooks] = None,
                 resume_from: Optional[str] = None,
                 ) -> tuple[Model, RunState, Path]:
    """Run every stage, chaining weights, with optional LR selection.

    In interactive mode each stage that ran the range test parks in
    ``awaiting_lr`` until a choice arrives on ``lr_choices`` (or the
    timeout elapses, falling back to the automatic suggestion).  Returns
    the trained model, the final run state, and the last checkpoint path.
    """
    hooks = hooks or Hooks()
    ckpt_dir = Path(config.checkpoint_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    manifest = load_manifest(config.manifest_path)

    state = RunState(total_epochs=config.total_epochs)
    events_path = ckpt_dir / "events.jsonl"

    start_stage = 0
    if resume_from is not None:
        ckpt = load_checkpoint(resume_from)
        model = ckpt.build_model()
        start_stage = int(ckpt.meta["position"]["next_stage"])
        state.epochs_completed = int(ckpt.meta["position"]["epochs_completed"])
        events_mode = "a"
    else:
        events_mode = "w"
        if model is None:
            if config.init_checkpoint:
                base = load_checkpoint(config.init_checkpoint).build_model()
                model = replace_head(base, config.model.n_classes,
                                     seed=config.seed)
            else:
                model = build_resnet(config.model)
    assign_layer_groups(model, config.n_groups)
    model.reseed_dropout(config.seed)

    user_epoch_hook = hooks.on_epoch
    events_file = open(events_path, events_mode)

    def on_epoch(record: dict) -> None:
        events_file.write(json.dumps(record, sort_keys=True) + "\n")
        events_file.flush()
        if user_epoch_hook:
            user_epoch_hook(record)

    hooks = replace(hooks, on_epoch=on_epoch)
    cache: dict = {}
    last_ckpt = _stage_checkpoint_path(config, start_stage - 1) \
        if start_stage else None

    try:
        for stage_idx in range(start_stage, len(config.stages)):
            plan = config.stages[stage_idx]
            state.stage = stage_idx
            if plan.lr_find:
                state.status = "lrfind"
                hooks.status(state)
                train_stream = BatchStream(
                    manifest, "train", plan.image_size, config.batch_size,
                    seed=config.seed, augment_policy=config.augment,
                    stats=config.stats, cache=cache)
                curve = lr_range_test(
                    model, train_stream.epoch(1_000_000 + stage_idx),
                    config.lr_find_config)
                hooks.lr_curve(stage_idx, curve)
                chosen = curve.suggested_lr
                source = "auto"
                if interactive:
                    state.status = "awaiting_lr"
                    hooks.status(state)
                    choice = _wait_for_choice(lr_choices, stage_idx,
                                              config.interactive_timeout_s)
                    if choice is not None:
                        chosen = choice
                        source = "operator"
                    else:
                        log.warning(
                            "stage %d: no LR choice within %.0fs; falling "
                            "back to suggested %.3g", stage_idx,
                            config.interactive_timeout_s, chosen)
                state.lr_choices.append(
                    {"stage": stage_idx, "lr": chosen, "source": source})
                plan = apply_lr_selection(plan, chosen)
            opt = run_stage(model, plan, stage_idx, config, manifest, state,
                            hooks, cache=cache)
            last_ckpt = _stage_checkpoint_path(config, stage_idx)
            save_checkpoint(
                last_ckpt, model,
                meta={
                    "position": {"next_stage": stage_idx + 1,
                                 "epochs_completed": state.epochs_completed},
                    "seeds": {"seed": config.seed},
                    "optim": opt.meta() if opt else None,
                },
                optim_arrays=opt.state_arrays() if opt else None)
        state.status = "done"
        hooks.status(state)
    except TrainingDiverged:
        raise
    finally:
        events_file.close()
    return model, state, last_ckpt


def _wait_for_choice(channel: Optional[queue.Queue], stage_idx: int,
                     timeout_s: float) -> Optional[float]:
    """Single-consumer read of {stage, lr}; stale stages are discarded."""
    if channel is None:
        time.sleep(min(timeout_s, 0.01))
        return None
    deadline = time.monotonic() + timeout_s
    while True:
        remaining = deadline - time.monotonic()
        if remaining <= 0:
            return None
        try:
            msg = channel.get(timeout=remaining)
        except queue.Empty:
            return None
        if int(msg.get("stage", -1)) == stage_idx:
            return float(msg["lr"])
        log.warning("discarding LR choice for stage %s while at stage %d",
                    msg.get("stage"), stage_idx)
