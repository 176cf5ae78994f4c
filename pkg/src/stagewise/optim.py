"""Grouped Adam, discriminative learning rates, and the LR range test."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterator, Optional

import numpy as np

from . import ops
from .errors import ConfigError, ContractError
from .layers import Model

Number = float


def discriminative_lrs(lr_first: float, lr_last: float, n_groups: int,
                       mode: str = "linear") -> list[float]:
    """Per-group learning rates from the earliest group to the head.

    ``linear`` spaces the interior evenly in value ("equidistant"),
    ``geometric`` evenly in log-value.  Endpoints are exact.
    """
    if lr_first <= 0 or lr_last <= 0:
        raise ConfigError("learning rates must be positive")
    if lr_first > lr_last:
        raise ConfigError(
            f"lr_first must not exceed lr_last, got {lr_first} > {lr_last}")
    if n_groups < 1:
        raise ConfigError(f"n_groups must be >= 1, got {n_groups}")
    if n_groups == 1:
        if lr_first != lr_last:
            raise ConfigError("a single group needs lr_first == lr_last")
        return [lr_first]
    if mode == "linear":
        rates = np.linspace(lr_first, lr_last, n_groups)
    elif mode == "geometric":
        rates = np.geomspace(lr_first, lr_last, n_groups)
    else:
        raise ConfigError(f"unknown spacing mode {mode!r}")
    # float rounding in the interior must not break monotonicity or endpoints
    rates[0], rates[-1] = lr_first, lr_last
    rates = np.minimum(np.maximum.accumulate(rates), lr_last)
    return [float(r) for r in rates]


class Adam:
    """Bias-corrected Adam over a model's parameter table.

    Learning rates are per layer group; frozen parameters are skipped
    entirely (no moments allocated, no update applied).  One optimizer
    instance serves one protocol step, so the step counter is global.
    """

    def __init__(self, model: Model, lrs: float | list[float],
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if isinstance(lrs, (int, float)):
            lrs = [float(lrs)] * model.n_groups
        if len(lrs) != model.n_groups:
            raise ConfigError(
                f"{len(lrs)} learning rates for {model.n_groups} groups")
        if any(lr <= 0 for lr in lrs):
            raise ConfigError("learning rates must be positive")
        self.model = model
        self.lrs = [float(lr) for lr in lrs]
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def set_lrs(self, lrs: list[float]) -> None:
        if len(lrs) != self.model.n_groups:
            raise ConfigError(f"{len(lrs)} learning rates for "
                              f"{self.model.n_groups} groups")
        self.lrs = [float(lr) for lr in lrs]

    def zero_grad(self) -> None:
        self.model.zero_grad()

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in self.model.named_params().items():
            if not p.requires_grad:
                continue
            if p.grad is None:
                raise ContractError(
                    f"adam step: unfrozen parameter {name} has no gradient")
            g = p.grad
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            lr = self.lrs[self.model.param_group(name)]
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    # -- checkpoint payload ----------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name, arr in self.m.items():
            out[f"optim.m.{name}"] = arr
        for name, arr in self.v.items():
            out[f"optim.v.{name}"] = arr
        return out

    def meta(self) -> dict:
        return {"t": self.t, "beta1": self.beta1, "beta2": self.beta2,
                "eps": self.eps, "lrs": self.lrs}

    def load_state(self, meta: dict, arrays: dict[str, np.ndarray]) -> None:
        self.t = int(meta["t"])
        self.beta1, self.beta2 = meta["beta1"], meta["beta2"]
        self.eps = meta["eps"]
        self.lrs = list(meta["lrs"])
        for key, arr in arrays.items():
            if key.startswith("optim.m."):
                self.m[key[len("optim.m."):]] = arr.copy()
            elif key.startswith("optim.v."):
                self.v[key[len("optim.v."):]] = arr.copy()


# ---------------------------------------------------------------------------
# learning-rate range test
# ---------------------------------------------------------------------------

@dataclass
class LrFindConfig:
    lr_min: float = 1e-7
    lr_max: float = 10.0
    n_iters: int = 100
    smoothing: float = 0.98
    divergence_factor: float = 4.0

    def __post_init__(self):
        if self.lr_min >= self.lr_max:
            raise ConfigError("lr_min must be below lr_max")
        if self.n_iters < 10:
            raise ConfigError("range test needs at least 10 iterations")
        if not 0.0 <= self.smoothing < 1.0:
            raise ConfigError("smoothing must be in [0, 1)")


@dataclass
class LrSample:
    lr: float
    loss: float
    smoothed: float


@dataclass
class LrCurve:
    samples: list[LrSample]
    suggested_lr: float
    stop_reason: str  # "diverged" | "exhausted"

    def to_json_dict(self) -> dict:
        return {
            "samples": [{"lr": s.lr, "loss": s.loss, "smoothed": s.smoothed}
                        for s in self.samples],
            "suggested_lr": self.suggested_lr,
            "stop_reason": self.stop_reason,
        }

    @staticmethod
    def from_json_dict(d: dict) -> "LrCurve":
        return LrCurve(
            samples=[LrSample(s["lr"], s["loss"], s["smoothed"])
                     for s in d["samples"]],
            suggested_lr=d["suggested_lr"],
            stop_reason=d["stop_reason"],
        )


def lr_sweep(step_fn: Callable[[float], float], cfg: LrFindConfig) -> LrCurve:
    """Sweep exponentially growing learning rates through a step function.

    ``step_fn(lr)`` performs one training step at that rate and returns the
    raw loss.  The sweep stops early once the bias-corrected smoothed loss
    exceeds ``divergence_factor`` times the best smoothed loss seen.  The
    suggestion is the rate at the steepest negative slope of the smoothed
    curve.
    """
    lrs = np.geomspace(cfg.lr_min, cfg.lr_max, cfg.n_iters)
    beta = cfg.smoothing
    samples: list[LrSample] = []
    ema = 0.0
    best = math.inf
    stop_reason = "exhausted"
    for i, lr in enumerate(lrs):
        loss = float(step_fn(float(lr)))
        if not math.isfinite(loss):
            if i == 0:
                raise ContractError(
                    f"range test: non-finite loss {loss} on the first "
                    f"iteration (lr={lr:.3g}); the model is broken before "
                    f"any sweep step")
            stop_reason = "diverged"
            break
        ema = beta * ema + (1.0 - beta) * loss
        smoothed = ema / (1.0 - beta ** (i + 1))
        samples.append(LrSample(float(lr), loss, smoothed))
        best = min(best, smoothed)
        if smoothed > cfg.divergence_factor * best:
            stop_reason = "diverged"
            break
    if len(samples) >= 2:
        slopes = np.gradient([s.smoothed for s in samples])
        suggested = samples[int(np.argmin(slopes))].lr
    else:
        suggested = samples[0].lr if samples else cfg.lr_min
    return LrCurve(samples=samples, suggested_lr=suggested,
                   stop_reason=stop_reason)


def lr_range_test(model: Model, batches: Iterator, cfg: LrFindConfig,
                  beta1: float = 0.9, beta2: float = 0.999) -> LrCurve:
    """Run the sweep on a disposable copy of the model with Adam steps.

    The caller's model and optimizer are untouched; ``batches`` must yield
    at least one batch and is cycled as needed.
    """
    probe = model.clone()
    opt = Adam(probe, cfg.lr_min, beta1=beta1, beta2=beta2)
    cached: list = []
    source = iter(batches)

    def next_batch():
        nonlocal source
        try:
            b = next(source)
            cached.append(b)
            return b
        except StopIteration:
            if not cached:
                raise ContractError("range test: the batch stream is empty")
            source = iter(cached)
            return next(source)

    def step(lr: float) -> float:
        batch = next_batch()
        opt.set_lrs([lr] * probe.n_groups)
        opt.zero_grad()
        logits = probe.forward(batch.images, training=True)
        loss = ops.cross_entropy(logits, batch.labels)
        loss.backward()
        opt.step()
        return loss.item()

    return lr_sweep(step, cfg)


def quadratic_selftest(cfg: Optional[LrFindConfig] = None,
                       curvature: float = 1.0, theta0: float = 1.0) -> LrCurve:
    """Range-test oracle on the scalar quadratic with plain gradient steps.

    Each iteration probes one gradient step from theta0 at the swept rate
    and reports the post-step loss.  A step on half of
    ``curvature * theta**2`` contracts only for rates below 2/curvature, so
    the sweep must detect divergence past that bound (well before lr_max)
    and suggest a rate under it.
    """
    cfg = cfg or LrFindConfig()

    def step(lr: float) -> float:
        theta = theta0 - lr * curvature * theta0
        return 0.5 * curvature * theta * theta

    return lr_sweep(step, cfg)
