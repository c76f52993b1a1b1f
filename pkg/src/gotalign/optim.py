"""Layer-wise adaptive-rate optimizer and the warmup + cosine schedule.

Each parameter's update is the momentum-filtered gradient (plus weight
decay), scaled by a trust ratio trust_coefficient * ||w|| / ||g||.
Bias-like parameters (row vectors, gating scalars) skip both weight
decay and trust scaling, and use their own base learning rate. The
schedule ramps linearly from zero over the warmup epochs, then follows
a half-cosine down to base * end_lr_factor at the final step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .model import ModelParams, is_bias_like
from .numerics import Matrix, NumericFailure, PreconditionError


@dataclass(frozen=True)
class OptimConfig:
    base_lr_weights: float = 0.1
    base_lr_biases: float = 0.0048
    momentum: float = 0.9
    weight_decay: float = 1e-6
    warmup_epochs: int = 2
    total_epochs: int = 10
    end_lr_factor: float = 0.001
    trust_coefficient: float = 0.001
    exclude_bias_and_norm_from_decay: bool = True
    # Base rates are doubled before scheduling; scope "biases" restricts
    # the doubling to the bias group (the stated-scope reading is
    # ambiguous, so both are available).
    lr_double_scope: str = "both"  # "both", "biases", or "none"

    def __post_init__(self):
        if self.warmup_epochs > self.total_epochs:
            raise PreconditionError("warmup_epochs must be <= total_epochs")
        if not 0.0 < self.end_lr_factor <= 1.0:
            raise PreconditionError("end_lr_factor must lie in (0, 1]")
        if self.lr_double_scope not in ("both", "biases", "none"):
            raise PreconditionError(f"unknown lr_double_scope {self.lr_double_scope!r}")

    def effective_base(self, which: str) -> float:
        if which == "weights":
            base = self.base_lr_weights
            doubled = self.lr_double_scope == "both"
        elif which == "biases":
            base = self.base_lr_biases
            doubled = self.lr_double_scope in ("both", "biases")
        else:
            raise PreconditionError(f"which must be 'weights' or 'biases', got {which!r}")
        return base * (2.0 if doubled else 1.0)


@dataclass
class LarsState:
    momentum: dict[str, Matrix] = field(default_factory=dict)

    def blobs(self) -> dict[str, Matrix]:
        return {f"opt.mu.{k}": v for k, v in self.momentum.items()}

    @classmethod
    def from_blobs(cls, blobs: dict[str, Matrix]) -> "LarsState":
        prefix = "opt.mu."
        return cls({k[len(prefix):]: v for k, v in blobs.items() if k.startswith(prefix)})


_TRUST_EPS = 1e-8


def lars_step(
    params: ModelParams,
    grads: dict[str, Matrix],
    state: LarsState,
    lr_weights: float,
    lr_biases: float,
    cfg: OptimConfig,
    trust_ratio_override: float | None = None,
) -> None:
    """One in-place update. Bias-like parameters skip decay and trust
    scaling per cfg; passing trust_ratio_override=1.0 reduces the update
    to plain SGD with momentum."""
    if lr_weights < 0 or lr_biases < 0:
        raise PreconditionError("learning rates must be >= 0")
    for name in params.names():
        w = params.values[name]
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != w.shape:
            raise PreconditionError(
                f"gradient shape {g.shape} does not match {name} {w.shape}"
            )
        if not np.all(np.isfinite(g)):
            raise NumericFailure(f"non-finite gradient for parameter {name!r}")
        bias_like = is_bias_like(name, w)
        update = g
        if not (bias_like and cfg.exclude_bias_and_norm_from_decay):
            update = update + cfg.weight_decay * w
        if not bias_like:
            if trust_ratio_override is not None:
                ratio = trust_ratio_override
            else:
                w_norm = float(np.linalg.norm(w))
                u_norm = float(np.linalg.norm(update))
                if w_norm > 0.0 and u_norm > 0.0:
                    ratio = cfg.trust_coefficient * w_norm / (u_norm + _TRUST_EPS)
                else:
                    ratio = 1.0
            update = update * ratio
        mu = state.momentum.get(name)
        mu = update.copy() if mu is None else cfg.momentum * mu + update
        state.momentum[name] = mu
        lr = lr_biases if bias_like else lr_weights
        params.values[name] = w - lr * mu


def lr_at(step: int, steps_per_epoch: int, cfg: OptimConfig, which: str) -> float:
    """Learning rate at a global step: linear warmup, then cosine decay
    reaching base * end_lr_factor exactly at the final step."""
    if step < 0:
        raise PreconditionError("step must be >= 0")
    if steps_per_epoch < 1:
        raise PreconditionError("steps_per_epoch must be >= 1")
    base = cfg.effective_base(which)
    warmup_steps = cfg.warmup_epochs * steps_per_epoch
    total_steps = cfg.total_epochs * steps_per_epoch
    if warmup_steps > 0 and step < warmup_steps:
        return base * step / warmup_steps
    if total_steps <= warmup_steps:
        return base
    t = (min(step, total_steps) - warmup_steps) / (total_steps - warmup_steps)
    lo = cfg.end_lr_factor
    return base * (lo + (1.0 - lo) * 0.5 * (1.0 + math.cos(math.pi * t)))
