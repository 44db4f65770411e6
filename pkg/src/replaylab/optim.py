"""AdamW with decoupled weight decay, warmup + cosine/constant schedules,
and the stopping rules used by the experiment harness."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


@dataclass
class OptimizerConfig:
    peak_lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.02
    warmup_steps: int = 200
    schedule: str = "cosine"  # "cosine" | "constant"
    total_steps: int | None = None  # required for cosine

    def __post_init__(self):
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.schedule == "cosine" and self.total_steps is None:
            raise ValueError("cosine schedule needs total_steps")


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def init(cls, params: dict[str, np.ndarray]) -> "OptimizerState":
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
        )


def lr_at(config: OptimizerConfig, step: int) -> float:
    """Linear warmup to peak, then cosine decay to 0 (or constant)."""
    if step < 0:
        raise ValueError("step must be >= 0")
    if config.warmup_steps > 0 and step < config.warmup_steps:
        return config.peak_lr * step / config.warmup_steps
    if config.schedule == "constant":
        return config.peak_lr
    total = config.total_steps
    if step >= total:
        return 0.0
    u = (step - config.warmup_steps) / (total - config.warmup_steps)
    return config.peak_lr * 0.5 * (1.0 + math.cos(math.pi * u))


def adamw_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: OptimizerState,
    config: OptimizerConfig,
    lr_t: float,
) -> tuple[dict[str, np.ndarray], OptimizerState]:
    """One decoupled-weight-decay Adam update; mutates params/state in place
    and returns them. Weight decay applies to every parameter tensor."""
    if lr_t < 0:
        raise ValueError("lr_t must be >= 0")
    state.step += 1
    t = state.step
    b1, b2 = config.beta1, config.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for k, p in params.items():
        g = grads[k]
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {k!r}")
        m = state.m[k]
        v = state.v[k]
        m += (1.0 - b1) * (g - m)
        v += (1.0 - b2) * (g * g - v)
        m_hat = m / bc1
        v_hat = v / bc2
        p -= (lr_t * (m_hat / (np.sqrt(v_hat) + config.eps) + config.weight_decay * p)).astype(p.dtype)
    return params, state


# ---------------------------------------------------------------------------
# stopping rules
# ---------------------------------------------------------------------------


@dataclass
class StoppingRule:
    """fixed_steps(n) | target_loss(value, eval_every, max_epochs) |
    early_stopping(patience, eval_every)."""

    kind: str
    n_steps: int | None = None
    target: float | None = None
    eval_every: int = 200
    max_epochs: float = 100.0
    patience: int = 3

    def __post_init__(self):
        if self.kind not in ("fixed_steps", "target_loss", "early_stopping"):
            raise ValueError(f"unknown stopping rule {self.kind!r}")
        if self.kind == "fixed_steps" and not self.n_steps:
            raise ValueError("fixed_steps needs n_steps")
        if self.kind == "target_loss" and self.target is None:
            raise ValueError("target_loss needs a target value")


@dataclass
class StopDecision:
    stop: bool
    reason: str | None = None  # "target_reached" | "failed_to_converge" | "early_stopped"
    best_index: int | None = None  # for early stopping: index of the best eval


def should_stop(rule: StoppingRule, eval_losses: Sequence[float], epochs_elapsed: float = 0.0) -> StopDecision:
    """Decide from the ordered eval-loss history; empty history never stops.

    target_loss succeeds at the first eval at-or-below target and fails
    once epochs_elapsed exceeds max_epochs. early_stopping fires after
    `patience` evals without improvement, pointing at the best checkpoint.
    """
    if rule.kind == "fixed_steps":
        return StopDecision(stop=False)
    if not eval_losses:
        return StopDecision(stop=False)
    if rule.kind == "target_loss":
        if eval_losses[-1] <= rule.target:
            return StopDecision(stop=True, reason="target_reached")
        if epochs_elapsed > rule.max_epochs:
            return StopDecision(stop=True, reason="failed_to_converge")
        return StopDecision(stop=False)
    # early stopping
    best_idx = int(np.argmin(eval_losses))
    if len(eval_losses) - 1 - best_idx >= rule.patience:
        return StopDecision(stop=True, reason="early_stopped", best_index=best_idx)
    return StopDecision(stop=False, best_index=best_idx)
