"""Adam with decoupled weight decay, global-norm clipping, and lr schedules."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


class OptimError(RuntimeError):
    pass


@dataclass
class AdamState:
    betas: tuple[float, float] = (0.9, 0.95)
    eps: float = 1e-8
    weight_decay: float = 0.0
    clip_norm: float | None = None
    decay_names: frozenset[str] = frozenset()
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def global_grad_norm(grads: dict[str, np.ndarray]) -> float:
    total = 0.0
    for g in grads.values():
        total += float(np.square(g.astype(np.float64)).sum())
    return math.sqrt(total)


def clip_by_global_norm(grads: dict[str, np.ndarray], clip: float) -> tuple[dict[str, np.ndarray], float]:
    """Scale all gradients by a shared factor so their joint norm is <= clip."""
    norm = global_grad_norm(grads)
    if norm <= clip or norm == 0.0:
        return grads, norm
    scale = clip / norm
    return {k: g * np.asarray(scale, dtype=g.dtype) for k, g in grads.items()}, norm


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
              state: AdamState, lr: float) -> float:
    """One in-place update. Returns the pre-clip global gradient norm.

    Weight decay is decoupled (applied straight to the weights, scaled by lr)
    and only touches parameters named in state.decay_names.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise OptimError(f"non-finite gradient for parameter {name!r}")
    if state.clip_norm is not None:
        grads, norm = clip_by_global_norm(grads, state.clip_norm)
    else:
        norm = global_grad_norm(grads)
    state.step_count += 1
    b1, b2 = state.betas
    bc1 = 1.0 - b1 ** state.step_count
    bc2 = 1.0 - b2 ** state.step_count
    for name, g in grads.items():
        p = params[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        mhat = m / bc1
        vhat = v / bc2
        upd = mhat / (np.sqrt(vhat) + state.eps)
        if state.weight_decay and name in state.decay_names:
            upd = upd + state.weight_decay * p.data
        p.data -= np.asarray(lr, dtype=p.data.dtype) * upd.astype(p.data.dtype)
    return norm


@dataclass
class ScheduleConfig:
    mode: str = "atari"          # "atari": token warmup + cosine; "gym": step warmup + constant
    base_lr: float = 6e-4
    warmup_tokens: int = 512 * 20
    final_tokens: int = 6 * 500_000 * 30
    tokens_per_step: int = 1
    warmup_steps: int = 100_000
    min_mult: float = 0.1


def lr_schedule(step: int, cfg: ScheduleConfig) -> float:
    """Learning rate for optimizer step `step` (0-based).

    atari mode counts progress in consumed tokens: linear ramp to base_lr over
    warmup_tokens, then cosine decay toward min_mult * base_lr at final_tokens.
    gym mode ramps linearly over warmup_steps and stays constant after.
    """
    if cfg.mode == "gym":
        return cfg.base_lr * min(1.0, (step + 1) / cfg.warmup_steps)
    if cfg.mode != "atari":
        raise ValueError(f"unknown schedule mode {cfg.mode!r}")
    tokens = (step + 1) * cfg.tokens_per_step
    if tokens < cfg.warmup_tokens:
        return cfg.base_lr * tokens / max(1, cfg.warmup_tokens)
    span = max(1, cfg.final_tokens - cfg.warmup_tokens)
    progress = (tokens - cfg.warmup_tokens) / span
    mult = max(cfg.min_mult, 0.5 * (1.0 + math.cos(math.pi * min(1.0, progress))))
    return cfg.base_lr * mult
