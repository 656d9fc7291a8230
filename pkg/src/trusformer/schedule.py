from __future__ import annotations

import math


def warmup_cosine(step: int, warmup_steps: int, total_steps: int) -> float:
    """LR multiplier: linear 0 -> 1 over ``warmup_steps``, then cosine 1 -> 0."""
    if step < warmup_steps:
        return step / warmup_steps
    if total_steps <= warmup_steps:
        return 1.0
    progress = min((step - warmup_steps) / (total_steps - warmup_steps), 1.0)
    return 0.5 * (1.0 + math.cos(math.pi * progress))


def lr_lambda(warmup_epochs: int, epochs: int, steps_per_epoch: int):
    warm, total = warmup_epochs * steps_per_epoch, epochs * steps_per_epoch
    return lambda step: warmup_cosine(step, warm, total)
