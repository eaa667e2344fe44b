"""LAMB optimizer restricted to the trainable partition, plus the LR schedule.

The update for a parameter tensor w with gradient g:

    m <- beta1*m + (1-beta1)*g          v <- beta2*v + (1-beta2)*g^2
    mhat = m/(1-beta1^t)                vhat = v/(1-beta2^t)
    u = mhat/(sqrt(vhat)+eps) + weight_decay*w      (no decay on 1-D params:
                                                     biases and layernorms)
    r = ||w|| / ||u||  if both norms > 0 else 1     (trust ratio)
    w <- w - lr * r * u

Optimizer state exists only for currently trainable parameters; stage
transitions rebuild it (fresh moments, step counter reset, warmup restarts).
Carrying moments for parameters that stay trainable across a boundary is
available behind `carry_from` but off by default.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError


@dataclass
class LambHyper:
    peak_lr: float = 0.00088
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-6
    weight_decay: float = 0.01
    warmup_steps: int = 10000
    total_steps: int = 1000000

    def validate(self):
        problems = []
        if not 0.0 < self.beta1 < 1.0 or not 0.0 < self.beta2 < 1.0:
            problems.append(f"betas must be in (0, 1), got {self.beta1}, {self.beta2}")
        if self.peak_lr <= 0:
            problems.append(f"peak_lr must be > 0, got {self.peak_lr}")
        if self.eps <= 0:
            problems.append("eps must be > 0")
        if self.warmup_steps < 0 or self.warmup_steps > self.total_steps:
            problems.append(
                f"warmup_steps ({self.warmup_steps}) must be in [0, total_steps "
                f"({self.total_steps})]"
            )
        if problems:
            raise ConfigError("; ".join(problems))
        return self


@dataclass
class LambState:
    """First/second moments per trainable parameter id, plus the step counter."""

    moments: dict = field(default_factory=dict)  # id -> (m, v) float64 arrays
    t: int = 0

    def covered_ids(self):
        return frozenset(self.moments)


def lr_at(step, hyper):
    """Linear warmup 0 -> peak over warmup_steps, then linear decay to 0."""
    if step < 0 or step > hyper.total_steps:
        raise ValueError(f"step {step} outside [0, {hyper.total_steps}]")
    if hyper.warmup_steps > 0 and step <= hyper.warmup_steps:
        return hyper.peak_lr * step / hyper.warmup_steps
    if hyper.total_steps == hyper.warmup_steps:
        return hyper.peak_lr
    return hyper.peak_lr * (hyper.total_steps - step) / (hyper.total_steps - hyper.warmup_steps)


def rebuild_state(model, carry_from=None):
    """Fresh zeroed state covering exactly the trainable set.

    With `carry_from`, moments of parameters that remain trainable are
    copied over (step counter still resets, so bias correction and warmup
    restart either way).
    """
    state = LambState()
    for p in model.trainable_parameters():
        if carry_from is not None and p.id in carry_from.moments:
            m, v = carry_from.moments[p.id]
            state.moments[p.id] = (m.copy(), v.copy())
        else:
            state.moments[p.id] = (np.zeros_like(p.data), np.zeros_like(p.data))
    return state


def lamb_step(model, state, hyper, step, lr_scale=1.0, trust_ratio=True):
    """Apply one LAMB update to every trainable parameter.

    A missing gradient on a trainable parameter is an error: it signals a
    backward-pruning bug, not a legitimate no-op. Frozen parameters are
    never read or written. `trust_ratio=False` reduces the update to
    bias-corrected Adam (used by the equivalence tests).
    """
    lr = lr_at(step, hyper) * lr_scale
    b1, b2 = hyper.beta1, hyper.beta2
    state.t += 1
    t = state.t
    for p in model.trainable_parameters():
        if p.id not in state.moments:
            raise RuntimeError(f"optimizer state missing for trainable parameter {p.id}")
        g = p.grad
        if g is None:
            raise RuntimeError(
                f"no gradient for trainable parameter {p.id}; "
                "backward pruning dropped a live subgraph"
            )
        m, v = state.moments[p.id]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        mhat = m / (1.0 - b1**t)
        vhat = v / (1.0 - b2**t)
        update = mhat / (np.sqrt(vhat) + hyper.eps)
        if hyper.weight_decay and p.data.ndim >= 2:
            update = update + hyper.weight_decay * p.data
        if trust_ratio:
            w_norm = float(np.linalg.norm(p.data))
            u_norm = float(np.linalg.norm(update))
            ratio = w_norm / u_norm if w_norm > 0.0 and u_norm > 0.0 else 1.0
        else:
            ratio = 1.0
        p.data -= lr * ratio * update
