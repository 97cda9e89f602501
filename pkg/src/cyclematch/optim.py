"""Adam / AMSGrad with separate learning rates for bias and weight tensors."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    v_max: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def zeros_like(cls, arrays: dict[str, np.ndarray]) -> "AdamState":
        return cls(
            0,
            {k: np.zeros_like(a) for k, a in arrays.items()},
            {k: np.zeros_like(a) for k, a in arrays.items()},
            {k: np.zeros_like(a) for k, a in arrays.items()},
        )

    def copy(self) -> "AdamState":
        return AdamState(
            self.step,
            {k: a.copy() for k, a in self.m.items()},
            {k: a.copy() for k, a in self.v.items()},
            {k: a.copy() for k, a in self.v_max.items()},
        )


def adam_update(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr,
    betas=(0.9, 0.999),
    eps=1e-8,
    amsgrad=True,
) -> AdamState:
    """In-place bias-corrected update of `params`; returns the advanced state.

    `lr` is a float or a callable mapping a parameter name to its rate.
    With `amsgrad` the second-moment estimate is replaced by its running max.
    """
    b1, b2 = betas
    state.step += 1
    t = state.step
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if amsgrad:
            np.maximum(state.v_max[name], v, out=state.v_max[name])
            second = state.v_max[name]
        else:
            second = v
        rate = lr(name) if callable(lr) else lr
        if rate == 0:
            continue
        denom = np.sqrt(second / bc2) + eps
        p -= rate * (m / bc1) / denom
    return state
