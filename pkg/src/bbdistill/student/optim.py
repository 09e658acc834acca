"""AdamW with decoupled weight decay, two learning-rate groups and linear warmup."""
from dataclasses import dataclass, field

import numpy as np

HIDDEN_GROUP = frozenset({"w1", "b1"})


@dataclass
class OptimState:
    lr_hidden: float = 1e-3
    lr_output: float = 1e-2
    weight_decay: float = 0.01
    warmup_steps: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def lr_for(self, name):
        """Base learning rate of a parameter; w1/b1 are hidden, everything else output."""
        return self.lr_hidden if name in HIDDEN_GROUP else self.lr_output

    def warmup_factor(self):
        if self.warmup_steps <= 0:
            return 1.0
        return min(1.0, self.step / self.warmup_steps)

    def copy(self):
        return OptimState(
            self.lr_hidden, self.lr_output, self.weight_decay, self.warmup_steps,
            self.beta1, self.beta2, self.eps, self.step,
            {k: v.copy() for k, v in self.m.items()},
            {k: v.copy() for k, v in self.v.items()},
        )


def optim_step(state, params, grads):
    """One AdamW update. ``params``/``grads`` are StudentParams or dicts of arrays.

    Returns (new state, new params); the inputs are not modified.
    """
    as_dict = not isinstance(params, dict)
    p = params.as_dict() if as_dict else params
    g = grads.as_dict() if as_dict else grads
    for name, grad in g.items():
        if not np.all(np.isfinite(grad)):
            raise FloatingPointError(f"non-finite gradient for {name}")

    new = state.copy()
    factor = state.warmup_factor()
    t = state.step + 1
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    out = {}
    for name, value in p.items():
        grad = g[name]
        m = new.m.get(name, np.zeros_like(value))
        v = new.v.get(name, np.zeros_like(value))
        m = state.beta1 * m + (1.0 - state.beta1) * grad
        v = state.beta2 * v + (1.0 - state.beta2) * grad * grad
        new.m[name], new.v[name] = m, v
        lr = state.lr_for(name) * factor
        if lr == 0.0:
            out[name] = value.copy()
            continue
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        out[name] = value - lr * (update + state.weight_decay * value)
    new.step = t
    return new, (type(params).from_dict(out) if as_dict else out)
