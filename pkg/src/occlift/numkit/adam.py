from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ShapeError, TrainingError


@dataclass
class AdamState:
    """First/second moment buffers for one parameter group."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def ensure(self, params: dict[str, np.ndarray]):
        for name, p in params.items():
            if name not in self.m:
                self.m[name] = np.zeros_like(p, dtype=np.float64)
                self.v[name] = np.zeros_like(p, dtype=np.float64)
            elif self.m[name].shape != p.shape:
                raise ShapeError(f"Adam moments for {name!r} have shape {self.m[name].shape}, "
                                 f"parameter has {p.shape}")


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState, lr: float) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update.

    Parameters are updated in place (they are large) and returned together
    with the advanced state. Only names present in ``grads`` are touched.
    """
    for name, g in grads.items():
        if name not in params:
            raise ShapeError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ShapeError(f"gradient for {name!r} has shape {g.shape}, "
                             f"parameter has {params[name].shape}")
        if not np.isfinite(g).all():
            raise TrainingError(f"non-finite gradient for parameter {name!r} "
                                f"at optimizer step {state.step + 1}")
    state.ensure({k: params[k] for k in grads})
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for name, g in grads.items():
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        if lr != 0.0:
            params[name] -= (lr / bc1) * m / (np.sqrt(v / bc2) + state.eps)
    return params, state
