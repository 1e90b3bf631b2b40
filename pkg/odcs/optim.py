"""
Adam optimizer
==============

Bias-corrected Adam with the training defaults ``lr = 0.0002``, ``beta1 = 0.5``,
``beta2 = 0.999``, ``eps = 1e-8``. No weight decay, no gradient clipping.
"""

import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, Iterable, Mapping, Optional

import numpy as np

from .errors import CheckpointError, ContractError
from .tensor import Tensor

logger = logging.getLogger(__name__)

DEFAULT_LR = 0.0002
DEFAULT_BETA1 = 0.5
DEFAULT_BETA2 = 0.999
DEFAULT_EPS = 1e-8


@dataclass
class AdamState:
    """Moment buffers keyed by parameter name, plus the step counter and hyperparameters"""

    lr: float = DEFAULT_LR
    beta1: float = DEFAULT_BETA1
    beta2: float = DEFAULT_BETA2
    eps: float = DEFAULT_EPS
    t: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=OrderedDict)
    v: Dict[str, np.ndarray] = field(default_factory=OrderedDict)


def step(params: Mapping[str, Tensor], grads: Optional[Mapping[str, np.ndarray]] = None,
         state: Optional[AdamState] = None) -> AdamState:
    """
    One Adam update of every tensor in ``params``, in place.

    ``grads`` defaults to each parameter's ``grad``. Moments live in the
    parameter dtype; the update itself is evaluated in 64-bit.
    """
    state = state if state is not None else AdamState()
    resolved = {}
    for name, p in params.items():
        g = grads.get(name) if grads is not None else p.grad
        if g is None:
            raise ContractError(f"parameter {name!r} has no gradient; run backward before step")
        if np.shape(g) != p.shape:
            raise ContractError(f"gradient for {name!r} has shape {np.shape(g)}, parameter has {p.shape}")
        resolved[name] = np.asarray(g, dtype=np.float64)

    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = resolved[name]
        m = state.m.get(name)
        v = state.v.get(name)
        m64 = np.zeros(p.shape) if m is None else m.astype(np.float64)
        v64 = np.zeros(p.shape) if v is None else v.astype(np.float64)
        m64 = b1 * m64 + (1.0 - b1) * g
        v64 = b2 * v64 + (1.0 - b2) * g * g
        update = state.lr * (m64 / c1) / (np.sqrt(v64 / c2) + state.eps)
        p.data[...] = (p.data.astype(np.float64) - update).astype(p.dtype)
        state.m[name] = m64.astype(p.dtype)
        state.v[name] = v64.astype(p.dtype)
    return state


def zero_grad(params: Iterable[Tensor]):
    """Reset every gradient buffer to zeros so the next backward starts clean"""
    for p in params:
        p.grad = np.zeros_like(p.data)


class Adam:
    """
    Adam over a named parameter set.

    Example:
        >>> opt = Adam(generator.named_parameters())
        >>> opt.zero_grad()
        >>> backward(loss, graph)
        >>> opt.step()
    """

    def __init__(self, params: Mapping[str, Tensor], lr: float = DEFAULT_LR,
                 beta1: float = DEFAULT_BETA1, beta2: float = DEFAULT_BETA2,
                 eps: float = DEFAULT_EPS):
        if lr <= 0:
            raise ContractError(f"learning rate must be positive, got {lr}")
        if not (0 <= beta1 < 1 and 0 <= beta2 < 1):
            raise ContractError(f"betas must lie in [0, 1), got ({beta1}, {beta2})")
        self.params = OrderedDict(params)
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    def zero_grad(self):
        zero_grad(self.params.values())

    def step(self):
        step(self.params, state=self.state)

    def state_dict(self) -> dict:
        s = self.state
        return {
            "t": s.t, "lr": s.lr, "beta1": s.beta1, "beta2": s.beta2, "eps": s.eps,
            "m": OrderedDict((k, s.m[k]) for k in self.params if k in s.m),
            "v": OrderedDict((k, s.v[k]) for k in self.params if k in s.v),
        }

    def load_state_dict(self, state: dict):
        for key in ("m", "v"):
            unknown = set(state[key]) - set(self.params)
            if unknown:
                raise CheckpointError(f"optimizer state has unknown parameters: {sorted(unknown)}")
            for name, value in state[key].items():
                if np.shape(value) != self.params[name].shape:
                    raise CheckpointError(
                        f"optimizer {key} buffer for {name!r} has shape {np.shape(value)}, "
                        f"parameter has {self.params[name].shape}")
        self.state = AdamState(
            lr=float(state["lr"]), beta1=float(state["beta1"]), beta2=float(state["beta2"]),
            eps=float(state["eps"]), t=int(state["t"]),
            m=OrderedDict((k, np.array(v, dtype=self.params[k].dtype)) for k, v in state["m"].items()),
            v=OrderedDict((k, np.array(v, dtype=self.params[k].dtype)) for k, v in state["v"].items()),
        )
        logger.debug("Restored optimizer state at step %d", self.state.t)
