"""Central finite-difference gradient checks for the autodiff engine."""

from typing import Callable, Dict, Sequence

import numpy as np

from .tensor import Graph, Tensor, backward

DEFAULT_STEP = 1e-3


def analytic_gradients(fn: Callable[[], Tensor], inputs: Sequence[Tensor]) -> Dict[int, np.ndarray]:
    """Gradients of the scalar ``fn()`` w.r.t. each input, keyed by position"""
    for t in inputs:
        t.grad = None
    with Graph() as graph:
        loss = fn()
    backward(loss, graph)
    return {i: np.array(t.grad, dtype=np.float64) for i, t in enumerate(inputs)}


def numerical_gradient(fn: Callable[[], Tensor], wrt: Tensor, h: float = DEFAULT_STEP) -> np.ndarray:
    """
    Central differences (f(x+h) - f(x-h)) / 2h, one element at a time.

    ``fn`` is re-evaluated outside any graph, reading ``wrt`` in place; use
    64-bit tensors to keep the truncation error below the check tolerance.
    """
    grad = np.zeros(wrt.shape, dtype=np.float64)
    flat = wrt.data.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + h
        plus = fn().item()
        flat[i] = original - h
        minus = fn().item()
        flat[i] = original
        grad.flat[i] = (plus - minus) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max|a - n| scaled by the largest gradient magnitude seen on either side"""
    scale = max(float(np.max(np.abs(analytic))), float(np.max(np.abs(numeric))), 1e-8)
    return float(np.max(np.abs(analytic - numeric))) / scale


def check_gradients(fn: Callable[[], Tensor], inputs: Sequence[Tensor],
                    h: float = DEFAULT_STEP) -> float:
    """Largest relative error between analytic and numeric gradients over ``inputs``"""
    analytic = analytic_gradients(fn, inputs)
    worst = 0.0
    for i, t in enumerate(inputs):
        worst = max(worst, relative_error(analytic[i], numerical_gradient(fn, t, h)))
    return worst
