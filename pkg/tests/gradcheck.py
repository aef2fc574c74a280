"""Central finite-difference checks against the tape's gradients."""

from typing import Callable, Dict, Mapping, Optional

import numpy as np

from groupnlu import autograd as ag
from groupnlu.autograd import Variable


def analytic_gradients(fn: Callable[[], Variable], params: Mapping[str, Variable]) -> Dict[str, np.ndarray]:
    for var in params.values():
        var.zero_grad()
    with ag.recording() as tape:
        loss = fn()
    ag.backward(loss, tape)
    grads = {name: var.grad.copy() for name, var in params.items()}
    for var in params.values():
        var.zero_grad()
    return grads


def numeric_gradient(
    fn: Callable[[], Variable],
    var: Variable,
    entries: Optional[np.ndarray] = None,
    eps: float = 1e-6,
) -> np.ndarray:
    """Derivative of ``fn()`` along the flat ``entries`` of ``var`` (all of them by default)."""
    entries = np.arange(var.data.size) if entries is None else entries
    out = np.zeros(len(entries))
    with ag.no_grad():
        for k, flat_idx in enumerate(entries):
            idx = np.unravel_index(int(flat_idx), var.shape)
            original = var.data[idx]
            var.data[idx] = original + eps
            up = fn().item()
            var.data[idx] = original - eps
            down = fn().item()
            var.data[idx] = original
            out[k] = (up - down) / (2 * eps)
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Norm of the difference over the summed norms, never dividing by less than ``floor``."""
    diff = np.linalg.norm(analytic - numeric)
    scale = np.linalg.norm(analytic) + np.linalg.norm(numeric)
    return float(diff / max(scale, floor))


def gradient_errors(
    fn: Callable[[], Variable],
    params: Mapping[str, Variable],
    samples: Optional[int] = None,
    seed: int = 0,
    eps: float = 1e-6,
    floor: float = 1e-6,
) -> Dict[str, float]:
    """Relative error per parameter; ``samples`` limits how many entries of each are checked."""
    rng = np.random.default_rng(seed)
    grads = analytic_gradients(fn, params)
    errors = {}
    for name, var in params.items():
        size = var.data.size
        if samples is None or size <= samples:
            entries = np.arange(size)
        else:
            entries = rng.choice(size, samples, replace=False)
        numeric = numeric_gradient(fn, var, entries, eps=eps)
        errors[name] = relative_error(grads[name].reshape(-1)[entries], numeric, floor=floor)
    return errors
