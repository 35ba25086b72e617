"""Central finite-difference gradient checking."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from ..errors import UsageError
from . import ops
from .tensor import Parameter, Tape, Tensor

logger = logging.getLogger(__name__)


@dataclass
class GradCheckReport:
    max_error: float
    checked: int
    skipped_kinks: int


def _scalarize(out: Tensor, weights: Optional[np.ndarray]) -> Tensor:
    if out.data.size == 1:
        return out
    return (out * Tensor(weights.reshape(out.shape))).sum()


def _same_switches(a: list, b: list) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def grad_check_report(
    fragment: Callable[[Tensor], Tensor],
    input: np.ndarray | Tensor,
    step: float = 1e-4,
    params: Optional[Sequence[Parameter]] = None,
    wrt_input: bool = True,
    max_entries: Optional[int] = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare backprop against central differences, entry by entry.

    ``fragment`` must be deterministic (seed any dropout inside it). Non-scalar
    outputs are reduced with a fixed random projection. Relative error per
    entry is ``|a - n| / max(|a|, |n|, 1e-8)``.

    A central difference is only a valid reference where the function is
    smooth over ``[x - step, x + step]``. Entries whose stencil flips a
    max-pool argmax or a clip boundary are not scored; when sampling
    (``max_entries``), another coordinate of the same tensor is drawn instead.
    """
    x0 = np.array(input.data if isinstance(input, Tensor) else input)
    if x0.dtype != np.float64:
        raise UsageError("grad_check runs in 64-bit mode only")
    if params is None:
        params = list(fragment.parameters()) if hasattr(fragment, "parameters") else []
    rng = np.random.default_rng(seed)

    x = Tensor(x0.copy(), requires_grad=wrt_input)
    probe = fragment(Tensor(x0.copy()))
    weights = None if probe.data.size == 1 else rng.standard_normal(probe.shape)

    with Tape() as tape:
        loss = _scalarize(fragment(x), weights)
    tape.backward(loss)

    def evaluate() -> tuple[float, list]:
        trace: list = []
        token = ops._SWITCH_TRACE.set(trace)
        try:
            value = _scalarize(fragment(x), weights).item()
        finally:
            ops._SWITCH_TRACE.reset(token)
        return value, trace

    _, base_switches = evaluate()

    targets: list[tuple[np.ndarray, np.ndarray]] = []
    if wrt_input:
        targets.append((x.data, x.grad if x.grad is not None else np.zeros_like(x.data)))
    for p in params:
        targets.append((p.data, p.grad.copy()))

    worst, checked, skipped = 0.0, 0, 0
    for arr, analytic in targets:
        if not arr.flags.c_contiguous:
            raise UsageError("grad_check needs contiguous parameter arrays")
        flat = arr.reshape(-1)
        an = analytic.reshape(-1)
        sampling = max_entries is not None and flat.size > max_entries
        order = rng.permutation(flat.size) if sampling else np.arange(flat.size)
        quota = max_entries if sampling else flat.size
        done = 0
        for k in order:
            if done >= quota:
                break
            orig = flat[k]
            flat[k] = orig + step
            f_plus, sw_plus = evaluate()
            flat[k] = orig - step
            f_minus, sw_minus = evaluate()
            flat[k] = orig
            if not (_same_switches(sw_plus, base_switches) and _same_switches(sw_minus, base_switches)):
                skipped += 1
                if not sampling:
                    done += 1
                continue
            numeric = (f_plus - f_minus) / (2.0 * step)
            a = an[k]
            worst = max(worst, abs(a - numeric) / max(abs(a), abs(numeric), 1e-8))
            checked += 1
            done += 1
    if skipped:
        logger.debug("grad_check: %d stencils crossed a kink and were not scored", skipped)
    return GradCheckReport(float(worst), checked, skipped)


def grad_check(
    fragment: Callable[[Tensor], Tensor],
    input: np.ndarray | Tensor,
    step: float = 1e-4,
    params: Optional[Sequence[Parameter]] = None,
    wrt_input: bool = True,
    max_entries: Optional[int] = None,
    seed: int = 0,
) -> float:
    """Max relative error between backprop and central differences."""
    return grad_check_report(fragment, input, step, params, wrt_input, max_entries, seed).max_error
