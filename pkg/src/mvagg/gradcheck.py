"""Central finite-difference checks for recorded gradients."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .tensor import Tensor, backward, recording


@dataclass
class GradCheckResult:
    max_rel_error: float
    max_abs_error: float
    n_checked: int
    failures: List[Tuple[str, tuple, float, float]] = field(default_factory=list)
    kinks: List[Tuple[str, tuple, float, float]] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures


def _project(out: Tensor, weights: Optional[np.ndarray]) -> float:
    data = out.data.astype(np.float64)
    if weights is None:
        return float(data.sum())
    return float((data * weights).sum())


def check_gradients(
    fn: Callable[[Dict[str, Tensor]], Tensor],
    inputs: Mapping[str, np.ndarray],
    h: float = 1e-3,
    rtol: float = 1e-3,
    atol: float = 1e-5,
    small: float = 1e-3,
    seed: int = 0,
    samples: Optional[Dict[str, Sequence[tuple]]] = None,
    kink_ratio: float = 1.5,
) -> GradCheckResult:
    """Compare analytic gradients of ``fn`` with central differences.

    ``fn`` maps named float64 tensors to an output; non-scalar outputs are
    projected onto fixed random weights. An element passes when its relative
    error is below ``rtol``, or, where both gradients are smaller than
    ``small`` in magnitude, the absolute error is below ``atol``.

    ``samples`` restricts the check to given element indices per input.

    An element that fails but whose one-sided differences disagree by at
    least ``kink_ratio`` times its error straddles a non-differentiable point
    (relu at 0, max ties, top-K flips); it is listed in ``kinks`` rather than
    ``failures``. A wrong gradient at a smooth point has matching one-sided
    slopes and still fails.
    """
    arrays = {k: np.array(v, dtype=np.float64) for k, v in inputs.items()}

    def run(arrs):
        return fn({k: Tensor(a, name=k, dtype=np.float64) for k, a in arrs.items()})

    tensors = {k: Tensor(a, name=k, dtype=np.float64) for k, a in arrays.items()}
    with recording() as rec:
        out = fn(tensors)
    rng = np.random.default_rng(seed)
    weights = None if out.size == 1 else rng.uniform(-1.0, 1.0, size=out.shape)
    grad_out = np.ones(out.shape) if weights is None else weights
    analytic = backward(rec, grad_out, output=out, wrt=tensors)

    f0 = _project(run(arrays), weights)
    worst_rel = 0.0
    worst_abs = 0.0
    failures, kinks = [], []
    n = 0
    for name, arr in arrays.items():
        idx_list = samples.get(name) if samples else None
        if idx_list is None:
            if samples is not None:
                continue
            idx_list = list(np.ndindex(arr.shape))
        for idx in idx_list:
            orig = arr[idx]
            arr[idx] = orig + h
            fp = _project(run(arrays), weights)
            arr[idx] = orig - h
            fm = _project(run(arrays), weights)
            arr[idx] = orig
            numeric = (fp - fm) / (2 * h)
            a = float(analytic[name].data[idx])
            err = abs(a - numeric)
            scale = max(abs(a), abs(numeric))
            rel = err / scale if scale > 0 else 0.0
            n += 1
            bad = err >= atol if scale < small else rel >= rtol
            if bad:
                one_sided = abs((fp - f0) - (f0 - fm)) / h
                (kinks if one_sided >= kink_ratio * err else failures).append((name, idx, a, numeric))
                continue
            worst_abs = max(worst_abs, err)
            if scale >= small:
                worst_rel = max(worst_rel, rel)
    return GradCheckResult(worst_rel, worst_abs, n, failures, kinks)
