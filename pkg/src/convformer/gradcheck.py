"""Central-difference gradient checking.

The scalar probed is ``sum(fn(*inputs) * R)`` for a fixed random ``R``, so one
backward pass yields the full analytic gradient. Numerical derivatives are
accumulated in float64. The error reported per input is

    max_i |analytic_i - numeric_i| / max(max_i |analytic_i|, max_i |numeric_i|)

i.e. the worst deviation relative to that input's largest gradient entry.
"""

from __future__ import annotations

from collections.abc import Callable, Sequence
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, no_grad


@dataclass
class GradCheckReport:
    name: str
    tol: float
    errors: dict[str, float] = field(default_factory=dict)
    resamples: int = 0

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tol

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f" resamples={self.resamples}" if self.resamples else ""
        return f"{status} {self.name}: max_rel_err={self.max_error:.3e} tol={self.tol:.0e}{extra}"


def _scaled_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.abs(analytic - numeric).max() / scale)


def grad_check(fn: Callable[..., Tensor], inputs: Sequence, h: float = 1e-3, tol: float = 1e-4,
               dtype=np.float64, seed: int = 0, max_entries: int | None = None,
               max_resamples: int = 10, jitter: float = 0.05, name: str = "op",
               labels: Sequence[str] | None = None) -> GradCheckReport:
    """Compare ``fn``'s analytic gradients with central differences.

    ``inputs`` may be arrays or leaf Tensors; Tensors are perturbed in place
    (so closures over module parameters work) and restored afterwards. With
    ``dtype`` set, inputs are cast for the duration of the check; pass
    ``None`` to keep their precision. ``max_entries`` samples that many
    coordinates per input instead of probing every one.

    When mismatching coordinates sit on kinks (one-sided slopes disagree by
    more than the mismatch), those coordinates are jittered and the check
    restarts; the number of restarts is reported.
    """
    # own stream, so the projection never coincides with inputs drawn from the same seed
    rng = np.random.default_rng([seed, 0x6C])
    tensors = [t if isinstance(t, Tensor) else Tensor(np.array(t)) for t in inputs]
    labels = list(labels) if labels is not None else [t.name or f"input{i}" for i, t in enumerate(tensors)]
    saved = [(t.data, t.requires_grad, t.grad) for t in tensors]
    report = GradCheckReport(name=name, tol=tol)
    try:
        for t in tensors:
            t.data = np.array(t.data, dtype=dtype if dtype is not None else t.data.dtype, copy=True)
            t.requires_grad = True
        weights = None
        for attempt in range(max_resamples + 1):
            for t in tensors:
                t.grad = None
            out = fn(*tensors)
            if weights is None:
                weights = rng.standard_normal(out.shape)
            out.backward(weights.astype(out.dtype))
            analytic = [np.zeros(t.shape) if t.grad is None else t.grad.astype(np.float64) for t in tensors]

            def probe() -> float:
                with no_grad():
                    return float(np.sum(fn(*tensors).data.astype(np.float64) * weights))

            f0 = probe()
            kinks: list[tuple[Tensor, np.ndarray]] = []
            errors: dict[str, float] = {}
            for label, t, ga in zip(labels, tensors, analytic):
                flat = t.data.reshape(-1)
                idx = np.arange(flat.size)
                if max_entries is not None and flat.size > max_entries:
                    idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
                gn = np.empty(idx.size)
                fplus = np.empty(idx.size)
                fminus = np.empty(idx.size)
                for j, i in enumerate(idx):
                    orig = flat[i]
                    flat[i] = orig + h
                    fplus[j] = probe()
                    flat[i] = orig - h
                    fminus[j] = probe()
                    flat[i] = orig
                    gn[j] = (fplus[j] - fminus[j]) / (2 * h)
                ga_sel = ga.reshape(-1)[idx]
                errors[label] = err = _scaled_error(ga_sel, gn)
                if err > tol:
                    # a kink: the two one-sided slopes disagree by more than the mismatch itself
                    scale = max(np.abs(ga_sel).max(), np.abs(gn).max())
                    mismatch = np.abs(ga_sel - gn)
                    one_sided = np.abs((fplus - f0) / h - (f0 - fminus) / h)
                    bad = (mismatch > tol * scale) & (one_sided > mismatch)
                    if bad.any():
                        kinks.append((t, idx[bad]))
            if not kinks or attempt == max_resamples:
                report.errors = errors
                return report
            report.resamples += 1
            # move only the offending coordinates off their kinks
            for t, where in kinks:
                flat = t.data.reshape(-1)
                spread = float(np.std(flat)) or 1.0
                flat[where] += (jitter * spread * rng.uniform(-1, 1, where.size)).astype(flat.dtype)
        return report
    finally:
        for t, (data, req, grad) in zip(tensors, saved):
            t.data, t.requires_grad, t.grad = data, req, grad
