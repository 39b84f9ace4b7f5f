"""Central finite-difference gradient checking."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .tensor import Tensor, no_grad

# Elements whose gradient is below REL_FLOOR * max(1, largest |grad| in the
# tensor) are judged against that floor: central differences carry roundoff
# proportional to the magnitudes being summed, not to the element itself.
REL_FLOOR = 1e-3


@dataclass
class ParamCheck:
    name: str
    max_rel_error: float
    worst_index: tuple[int, ...]
    analytic: float
    numeric: float
    checked: int


@dataclass
class GradcheckReport:
    tolerance: float
    params: list[ParamCheck] = field(default_factory=list)
    nonfinite: list[str] = field(default_factory=list)

    @property
    def max_rel_error(self) -> float:
        return max((p.max_rel_error for p in self.params), default=0.0)

    @property
    def passed(self) -> bool:
        return not self.nonfinite and all(p.max_rel_error < self.tolerance for p in self.params)

    def format(self) -> str:
        lines = [f"{'parameter':<40} {'checked':>7} {'max_rel_err':>12}  worst"]
        for p in self.params:
            lines.append(
                f"{p.name:<40} {p.checked:>7d} {p.max_rel_error:>12.3e}  {p.worst_index} "
                f"analytic={p.analytic:.6e} numeric={p.numeric:.6e}"
            )
        for name in self.nonfinite:
            lines.append(f"{name:<40} non-finite values encountered")
        lines.append(f"{'PASS' if self.passed else 'FAIL'} (tolerance {self.tolerance:g})")
        return "\n".join(lines)


def _scalar(out: Tensor) -> Tensor:
    return out if out.data.size == 1 else out.sum()


def rel_error(a: float, n: float, floor: float = REL_FLOOR) -> float:
    return abs(a - n) / max(abs(a), abs(n), floor)


def gradcheck(
    fn: Callable[[], Tensor],
    params: dict[str, Tensor],
    tolerance: float = 1e-5,
    eps: float | None = None,
    max_checks: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradcheckReport:
    """Compare analytic gradients of ``sum(fn())`` against central differences.

    ``params`` are perturbed in place and restored. ``max_checks`` limits the
    number of elements probed per tensor (sampled with ``rng``); ``None``
    probes every element.
    """
    report = GradcheckReport(tolerance)
    for p in params.values():
        p.requires_grad = True
        p.zero_grad()
    out = _scalar(fn())
    if not np.isfinite(out.data).all():
        report.nonfinite.append("<output>")
        return report
    out.backward()

    rng = rng if rng is not None else np.random.default_rng(0)
    for name, p in params.items():
        if eps is None:
            h = 1e-6 if p.dtype == np.float64 else 1e-3
        else:
            h = eps
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.isfinite(analytic).all():
            report.nonfinite.append(name)
            continue
        flat = p.data.reshape(-1)
        n = flat.size
        if max_checks is None or max_checks >= n:
            idx = np.arange(n)
        else:
            idx = np.sort(rng.choice(n, size=max_checks, replace=False))
        floor = REL_FLOOR * max(1.0, float(np.abs(analytic).max(initial=0.0)))
        worst = (-1.0, 0, 0.0, 0.0)
        bad = False
        with no_grad():
            for k in idx:
                orig = flat[k]
                up, down = orig + h, orig - h
                flat[k] = up
                fp = _scalar(fn()).item()
                flat[k] = down
                fm = _scalar(fn()).item()
                flat[k] = orig
                num = (fp - fm) / float(up - down)
                if not np.isfinite(num):
                    bad = True
                    break
                a = float(analytic.reshape(-1)[k])
                err = rel_error(a, num, floor)
                if err > worst[0]:
                    worst = (err, int(k), a, num)
        if bad:
            report.nonfinite.append(name)
            continue
        report.params.append(
            ParamCheck(
                name=name,
                max_rel_error=worst[0],
                worst_index=tuple(int(i) for i in np.unravel_index(worst[1], p.shape)),
                analytic=worst[2],
                numeric=worst[3],
                checked=len(idx),
            )
        )
    return report
