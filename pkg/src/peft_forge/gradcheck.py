"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .errors import ConfigError, NumericError
from .tensor import Graph, Tensor

# Relative errors are measured against max(|analytic|, |numeric|, REL_FLOOR) so
# that finite-difference roundoff on near-zero gradients does not read as failure.
REL_FLOOR = 1e-4


@dataclass
class TensorCheck:
    name: str
    max_rel_err: float
    n_checked: int
    passed: bool


@dataclass
class GradCheckReport:
    eps: float
    tol: float
    checks: list[TensorCheck] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    @property
    def worst(self) -> float:
        return max((c.max_rel_err for c in self.checks), default=0.0)

    def format_table(self) -> str:
        width = max([len(c.name) for c in self.checks] + [9])
        lines = [f"{'parameter':<{width}}  {'max rel err':>12}  {'entries':>7}  status"]
        for c in self.checks:
            status = "ok" if c.passed else "FAIL"
            lines.append(f"{c.name:<{width}}  {c.max_rel_err:>12.3e}  {c.n_checked:>7d}  {status}")
        return "\n".join(lines)


def grad_check(
    f: Callable[[Mapping[str, Tensor]], Tensor],
    params: Mapping[str, Tensor],
    eps: float = 1e-5,
    tol: float = 1e-4,
    max_entries: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare analytic gradients of scalar `f(params)` against central differences.

    `f` must be a deterministic function of the parameter tensors. Every entry
    of every tensor is perturbed by +/- eps unless `max_entries` caps the count
    per tensor (entries are then sampled with a fixed seed). Probe evaluations
    run outside any graph, so they cost forward passes only.
    """
    if not (1e-7 <= eps <= 1e-3):
        raise ConfigError(f"grad_check eps must lie in [1e-7, 1e-3], got {eps}")
    if not params:
        raise ConfigError("grad_check needs at least one parameter tensor")

    for t in params.values():
        t.zero_grad()
    with Graph() as graph:
        out = f(params)
    if out.data.size != 1:
        raise ConfigError(f"grad_check target must be scalar, got shape {out.data.shape}")
    if not np.isfinite(out.data).all():
        raise NumericError("grad_check target evaluated non-finite")
    graph.backward(out)

    analytic = {
        name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
        for name, t in params.items()
    }

    rng = np.random.default_rng(seed)
    report = GradCheckReport(eps=eps, tol=tol)
    for name, t in params.items():
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
            idx.sort()
        worst = 0.0
        a_flat = analytic[name].reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(f(params).data)
            flat[i] = orig - eps
            lo = float(f(params).data)
            flat[i] = orig
            numeric = (hi - lo) / (2.0 * eps)
            a = float(a_flat[i])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), REL_FLOOR)
            if rel > worst:
                worst = rel
        report.checks.append(
            TensorCheck(name=name, max_rel_err=worst, n_checked=len(idx), passed=worst <= tol)
        )
    return report
