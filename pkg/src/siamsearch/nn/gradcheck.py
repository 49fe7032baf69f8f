"""Central finite-difference gradient verification on float64 shadow copies."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .core import Module, Parameter, record_branches


@dataclass
class GradCheckReport:
    errors: dict[str, float] = field(default_factory=dict)
    tolerance: float = 1e-4
    kink_skips: int = 0

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance

    def __str__(self) -> str:
        worst = max(self.errors, key=self.errors.get) if self.errors else "-"
        return (
            f"grad_check max rel err {self.max_error:.3e} (worst: {worst}) "
            f"tol {self.tolerance:g}, {self.kink_skips} kink-straddling probes redrawn"
        )


# below this combined norm a gradient is treated as exactly zero (at step 1e-3;
# central-difference roundoff grows like 1/step, so the floor does too)
ZERO_GRAD_FLOOR = 1e-7
REFERENCE_STEP = 1e-3


def relative_error(analytic: np.ndarray, numeric: np.ndarray, step: float = REFERENCE_STEP) -> float:
    """||a - n|| / max(||a|| + ||n||, floor)."""
    floor = ZERO_GRAD_FLOOR * max(1.0, REFERENCE_STEP / step)
    denom = max(np.linalg.norm(analytic) + np.linalg.norm(numeric), floor)
    return float(np.linalg.norm(analytic - numeric) / denom)


def _same_branches(a: list, b: list) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def grad_check(
    network: Module,
    loss: Callable[[Module], float],
    tolerance: float = 1e-4,
    step: float = 1e-3,
    max_entries: int | None = 40,
    seed: int = 0,
    inputs: dict[str, np.ndarray] | None = None,
) -> GradCheckReport:
    """Compare backprop gradients against central differences.

    ``loss(net)`` must zero grads, run forward and backward on ``net`` and
    return the scalar loss; it is called on a float64 copy of ``network`` so
    the original is never touched. ``inputs`` maps names to float arrays that
    ``loss`` closes over; their gradients are checked too when ``loss`` stores
    them in ``inputs[name + '.grad']``.

    At most ``max_entries`` randomly chosen coordinates are probed per tensor.
    A probe whose +/- step flips any ReLU mask, max-pool argmax or loss hinge
    is not differentiable there; it is discarded and another coordinate drawn.
    """
    shadow = network.astype(np.float64)
    rng = np.random.default_rng(seed)
    report = GradCheckReport(tolerance=tolerance)

    with record_branches() as base_branches:
        loss(shadow)
    targets: list[tuple[str, np.ndarray, np.ndarray]] = [
        (name, p.value, p.grad.copy())
        for name, p in shadow.named_state()
        if isinstance(p, Parameter)
    ]
    for name, arr in (inputs or {}).items():
        if name.endswith(".grad"):
            continue
        targets.append((f"input:{name}", arr, inputs[name + ".grad"].copy()))

    for name, value, analytic in targets:
        flat = value.reshape(-1)
        order = rng.permutation(flat.size)
        want = flat.size if max_entries is None else min(max_entries, flat.size)
        used, numeric = [], []
        for i in order:
            if len(used) == want:
                break
            old = flat[i]
            flat[i] = old + step
            with record_branches() as br_plus:
                plus = loss(shadow)
            flat[i] = old - step
            with record_branches() as br_minus:
                minus = loss(shadow)
            flat[i] = old
            if not (_same_branches(base_branches, br_plus) and _same_branches(base_branches, br_minus)):
                report.kink_skips += 1
                continue
            used.append(i)
            numeric.append((plus - minus) / (2 * step))
        loss(shadow)  # restore grads/state at the unperturbed point
        report.errors[name] = relative_error(analytic.reshape(-1)[used], np.asarray(numeric), step)
    return report
