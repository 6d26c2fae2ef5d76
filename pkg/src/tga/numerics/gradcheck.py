"""Central finite-difference check of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .autodiff import Tape, Tensor, watch_kinks
from .params import ParameterStore


@dataclass
class Probe:
    name: str
    index: tuple[int, ...]
    analytic: float
    numeric: float
    rel_error: float


@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    probes: list[Probe] = field(default_factory=list)
    deterministic: bool = True
    skipped_kinks: int = 0

    @property
    def passed(self) -> bool:
        return self.deterministic and self.max_rel_error < self.tol

    @property
    def worst(self) -> Probe | None:
        return max(self.probes, key=lambda p: p.rel_error, default=None)

    def summary(self) -> str:
        w = self.worst
        where = f" at {w.name}{list(w.index)}" if w else ""
        status = "ok" if self.passed else "FAIL"
        det = "" if self.deterministic else " (non-deterministic closure)"
        kinks = f", {self.skipped_kinks} redrawn at ReLU kinks" if self.skipped_kinks else ""
        return (f"{status}: max rel error {self.max_rel_error:.3e}{where} "
                f"over {len(self.probes)} probes{kinks}{det}")


def relative_error(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-8)


def grad_check(
    loss_fn: Callable[[], Tensor],
    params: ParameterStore,
    n_probe: int = 50,
    eps: float = 1e-4,
    tol: float = 1e-4,
    seed: int = 0,
    names: list[str] | None = None,
) -> GradCheckReport:
    """Compare tape gradients against ``(f(θ+ε) - f(θ-ε)) / 2ε``.

    Each probe picks a parameter tensor uniformly (from ``names`` if given)
    and then a coordinate uniformly within it.  A probe whose two evaluations
    see different ReLU activation patterns straddles a kink, where the
    central difference is not a derivative estimate; such probes are counted
    and redrawn.  ``loss_fn`` must be deterministic: it is evaluated twice at
    the unperturbed point and any bitwise difference is reported.
    """
    params.zero_grad()
    with Tape() as tape:
        loss = loss_fn()
    analytic = tape.backward(loss)

    base_a = float(loss_fn().data)
    base_b = float(loss_fn().data)
    report = GradCheckReport(0.0, tol, deterministic=base_a == base_b)
    if not report.deterministic:
        report.max_rel_error = float("inf")
        return report

    rng = np.random.default_rng(seed)
    pool = list(names) if names is not None else [n for n in params if params[n].size]
    max_draws = 20 * n_probe
    while len(report.probes) < n_probe and max_draws:
        max_draws -= 1
        name = pool[rng.integers(len(pool))]
        arr = params[name]
        index = tuple(int(rng.integers(s)) for s in arr.shape)
        orig = arr[index]
        arr[index] = orig + eps
        with watch_kinks() as kinks_plus:
            f_plus = float(loss_fn().data)
        arr[index] = orig - eps
        with watch_kinks() as kinks_minus:
            f_minus = float(loss_fn().data)
        arr[index] = orig
        if any(not np.array_equal(a, b) for a, b in zip(kinks_plus, kinks_minus)):
            report.skipped_kinks += 1
            continue
        numeric = (f_plus - f_minus) / (2 * eps)
        g = analytic.get(name)
        a = float(g[index]) if g is not None else 0.0
        err = relative_error(a, numeric)
        report.probes.append(Probe(name, index, a, numeric, err))
        report.max_rel_error = max(report.max_rel_error, err)
    return report
