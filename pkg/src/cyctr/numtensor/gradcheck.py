"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence

import numpy as np

from .module import Parameter, zero_grads
from .tensor import Tensor, no_grad, record_branches


class DeterminismError(RuntimeError):
    """The checked function gave different values for identical inputs."""


@dataclass
class ParamCheck:
    name: str
    probes: int
    max_rel_error: float
    worst_index: tuple
    analytic: float
    numeric: float
    skipped: int = 0
    skip_reasons: Dict[str, int] = field(default_factory=dict)


@dataclass
class GradCheckReport:
    params: List[ParamCheck] = field(default_factory=list)
    groups: Dict[str, List[str]] = field(default_factory=dict)

    @property
    def max_rel_error(self) -> float:
        return max((p.max_rel_error for p in self.params), default=0.0)

    def group_errors(self) -> Dict[str, float]:
        by_name = {p.name: p.max_rel_error for p in self.params}
        return {g: max((by_name[n] for n in names if n in by_name), default=0.0) for g, names in self.groups.items()}

    @property
    def skipped(self) -> int:
        return sum(p.skipped for p in self.params)

    def skip_reasons(self) -> Dict[str, int]:
        total = Counter()
        for p in self.params:
            total.update(p.skip_reasons)
        return dict(sorted(total.items()))

    def passed(self, tol: float) -> bool:
        return self.max_rel_error <= tol

    def to_dict(self) -> dict:
        return {
            "max_rel_error": self.max_rel_error,
            "groups": self.group_errors(),
            "skipped_probes": self.skipped,
            "skip_reasons": self.skip_reasons(),
            "params": {
                p.name: {
                    "probes": p.probes,
                    "max_rel_error": p.max_rel_error,
                    "worst_index": list(p.worst_index),
                    "analytic": p.analytic,
                    "numeric": p.numeric,
                    "skipped": p.skipped,
                    "skip_reasons": p.skip_reasons,
                }
                for p in self.params
            },
        }


def relative_error(analytic: float, numeric: float, floor: float = 1e-8) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def _first_divergence(base: list, other: list) -> str:
    for a, b in zip(base, other):
        if a != b:
            return a[0]
    return "graph_structure"


def _allocate(sizes: List[int], probes: int, rng: np.random.Generator) -> List[int]:
    """Spread ``probes`` over parameters: one each first, the rest by size."""
    counts = [0] * len(sizes)
    remaining = probes
    for i, n in enumerate(sizes):
        if remaining == 0:
            break
        counts[i] = 1
        remaining -= 1
    if remaining > 0:
        capacity = np.array([n - c for n, c in zip(sizes, counts)], dtype=float)
        while remaining > 0 and capacity.sum() > 0:
            i = int(rng.choice(len(sizes), p=capacity / capacity.sum()))
            counts[i] += 1
            capacity[i] -= 1
            remaining -= 1
    return counts


def grad_check(
    f: Callable[[], Tensor],
    params: Mapping[str, Parameter],
    step: float = 1e-5,
    probes: int = 200,
    seed: int = 0,
    groups: Optional[Mapping[str, Sequence[str]]] = None,
    skip_kinks: bool = True,
) -> GradCheckReport:
    """Compare backprop gradients of scalar ``f()`` with central differences.

    Probed coordinates are drawn without replacement; every parameter gets at
    least one probe when ``probes >= len(params)``. With ``groups`` (group
    name -> parameter names) the budget of ``probes`` applies to each group
    separately; a single backward pass serves all of them.

    With ``skip_kinks`` a probe whose two perturbed evaluations take a
    different discrete branch (ReLU mask, argmax, interpolation cell, ...)
    than the unperturbed one is not scored: the difference quotient then
    straddles a non-differentiable point. Another coordinate of the same
    parameter replaces it, and the number skipped is reported.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    params = dict(params)
    zero_grads(params)
    loss = f()
    with no_grad(), record_branches() as base_branches:
        again = f().item()
    if loss.item() != again:
        raise DeterminismError(f"f() returned {loss.item()!r} then {again!r} for identical parameters")
    loss.backward()
    analytic: Dict[str, np.ndarray] = {
        name: np.zeros_like(p.data) if p.grad is None else p.grad.copy() for name, p in params.items()
    }
    zero_grads(params)

    rng = np.random.Generator(np.random.Philox(seed))
    if groups is None:
        groups = {"all": list(params)}
    report = GradCheckReport(groups={g: list(names) for g, names in groups.items()})
    plan = []
    for names in groups.values():
        missing = [n for n in names if n not in params]
        if missing:
            raise KeyError(f"grouped names not in params: {missing[:5]}")
        plan.extend(zip(names, _allocate([params[n].size for n in names], probes, rng)))
    for name, count in plan:
        if count == 0:
            continue
        p = params[name]
        flat = p.data.reshape(-1)
        order = rng.permutation(flat.size)
        worst = (-1.0, (), 0.0, 0.0)
        scored = skipped = 0
        reasons: Counter = Counter()
        for k in order:
            if scored == count:
                break
            original = flat[k]
            with no_grad(), record_branches() as up_branches:
                flat[k] = original + step
                up = f().item()
            with no_grad(), record_branches() as down_branches:
                flat[k] = original - step
                down = f().item()
            flat[k] = original
            if skip_kinks and (up_branches != base_branches or down_branches != base_branches):
                skipped += 1
                moved = up_branches if up_branches != base_branches else down_branches
                reasons[_first_divergence(base_branches, moved)] += 1
                continue
            scored += 1
            numeric = (up - down) / (2.0 * step)
            a = float(analytic[name].reshape(-1)[k])
            err = relative_error(a, numeric)
            if err > worst[0]:
                worst = (err, tuple(int(i) for i in np.unravel_index(k, p.shape)), a, numeric)
        report.params.append(
            ParamCheck(name, scored, max(worst[0], 0.0), worst[1], worst[2], worst[3], skipped, dict(reasons))
        )
    return report
