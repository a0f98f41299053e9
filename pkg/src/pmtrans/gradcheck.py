"""Central finite-difference verification of taped gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .functional import record_branches
from .tensor import ContractError, Tensor, backward, no_grad


class NonDeterministicError(ContractError):
    """Two forward passes at the same point disagreed."""


@dataclass
class GradCheckReport:
    max_rel_error: float
    max_abs_error: float
    passed: bool
    tolerance: float
    checked: int
    worst: Optional[str] = None
    per_param: dict[str, float] = field(default_factory=dict)
    step_reduced: int = 0
    one_sided: int = 0
    kinks_skipped: list[str] = field(default_factory=list)


def relative_error(a, b, floor: float = 1e-8) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def difference_resolution(fp: float, fm: float, h: float, ulps: float = 8.0) -> float:
    """Smallest slope a central difference can resolve: ``ulps`` units in the
    last place of f, divided by 2h. Below this only rounding is measured."""
    return ulps * float(np.spacing(max(abs(fp), abs(fm)))) / (2 * h)


def finite_difference_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor] | dict[str, Tensor],
    step: float = 1e-5,
    tolerance: float = 1e-4,
    max_coords: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
    kink_aware: bool = True,
    max_step_reductions: int = 2,
    noise_ulps: float = 8.0,
) -> GradCheckReport:
    """Compare ``backward()`` against (f(θ+h) − f(θ−h)) / 2h per coordinate.

    ``f`` must rebuild its graph from the current parameter values on each
    call. With ``max_coords`` set, at most that many coordinates per parameter
    are probed, drawn without replacement from ``rng``.

    With ``kink_aware`` the piecewise branches (ReLU signs, loss clamps) of
    both probes are compared with those at θ. A probe that lands on another
    piece does not measure the derivative, so the step is cut by 10x, up to
    ``max_step_reductions`` times. If θ is still within one step of a kink, a
    second-order one-sided difference is taken on the side whose probes stay
    on θ's piece (counted in ``one_sided``). Coordinates for which neither
    side works are listed in ``kinks_skipped`` instead of being scored.

    The relative error denominator is floored at the difference resolution
    over ``tolerance`` (see ``difference_resolution``), so a gradient that is
    zero up to rounding of f is scored against what the probe can resolve
    rather than against 1e-8.
    """
    if step <= 0:
        raise ContractError("finite-difference step must be positive")
    named = dict(params) if isinstance(params, dict) else {f"p{i}": p for i, p in enumerate(params)}
    rng = rng if rng is not None else np.random.default_rng(0)

    with no_grad(), record_branches() as base_branches:
        f0 = f().data.copy()
    with no_grad():
        f1 = f().data.copy()
    if not np.array_equal(f0, f1):
        raise NonDeterministicError("forward pass is not deterministic; check invalid")

    for p in named.values():
        p.grad = None
    loss = f()
    backward(loss, leaves=list(named.values()))
    analytic = {k: p.grad.copy() for k, p in named.items()}

    worst_rel, worst_abs, worst_name, count, reduced, one_sided = 0.0, 0.0, None, 0, 0, 0
    kinks: list[str] = []
    per_param: dict[str, float] = {}
    with no_grad():
        for name, p in named.items():
            if not p.data.flags.c_contiguous:
                p.data = np.ascontiguousarray(p.data)
            flat = p.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                idx = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
            g_an = analytic[name].reshape(-1)
            p_worst = 0.0
            for i in idx:
                orig = flat[i]

                def probe(delta):
                    with record_branches() as br:
                        flat[i] = orig + delta
                        val = float(f().data)
                    flat[i] = orig
                    return val, br == base_branches

                h = step
                for attempt in range(max_step_reductions + 1):
                    fp, same_p = probe(h)
                    fm, same_m = probe(-h)
                    smooth = not kink_aware or (same_p and same_m)
                    if smooth or attempt == max_step_reductions:
                        break
                    h /= 10
                if smooth:
                    num = (fp - fm) / (2 * h)
                else:
                    # θ sits next to a kink: difference on the side that stays on its piece
                    num = None
                    for h in step / 10.0 ** np.arange(max_step_reductions + 1):
                        for sign in (1.0, -1.0):
                            f1, ok1 = probe(sign * h)
                            f2, ok2 = probe(2 * sign * h)
                            if ok1 and ok2:
                                num = sign * (4 * f1 - f2 - 3 * float(f0)) / (2 * h)
                                fp, fm = f2, float(f0)
                                break
                        if num is not None:
                            break
                    if num is None:
                        kinks.append(f"{name}[{i}]")
                        continue
                    one_sided += 1
                if h != step:
                    reduced += 1
                floor = max(1e-8, difference_resolution(fp, fm, h, noise_ulps) / max(tolerance, 1e-12))
                rel = float(relative_error(g_an[i], num, floor))
                ab = abs(float(g_an[i]) - num)
                count += 1
                p_worst = max(p_worst, rel)
                if rel > worst_rel:
                    worst_rel, worst_name = rel, f"{name}[{i}]"
                worst_abs = max(worst_abs, ab)
            per_param[name] = p_worst
    return GradCheckReport(
        max_rel_error=worst_rel,
        max_abs_error=worst_abs,
        passed=count > 0 and worst_rel <= tolerance,
        tolerance=tolerance,
        checked=count,
        worst=worst_name,
        per_param=per_param,
        step_reduced=reduced,
        one_sided=one_sided,
        kinks_skipped=kinks,
    )


def desk_gradient_checks(seed: int = 0, tolerance: float = 1e-4, coords: int = 3,
                         targets: Sequence[str] = ("block", "gate", "model")) -> dict[str, GradCheckReport]:
    """Finite-difference checks of an encoder block, an attention gate and the
    deep-supervised loss of a 16x16 model, all in float64."""
    from .attention import AxialEncoderBlock
    from .model import AttentionGate, PMTransConfig, build_pmtrans
    from .training import total_supervised_loss

    rng = np.random.default_rng(seed)
    reports = {}
    if "block" in targets:
        blk = AxialEncoderBlock(4, 4, 3, 3, 2, 1, rng, np.float64)
        for layer in blk.attention_layers():
            layer.gate.gates.data[:] = rng.uniform(0.5, 1.0, 4)
        x = Tensor(rng.normal(size=(1, 4, 6, 6)), requires_grad=True)
        probe = Tensor(rng.normal(size=(1, 4, 6, 6)))
        params = {**dict(blk.named_parameters()), "input": x}
        reports["block"] = finite_difference_check(lambda: (blk(x) * probe).sum(), params, tolerance=tolerance)
    if "gate" in targets:
        gate = AttentionGate(4, 8, 4, 4, rng, np.float64)
        g = Tensor(rng.normal(size=(2, 4, 5, 5)), requires_grad=True)
        xc = Tensor(rng.normal(size=(2, 8, 5, 5)), requires_grad=True)
        probe = Tensor(rng.normal(size=(2, 4, 5, 5)))
        params = {**dict(gate.named_parameters()), "g": g, "x": xc}
        reports["gate"] = finite_difference_check(lambda: (gate(g, xc) * probe).sum(), params, tolerance=tolerance)
    if "model" in targets:
        cfg = PMTransConfig(height=16, width=16, base_channels=4, heads=2, dtype="float64", seed=seed)
        model = build_pmtrans(cfg)
        for gs in model.gate_sets():
            gs.gates.data[:] = rng.uniform(0.5, 1.0, 4)
        # a batch of 4 keeps batchnorm on the 1x1 long-range grid well conditioned
        x = Tensor(rng.random((4, 1, 16, 16)))
        mask = (rng.random((4, 1, 16, 16)) > 0.5).astype(np.float64)
        reports["model"] = finite_difference_check(
            lambda: total_supervised_loss(model(x), mask), dict(model.named_parameters()),
            tolerance=tolerance, max_coords=coords, rng=rng,
        )
    return reports
