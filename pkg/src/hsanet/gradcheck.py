"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, precision, record_kinks


class NonDeterministicError(RuntimeError):
    pass


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_error: float
    tol: float
    checked: int
    skipped_kinks: int
    worst: tuple[str, int] | None = None
    per_tensor: dict[str, float] = field(default_factory=dict)

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        where = f" at {self.worst[0]}[{self.worst[1]}]" if self.worst else ""
        return (
            f"{status} max_rel_error={self.max_rel_error:.3e} tol={self.tol:g} "
            f"checked={self.checked} skipped_kinks={self.skipped_kinks}{where}"
        )


def _rel_errors(analytic: np.ndarray, numeric: np.ndarray, floor: float) -> np.ndarray:
    # denominator floor keeps coordinates with near-zero gradient from
    # dominating through rounding noise alone
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def finite_diff_check(
    f: Callable[..., Tensor],
    x: Tensor | Sequence[Tensor],
    step: float = 1e-3,
    tol: float = 1e-3,
    max_coords: int | None = None,
    seed: int = 0,
    names: Sequence[str] | None = None,
    kink_step: float = 1e-5,
) -> GradCheckReport:
    """Compare the analytic gradient of scalar ``f`` against central differences.

    ``x`` is one tensor or a list of tensors passed positionally to ``f``.
    Everything is evaluated in float64.  When the +/- perturbation flips a
    ReLU activation the difference is retaken with ``kink_step``; coordinates
    that still flip are skipped, since the function is not differentiable
    across the kink.  ``max_coords`` caps the number of
    coordinates probed per tensor (sampled with ``seed``); ``None`` checks all.
    """
    single = isinstance(x, Tensor)
    inputs = [x] if single else list(x)
    names = list(names) if names is not None else [f"x{i}" for i in range(len(inputs))]
    rng = np.random.default_rng(seed)

    with precision(np.float64):
        leaves = [Tensor(t.data.astype(np.float64), requires_grad=True) for t in inputs]

        def evaluate() -> tuple[float, list]:
            with record_kinks() as kinks:
                out = f(*leaves)
            if out.size != 1:
                raise ValueError(f"f must be scalar-valued, got shape {out.shape}")
            return float(out.data), kinks

        with record_kinks() as base_kinks:
            out = f(*leaves)
        if out.size != 1:
            raise ValueError(f"f must be scalar-valued, got shape {out.shape}")
        base_val = float(out.data)
        backward(out)
        again, _ = evaluate()
        if again != base_val:
            raise NonDeterministicError(
                f"f is not deterministic: {base_val!r} != {again!r} on repeat evaluation"
            )

        def same_pattern(kinks: list) -> bool:
            return len(kinks) == len(base_kinks) and all(
                np.array_equal(a, b) for a, b in zip(kinks, base_kinks)
            )

        worst_err, worst_at = 0.0, None
        checked = skipped = 0
        per_tensor: dict[str, float] = {}
        for name, leaf in zip(names, leaves):
            analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
            flat = leaf.data.reshape(-1)
            coords = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
            numeric = np.zeros(coords.size)
            keep = np.ones(coords.size, dtype=bool)
            for k, idx in enumerate(coords):
                orig = flat[idx]
                # a step crossing a ReLU kink is retried once with a small step;
                # a coordinate still crossing sits within that distance of the kink
                for h in (step, kink_step):
                    flat[idx] = orig + h
                    fp, kp = evaluate()
                    flat[idx] = orig - h
                    fm, km = evaluate()
                    flat[idx] = orig
                    if same_pattern(kp) and same_pattern(km):
                        numeric[k] = (fp - fm) / (2.0 * h)
                        break
                else:
                    keep[k] = False
            a = analytic.reshape(-1)[coords][keep]
            n = numeric[keep]
            skipped += int((~keep).sum())
            checked += int(keep.sum())
            if n.size == 0:
                per_tensor[name] = 0.0
                continue
            scale = max(np.abs(a).max(), np.abs(n).max())
            errs = _rel_errors(a, n, floor=max(1e-3 * scale, 1e-8))
            i = int(errs.argmax())
            per_tensor[name] = float(errs[i])
            if errs[i] > worst_err:
                worst_err = float(errs[i])
                worst_at = (name, int(coords[keep][i]))

    return GradCheckReport(
        passed=worst_err <= tol,
        max_rel_error=worst_err,
        tol=tol,
        checked=checked,
        skipped_kinks=skipped,
        worst=worst_at,
        per_tensor=per_tensor,
    )
