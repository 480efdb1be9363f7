"""Finite-difference verification of analytic gradients.

The harness treats the model as a black-box scalar loss closure. It first
probes the closure for determinism (two forward passes must agree bitwise),
then records one taped forward/backward for the analytic gradients, then
perturbs parameter elements one at a time and compares against central
differences (L(t+h) - L(t-h)) / 2h.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Parameter, Tape, backward, zero_gradients
from .errors import ContractError, DeterminismError
from .seeding import GRADCHECK, derive_rng


@dataclass
class GradCheckEntry:
    name: str
    checked: int
    max_rel_err: float
    passed: bool


def finite_diff_check(loss_fn, params, step: float = 1e-5, tolerance: float = 1e-4,
                      max_elements: int | None = None, seed: int = 0,
                      corrupt: str | None = None) -> list[GradCheckEntry]:
    """Compare analytic gradients of loss_fn against central finite differences.

    loss_fn: zero-argument closure returning a scalar loss Tensor. It is
        called many times and must be deterministic (run in eval mode or
        with a fixed dropout seed).
    params: parameters to check; all must be high precision (float64),
        standard precision drowns the comparison in rounding noise.
    max_elements: per-parameter cap; larger parameters are checked on a
        seeded random subsample of elements.
    corrupt: name of one parameter whose analytic gradient is doubled
        before comparison. Negative-control hook, used by tests and the
        CLI to prove the check can fail.
    """
    params = list(params)
    for p in params:
        if p.value.dtype != np.float64:
            raise ContractError(f"finite_diff_check needs high precision, {p.name} is {p.value.dtype}")
    if corrupt is not None and corrupt not in {p.name for p in params}:
        raise ContractError(f"corrupt target {corrupt!r} is not among the checked parameters")

    l1 = loss_fn()
    l2 = loss_fn()
    if l1.data.tobytes() != l2.data.tobytes():
        raise DeterminismError("loss closure is not deterministic; gradient check would be meaningless")

    zero_gradients(params)
    with Tape() as tape:
        loss = loss_fn()
    backward(tape, loss)

    rng = derive_rng(seed, GRADCHECK)
    results = []
    for p in params:
        analytic = p.gradient.data.reshape(-1).copy()
        if corrupt == p.name:
            analytic *= 2.0
        flat = p.value.data.reshape(-1)
        n = flat.size
        if max_elements is not None and n > max_elements:
            idxs = np.sort(rng.choice(n, size=max_elements, replace=False))
        else:
            idxs = np.arange(n)
        max_err = 0.0
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + step
            lp = float(loss_fn().data)
            flat[i] = orig - step
            lm = float(loss_fn().data)
            flat[i] = orig
            numeric = (lp - lm) / (2.0 * step)
            err = abs(analytic[i] - numeric) / max(abs(analytic[i]), abs(numeric), 1e-6)
            if err > max_err:
                max_err = err
        results.append(GradCheckEntry(p.name, int(len(idxs)), max_err, max_err < tolerance))
    return results


def check_parameter_grads(loss_fn, params: list[Parameter], **kw) -> list[GradCheckEntry]:
    """finite_diff_check restricted to trainable parameters."""
    return finite_diff_check(loss_fn, [p for p in params if p.trainable], **kw)
