"""Central finite-difference oracle for analytic gradients."""
from __future__ import annotations

from typing import Callable

import numpy as np

from .array import ContractError, DiffArray, no_grad
from .params import ParamStore
from .rng import generator


def reverse_gradients(loss: DiffArray, params: ParamStore) -> None:
    """Populate ``grad`` on every parameter; parameters the loss does not reach get zeros."""
    if loss.size != 1:
        raise ContractError(f"loss must be a scalar, got shape {loss.shape}")
    loss.backward()
    params.fill_missing_grads()


def finite_difference_check(f: Callable[[ParamStore], DiffArray], params: ParamStore,
                            h: float = 1e-5, max_entries: int | None = None,
                            seed: int = 0, details: bool = False):
    """Max over parameter entries of |analytic - cd| / max(|analytic|, |cd|, 1e-12).

    ``max_entries`` caps how many entries of each parameter tensor are probed
    (chosen by a seeded draw); ``None`` probes every entry.
    """
    params.zero_grad()
    loss = f(params)
    with no_grad():
        again = f(params)
    if not np.array_equal(loss.data, again.data):
        raise ContractError("objective is not deterministic: two evaluations differ")
    reverse_gradients(loss, params)
    analytic = {n: p.grad.copy() for n, p in params.items()}
    params.zero_grad()

    worst = 0.0
    report = {}
    for name, p in params.items():
        flat = p.data.reshape(-1)
        if max_entries is None or flat.size <= max_entries:
            idx = np.arange(flat.size)
        else:
            idx = np.sort(generator(seed, "fd", name).choice(flat.size, max_entries, replace=False))
        a_flat = analytic[name].reshape(-1)
        err_p = 0.0
        for i in idx:
            orig = flat[i]
            with no_grad():
                flat[i] = orig + h
                fp = float(f(params).data)
                flat[i] = orig - h
                fm = float(f(params).data)
            flat[i] = orig
            cd = (fp - fm) / (2.0 * h)
            a = float(a_flat[i])
            err = abs(a - cd) / max(abs(a), abs(cd), 1e-12)
            err_p = max(err_p, err)
        report[name] = err_p
        worst = max(worst, err_p)
    return (worst, report) if details else worst
