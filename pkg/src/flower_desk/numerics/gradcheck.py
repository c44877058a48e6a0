"""Central finite-difference gradient checking."""
from __future__ import annotations

from typing import Callable, Iterable

import numpy as np

from ..errors import ContractError
from . import tensor as T


def grad_check(
    f: Callable[[], T.Tensor],
    params: Iterable[T.Tensor],
    eps: float = 1e-5,
    max_entries: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between backprop and central differences.

    ``f`` is called with no arguments and must return a scalar tensor built
    from ``params``. Error per entry is ``|analytic - numeric| / max(1, |numeric|)``.
    With ``max_entries`` set, each parameter is probed at that many randomly
    chosen positions instead of every entry.
    """
    params = list(params)
    for p in params:
        if p.dtype != np.float64:
            raise ContractError("grad_check requires float64 parameters")

    T.get_tape().reset()
    for p in params:
        p.grad = None
    out = f()
    if out.data.size != 1:
        raise ContractError(f"grad_check needs a scalar-valued function, got shape {out.shape}")
    T.backward(out)
    analytic = [np.zeros_like(p.data) if p.grad is None else np.array(p.grad) for p in params]

    rng = np.random.default_rng(seed)
    worst = 0.0
    with T.no_grad():
        for p, ga in zip(params, analytic):
            flat = p.data.reshape(-1)
            if max_entries is not None and flat.size > max_entries:
                idx = rng.choice(flat.size, size=max_entries, replace=False)
            else:
                idx = range(flat.size)
            gflat = ga.reshape(-1)
            for i in idx:
                orig = flat[i]
                flat[i] = orig + eps
                fp = float(f().data)
                flat[i] = orig - eps
                fm = float(f().data)
                flat[i] = orig
                num = (fp - fm) / (2.0 * eps)
                err = abs(gflat[i] - num) / max(1.0, abs(num))
                worst = max(worst, err)
    for p in params:
        p.grad = None
    return worst
