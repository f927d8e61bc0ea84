"""Central finite-difference gradient checking."""
from __future__ import annotations

from typing import Callable

import numpy as np

from .layers import ParamStore
from .tensor import Tape, Tensor, no_grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-7) -> float:
    """max |a - n| / max(|a|, |n|, floor) over entries."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def check_gradients(loss_fn: Callable[[], Tensor], store: ParamStore, h: float = 1e-5,
                    floor: float = 1e-7) -> dict[str, float]:
    """Max relative error per parameter between tape gradients and central differences.

    ``loss_fn`` must build a scalar loss from the tensors in ``store``. The
    absolute floor of the error denominator scales with the largest gradient
    entry, so entries that are exactly zero (e.g. a bias cancelled by a
    softmax) are judged against round-off at the loss's own scale.
    """
    store.zero_grad()
    with Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    analytic = store.grads()
    scale = max((float(np.abs(g).max()) for g in analytic.values() if g.size), default=0.0)
    floor = floor * max(1.0, scale)
    errs = {}
    with no_grad():
        for name, t in store.params.items():
            num = np.zeros_like(t.data)
            flat = t.data.reshape(-1)
            for i in range(flat.size):
                old = flat[i]
                flat[i] = old + h
                fp = loss_fn().item()
                flat[i] = old - h
                fm = loss_fn().item()
                flat[i] = old
                num.reshape(-1)[i] = (fp - fm) / (2 * h)
            errs[name] = relative_error(analytic[name], num, floor)
    return errs


def check_input_gradient(fn: Callable[[Tensor], Tensor], x: np.ndarray, h: float = 1e-5,
                         floor: float = 1e-7) -> float:
    """Relative error of d sum(w * fn(x)) / dx for a fixed random projection w."""
    x = np.array(x, dtype=float)
    xt = Tensor(x, requires_grad=True)
    with Tape() as tape:
        out = fn(xt)
    w = np.random.default_rng(0).standard_normal(out.shape)
    tape.backward(out, seed_grad=w)
    analytic = xt.grad if xt.grad is not None else np.zeros_like(x)
    num = np.zeros_like(x)
    with no_grad():
        for i in range(x.size):
            xp = x.copy().reshape(-1); xp[i] += h
            xm = x.copy().reshape(-1); xm[i] -= h
            fp = float((fn(Tensor(xp.reshape(x.shape))).data * w).sum())
            fm = float((fn(Tensor(xm.reshape(x.shape))).data * w).sum())
            num.reshape(-1)[i] = (fp - fm) / (2 * h)
    return relative_error(analytic, num, floor)
