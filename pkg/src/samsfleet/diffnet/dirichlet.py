"""Dirichlet sampling, log-density and entropy, differentiable in the concentrations."""
from __future__ import annotations

import numpy as np
from scipy import special

from . import tensor as T
from .tensor import Tensor

EPS_CONC = 1e-3
EPS_SIMPLEX = 1e-6


class DistributionError(ValueError):
    pass


def _check_conc(conc: np.ndarray) -> None:
    if not np.all(np.isfinite(conc)) or (conc <= 0).any():
        raise DistributionError("Dirichlet concentrations must be finite and positive")


def clamp_simplex(x, eps: float = EPS_SIMPLEX) -> np.ndarray:
    """Clip each row away from the simplex boundary and renormalize."""
    x = np.maximum(np.asarray(x, dtype=float), eps)
    return x / x.sum(axis=-1, keepdims=True)


def dirichlet_sample(conc, rng) -> np.ndarray:
    """One draw per row via normalized Gamma variates."""
    conc = np.asarray(conc, dtype=float)
    _check_conc(conc)
    g = rng.gamma(conc)
    s = g.sum(axis=-1, keepdims=True)
    # all-underflow rows (tiny concentrations) fall back to the largest component
    bad = (s <= 0).reshape(-1)
    if bad.any():
        g = g.reshape(-1, conc.shape[-1])
        c2 = conc.reshape(-1, conc.shape[-1])
        for r in np.flatnonzero(bad):
            g[r] = 0.0
            g[r, np.argmax(c2[r])] = 1.0
        g = g.reshape(conc.shape)
        s = g.sum(axis=-1, keepdims=True)
    return clamp_simplex(g / s)


def dirichlet_mean(conc) -> np.ndarray:
    conc = np.asarray(conc, dtype=float)
    return conc / conc.sum(axis=-1, keepdims=True)


def dirichlet_logpdf(conc, x) -> Tensor:
    """Row-wise log-density (rows x 1) of ``x`` under Dir(``conc``).

    log Gamma(sum a) - sum log Gamma(a_k) + sum (a_k - 1) log x_k; the gradient
    w.r.t. a_k is digamma(sum a) - digamma(a_k) + log x_k.
    """
    conc = T.as_tensor(conc)
    _check_conc(conc.data)
    x = clamp_simplex(x)
    if x.shape != conc.shape:
        raise DistributionError(f"x shape {x.shape} vs concentrations {conc.shape}")
    total = T.sum(conc, axis=1, keepdims=True)
    return (T.lgamma(total) - T.sum(T.lgamma(conc), axis=1, keepdims=True)
            + T.sum(T.mul(conc - 1.0, np.log(x)), axis=1, keepdims=True))


def dirichlet_logpdf_value(conc, x) -> float:
    """Scalar joint log-density summed over rows (no gradient)."""
    conc = np.asarray(conc, dtype=float)
    _check_conc(conc)
    x = clamp_simplex(x)
    return float(np.sum(special.gammaln(conc.sum(axis=-1)) - special.gammaln(conc).sum(axis=-1)
                        + ((conc - 1.0) * np.log(x)).sum(axis=-1)))


def digamma(a) -> Tensor:
    a = T.as_tensor(a)
    return T._make(special.digamma(a.data), (a,),
                   lambda g: T._accum(a, g * special.polygamma(1, a.data)))


def dirichlet_entropy(conc) -> Tensor:
    """Row-wise differential entropy (rows x 1)."""
    conc = T.as_tensor(conc)
    k = conc.shape[1]
    total = T.sum(conc, axis=1, keepdims=True)
    log_b = T.sum(T.lgamma(conc), axis=1, keepdims=True) - T.lgamma(total)
    return (log_b + T.mul(total - float(k), digamma(total))
            - T.sum(T.mul(conc - 1.0, digamma(conc)), axis=1, keepdims=True))
