"""Adam with bias correction."""
from __future__ import annotations

from collections import OrderedDict

import numpy as np


class Adam:
    def __init__(self, names_shapes, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = OrderedDict((k, np.zeros(s)) for k, s in names_shapes)
        self.v = OrderedDict((k, np.zeros(s)) for k, s in names_shapes)

    @classmethod
    def for_store(cls, store, **kw) -> "Adam":
        return cls([(k, t.shape) for k, t in store.params.items()], **kw)

    def step(self, params: dict, grads: dict) -> None:
        """In-place update of ``params`` (name -> array or Tensor) by descent on ``grads``."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, g in grads.items():
            m = self.m[k] = b1 * self.m[k] + (1.0 - b1) * g
            v = self.v[k] = b2 * self.v[k] + (1.0 - b2) * g * g
            upd = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p = params[k]
            if isinstance(p, np.ndarray):
                p -= upd
            else:
                p.data = p.data - upd

    def state(self) -> dict:
        return {"t": self.t, "m": self.m, "v": self.v}

    def load_state(self, t: int, m: dict, v: dict) -> None:
        self.t = t
        for k in self.m:
            self.m[k] = np.asarray(m[k], float).reshape(self.m[k].shape)
            self.v[k] = np.asarray(v[k], float).reshape(self.v[k].shape)


def adam_step(params: dict, grads: dict, opt: Adam) -> dict:
    opt.step(params, grads)
    return params
