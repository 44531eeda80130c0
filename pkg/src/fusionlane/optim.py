"""Named parameter store and the two in-place optimizers used for training."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor

__all__ = ["ParamStore", "MissingGradientError", "optimizer_step"]

ADAM_DEFAULTS = {"beta1": 0.9, "beta2": 0.999, "eps": 1e-8}
MOMENTUM_DEFAULTS = {"mu": 0.9}


class MissingGradientError(RuntimeError):
    """A parameter reached optimizer_step without a populated gradient."""


class ParamStore:
    """Uniquely named trainable tensors plus per-parameter optimizer state."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self.state: dict[str, dict] = {}

    def create(self, name: str, data) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(data, requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self):
        return list(self._params)

    def items(self):
        return self._params.items()

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None


def optimizer_step(params: ParamStore, kind: str, lr: float, hyper: dict | None = None) -> None:
    """Apply one Adam or momentum-SGD update in place, then clear all gradients."""
    if kind == "adam":
        hp = dict(ADAM_DEFAULTS)
    elif kind == "momentum":
        hp = dict(MOMENTUM_DEFAULTS)
    else:
        raise ValueError(f"unknown optimizer kind {kind!r}")
    if hyper:
        hp.update(hyper)

    for name, p in params.items():
        if p.grad is None:
            raise MissingGradientError(f"parameter {name!r} has no gradient")

    for name, p in params.items():
        g = p.grad
        st = params.state.setdefault(name, {})
        if kind == "adam":
            m = st.setdefault("m", np.zeros_like(p.data))
            v = st.setdefault("v", np.zeros_like(p.data))
            t = st.get("t", 0) + 1
            st["t"] = t
            m *= hp["beta1"]
            m += (1.0 - hp["beta1"]) * g
            v *= hp["beta2"]
            v += (1.0 - hp["beta2"]) * (g * g)
            mhat = m / (1.0 - hp["beta1"] ** t)
            vhat = v / (1.0 - hp["beta2"] ** t)
            p.data -= (lr * mhat / (np.sqrt(vhat) + hp["eps"])).astype(p.data.dtype)
        else:
            vel = st.setdefault("vel", np.zeros_like(p.data))
            vel *= hp["mu"]
            vel += g
            p.data -= (lr * vel).astype(p.data.dtype)
        p.grad = None
