"""Small MLP building blocks on top of the autodiff tape.

Hidden activations are softplus throughout: the deformation heads are
finite-difference checked, and kink-free activations keep those checks tight.
Final layers can be zero-initialized so a fresh network is exactly the zero
map (the identity-at-init contract for deformation).
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Var, value_of


class Linear:
    def __init__(self, w, b):
        self.w = w  # (in, out)
        self.b = b  # (out,)

    @staticmethod
    def init(rng: np.random.Generator, fan_in: int, fan_out: int,
             zero: bool = False, trainable: bool = True) -> "Linear":
        if zero:
            w = np.zeros((fan_in, fan_out))
            b = np.zeros(fan_out)
        else:
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-bound, bound, (fan_in, fan_out))
            b = np.zeros(fan_out)
        if trainable:
            return Linear(Var(w, requires_grad=True), Var(b, requires_grad=True))
        return Linear(w, b)

    def __call__(self, x):
        return ad.add(ad.matmul(x, self.w), self.b)


class MLP:
    """Dense stack: `dims` linear layers with softplus between them.

    `out_activation` in {None, "sigmoid", "tanh"}; `zero_last` zero-inits the
    final layer.
    """

    def __init__(self, rng: np.random.Generator, dims: list[int],
                 zero_last: bool = False, out_activation: str | None = None):
        if len(dims) < 2:
            raise ValueError("MLP needs at least input and output dims")
        self.dims = list(dims)
        self.out_activation = out_activation
        self.layers = []
        for i in range(len(dims) - 1):
            last = i == len(dims) - 2
            self.layers.append(Linear.init(rng, dims[i], dims[i + 1],
                                           zero=zero_last and last))

    def __call__(self, x):
        xv = value_of(x)
        if xv.shape[-1] != self.dims[0]:
            raise ValueError(
                f"input width {xv.shape[-1]} does not match layer width {self.dims[0]}")
        h = x
        for i, layer in enumerate(self.layers):
            h = layer(h)
            if i < len(self.layers) - 1:
                h = ad.softplus(h)
        if self.out_activation == "sigmoid":
            h = ad.sigmoid(h)
        elif self.out_activation == "tanh":
            h = ad.tanh(h)
        return h

    def params(self, prefix: str) -> dict:
        out = {}
        for i, layer in enumerate(self.layers):
            out[f"{prefix}.w{i}"] = layer.w
            out[f"{prefix}.b{i}"] = layer.b
        return out
