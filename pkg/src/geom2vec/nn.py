"""Layer primitives built on the autodiff engine.

Modules hold named :class:`~geom2vec.autodiff.Tensor` parameters and expose
them recursively through :meth:`Module.named_parameters`, which is what the
optimizers and the checkpoint writer consume.  Initialization draws from an
explicit ``numpy.random.Generator`` so that every model build is seeded.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

__all__ = ["Module", "Linear", "LayerNorm", "Embedding", "Dropout", "MLP", "parameter"]


def parameter(data):
    return Tensor(np.asarray(data), requires_grad=True)


class Module:
    """Base class with recursive parameter discovery."""

    def named_parameters(self, prefix=""):
        out = {}
        for name, value in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                out[key] = value
            elif isinstance(value, Module):
                out.update(value.named_parameters(prefix=f"{key}."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(prefix=f"{key}.{i}."))
                    elif isinstance(item, Tensor) and item.requires_grad:
                        out[f"{key}.{i}"] = item
        return out

    def zero_grad(self):
        for p in self.named_parameters().values():
            p.grad = None

    def state_arrays(self):
        """Parameter payloads by name (plain ndarrays)."""
        return {k: v.data for k, v in sorted(self.named_parameters().items())}

    def load_state_arrays(self, arrays):
        params = self.named_parameters()
        missing = set(params) - set(arrays)
        extra = set(arrays) - set(params)
        if missing or extra:
            raise KeyError(f"parameter name mismatch (missing={sorted(missing)}, extra={sorted(extra)})")
        for name, p in params.items():
            src = np.asarray(arrays[name])
            if src.shape != p.data.shape:
                raise ValueError(f"shape mismatch for '{name}': {src.shape} vs {p.data.shape}")
            p.data = src.astype(p.data.dtype, copy=True)

    def astype(self, dtype):
        for p in self.named_parameters().values():
            p.data = p.data.astype(dtype)
        return self


class Linear(Module):
    def __init__(self, d_in, d_out, rng, bias=True, dtype=np.float64, zero_init=False):
        bound = 1.0 / np.sqrt(d_in)
        if zero_init:
            w = np.zeros((d_in, d_out))
        else:
            w = rng.uniform(-bound, bound, size=(d_in, d_out))
        self.weight = parameter(w.astype(dtype))
        self.bias = parameter(np.zeros(d_out, dtype=dtype)) if bias else None

    def __call__(self, x):
        y = ad.matmul(x, self.weight)
        if self.bias is not None:
            y = y + self.bias
        return y


class LayerNorm(Module):
    def __init__(self, d, dtype=np.float64, eps=1e-6):
        self.gamma = parameter(np.ones(d, dtype=dtype))
        self.beta = parameter(np.zeros(d, dtype=dtype))
        self.eps = eps

    def __call__(self, x):
        mu = ad.tmean(x, axis=-1, keepdims=True)
        centered = x - mu
        var = ad.tmean(centered * centered, axis=-1, keepdims=True)
        return centered / ad.sqrt(var + self.eps) * self.gamma + self.beta


class Embedding(Module):
    def __init__(self, n, d, rng, dtype=np.float64):
        self.weight = parameter(rng.normal(0.0, 1.0, size=(n, d)).astype(dtype))

    def __call__(self, idx):
        return ad.take0(self.weight, np.asarray(idx, dtype=np.intp))


class Dropout(Module):
    """Inverted dropout; active only when an rng is supplied."""

    def __init__(self, p):
        self.p = float(p)

    def __call__(self, x, rng=None):
        if rng is None or self.p <= 0.0:
            return x
        keep = 1.0 - self.p
        mask = (rng.random(x.shape) < keep).astype(x.dtype) / keep
        return x * mask


class MLP(Module):
    """Stack of Linear layers with SiLU between them and optional dropout."""

    def __init__(self, dims, rng, dtype=np.float64, dropout=0.0):
        self.layers = [Linear(a, b, rng, dtype=dtype) for a, b in zip(dims[:-1], dims[1:])]
        self.drop = Dropout(dropout)

    def __call__(self, x, rng=None):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = ad.silu(x)
                x = self.drop(x, rng)
        return x
