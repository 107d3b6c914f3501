"""Parameter bookkeeping and the small trainable building blocks.

Everything trainable in this package is a named float64 tensor registered in a
:class:`ParamStore`. Names are dot-paths (``head.gate.w1``); the store is
ordered by registration, which fixes both the checkpoint layout and the
optimizer iteration order, so runs are reproducible byte for byte.
"""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor

__all__ = ["ParamStore", "Linear", "LayerNorm", "BatchNorm", "Mlp", "he_uniform"]


def he_uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    """Kaiming-style uniform init: U(−√(6/fan_in), +√(6/fan_in))."""
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class ParamStore:
    """Ordered name → Tensor registry for trainable state.

    ``buffers`` holds non-trainable running state (plain numpy arrays, e.g.
    batch-norm statistics) that still belongs in checkpoints.
    """

    def __init__(self) -> None:
        self._params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def register(self, name: str, value: np.ndarray, trainable: bool = True) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name: {name}")
        t = Tensor(np.asarray(value, dtype=np.float64), requires_grad=trainable)
        self._params[name] = t
        return t

    def register_buffer(self, name: str, value: np.ndarray) -> np.ndarray:
        if name in self.buffers:
            raise ValueError(f"duplicate buffer name: {name}")
        arr = np.asarray(value, dtype=np.float64)
        self.buffers[name] = arr
        return arr

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return list(self._params)

    def items(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self._params.items())

    def tensors(self) -> list[Tensor]:
        return list(self._params.values())

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        """All persistable state: parameters plus buffers, in order."""
        out = {name: p.data for name, p in self._params.items()}
        for name, arr in self.buffers.items():
            out["buffer." + name] = arr
        return out

    def load_state_arrays(self, state: dict[str, np.ndarray]) -> None:
        for name, p in self._params.items():
            if name not in state:
                raise KeyError(f"checkpoint missing parameter {name}")
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.data.shape:
                raise ValueError(
                    f"shape mismatch for {name}: have {p.data.shape}, loaded {arr.shape}"
                )
            p.data = arr.copy()
        for name, buf in self.buffers.items():
            key = "buffer." + name
            if key not in state:
                raise KeyError(f"checkpoint missing buffer {name}")
            arr = np.asarray(state[key], dtype=np.float64)
            if arr.shape != buf.shape:
                raise ValueError(f"shape mismatch for buffer {name}")
            buf[...] = arr


class Linear:
    """y = x @ W + b (bias optional)."""

    def __init__(
        self,
        store: ParamStore,
        name: str,
        rng: np.random.Generator,
        d_in: int,
        d_out: int,
        bias: bool = True,
        bias_init: float | np.ndarray = 0.0,
    ) -> None:
        self.w = store.register(name + ".w", he_uniform(rng, d_in, (d_in, d_out)))
        self.b = None
        if bias:
            b0 = np.broadcast_to(np.asarray(bias_init, dtype=np.float64), (d_out,))
            self.b = store.register(name + ".b", np.array(b0))

    def __call__(self, x: Tensor) -> Tensor:
        out = T.matmul(x, self.w)
        if self.b is not None:
            out = T.add(out, self.b)
        return out


class LayerNorm:
    """Last-axis layer normalization with learnable scale/shift."""

    def __init__(self, store: ParamStore, name: str, dim: int) -> None:
        self.gamma = store.register(name + ".gamma", np.ones(dim))
        self.beta = store.register(name + ".beta", np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return T.layernorm(x, self.gamma, self.beta)


class BatchNorm:
    """Batch normalization over axis 0 with running statistics (momentum 0.1)."""

    def __init__(self, store: ParamStore, name: str, dim: int, momentum: float = 0.1) -> None:
        self.gamma = store.register(name + ".gamma", np.ones(dim))
        self.beta = store.register(name + ".beta", np.zeros(dim))
        self.running_mean = store.register_buffer(name + ".running_mean", np.zeros(dim))
        self.running_var = store.register_buffer(name + ".running_var", np.ones(dim))
        self.momentum = momentum

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return T.batchnorm(
            x,
            self.gamma,
            self.beta,
            self.running_mean,
            self.running_var,
            training=training,
            momentum=self.momentum,
        )


class Mlp:
    """Stack of Linears with one activation between layers.

    ``dims`` lists the full width sequence, e.g. ``(96, 16, 1)`` is a
    two-layer head. ``activation`` applies after every layer but the last.
    """

    def __init__(
        self,
        store: ParamStore,
        name: str,
        rng: np.random.Generator,
        dims: tuple[int, ...],
        activation: str = "gelu",
        final_bias: float = 0.0,
    ) -> None:
        if len(dims) < 2:
            raise ValueError("Mlp needs at least input and output widths")
        self.layers: list[Linear] = []
        self.activation = activation
        for i in range(len(dims) - 1):
            last = i == len(dims) - 2
            self.layers.append(
                Linear(
                    store,
                    f"{name}.l{i}",
                    rng,
                    dims[i],
                    dims[i + 1],
                    bias_init=final_bias if last else 0.0,
                )
            )

    def __call__(self, x: Tensor) -> Tensor:
        act = {
            "gelu": T.gelu,
            "relu": T.relu,
            "elu": T.elu,
        }[self.activation]
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = act(x)
        return x
