"""Conditioner networks: linear layers, batch norm, MLPs, relational graph conv.

Networks live inside coupling layers and compute scale/translation values from
the masked part of the input, so they never need to be inverted themselves.
Every output head is zero-initialized, which makes a freshly built model the
exact identity map.
"""
from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .tensor import Tensor


class Module:
    """Tree of named parameters (trainable) and buffers (running state)."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._buffers: dict[str, np.ndarray] = {}
        self._children: dict[str, "Module"] = {}

    def register_parameter(self, name: str, value: Tensor) -> Tensor:
        self._params[name] = value
        return value

    def register_buffer(self, name: str, value: np.ndarray) -> np.ndarray:
        self._buffers[name] = np.asarray(value, dtype=np.float64)
        return self._buffers[name]

    def register_child(self, name: str, child: "Module") -> "Module":
        self._children[name] = child
        return child

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in self._params.items():
            yield prefix + name, value
        for cname, child in self._children.items():
            yield from child.named_parameters(prefix + cname + ".")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, value in self._buffers.items():
            yield prefix + name, value
        for cname, child in self._children.items():
            yield from child.named_buffers(prefix + cname + ".")

    def get_parameter(self, name: str) -> Tensor:
        module, leaf = self._resolve(name)
        return module._params[leaf]

    def set_parameter(self, name: str, value: Tensor) -> None:
        module, leaf = self._resolve(name)
        old = module._params[leaf]
        if old.shape != value.shape:
            raise ShapeError(f"parameter {name}: shape {value.shape} != {old.shape}")
        module._params[leaf] = value

    def set_buffer(self, name: str, value: np.ndarray) -> None:
        module, leaf = self._resolve(name)
        old = module._buffers[leaf]
        value = np.asarray(value, dtype=np.float64)
        if old.shape != value.shape:
            raise ShapeError(f"buffer {name}: shape {value.shape} != {old.shape}")
        module._buffers[leaf] = value

    def _resolve(self, name: str) -> tuple["Module", str]:
        module = self
        parts = name.split(".")
        for part in parts[:-1]:
            if part not in module._children:
                raise KeyError(f"no submodule {part!r} while resolving {name!r}")
            module = module._children[part]
        leaf = parts[-1]
        if leaf not in module._params and leaf not in module._buffers:
            raise KeyError(f"no parameter or buffer named {name!r}")
        return module, leaf

    def parameter_dict(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def load_parameters(self, values: dict[str, Tensor]) -> None:
        for name, value in values.items():
            self.set_parameter(name, value)


def glorot(rng: np.random.Generator, n_in: int, n_out: int) -> Tensor:
    bound = np.sqrt(6.0 / (n_in + n_out))
    return Tensor(rng.uniform(-bound, bound, size=(n_in, n_out)))


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, zero_init: bool = False):
        super().__init__()
        weight = Tensor(np.zeros((n_in, n_out))) if zero_init else glorot(rng, n_in, n_out)
        self.register_parameter("weight", weight)
        self.register_parameter("bias", Tensor(np.zeros(n_out)))

    def __call__(self, x: Tensor) -> Tensor:
        return T.add(T.matmul(x, self._params["weight"]), self._params["bias"])


class BatchNorm(Module):
    """Normalize over all axes except the last (features).

    Training mode uses batch statistics and updates the running estimates;
    evaluation mode applies the frozen running statistics, making the module
    a fixed affine map.
    """

    def __init__(self, num_features: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.register_parameter("gamma", Tensor(np.ones(num_features)))
        self.register_parameter("beta", Tensor(np.zeros(num_features)))
        self.register_buffer("running_mean", np.zeros(num_features))
        self.register_buffer("running_var", np.ones(num_features))

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        axes = tuple(range(x.ndim - 1))
        if training:
            mean = T.mean_axis(x, axes)
            centered = T.sub(x, mean)
            var = T.mean_axis(T.mul(centered, centered), axes)
            m = self.momentum
            self._buffers["running_mean"] = (1 - m) * self._buffers["running_mean"] + m * mean.data
            self._buffers["running_var"] = (1 - m) * self._buffers["running_var"] + m * var.data
        else:
            mean = Tensor(self._buffers["running_mean"])
            centered = T.sub(x, mean)
            var = Tensor(self._buffers["running_var"])
        inv_std = T.power(T.add(var, Tensor(self.eps)), -0.5)
        normed = T.mul(centered, inv_std)
        return T.add(T.mul(normed, self._params["gamma"]), self._params["beta"])


class MlpNet(Module):
    """Fully connected net; hidden relu layers, zero-initialized output head."""

    def __init__(
        self,
        n_in: int,
        hidden: tuple[int, ...],
        n_out: int,
        rng: np.random.Generator,
        batch_norm: bool = True,
    ):
        super().__init__()
        self.batch_norm = batch_norm
        widths = [n_in, *hidden]
        for k in range(len(hidden)):
            self.register_child(f"lin{k}", Linear(widths[k], widths[k + 1], rng))
            if batch_norm:
                self.register_child(f"bn{k}", BatchNorm(widths[k + 1]))
        self.n_hidden = len(hidden)
        self.register_child("head", Linear(widths[-1], n_out, rng, zero_init=True))

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        h = x
        for k in range(self.n_hidden):
            h = self._children[f"lin{k}"](h)
            if self.batch_norm:
                h = self._children[f"bn{k}"](h, training)
            h = T.relu(h)
        return self._children["head"](h)


class RelGraphRound(Module):
    """One message-passing round: per-bond-channel linear + self-loop term."""

    def __init__(self, n_in: int, n_out: int, num_relations: int, rng: np.random.Generator):
        super().__init__()
        self.num_relations = num_relations
        bound = np.sqrt(6.0 / (n_in + n_out))
        self.register_parameter(
            "rel_weight", Tensor(rng.uniform(-bound, bound, size=(num_relations, n_in, n_out)))
        )
        self.register_parameter("self_weight", glorot(rng, n_in, n_out))
        self.register_parameter("bias", Tensor(np.zeros(n_out)))

    def __call__(self, h: Tensor, adjacency: np.ndarray) -> Tensor:
        # adjacency: constant [batch, N, N, R]; h: [batch, N, F].
        out = T.matmul(h, self._params["self_weight"])
        for r in range(self.num_relations):
            w_r = T.index_axis(self._params["rel_weight"], 0, r)
            messages = T.matmul(Tensor(adjacency[..., r]), T.matmul(h, w_r))
            out = T.add(out, messages)
        return T.add(out, self._params["bias"])


class RelationalGraphConvNet(Module):
    """Message passing over the discrete adjacency tensor, one output row.

    Returns the zero-initialized head applied to the embedding of a single
    target node, so the output only depends on the other nodes' features and
    the graph structure.
    """

    def __init__(
        self,
        n_in: int,
        hidden: int,
        n_out: int,
        num_relations: int,
        rounds: int,
        rng: np.random.Generator,
        batch_norm: bool = True,
    ):
        super().__init__()
        self.rounds = rounds
        self.batch_norm = batch_norm
        widths = [n_in] + [hidden] * rounds
        for k in range(rounds):
            self.register_child(f"round{k}", RelGraphRound(widths[k], widths[k + 1], num_relations, rng))
            if batch_norm:
                self.register_child(f"bn{k}", BatchNorm(widths[k + 1]))
        self.register_child("head", Linear(hidden, n_out, rng, zero_init=True))

    def __call__(self, x: Tensor, adjacency: np.ndarray, row: int, training: bool) -> Tensor:
        h = x
        for k in range(self.rounds):
            h = self._children[f"round{k}"](h, adjacency)
            if self.batch_norm:
                h = self._children[f"bn{k}"](h, training)
            h = T.tanh(h)
        return self._children["head"](T.index_axis(h, 1, row))
