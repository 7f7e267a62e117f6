"""
Parameter containers and the small set of layers the detector is built from.
"""

from __future__ import annotations

from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from src.models.errors import ShapeError
from src.services.tensor import Tensor, as_tensor


class Parameter(Tensor):
    """
    A learnable tensor. Its shape is fixed at construction; the optimizer
    replaces values through ``assign``.
    """

    def __init__(self, data, name: Optional[str] = None) -> None:
        super().__init__(np.array(data, dtype=np.float64), True, name)
        self._shape = self.data.shape

    def assign(self, values: np.ndarray) -> None:
        values = np.asarray(values, dtype=np.float64)
        if values.shape != self._shape:
            raise ShapeError(
                f"parameter {self.name or '?'} has shape {self._shape}, "
                f"cannot assign {values.shape}"
            )
        self.data = values


class Module:
    """
    Base class for anything that owns parameters.

    Parameters and sub-modules are discovered from instance attributes in
    definition order, giving dotted names such as ``encoder.layers.0.norm1
    .weight``. A parameter reachable under several names is reported once,
    under the first.
    """

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):  # pragma: no cover - interface
        raise NotImplementedError

    def _children(self) -> Iterator[Tuple[str, object]]:
        yield from vars(self).items()

    def named_parameters(self, prefix: str = "") -> List[Tuple[str, Parameter]]:
        seen: set[int] = set()
        result: List[Tuple[str, Parameter]] = []
        self._collect(prefix, seen, result)
        return result

    def _collect(
        self,
        prefix: str,
        seen: set,
        result: List[Tuple[str, Parameter]],
    ) -> None:
        for attr, value in self._children():
            if attr.startswith("_"):
                continue
            name = f"{prefix}{attr}"
            if isinstance(value, Parameter):
                if id(value) not in seen:
                    seen.add(id(value))
                    value.name = value.name or name
                    result.append((name, value))
            elif isinstance(value, Module):
                if id(value) not in seen:
                    seen.add(id(value))
                    value._collect(f"{name}.", seen, result)

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for param in self.parameters():
            param.zero_grad()

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise ShapeError(
                f"state mismatch; missing={missing} unexpected={unexpected}"
            )
        for name, param in own.items():
            param.assign(state[name])


class ModuleList(Module):
    def __init__(self, modules: Sequence[Module]) -> None:
        self.items = list(modules)

    def _children(self) -> Iterator[Tuple[str, object]]:
        for index, module in enumerate(self.items):
            yield str(index), module

    def __iter__(self) -> Iterator[Module]:
        return iter(self.items)

    def __len__(self) -> int:
        return len(self.items)

    def __getitem__(self, index: int) -> Module:
        return self.items[index]


def xavier_uniform(
    rng: np.random.Generator, fan_in: int, fan_out: int
) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class Linear(Module):
    """
    ``y = x @ weight + bias`` with ``weight[in_features, out_features]``.
    """

    def __init__(
        self,
        in_features: int,
        out_features: int,
        rng: np.random.Generator,
        bias: bool = True,
        zero_init: bool = False,
    ) -> None:
        if zero_init:
            weight = np.zeros((in_features, out_features))
        else:
            weight = xavier_uniform(rng, in_features, out_features)
        self.weight = Parameter(weight)
        self.bias = Parameter(np.zeros(out_features)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        out = as_tensor(x) @ self.weight
        if self.bias is not None:
            out = out + self.bias
        return out


def layer_norm(
    x: Tensor, weight: Tensor, bias: Tensor, eps: float = 1e-5
) -> Tensor:
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return centered / (var + eps).sqrt() * weight + bias


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5) -> None:
        self.weight = Parameter(np.ones(dim))
        self.bias = Parameter(np.zeros(dim))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.weight, self.bias, self.eps)


class MLP(Module):
    """
    Stack of ``num_layers`` linear layers with ReLU in between. The last layer
    can start at zero so the head initially predicts a zero offset.
    """

    def __init__(
        self,
        in_dim: int,
        hidden_dim: int,
        out_dim: int,
        num_layers: int,
        rng: np.random.Generator,
        zero_last: bool = False,
    ) -> None:
        dims = [in_dim] + [hidden_dim] * (num_layers - 1) + [out_dim]
        self.layers = ModuleList(
            [
                Linear(
                    dims[i],
                    dims[i + 1],
                    rng,
                    zero_init=zero_last and i == num_layers - 1,
                )
                for i in range(num_layers)
            ]
        )

    def forward(self, x: Tensor) -> Tensor:
        last = len(self.layers) - 1
        for index, layer in enumerate(self.layers):
            x = layer(x)
            if index < last:
                x = x.relu()
        return x


class FeedForward(Module):
    def __init__(
        self, d_model: int, hidden: int, rng: np.random.Generator
    ) -> None:
        self.linear1 = Linear(d_model, hidden, rng)
        self.linear2 = Linear(hidden, d_model, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.linear2(self.linear1(x).relu())
