"""Split the encoder into N contiguous modules."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Tuple

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .model import Encoder, QuantizedModel, as_tensor, classify, embed, layer_forward


@dataclass(frozen=True)
class Partition:
    """Boundaries ``l_1 = 0 < l_2 < ... < l_{N+1} = L``; module n owns ``[l_n, l_{n+1})``."""

    boundaries: Tuple[int, ...]

    def __post_init__(self):
        b = self.boundaries
        if len(b) < 2 or b[0] != 0 or any(x >= y for x, y in zip(b, b[1:])):
            raise ValueError(f"invalid partition boundaries {b}")

    @property
    def num_modules(self) -> int:
        return len(self.boundaries) - 1

    @property
    def num_layers(self) -> int:
        return self.boundaries[-1]

    def layers(self, n: int) -> Tuple[int, int]:
        """Layer range of module ``n`` (1-based)."""
        if not 1 <= n <= self.num_modules:
            raise ValueError(f"module index {n} outside 1..{self.num_modules}")
        return self.boundaries[n - 1], self.boundaries[n]


def partition_layers(num_layers: int, n: int) -> Partition:
    """Balanced split; module sizes differ by at most one, larger modules first."""
    if not 1 <= n <= num_layers:
        raise ValueError(f"need 1 <= N <= L, got N={n}, L={num_layers}")
    base, extra = divmod(num_layers, n)
    b = [0]
    for i in range(n):
        b.append(b[-1] + base + (1 if i < extra else 0))
    return Partition(tuple(b))


def module_param_names(model: Encoder, part: Partition, n: int) -> List[str]:
    a, b = part.layers(n)
    names = []
    for k in model.params:
        if k.startswith("embed/"):
            own = n == 1
        elif k.startswith("head/"):
            own = n == part.num_modules
        else:
            own = a <= int(k.split("/", 1)[0][5:]) < b
        if own:
            names.append(k)
    return names


class ModuleView:
    """One module of a (possibly quantized) encoder.

    ``forward`` takes tokens for the first module and a hidden state otherwise,
    and returns the outputs the module is scored on: ``f_0`` (first module only),
    each owned layer's output, and the logits (last module only). The boundary
    tensor handed to the next module is ``outputs[boundary_index]``.
    """

    def __init__(self, model: Encoder, part: Partition, n: int):
        self.model = model
        self.part = part
        self.n = n
        self.first = n == 1
        self.last = n == part.num_modules
        self.layer_range = part.layers(n)
        self.param_names = module_param_names(model, part, n)
        self.params: Dict[str, Tensor] = {k: model.params[k] for k in self.param_names}
        if isinstance(model, QuantizedModel):
            for k, spec in model.sites.items():
                if spec is None or spec.step is None:
                    continue
                if (k.startswith("embed/") and self.first) or (
                    k.startswith("layer") and self.layer_range[0] <= int(k.split("/", 1)[0][5:]) < self.layer_range[1]
                ):
                    self.params["qspec/" + k] = spec.step

    @property
    def trainable(self) -> Dict[str, Tensor]:
        return {k: t for k, t in self.params.items() if t.requires_grad}

    @property
    def boundary_index(self) -> int:
        return -2 if self.last else -1

    def forward(self, inp) -> List[Tensor]:
        m = self.model
        outs = []
        if self.first:
            x = embed(m, inp)
            outs.append(x)
        else:
            x = as_tensor(inp, m.dtype)
        for l in range(*self.layer_range):
            x = layer_forward(m, l, x)
            outs.append(x)
        if self.last:
            outs.append(classify(m, x))
        return outs

    def boundary(self, inp, batch: int = 512) -> np.ndarray:
        """Boundary tensor for many inputs at once, without building a graph."""
        chunks = []
        with ag.no_grad():
            for i in range(0, len(inp), batch):
                chunks.append(self.forward(inp[i:i + batch])[self.boundary_index].data)
        return np.concatenate(chunks)


def module_view(model: Encoder, part: Partition, n: int) -> ModuleView:
    return ModuleView(model, part, n)
