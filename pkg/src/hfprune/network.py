"""A trainable model: a validated graph plus its parameters and BN state."""

from __future__ import annotations

import copy
from typing import Optional

import numpy as np

from . import tensor as T
from .graph import NetworkGraph, check
from .tensor import BatchNormState, Parameter, Tensor


class Model:
    def __init__(
        self,
        graph: NetworkGraph,
        weights: dict[int, Parameter],
        biases: dict[int, Parameter],
        bn: dict[int, BatchNormState],
    ):
        self.graph = check(graph)
        self.weights = weights
        self.biases = biases
        self.bn = bn
        self._order = graph.execution_order()

    @classmethod
    def init(cls, graph: NetworkGraph, seed: int = 0, dtype=T.DEFAULT_DTYPE) -> "Model":
        """Fan-in scaled uniform weights, gamma = 1, beta = 0."""
        check(graph)
        rng = np.random.default_rng(seed)
        weights, biases, bn = {}, {}, {}
        for l in graph.layers:
            if l.kind == "conv":
                shape = (l.out_channels, l.in_channels, l.kernel, l.kernel)
            elif l.kind == "fc":
                shape = (l.out_channels, l.in_channels)
            elif l.kind == "batchnorm":
                bn[l.id] = BatchNormState.create(l.out_channels, dtype=dtype, name=f"L{l.id}")
                continue
            else:
                continue
            bound = np.sqrt(1.0 / (int(np.prod(shape[1:]))))
            weights[l.id] = Parameter(rng.uniform(-bound, bound, size=shape).astype(dtype), name=f"L{l.id}.weight")
            biases[l.id] = Parameter(rng.uniform(-bound, bound, size=shape[0]).astype(dtype), name=f"L{l.id}.bias")
        return cls(graph, weights, biases, bn)

    @property
    def dtype(self):
        return next(iter(self.weights.values())).dtype

    def parameters(self) -> list[Parameter]:
        out = []
        for l in self.graph.layers:
            if l.id in self.weights:
                out += [self.weights[l.id], self.biases[l.id]]
            elif l.id in self.bn:
                out += [self.bn[l.id].gamma, self.bn[l.id].beta]
        return out

    def gammas(self) -> dict[int, np.ndarray]:
        return {lid: s.gamma.data for lid, s in self.bn.items()}

    def forward(self, x, train: bool = False, return_all: bool = False):
        """Run the graph on ``x`` of shape [N, C, H, W]; returns logits."""
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=self.dtype))
        acts: dict[Optional[int], Tensor] = {None: x}
        for lid in self._order:
            l = self.graph.layer(lid)
            ins = [acts[p] for p in l.preds] if l.preds else [acts[None]]
            if l.kind == "conv":
                y = T.conv2d(ins[0], self.weights[lid], self.biases[lid], stride=l.stride, padding=l.padding)
            elif l.kind == "fc":
                y = T.linear(ins[0], self.weights[lid], self.biases[lid])
            elif l.kind == "batchnorm":
                y = T.batchnorm(ins[0], self.bn[lid], train=train)
            elif l.kind == "relu":
                y = T.relu(ins[0])
            elif l.kind == "maxpool":
                y = T.max_pool2d(ins[0], l.kernel, l.stride or l.kernel)
            elif l.kind == "gap":
                y = T.global_avg_pool(ins[0])
            elif l.kind == "add":
                y = T.add_n(ins)
            else:  # pragma: no cover - rejected by validation
                raise ValueError(l.kind)
            acts[lid] = y
        out = acts[self.graph.output_id()]
        return (out, acts) if return_all else out

    def predict(self, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """Inference-mode logits as a plain array."""
        outs = [self.forward(images[i:i + batch_size], train=False).data
                for i in range(0, len(images), batch_size)]
        return np.concatenate(outs) if outs else np.zeros((0, self.graph.num_classes), dtype=self.dtype)

    def accuracy(self, images: np.ndarray, labels: np.ndarray, batch_size: int = 256) -> float:
        if len(labels) == 0:
            return float("nan")
        return float((self.predict(images, batch_size).argmax(axis=1) == labels).mean())

    def copy(self) -> "Model":
        return copy.deepcopy(self)

    def astype(self, dtype) -> "Model":
        """Deep copy with every array cast to ``dtype``."""
        m = self.copy()
        for p in m.parameters():
            p.data = p.data.astype(dtype)
            p.velocity = p.velocity.astype(dtype)
            p.grad = None
        for s in m.bn.values():
            s.running_mean = s.running_mean.astype(dtype)
            s.running_var = s.running_var.astype(dtype)
        return m

    def state_arrays(self) -> list[tuple[str, np.ndarray]]:
        """Named arrays in layer order; this is the checkpoint blob layout."""
        out = []
        for l in self.graph.layers:
            if l.id in self.weights:
                out.append((f"L{l.id}.weight", self.weights[l.id].data))
                out.append((f"L{l.id}.bias", self.biases[l.id].data))
            elif l.id in self.bn:
                s = self.bn[l.id]
                out += [(f"L{l.id}.gamma", s.gamma.data), (f"L{l.id}.beta", s.beta.data),
                        (f"L{l.id}.running_mean", s.running_mean), (f"L{l.id}.running_var", s.running_var)]
        return out
