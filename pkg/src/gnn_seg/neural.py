"""Minimal float64 neural kernel with explicit reverse-mode gradients.

Every block exposes `forward(...) -> (output, cache)` and
`backward(cache, d_output, grads) -> d_input`. Forward never mutates the
block, so one set of parameters can serve several threads as long as each
thread carries its own `GradBuffer`. Parameters change only in `adam_step`.
"""

from __future__ import annotations

import json
import struct
from collections.abc import Callable, Iterable, Iterator, Sequence
from dataclasses import dataclass, field
from typing import Any, Protocol

import numpy as np
import numpy.typing as npt

from gnn_seg.exceptions import CheckpointError, NumericalError, ValidationError

FloatArray = npt.NDArray[np.float64]
IntArray = npt.NDArray[np.int64]

ACTIVATIONS = ("identity", "elu", "leaky_relu", "sigmoid", "relu")
LEAKY_SLOPE = 0.2
GAT_COMBINES = ("concat", "average")

CHECKPOINT_FORMAT = "gnn-seg-checkpoint"
CHECKPOINT_VERSION = 1


class GraphTopology(Protocol):
    @property
    def n(self) -> int: ...

    @property
    def edges(self) -> IntArray: ...


# ---------------------------------------------------------------------------
# Activations
# ---------------------------------------------------------------------------


def _check_activation(name: str) -> None:
    if name not in ACTIVATIONS:
        raise ValidationError(f"unknown activation '{name}'", allowed=list(ACTIVATIONS))


def activate(name: str, z: FloatArray) -> FloatArray:
    if name == "identity":
        return z
    if name == "elu":
        return np.where(z > 0, z, np.expm1(np.minimum(z, 0.0)))
    if name == "leaky_relu":
        return np.where(z > 0, z, LEAKY_SLOPE * z)
    if name == "sigmoid":
        return 0.5 * (1.0 + np.tanh(0.5 * z))
    if name == "relu":
        return np.maximum(z, 0.0)
    raise ValidationError(f"unknown activation '{name}'", allowed=list(ACTIVATIONS))


def activation_grad(name: str, z: FloatArray, y: FloatArray) -> FloatArray:
    """Elementwise derivative given pre-activation z and output y."""
    if name == "identity":
        return np.ones_like(z)
    if name == "elu":
        return np.where(z > 0, 1.0, y + 1.0)
    if name == "leaky_relu":
        return np.where(z > 0, 1.0, LEAKY_SLOPE)
    if name == "sigmoid":
        return y * (1.0 - y)
    if name == "relu":
        return np.where(z > 0, 1.0, 0.0)
    raise ValidationError(f"unknown activation '{name}'", allowed=list(ACTIVATIONS))


def check_finite(layer: str, arr: FloatArray) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericalError("non-finite value in layer output", layer=layer)


# ---------------------------------------------------------------------------
# Parameters and gradient buffers
# ---------------------------------------------------------------------------


@dataclass
class Parameter:
    name: str
    value: FloatArray

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(int(s) for s in self.value.shape)

    @property
    def size(self) -> int:
        return int(self.value.size)


class GradBuffer:
    """Gradients keyed by parameter name, accumulated across backward calls."""

    def __init__(self) -> None:
        self._grads: dict[str, FloatArray] = {}

    def add(self, name: str, grad: FloatArray) -> None:
        if name in self._grads:
            self._grads[name] += grad
        else:
            self._grads[name] = np.array(grad, dtype=np.float64, copy=True)

    def get(self, name: str) -> FloatArray | None:
        return self._grads.get(name)

    def __getitem__(self, name: str) -> FloatArray:
        return self._grads[name]

    def __contains__(self, name: object) -> bool:
        return name in self._grads

    def __len__(self) -> int:
        return len(self._grads)

    def items(self) -> Iterator[tuple[str, FloatArray]]:
        return iter(self._grads.items())

    def merge(self, other: GradBuffer) -> None:
        for name, grad in other.items():
            self.add(name, grad)


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape: tuple[int, ...]) -> FloatArray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def count_scalars(params: Iterable[Parameter]) -> int:
    return sum(p.size for p in params)


# ---------------------------------------------------------------------------
# Dense layers and FCN stacks
# ---------------------------------------------------------------------------


@dataclass
class DenseLayer:
    name: str
    W: Parameter
    b: Parameter
    activation: str = "identity"

    def __post_init__(self) -> None:
        _check_activation(self.activation)
        if self.W.value.ndim != 2 or self.b.value.shape != (self.W.value.shape[1],):
            raise ValidationError(
                "dense layer shape mismatch", layer=self.name, W=self.W.shape, b=self.b.shape
            )

    @classmethod
    def init(
        cls,
        name: str,
        n_in: int,
        n_out: int,
        *,
        activation: str = "identity",
        rng: np.random.Generator,
    ) -> DenseLayer:
        if n_in < 1 or n_out < 1:
            raise ValidationError("layer widths must be positive", layer=name, n_in=n_in, n_out=n_out)
        return cls(
            name=name,
            W=Parameter(f"{name}.W", glorot_uniform(rng, n_in, n_out, (n_in, n_out))),
            b=Parameter(f"{name}.b", np.zeros(n_out, dtype=np.float64)),
            activation=activation,
        )

    @property
    def n_in(self) -> int:
        return int(self.W.value.shape[0])

    @property
    def n_out(self) -> int:
        return int(self.W.value.shape[1])

    def parameters(self) -> list[Parameter]:
        return [self.W, self.b]

    def forward(self, X: FloatArray) -> tuple[FloatArray, tuple[FloatArray, FloatArray, FloatArray]]:
        if X.ndim != 2 or X.shape[1] != self.n_in:
            raise ValidationError(
                "input width mismatch", layer=self.name, expected=self.n_in, got=list(X.shape)
            )
        Z = X @ self.W.value + self.b.value
        Y = activate(self.activation, Z)
        check_finite(self.name, Y)
        return Y, (X, Z, Y)

    def backward(
        self, cache: tuple[FloatArray, FloatArray, FloatArray], dY: FloatArray, grads: GradBuffer
    ) -> FloatArray:
        X, Z, Y = cache
        dZ = dY * activation_grad(self.activation, Z, Y)
        grads.add(self.W.name, X.T @ dZ)
        grads.add(self.b.name, dZ.sum(axis=0))
        dX = dZ @ self.W.value.T
        check_finite(f"{self.name}.backward", dX)
        return dX


@dataclass
class Fcn:
    """Fully connected stack applied row-wise."""

    name: str
    layers: list[DenseLayer]

    def __post_init__(self) -> None:
        if not self.layers:
            raise ValidationError("FCN needs at least one layer", layer=self.name)
        for prev, nxt in zip(self.layers, self.layers[1:], strict=False):
            if prev.n_out != nxt.n_in:
                raise ValidationError(
                    "FCN wiring mismatch", layer=nxt.name, expected=prev.n_out, got=nxt.n_in
                )

    @classmethod
    def init(
        cls,
        name: str,
        n_in: int,
        widths: Sequence[int],
        *,
        hidden_activation: str = "elu",
        output_activation: str | None = None,
        rng: np.random.Generator,
    ) -> Fcn:
        layers: list[DenseLayer] = []
        fan_in = n_in
        for i, width in enumerate(widths):
            last = i == len(widths) - 1
            act = output_activation if last and output_activation is not None else hidden_activation
            layers.append(DenseLayer.init(f"{name}.{i}", fan_in, width, activation=act, rng=rng))
            fan_in = width
        return cls(name=name, layers=layers)

    @property
    def n_in(self) -> int:
        return self.layers[0].n_in

    @property
    def n_out(self) -> int:
        return self.layers[-1].n_out

    def parameters(self) -> list[Parameter]:
        return [p for layer in self.layers for p in layer.parameters()]

    def forward(self, X: FloatArray) -> tuple[FloatArray, list[Any]]:
        caches: list[Any] = []
        out = X
        for layer in self.layers:
            out, cache = layer.forward(out)
            caches.append(cache)
        return out, caches

    def backward(self, caches: list[Any], dY: FloatArray, grads: GradBuffer) -> FloatArray:
        d = dY
        for layer, cache in zip(reversed(self.layers), reversed(caches), strict=True):
            d = layer.backward(cache, d, grads)
        return d


def fcn_forward(layers: Sequence[DenseLayer], X: FloatArray) -> FloatArray:
    out = np.asarray(X, dtype=np.float64)
    for layer in layers:
        out, _ = layer.forward(out)
    return out


# ---------------------------------------------------------------------------
# Graph layers
# ---------------------------------------------------------------------------


def attention_edges(graph: GraphTopology) -> tuple[IntArray, IntArray]:
    """Directed (center, neighbor) pairs over each node's closed neighborhood.

    Sorted by center, then neighbor; every node carries its self-loop.
    """
    edges = np.asarray(graph.edges, dtype=np.int64).reshape(-1, 2)
    loops = np.arange(graph.n, dtype=np.int64)
    center = np.concatenate([edges[:, 0], edges[:, 1], loops])
    neighbor = np.concatenate([edges[:, 1], edges[:, 0], loops])
    order = np.lexsort((neighbor, center))
    return center[order], neighbor[order]


def normalized_adjacency(graph: GraphTopology) -> FloatArray:
    """D^-1/2 (A + I) D^-1/2, dense."""
    n = graph.n
    a = np.eye(n, dtype=np.float64)
    edges = np.asarray(graph.edges, dtype=np.int64).reshape(-1, 2)
    a[edges[:, 0], edges[:, 1]] = 1.0
    a[edges[:, 1], edges[:, 0]] = 1.0
    inv_sqrt = 1.0 / np.sqrt(a.sum(axis=1))
    return a * inv_sqrt[:, None] * inv_sqrt[None, :]


def segment_starts(sorted_ids: IntArray, n: int) -> IntArray:
    """Offset of the first occurrence of each id 0..n-1 in a sorted id array.

    Every id must occur at least once; `np.add.reduceat` over these offsets
    then sums each id's run exactly.
    """
    return np.searchsorted(sorted_ids, np.arange(n, dtype=np.int64))


def _segment_softmax(logits: FloatArray, group: IntArray, starts: IntArray) -> FloatArray:
    """Softmax of (E, k) logits within each run of equal, sorted group ids."""
    peak = np.maximum.reduceat(logits, starts, axis=0)
    ex = np.exp(logits - peak[group])
    denom = np.add.reduceat(ex, starts, axis=0)
    return ex / denom[group]


@dataclass
class GatCache:
    H: FloatArray
    r: FloatArray  # (n, k, q)
    center: IntArray
    neighbor: IntArray
    starts: IntArray  # segment offsets of center
    by_neighbor: IntArray  # edge order sorted by neighbor
    neighbor_starts: IntArray  # segment offsets of neighbor[by_neighbor]
    e: FloatArray  # (E, k) raw logits before LeakyReLU
    theta: FloatArray  # (E, k)
    agg: FloatArray  # (n, k, q)
    out: FloatArray  # (n, k, q) after ELU


@dataclass
class GatLayer:
    """Multi-head graph attention.

    Per head: r = H W, logits LeakyReLU(a[:q].r_i + a[q:].r_j) softmax-normalized
    over j in the closed neighborhood of i, output ELU(sum_j theta_ij r_j).
    Heads are concatenated (width k * q) or averaged (width q).
    """

    name: str
    W: Parameter  # (k, p, q)
    a: Parameter  # (k, 2q)
    combine: str = "concat"

    def __post_init__(self) -> None:
        if self.combine not in GAT_COMBINES:
            raise ValidationError("combine must be concat or average", layer=self.name)
        if self.W.value.ndim != 3 or self.a.value.shape != (self.heads, 2 * self.q):
            raise ValidationError(
                "GAT parameter shape mismatch", layer=self.name, W=self.W.shape, a=self.a.shape
            )

    @classmethod
    def init(
        cls,
        name: str,
        p: int,
        q: int,
        heads: int,
        *,
        combine: str = "concat",
        rng: np.random.Generator,
    ) -> GatLayer:
        if p < 1 or q < 1 or heads < 1:
            raise ValidationError("GAT sizes must be positive", layer=name, p=p, q=q, heads=heads)
        W = np.stack([glorot_uniform(rng, p, q, (p, q)) for _ in range(heads)])
        a = np.stack([glorot_uniform(rng, 2 * q, 1, (2 * q,)) for _ in range(heads)])
        return cls(name=name, W=Parameter(f"{name}.W", W), a=Parameter(f"{name}.a", a), combine=combine)

    @property
    def heads(self) -> int:
        return int(self.W.value.shape[0])

    @property
    def p(self) -> int:
        return int(self.W.value.shape[1])

    @property
    def q(self) -> int:
        return int(self.W.value.shape[2])

    @property
    def n_in(self) -> int:
        return self.p

    @property
    def n_out(self) -> int:
        return self.heads * self.q if self.combine == "concat" else self.q

    def parameters(self) -> list[Parameter]:
        return [self.W, self.a]

    def forward(self, H: FloatArray, graph: GraphTopology) -> tuple[FloatArray, GatCache]:
        if H.ndim != 2 or H.shape != (graph.n, self.p):
            raise ValidationError(
                "GAT input shape mismatch",
                layer=self.name,
                expected=[graph.n, self.p],
                got=list(H.shape),
            )
        q = self.q
        W, a = self.W.value, self.a.value
        # every node owns a self-loop, so no segment below is empty
        center, neighbor = attention_edges(graph)
        starts = segment_starts(center, graph.n)
        by_neighbor = np.argsort(neighbor, kind="stable")
        neighbor_starts = segment_starts(neighbor[by_neighbor], graph.n)

        r = np.tensordot(H, W, axes=([1], [1]))  # (n, k, q)
        s_center = (r * a[None, :, :q]).sum(axis=2)
        s_neighbor = (r * a[None, :, q:]).sum(axis=2)
        e = s_center[center] + s_neighbor[neighbor]
        theta = _segment_softmax(activate("leaky_relu", e), center, starts)

        agg = np.add.reduceat(theta[:, :, None] * r[neighbor], starts, axis=0)
        out = activate("elu", agg)

        if self.combine == "concat":
            Y = out.reshape(graph.n, self.heads * q)
        else:
            Y = out.mean(axis=1)
        check_finite(self.name, Y)
        cache = GatCache(H, r, center, neighbor, starts, by_neighbor, neighbor_starts, e, theta, agg, out)
        return Y, cache

    def backward(self, cache: GatCache, dY: FloatArray, grads: GradBuffer) -> FloatArray:
        n = cache.H.shape[0]
        k, q = self.heads, self.q
        W, a = self.W.value, self.a.value
        center, neighbor, theta = cache.center, cache.neighbor, cache.theta
        starts, by_neighbor, neighbor_starts = cache.starts, cache.by_neighbor, cache.neighbor_starts

        if self.combine == "concat":
            d_out = dY.reshape(n, k, q)
        else:
            d_out = np.broadcast_to(dY[:, None, :] / k, (n, k, q))
        d_agg = d_out * activation_grad("elu", cache.agg, cache.out)

        d_agg_center = d_agg[center]  # (E, k, q)
        message = theta[:, :, None] * d_agg_center
        d_r = np.add.reduceat(message[by_neighbor], neighbor_starts, axis=0)

        d_theta = (d_agg_center * cache.r[neighbor]).sum(axis=2)
        weighted = np.add.reduceat(theta * d_theta, starts, axis=0)
        d_logit = theta * (d_theta - weighted[center])
        d_e = d_logit * activation_grad("leaky_relu", cache.e, cache.e)

        d_center = np.add.reduceat(d_e, starts, axis=0)
        d_neighbor = np.add.reduceat(d_e[by_neighbor], neighbor_starts, axis=0)

        d_a = np.concatenate(
            [
                (d_center[:, :, None] * cache.r).sum(axis=0),
                (d_neighbor[:, :, None] * cache.r).sum(axis=0),
            ],
            axis=1,
        )
        d_r = d_r + d_center[:, :, None] * a[None, :, :q] + d_neighbor[:, :, None] * a[None, :, q:]

        grads.add(self.W.name, np.tensordot(cache.H, d_r, axes=([0], [0])).transpose(1, 0, 2))
        grads.add(self.a.name, d_a)
        dH = np.tensordot(d_r, W, axes=([1, 2], [0, 2]))
        check_finite(f"{self.name}.backward", dH)
        return dH

    def attention(self, H: FloatArray, graph: GraphTopology) -> tuple[IntArray, IntArray, FloatArray]:
        """(center, neighbor, theta) with theta shaped (E, heads)."""
        _, cache = self.forward(H, graph)
        return cache.center, cache.neighbor, cache.theta


@dataclass
class GcnLayer:
    """act(P H W) with P the symmetric-normalized adjacency with self-loops."""

    name: str
    W: Parameter
    activation: str = "relu"

    def __post_init__(self) -> None:
        _check_activation(self.activation)
        if self.W.value.ndim != 2:
            raise ValidationError("GCN weight must be p x q", layer=self.name)

    @classmethod
    def init(
        cls, name: str, p: int, q: int, *, activation: str = "relu", rng: np.random.Generator
    ) -> GcnLayer:
        if p < 1 or q < 1:
            raise ValidationError("GCN sizes must be positive", layer=name, p=p, q=q)
        return cls(name=name, W=Parameter(f"{name}.W", glorot_uniform(rng, p, q, (p, q))), activation=activation)

    @property
    def n_in(self) -> int:
        return int(self.W.value.shape[0])

    @property
    def n_out(self) -> int:
        return int(self.W.value.shape[1])

    def parameters(self) -> list[Parameter]:
        return [self.W]

    def forward(
        self, H: FloatArray, graph: GraphTopology
    ) -> tuple[FloatArray, tuple[FloatArray, FloatArray, FloatArray, FloatArray]]:
        if H.ndim != 2 or H.shape != (graph.n, self.n_in):
            raise ValidationError(
                "GCN input shape mismatch",
                layer=self.name,
                expected=[graph.n, self.n_in],
                got=list(H.shape),
            )
        P = normalized_adjacency(graph)
        M = P @ H
        Z = M @ self.W.value
        Y = activate(self.activation, Z)
        check_finite(self.name, Y)
        return Y, (P, M, Z, Y)

    def backward(
        self,
        cache: tuple[FloatArray, FloatArray, FloatArray, FloatArray],
        dY: FloatArray,
        grads: GradBuffer,
    ) -> FloatArray:
        P, M, Z, Y = cache
        dZ = dY * activation_grad(self.activation, Z, Y)
        grads.add(self.W.name, M.T @ dZ)
        dH = P.T @ (dZ @ self.W.value.T)
        check_finite(f"{self.name}.backward", dH)
        return dH


GraphLayer = GatLayer | GcnLayer


@dataclass
class GraphStack:
    name: str
    layers: list[GraphLayer]

    def __post_init__(self) -> None:
        if not self.layers:
            raise ValidationError("graph stack needs at least one layer", layer=self.name)
        for prev, nxt in zip(self.layers, self.layers[1:], strict=False):
            if prev.n_out != nxt.n_in:
                raise ValidationError(
                    "graph stack wiring mismatch", layer=nxt.name, expected=prev.n_out, got=nxt.n_in
                )

    @property
    def n_in(self) -> int:
        return self.layers[0].n_in

    @property
    def n_out(self) -> int:
        return self.layers[-1].n_out

    def parameters(self) -> list[Parameter]:
        return [p for layer in self.layers for p in layer.parameters()]

    def forward(self, H: FloatArray, graph: GraphTopology) -> tuple[FloatArray, list[Any]]:
        caches: list[Any] = []
        out = H
        for layer in self.layers:
            out, cache = layer.forward(out, graph)
            caches.append(cache)
        return out, caches

    def backward(self, caches: list[Any], dY: FloatArray, grads: GradBuffer) -> FloatArray:
        d = dY
        for layer, cache in zip(reversed(self.layers), reversed(caches), strict=True):
            d = layer.backward(cache, d, grads)
        return d


def gat_forward(layer: GatLayer, H: FloatArray, graph: GraphTopology) -> FloatArray:
    return layer.forward(np.asarray(H, dtype=np.float64), graph)[0]


def gcn_forward(layer: GcnLayer, H: FloatArray, graph: GraphTopology) -> FloatArray:
    return layer.forward(np.asarray(H, dtype=np.float64), graph)[0]


# ---------------------------------------------------------------------------
# Interaction modules
# ---------------------------------------------------------------------------


@dataclass
class SelfInteraction:
    """O' = O + fcn(O)."""

    name: str
    fcn: DenseLayer

    def __post_init__(self) -> None:
        if self.fcn.n_in != self.fcn.n_out:
            raise ValidationError(
                "self-interaction FCN must preserve width",
                layer=self.name,
                n_in=self.fcn.n_in,
                n_out=self.fcn.n_out,
            )

    @classmethod
    def init(cls, name: str, width: int, *, activation: str = "elu", rng: np.random.Generator) -> SelfInteraction:
        return cls(name=name, fcn=DenseLayer.init(f"{name}.fcn", width, width, activation=activation, rng=rng))

    @property
    def width(self) -> int:
        return self.fcn.n_in

    def parameters(self) -> list[Parameter]:
        return self.fcn.parameters()

    def forward(self, O: FloatArray) -> tuple[FloatArray, Any]:
        inner, cache = self.fcn.forward(O)
        return O + inner, cache

    def backward(self, cache: Any, dY: FloatArray, grads: GradBuffer) -> FloatArray:
        return dY + self.fcn.backward(cache, dY, grads)


@dataclass
class MutualInteraction:
    """cat(fcn1(O2) + O1, fcn2(O1) + O2)."""

    name: str
    fcn1: DenseLayer  # width(O2) -> width(O1)
    fcn2: DenseLayer  # width(O1) -> width(O2)

    def __post_init__(self) -> None:
        if self.fcn1.n_in != self.fcn2.n_out or self.fcn2.n_in != self.fcn1.n_out:
            raise ValidationError(
                "mutual-interaction FCN widths do not cross-match",
                layer=self.name,
                fcn1=[self.fcn1.n_in, self.fcn1.n_out],
                fcn2=[self.fcn2.n_in, self.fcn2.n_out],
            )

    @classmethod
    def init(
        cls, name: str, w1: int, w2: int, *, activation: str = "elu", rng: np.random.Generator
    ) -> MutualInteraction:
        return cls(
            name=name,
            fcn1=DenseLayer.init(f"{name}.fcn1", w2, w1, activation=activation, rng=rng),
            fcn2=DenseLayer.init(f"{name}.fcn2", w1, w2, activation=activation, rng=rng),
        )

    @property
    def w1(self) -> int:
        return self.fcn1.n_out

    @property
    def w2(self) -> int:
        return self.fcn2.n_out

    @property
    def n_out(self) -> int:
        return self.w1 + self.w2

    def parameters(self) -> list[Parameter]:
        return self.fcn1.parameters() + self.fcn2.parameters()

    def forward(self, O1: FloatArray, O2: FloatArray) -> tuple[FloatArray, tuple[Any, Any]]:
        if O1.shape[0] != O2.shape[0]:
            raise ValidationError(
                "mutual-interaction row mismatch", layer=self.name, rows1=O1.shape[0], rows2=O2.shape[0]
            )
        cross1, cache1 = self.fcn1.forward(O2)
        cross2, cache2 = self.fcn2.forward(O1)
        return np.hstack([cross1 + O1, cross2 + O2]), (cache1, cache2)

    def backward(
        self, cache: tuple[Any, Any], dY: FloatArray, grads: GradBuffer
    ) -> tuple[FloatArray, FloatArray]:
        cache1, cache2 = cache
        d1 = dY[:, : self.w1]
        d2 = dY[:, self.w1 :]
        dO1 = d1 + self.fcn2.backward(cache2, d2, grads)
        dO2 = d2 + self.fcn1.backward(cache1, d1, grads)
        return dO1, dO2


def self_interaction(O: FloatArray, fcn: DenseLayer) -> FloatArray:
    return SelfInteraction("self_interaction", fcn).forward(np.asarray(O, dtype=np.float64))[0]


def mutual_interaction(O1: FloatArray, O2: FloatArray, fcn1: DenseLayer, fcn2: DenseLayer) -> FloatArray:
    module = MutualInteraction("mutual_interaction", fcn1, fcn2)
    return module.forward(np.asarray(O1, dtype=np.float64), np.asarray(O2, dtype=np.float64))[0]


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, FloatArray] = field(default_factory=dict)
    v: dict[str, FloatArray] = field(default_factory=dict)

    def validate(self) -> None:
        if self.lr < 0:
            raise ValidationError("learning rate must be >= 0", lr=self.lr)
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValidationError("Adam betas must lie in [0, 1)", beta1=self.beta1, beta2=self.beta2)
        if self.eps <= 0:
            raise ValidationError("Adam eps must be > 0", eps=self.eps)


def adam_step(params: Sequence[Parameter], grads: GradBuffer, state: AdamState) -> AdamState:
    """Bias-corrected Adam update, applied in place to `params`.

    A parameter without a gradient in `grads` is treated as having a zero one.
    """
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for p in params:
        g = grads.get(p.name)
        if g is None:
            g = np.zeros_like(p.value)
        elif g.shape != p.value.shape:
            raise ValidationError(
                "gradient shape mismatch", parameter=p.name, expected=p.shape, got=list(g.shape)
            )
        m = state.m.setdefault(p.name, np.zeros_like(p.value))
        v = state.v.setdefault(p.name, np.zeros_like(p.value))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        m_hat = m / c1
        v_hat = v / c2
        p.value -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return state


# ---------------------------------------------------------------------------
# Finite differences
# ---------------------------------------------------------------------------


def numeric_gradient(loss: Callable[[], float], value: FloatArray, eps: float = 1e-5) -> FloatArray:
    """Central differences of `loss` w.r.t. `value`, perturbed in place and restored."""
    grad = np.zeros_like(value)
    flat = value.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + eps
        plus = loss()
        flat[i] = original - eps
        minus = loss()
        flat[i] = original
        out[i] = (plus - minus) / (2.0 * eps)
    return grad


def relative_error(analytic: FloatArray, numeric: FloatArray) -> float:
    scale = max(float(np.max(np.abs(analytic), initial=0.0)), float(np.max(np.abs(numeric), initial=0.0)), 1e-8)
    return float(np.max(np.abs(analytic - numeric), initial=0.0)) / scale


# ---------------------------------------------------------------------------
# Checkpoint payload
# ---------------------------------------------------------------------------

_HEADER_LEN = struct.Struct("<Q")


def pack_parameters(params: Sequence[Parameter], header: dict[str, Any]) -> bytes:
    """8-byte little-endian header length, JSON header, then '<f8' values in order."""
    meta = dict(header)
    meta["format"] = CHECKPOINT_FORMAT
    meta["version"] = CHECKPOINT_VERSION
    meta["parameters"] = [{"name": p.name, "shape": list(p.shape)} for p in params]
    head = json.dumps(meta, sort_keys=True).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(p.value, dtype="<f8").tobytes() for p in params)
    return _HEADER_LEN.pack(len(head)) + head + payload


def unpack_parameters(raw: bytes) -> tuple[dict[str, Any], dict[str, FloatArray]]:
    if len(raw) < _HEADER_LEN.size:
        raise CheckpointError("checkpoint truncated before header length")
    (head_len,) = _HEADER_LEN.unpack_from(raw, 0)
    start = _HEADER_LEN.size
    if start + head_len > len(raw):
        raise CheckpointError("checkpoint truncated inside header")
    try:
        header = json.loads(raw[start : start + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"checkpoint header is not valid JSON: {e}") from e
    if header.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError("not a gnn-seg checkpoint", format=header.get("format"))
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError("unsupported checkpoint version", version=header.get("version"))

    values: dict[str, FloatArray] = {}
    offset = start + head_len
    for entry in header.get("parameters", []):
        shape = tuple(int(s) for s in entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        end = offset + 8 * count
        if end > len(raw):
            raise CheckpointError("checkpoint payload truncated", parameter=entry["name"])
        values[entry["name"]] = np.frombuffer(raw[offset:end], dtype="<f8").astype(np.float64).reshape(shape)
        offset = end
    if offset != len(raw):
        raise CheckpointError("trailing bytes after checkpoint payload", extra=len(raw) - offset)
    return header, values
