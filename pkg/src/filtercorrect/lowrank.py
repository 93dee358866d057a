"""Rank-constrained separable approximations of k x k convolutions.

A full bank ``W`` (N, C, k, k) is rearranged into ``M`` of shape (C*k, N*k)
with ``M[c*k + a, n*k + b] = W[n, c, a, b]``. A rank-``P`` truncated SVD of
``M`` gives ``P`` vertical (k x 1 x C) filters and ``N`` horizontal
(1 x k x P) filters whose composition is the best rank-``P`` approximation
in Frobenius norm.
"""

from __future__ import annotations

import heapq
import json
from dataclasses import dataclass

import numpy as np

from .netgraph.accounting import cost_report
from .nn.graph import GraphError
from .nn.layers import Conv2D, SeparableConv2D


class DecompositionError(ValueError):
    pass


def conv_matrix(W) -> np.ndarray:
    N, C, kh, kw = W.shape
    if kh != kw:
        raise DecompositionError(f"only square kernels can be decomposed, got {kh}x{kw}")
    return np.ascontiguousarray(np.asarray(W).transpose(1, 2, 0, 3)).reshape(C * kh, N * kw)


def max_rank(W) -> int:
    N, C, k, _ = W.shape
    return min(k * C, k * N)


def decompose_conv(W, P):
    """Return ``(V, H, err)``: banks of shape (P, C, k, 1) and (N, P, 1, k).

    ``err`` is the relative Frobenius error of the rank-``P`` approximation,
    i.e. the norm of the discarded singular values over ``||M||_F``.
    """
    W = np.asarray(W)
    N, C, k, _ = W.shape
    P = int(P)
    if not 1 <= P <= max_rank(W):
        raise DecompositionError(f"rank P={P} outside 1..{max_rank(W)} for kernel shape {W.shape}")
    M = conv_matrix(W).astype(np.float64)
    total = np.linalg.norm(M)
    if total == 0:
        return np.zeros((P, C, k, 1), W.dtype), np.zeros((N, P, 1, k), W.dtype), 0.0
    U, s, Vt = np.linalg.svd(M, full_matrices=False)
    root = np.sqrt(s[:P])
    V = (U[:, :P] * root).T.reshape(P, C, k, 1)
    H = (Vt[:P].T * root).reshape(N, k, P).transpose(0, 2, 1)[:, :, None, :]
    err = float(np.sqrt(np.sum(s[P:] ** 2)) / total)
    return V.astype(W.dtype), np.ascontiguousarray(H).astype(W.dtype), err


def spectrum(W) -> np.ndarray:
    return np.linalg.svd(conv_matrix(W).astype(np.float64), compute_uv=False)


# ---------------------------------------------------------------------------
# rank selection
# ---------------------------------------------------------------------------


@dataclass
class DecompositionSpec:
    per_layer: dict | None = None
    budget_ratio: float | None = None

    def __post_init__(self):
        if (self.per_layer is None) == (self.budget_ratio is None):
            raise DecompositionError("give exactly one of per_layer or budget_ratio")
        if self.budget_ratio is not None and not self.budget_ratio > 0:
            raise DecompositionError(f"budget_ratio must be positive, got {self.budget_ratio}")
        if self.per_layer is not None:
            self.per_layer = {str(k): int(v) for k, v in self.per_layer.items()}

    def to_json(self) -> dict:
        if self.per_layer is not None:
            return {"per_layer": dict(sorted(self.per_layer.items()))}
        return {"budget_ratio": self.budget_ratio}

    @classmethod
    def from_json(cls, d) -> DecompositionSpec:
        if "per_layer" in d:
            return cls(per_layer=d["per_layer"])
        if "budget_ratio" in d:
            return cls(budget_ratio=float(d["budget_ratio"]))
        raise DecompositionError("decomposition spec needs 'per_layer' or 'budget_ratio'")

    @classmethod
    def load(cls, path) -> DecompositionSpec:
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))

    def resolve(self, graph, reference_flops=None, layers=None) -> DecompositionSpec:
        """Per-layer form; a budget ratio is taken relative to ``reference_flops`` (default: ``graph``)."""
        if self.per_layer is not None:
            return self
        ref = cost_report(graph).flops if reference_flops is None else reference_flops
        return choose_ranks(graph, self.budget_ratio * ref, layers)


def candidate_layers(graph, layers=None):
    """Decomposable convs: square k > 1, ungrouped. ``layers`` restricts the search."""
    out = []
    for n in graph.nodes:
        if layers is not None and n.id not in layers:
            continue
        lay = n.layer
        if isinstance(lay, Conv2D) and lay.kernel[0] == lay.kernel[1] > 1 and lay.groups == 1:
            out.append(n.id)
    return out


def _separable_cost(layer, in_shape, P):
    sep = SeparableConv2D(layer.in_channels, layer.out_channels, P, layer.kernel[0], layer.stride, layer.padding)
    return sep.flops([in_shape])


def breakeven_rank(layer, in_shape) -> int:
    """Largest P whose separable cost is strictly below the full conv cost (0 if none)."""
    full = layer.flops([in_shape])
    per = _separable_cost(layer, in_shape, 1)
    return int((full - 1) // per) if per else 0


def choose_ranks(graph, budget, layers=None) -> DecompositionSpec:
    """Greedy rank selection under a total FLOP ``budget`` for the whole graph.

    Starting from full rank everywhere, the component with the smallest
    normalised energy ``sigma_p^2 / ||M||_F^2`` across all candidate layers is
    dropped until the graph cost fits. A layer counts at its full-conv cost
    until its rank falls below the breakeven point, where replacing it
    becomes cheaper. 1x1 convolutions are never candidates.
    """
    rep = cost_report(graph)
    shapes = graph.shapes()
    cands = candidate_layers(graph, layers)
    if not cands:
        raise DecompositionError("no decomposable convolution layers")
    full_cost = {e.node_id: e.flops for e in rep.entries}
    fixed = rep.flops - sum(full_cost[c] for c in cands)

    state = {}
    for c in cands:
        node = graph.node(c)
        in_shape = shapes[node.inputs[0]]
        W = node.layer.params["weight"]
        s2 = spectrum(W) ** 2
        tot = s2.sum()
        energy = s2 / tot if tot > 0 else np.zeros_like(s2)
        unit = _separable_cost(node.layer, in_shape, 1)
        state[c] = {"rank": max_rank(W), "energy": energy, "unit": unit, "full": full_cost[c]}

    def layer_cost(st):
        return min(st["full"], st["unit"] * st["rank"])

    floor = fixed + sum(min(st["full"], st["unit"]) for st in state.values())
    if budget < floor:
        raise DecompositionError(f"budget {budget:.4g} FLOPs is infeasible; the minimum (P=1 everywhere) is {floor:.4g}")

    cost = fixed + sum(layer_cost(st) for st in state.values())
    # heap of (energy of the next component to drop, layer order, layer id)
    order = {c: k for k, c in enumerate(cands)}
    heap = [(st["energy"][st["rank"] - 1], order[c], c) for c, st in state.items() if st["rank"] > 1]
    heapq.heapify(heap)
    while cost > budget and heap:
        _, _, c = heapq.heappop(heap)
        st = state[c]
        before = layer_cost(st)
        st["rank"] -= 1
        cost += layer_cost(st) - before
        if st["rank"] > 1:
            heapq.heappush(heap, (st["energy"][st["rank"] - 1], order[c], c))
    return DecompositionSpec(per_layer={c: st["rank"] for c, st in state.items()})


# ---------------------------------------------------------------------------
# conversion
# ---------------------------------------------------------------------------


def separable_from_conv(layer: Conv2D, P):
    """SeparableConv2D approximating ``layer`` at rank ``P`` (bias moves to the horizontal bank)."""
    if layer.groups != 1:
        raise DecompositionError("grouped convolutions are not decomposed")
    V, H, err = decompose_conv(layer.params["weight"], P)
    sep = SeparableConv2D(
        layer.in_channels, layer.out_channels, P, layer.kernel[0], layer.stride, layer.padding, layer.bias
    )
    sep.params["vertical"] = V
    sep.params["horizontal"] = H
    if layer.bias:
        sep.params["bias"] = layer.params["bias"].copy()
    sep.trainable = layer.trainable
    return sep, err


def convert_model(graph, spec: DecompositionSpec, only_profitable=True, reference_flops=None):
    """Copy of ``graph`` with the Conv2D layers named in ``spec`` replaced by separable banks.

    With ``only_profitable`` a layer is left as a full convolution when its
    rank is too high for the separable form to be cheaper. Returns
    ``(graph, errors)`` with the per-layer relative reconstruction errors.
    """
    spec = spec.resolve(graph, reference_flops)
    g = graph.copy()
    shapes = g.shapes()
    errors = {}
    for node_id, P in spec.per_layer.items():
        if node_id not in g:
            raise GraphError(f"decomposition spec names unknown layer {node_id!r}")
        node = g.node(node_id)
        if not isinstance(node.layer, Conv2D):
            raise GraphError(f"{node_id!r} is a {node.layer.kind}, not a Conv2D")
        if node.layer.kernel[0] == 1:
            raise GraphError(f"{node_id!r} is a 1x1 convolution and is not decomposed")
        in_shape = shapes[node.inputs[0]]
        if only_profitable and P > breakeven_rank(node.layer, in_shape):
            continue
        node.layer, errors[node_id] = separable_from_conv(node.layer, P)
    g.meta["decomposition"] = {k: int(v) for k, v in spec.per_layer.items() if k in errors}
    return g, errors
