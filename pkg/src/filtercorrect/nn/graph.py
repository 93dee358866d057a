"""Static layer graph, forward/backward execution and the gradient tape."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .layers import Layer, ShapeError, SoftmaxCrossEntropy

INPUT = "input"


class GraphError(ValueError):
    """Malformed graph, or a batch that does not fit the graph."""


class StateError(RuntimeError):
    """Operation called out of order (e.g. backward without a training forward)."""


@dataclass
class Node:
    id: str
    layer: Layer
    inputs: list[str]
    group: str | None = None


class ModelGraph:
    """Ordered list of layer nodes ending in a single loss head.

    ``sites`` lists the node ids whose (pre-nonlinearity) outputs are the
    per-filter units used for susceptibility ranking and correction.
    """

    def __init__(self, input_shape, name="graph"):
        self.input_shape = tuple(int(v) for v in input_shape)
        self.name = name
        self.nodes: list[Node] = []
        self.sites: list[str] = []
        self.meta: dict = {}
        self._pos: dict[str, int] = {}

    # -- construction -----------------------------------------------------
    def add(self, node_id, layer, inputs=None, group=None):
        if node_id in self._pos or node_id == INPUT:
            raise GraphError(f"duplicate node id {node_id!r}")
        if inputs is None:
            inputs = [self.nodes[-1].id if self.nodes else INPUT]
        elif isinstance(inputs, str):
            inputs = [inputs]
        for i in inputs:
            if i != INPUT and i not in self._pos:
                raise GraphError(f"node {node_id!r} references unknown or later node {i!r}")
        self._pos[node_id] = len(self.nodes)
        self.nodes.append(Node(node_id, layer, list(inputs), group))
        return node_id

    def insert_after(self, anchor, new_nodes):
        """Insert ``new_nodes`` (list of Node) right after ``anchor``, keeping order valid."""
        at = self.index(anchor) + 1
        self.nodes[at:at] = new_nodes
        self._reindex()

    def _reindex(self):
        self._pos = {n.id: k for k, n in enumerate(self.nodes)}

    # -- queries ----------------------------------------------------------
    def index(self, node_id) -> int:
        try:
            return self._pos[node_id]
        except KeyError:
            raise GraphError(f"no node {node_id!r}") from None

    def node(self, node_id) -> Node:
        return self.nodes[self.index(node_id)]

    def __contains__(self, node_id):
        return node_id in self._pos

    def __len__(self):
        return len(self.nodes)

    @property
    def loss_node(self) -> Node:
        heads = [n for n in self.nodes if isinstance(n.layer, SoftmaxCrossEntropy)]
        if len(heads) != 1 or heads[0] is not self.nodes[-1]:
            raise GraphError("graph must end in exactly one SoftmaxCrossEntropy head")
        return heads[0]

    @property
    def logits_id(self) -> str:
        return self.loss_node.inputs[0]

    @property
    def num_classes(self) -> int:
        return self.shapes()[self.logits_id][0]

    def consumers(self, node_id):
        return [n for n in self.nodes if node_id in n.inputs]

    def shapes(self) -> dict:
        """Per-sample output shape of every node (plus the graph input)."""
        out = {INPUT: self.input_shape}
        for n in self.nodes:
            try:
                out[n.id] = tuple(n.layer.out_shape([out[i] for i in n.inputs]))
            except (ShapeError, KeyError) as exc:
                raise GraphError(f"cannot resolve shape of {n.id!r}: {exc}") from exc
        return out

    def validate(self):
        seen = {INPUT}
        for n in self.nodes:
            if len(n.inputs) != n.layer.n_inputs and not isinstance(n.layer, SoftmaxCrossEntropy):
                raise GraphError(f"{n.id!r} expects {n.layer.n_inputs} inputs, has {len(n.inputs)}")
            for i in n.inputs:
                if i not in seen:
                    raise GraphError(f"{n.id!r} references {i!r} before it is defined")
            seen.add(n.id)
        _ = self.loss_node
        self.shapes()
        for s in self.sites:
            self.index(s)

    def parameters(self, trainable_only=False):
        """Yield ``(node_id, name, array)`` for every parameter tensor."""
        for n in self.nodes:
            if trainable_only and not n.layer.trainable:
                continue
            for name, arr in n.layer.params.items():
                yield n.id, name, arr

    def set_trainable(self, flag, node_ids=None):
        for n in self.nodes:
            if node_ids is None or n.id in node_ids:
                n.layer.trainable = bool(flag)

    def copy(self) -> ModelGraph:
        # read-only arrays cannot change, so copies share them
        memo = {
            id(a): a
            for n in self.nodes
            for d in (n.layer.params, n.layer.buffers)
            for a in d.values()
            if isinstance(a, np.ndarray) and not a.flags.writeable
        }
        return copy.deepcopy(self, memo)

    def astype(self, dtype) -> ModelGraph:
        g = self.copy()
        for n in g.nodes:
            for k in n.layer.params:
                n.layer.params[k] = n.layer.params[k].astype(dtype)
            for k in n.layer.buffers:
                n.layer.buffers[k] = n.layer.buffers[k].astype(dtype)
        return g

    @property
    def dtype(self):
        for _, _, arr in self.parameters():
            return arr.dtype
        return np.dtype(np.float32)

    def grad_path(self) -> set:
        """Nodes whose output gradient is needed because trainable params lie upstream."""
        path = set()
        for n in self.nodes:
            own = n.layer.trainable and bool(n.layer.params)
            if own or any(i in path for i in n.inputs):
                path.add(n.id)
        return path

    def init_params(self, seed=0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        for n in self.nodes:
            n.layer.init_params(rng, dtype)
        return self

    def __repr__(self):
        return f"ModelGraph({self.name!r}, input={self.input_shape}, nodes={len(self.nodes)})"


# ---------------------------------------------------------------------------
# execution
# ---------------------------------------------------------------------------


@dataclass
class ForwardResult:
    acts: dict
    mode: str
    logits_id: str
    caches: dict = field(default_factory=dict)
    labels: np.ndarray | None = None
    loss: float | None = None
    loss_cache: tuple | None = None

    @property
    def logits(self):
        return self.acts[self.logits_id]


@dataclass
class GradientTape:
    grads: dict
    loss: float

    def __getitem__(self, key):
        return self.grads[key]

    def __contains__(self, key):
        return key in self.grads


def forward(graph, x, mode="eval", labels=None, *, given=None, start=None, edits=None):
    """Run the graph and return every intermediate activation.

    ``given``/``start`` resume a previous run: nodes before position ``start``
    are taken from ``given`` instead of being recomputed. ``edits`` maps node
    ids to callables applied to that node's output right after it is computed.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    train = mode == "train"
    acts = dict(given) if given is not None else {}
    if x is not None:
        if tuple(x.shape[1:]) != graph.input_shape:
            raise GraphError(f"batch shape {x.shape} does not match graph input {graph.input_shape}")
        acts[INPUT] = x
    elif start is None:
        raise GraphError("forward needs an input batch or a resume point")
    res = ForwardResult(acts=acts, mode=mode, logits_id=graph.logits_id)
    keep = graph.grad_path() if train else set()
    first = 0 if start is None else (start if isinstance(start, int) else graph.index(start))
    for n in graph.nodes[first:]:
        layer = n.layer
        if isinstance(layer, SoftmaxCrossEntropy):
            if labels is not None:
                labels = np.asarray(labels)
                loss, c = layer.loss(acts[n.inputs[0]], labels)
                res.loss, res.loss_cache, res.labels = float(loss), c, labels
            continue
        xs = [acts[i] for i in n.inputs]
        own = layer.trainable and bool(layer.params)
        y, cache = layer.forward(xs, train=train, keep=train and own)
        if edits and n.id in edits:
            y = edits[n.id](y)
        acts[n.id] = y
        if n.id in keep:
            res.caches[n.id] = cache
    return res


def backward(graph, fwd: ForwardResult) -> GradientTape:
    """Reverse pass; only trainable parameters receive gradient entries."""
    if fwd.mode != "train" or fwd.loss_cache is None:
        raise StateError("backward requires a train-mode forward run with labels")
    path = graph.grad_path()
    head = graph.loss_node
    dacts = {}
    (dlogits,), _ = head.layer.backward(1.0, fwd.loss_cache, [True], False)
    dacts[head.inputs[0]] = dlogits
    grads = {}
    for n in reversed(graph.nodes[:-1]):
        dy = dacts.pop(n.id, None)
        if dy is None or n.id not in path:
            continue
        need_dx = [i in path for i in n.inputs]
        need_dp = n.layer.trainable and bool(n.layer.params)
        if n.id not in fwd.caches:
            raise StateError(f"no cached forward state for {n.id!r}")
        dxs, g = n.layer.backward(dy, fwd.caches[n.id], need_dx, need_dp)
        for k, v in g.items():
            grads[(n.id, k)] = v
        for inp, need, dx in zip(n.inputs, need_dx, dxs):
            if need and dx is not None:
                dacts[inp] = dx if inp not in dacts else dacts[inp] + dx
    return GradientTape(grads=grads, loss=fwd.loss)


def predict(graph, x, batch_size=256):
    """Eval-mode logits for ``x`` computed in batches."""
    outs = []
    for i in range(0, len(x), batch_size):
        outs.append(forward(graph, x[i : i + batch_size], "eval").logits)
    return np.concatenate(outs, axis=0) if outs else np.zeros((0, graph.num_classes), graph.dtype)
