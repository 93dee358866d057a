"""FLOP (multiply-add) and parameter accounting over a model graph."""

from __future__ import annotations

from dataclasses import dataclass, field

from ..nn.graph import INPUT


@dataclass(frozen=True)
class LayerCost:
    node_id: str
    kind: str
    flops: int
    trainable_params: int
    frozen_params: int
    group: str | None = None

    @property
    def params(self) -> int:
        return self.trainable_params + self.frozen_params


@dataclass
class CostReport:
    entries: list = field(default_factory=list)

    @property
    def flops(self) -> int:
        return sum(e.flops for e in self.entries)

    @property
    def trainable_params(self) -> int:
        return sum(e.trainable_params for e in self.entries)

    @property
    def frozen_params(self) -> int:
        return sum(e.frozen_params for e in self.entries)

    @property
    def params(self) -> int:
        return self.trainable_params + self.frozen_params

    def by_group(self) -> dict:
        """Totals per node group; ungrouped nodes fall under ``None``."""
        out: dict = {}
        for e in self.entries:
            acc = out.setdefault(e.group, {"flops": 0, "trainable_params": 0, "frozen_params": 0})
            acc["flops"] += e.flops
            acc["trainable_params"] += e.trainable_params
            acc["frozen_params"] += e.frozen_params
        return out

    def subset(self, pred) -> CostReport:
        return CostReport([e for e in self.entries if pred(e)])

    def group(self, name) -> CostReport:
        return self.subset(lambda e: e.group == name)

    def grouped(self, prefix="corr:") -> CostReport:
        """Entries whose group starts with ``prefix`` (all correction units by default)."""
        return self.subset(lambda e: e.group is not None and e.group.startswith(prefix))

    def to_json(self) -> dict:
        return {
            "flops": self.flops,
            "trainable_params": self.trainable_params,
            "frozen_params": self.frozen_params,
            "layers": [
                {
                    "id": e.node_id,
                    "kind": e.kind,
                    "flops": e.flops,
                    "trainable_params": e.trainable_params,
                    "frozen_params": e.frozen_params,
                    "group": e.group,
                }
                for e in self.entries
            ],
        }


def cost_report(graph) -> CostReport:
    shapes = graph.shapes()
    entries = []
    for n in graph.nodes:
        ins = [shapes[i] if i != INPUT else graph.input_shape for i in n.inputs]
        flops = int(n.layer.flops(ins))
        count = sum(int(a.size) for a in n.layer.params.values())
        tr = count if n.layer.trainable else 0
        entries.append(LayerCost(n.id, n.layer.kind, flops, tr, count - tr, n.group))
    return CostReport(entries)


def flop_count(graph) -> CostReport:
    """Per-layer multiply-adds; convolutions and dense layers only contribute."""
    return cost_report(graph)


def param_count(graph) -> CostReport:
    """Per-layer parameter counts split by the trainable flag."""
    return cost_report(graph)
