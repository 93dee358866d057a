"""Per-filter correction priority by activation swapping, and ranked filter subsets.

For every filter at a site (a conv output, or a post-merge output in residual
nets) the priority is the top-1 accuracy gained on distorted images when that
one filter's distorted pre-nonlinearity activation is overwritten with its
clean counterpart: ``tau = p_swp - p_b``.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .distortion import distort_batch, round_robin_specs
from .inputs import prepare
from .nn.graph import GraphError, forward


class RankingError(ValueError):
    pass


@dataclass(frozen=True, order=True)
class FilterRef:
    layer: int  # 1-based position in graph.sites
    filter: int


@dataclass
class PriorityTable:
    p_b: float
    M: int
    distortion: dict
    sites: list
    entries: dict = field(default_factory=dict)  # FilterRef -> (p_swp, tau)
    sample_digest: str = ""

    def layer_size(self, layer) -> int:
        return sum(1 for r in self.entries if r.layer == layer)

    def taus(self, layer) -> np.ndarray:
        n = self.layer_size(layer)
        return np.array([self.entries[FilterRef(layer, j)][1] for j in range(n)])

    def layer_index(self, layer) -> int:
        """Accept a 1-based layer number or a site id."""
        if isinstance(layer, str):
            try:
                return self.sites.index(layer) + 1
            except ValueError:
                raise RankingError(f"site {layer!r} not in table (sites: {self.sites})") from None
        layer = int(layer)
        if not 1 <= layer <= len(self.sites):
            raise RankingError(f"layer {layer} out of range 1..{len(self.sites)}")
        return layer

    def to_json(self) -> dict:
        return {
            "p_b": self.p_b,
            "M": self.M,
            "distortion": self.distortion,
            "sites": list(self.sites),
            "sample_digest": self.sample_digest,
            "entries": [
                {"layer": r.layer, "filter": r.filter, "p_swp": v[0], "tau": v[1]} for r, v in sorted(self.entries.items())
            ],
        }

    @classmethod
    def from_json(cls, d) -> PriorityTable:
        t = cls(
            float(d["p_b"]),
            int(d["M"]),
            d["distortion"],
            list(d.get("sites", [])),
            sample_digest=d.get("sample_digest", ""),
        )
        for e in d["entries"]:
            t.entries[FilterRef(int(e["layer"]), int(e["filter"]))] = (float(e["p_swp"]), float(e["tau"]))
        return t

    def save(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(self.to_json(), fh, sort_keys=True, indent=1)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> PriorityTable:
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))


@dataclass(frozen=True)
class RankSet:
    layer: int
    site: str
    beta: float
    indices: tuple


# ---------------------------------------------------------------------------
# swapping
# ---------------------------------------------------------------------------


def _check_pair(graph, clean, distorted):
    if clean.shape != distorted.shape:
        raise RankingError(f"clean batch {clean.shape} and distorted batch {distorted.shape} are not aligned")
    if tuple(clean.shape[1:]) != graph.input_shape:
        raise GraphError(f"batch shape {clean.shape} does not match graph input {graph.input_shape}")


def _swap_edit(clean_act, idx):
    def edit(y):
        y = y.copy()
        y[:, idx] = clean_act[:, idx]
        return y

    return edit


def swap_forward(graph, clean_batch, distorted_batch, site, S):
    """Logits of the distorted batch with channels ``S`` of ``site`` taken from the clean run.

    Both batches are network inputs (already normalised). ``site`` is a node
    id; the swap acts on that node's output, before any nonlinearity.
    """
    _check_pair(graph, clean_batch, distorted_batch)
    n = graph.shapes()[site][0]
    idx = np.asarray(sorted(set(int(j) for j in S)), dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise RankingError(f"filter indices {list(idx)} out of range for {site!r} with {n} filters")
    clean_act = forward(graph, clean_batch, "eval").acts[site]
    return forward(graph, distorted_batch, "eval", edits={site: _swap_edit(clean_act, idx)}).logits


# ---------------------------------------------------------------------------
# priority
# ---------------------------------------------------------------------------


def _digest(images, labels):
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(images, dtype=np.float64).tobytes())
    h.update(np.ascontiguousarray(labels, dtype=np.int64).tobytes())
    return h.hexdigest()[:16]


def _correct(logits, labels):
    return int((logits.argmax(axis=1) == labels).sum())


def correction_priority(
    graph,
    images,
    labels,
    family,
    severities,
    seed=0,
    sites=None,
    batch_size=256,
    fast=True,
    orientation="horizontal",
):
    """Compute the priority table over ``sites`` (default: all graph sites).

    ``images`` are 0-255 arrays (M, C, H, W); distortion levels are assigned
    round-robin per image under ``seed``. With ``fast`` the clean and distorted
    runs are done once and each swap re-runs only the nodes after the site;
    otherwise every swap recomputes the full forward pass.
    """
    images = np.asarray(images)
    labels = np.asarray(labels, dtype=np.int64)
    M = len(images)
    if M == 0:
        raise RankingError("empty ranking sample")
    if len(labels) != M:
        raise RankingError(f"{M} images but {len(labels)} labels")
    severities = list(severities) or [0.0]
    if family != "Identity":
        specs = round_robin_specs(M, family, severities, seed, orientation)
        distorted_raw = distort_batch(images, specs)
    else:
        distorted_raw = images
    clean = prepare(graph, images)
    distorted = prepare(graph, distorted_raw)
    sites = list(graph.sites if sites is None else sites)
    shapes = graph.shapes()
    for s in sites:
        graph.index(s)

    swp = {s: np.zeros(shapes[s][0], dtype=np.int64) for s in sites}
    base_correct = 0
    for lo in range(0, M, batch_size):
        c, d, y = clean[lo : lo + batch_size], distorted[lo : lo + batch_size], labels[lo : lo + batch_size]
        if fast:
            ca = forward(graph, c, "eval").acts
            dres = forward(graph, d, "eval")
            base_correct += _correct(dres.logits, y)
            for s in sites:
                start = graph.index(s) + 1
                site_d = dres.acts[s]
                for j in range(shapes[s][0]):
                    act = site_d.copy()
                    act[:, j] = ca[s][:, j]
                    given = dict(dres.acts)
                    given[s] = act
                    logits = forward(graph, None, "eval", given=given, start=start).logits
                    swp[s][j] += _correct(logits, y)
        else:
            base_correct += _correct(forward(graph, d, "eval").logits, y)
            for s in sites:
                for j in range(shapes[s][0]):
                    swp[s][j] += _correct(swap_forward(graph, c, d, s, [j]), y)

    p_b = base_correct / M
    table = PriorityTable(
        p_b=p_b,
        M=M,
        distortion={"family": family, "severities": [float(v) for v in severities], "seed": int(seed)},
        sites=sites,
        sample_digest=_digest(images, labels),
    )
    for li, s in enumerate(sites, start=1):
        for j, cnt in enumerate(swp[s]):
            p = int(cnt) / M
            table.entries[FilterRef(li, j)] = (p, p - p_b)
    return table


# ---------------------------------------------------------------------------
# rank sets
# ---------------------------------------------------------------------------


def rank_size(beta, n) -> int:
    if not 0 < beta <= 1:
        raise RankingError(f"beta must be in (0, 1], got {beta}")
    return max(1, min(n, int(math.floor(beta * n + 0.5))))


def _select(table, layer, beta, descending):
    li = table.layer_index(layer)
    tau = table.taus(li)
    n = len(tau)
    if n == 0:
        raise RankingError(f"table has no entries for layer {li}")
    size = rank_size(beta, n)
    order = np.lexsort((np.arange(n), -tau))  # descending tau, ties by ascending index
    if not descending:
        order = order[::-1]  # exact reverse, so rank and antirank sets partition the layer
    site = table.sites[li - 1] if table.sites else str(li)
    return RankSet(li, site, float(beta), tuple(int(v) for v in order[:size]))


def rank_filters(table, layer, beta) -> RankSet:
    """Top ``round(beta * N)`` filters of ``layer`` by descending priority."""
    return _select(table, layer, beta, descending=True)


def antirank_filters(table, layer, beta) -> RankSet:
    """Bottom ``round(beta * N)`` filters: the ranked order reversed, for the ranking-validation control."""
    return _select(table, layer, beta, descending=False)
