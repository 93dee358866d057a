"""Residual correction units on ranked filter subsets, plus training and evaluation.

A unit reads the selected channels of a site's pre-nonlinearity output,
passes them through 1x1 -> (k x k) x stack -> 1x1 with ReLUs in between, adds
the unit input back (skip connection) and writes the result into the same
channels. All other channels bypass the unit untouched.
"""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .distortion import FAMILIES, DistortionSpec, distort_batch, image_seed
from .inputs import prepare
from .nn.graph import GraphError, Node, StateError, backward, forward
from .nn.layers import ChannelScatter, ChannelSelect, Conv2D, ElementwiseAdd, ReLU
from .nn.optim import SGD, ConfigError

GROUP_PREFIX = "corr:"


class TrainingError(RuntimeError):
    """Training diverged (non-finite loss)."""


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CorrectionUnitConfig:
    site: str
    indices: tuple
    depth: int
    k: int = 3
    stack: int = 2
    variant: str = "full"

    def __post_init__(self):
        object.__setattr__(self, "indices", tuple(int(i) for i in self.indices))
        if not self.indices:
            raise ConfigError(f"correction unit at {self.site!r} has an empty rank set")
        if len(set(self.indices)) != len(self.indices):
            raise ConfigError(f"correction unit at {self.site!r} has repeated filter indices")
        if self.depth < 1:
            raise ConfigError(f"kernel depth must be >= 1, got {self.depth}")
        if self.k < 1 or self.k % 2 == 0:
            raise ConfigError(f"unit kernel size must be odd and positive, got {self.k}")
        if self.stack < 1:
            raise ConfigError(f"stack depth must be >= 1, got {self.stack}")
        if self.variant not in ("full", "bottleneck"):
            raise ConfigError(f"variant must be 'full' or 'bottleneck', got {self.variant!r}")

    @property
    def width(self) -> int:
        return len(self.indices)

    @classmethod
    def full(cls, site, indices, k=3, stack=2):
        return cls(site, tuple(indices), len(indices), k, stack, "full")

    @classmethod
    def bottleneck(cls, site, indices, k=3, stack=3, depth=None):
        """Half-width stack (``ceil(|R|/2)`` unless ``depth`` overrides it), one layer deeper."""
        d = math.ceil(len(indices) / 2) if depth is None else int(depth)
        return cls(site, tuple(indices), d, k, stack, "bottleneck")

    def to_json(self):
        d = asdict(self)
        d["indices"] = list(self.indices)
        return d

    @classmethod
    def from_json(cls, d):
        return cls(d["site"], tuple(d["indices"]), int(d["depth"]), int(d["k"]), int(d["stack"]), d["variant"])


@dataclass
class TrainConfig:
    lr: float = 0.01
    lr_step: int = 0  # epochs between 10x decays; 0 disables
    lr_decay: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    epochs: int = 10
    batch_size: int = 64
    crop: bool = True
    flip: bool = True
    family: str = "Identity"
    severities: list = field(default_factory=list)
    seed: int = 0
    orientation: str = "horizontal"

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError(f"learning rate must be > 0, got {self.lr}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if self.lr_step < 0 or self.lr_step > self.epochs:
            raise ConfigError(f"lr_step {self.lr_step} must lie in [0, epochs={self.epochs}]")
        if self.momentum < 0 or self.weight_decay < 0 or not 0 < self.lr_decay <= 1:
            raise ConfigError("momentum and weight_decay must be >= 0, lr_decay in (0, 1]")
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown distortion family {self.family!r}")
        if self.family != "Identity" and not self.severities:
            raise ConfigError(f"{self.family} training needs a non-empty severity list")

    def lr_at(self, epoch) -> float:
        if not self.lr_step:
            return self.lr
        return self.lr * self.lr_decay ** (epoch // self.lr_step)

    def to_json(self):
        return asdict(self)

    @classmethod
    def from_json(cls, d):
        return cls(**d)


# ---------------------------------------------------------------------------
# building and attaching
# ---------------------------------------------------------------------------


def build_correction_unit(cfg: CorrectionUnitConfig, source, prefix=None, rng=None, dtype=np.float32):
    """Nodes of one unit reading from node ``source`` (which carries the full site tensor).

    Returns ``(nodes, output_id)`` where the output node scatters the corrected
    channels back into the site tensor. The final 1x1 projection starts at zero,
    so a freshly built unit is an exact identity.
    """
    p = prefix or f"{cfg.site}.corr"
    group = GROUP_PREFIX + cfg.site
    rng = np.random.default_rng(0) if rng is None else rng
    R, D, k = cfg.width, cfg.depth, cfg.k
    nodes = []

    def add(name, layer, inputs):
        nodes.append(Node(f"{p}.{name}", layer, list(inputs), group))
        return f"{p}.{name}"

    sel = add("select", ChannelSelect(cfg.indices), [source])
    h = add("in", Conv2D(R, D, 1), [sel])
    h = add("in_relu", ReLU(), [h])
    for t in range(1, cfg.stack + 1):
        h = add(f"conv{t}", Conv2D(D, D, k, padding=k // 2), [h])
        h = add(f"relu{t}", ReLU(), [h])
    out = add("out", Conv2D(D, R, 1), [h])
    res = add("add", ElementwiseAdd(), [out, sel])
    scat = add("scatter", ChannelScatter(cfg.indices), [source, res])
    for n in nodes:
        n.layer.init_params(rng, dtype)
        n.layer.trainable = True
    proj = nodes[[n.id for n in nodes].index(out)].layer
    for name in proj.params:
        proj.params[name] = np.zeros_like(proj.params[name])
    return nodes, scat


def attach_correction_units(graph, configs, seed=0, unfreeze=()):
    """Copy of ``graph`` with units at each configured site and the base frozen.

    ``unfreeze`` lists base node ids that stay trainable (e.g. a final
    classifier). Each site's consumers are rewired to read the unit output.
    """
    g = graph.copy()
    sites = [c.site for c in configs]
    dup = {s for s in sites if sites.count(s) > 1}
    if dup:
        raise GraphError(f"overlapping correction units on {sorted(dup)}")
    shapes = g.shapes()
    for c in configs:
        if c.site not in g:
            raise GraphError(f"no site {c.site!r} in graph")
        if any(n.group == GROUP_PREFIX + c.site for n in g.nodes):
            raise GraphError(f"site {c.site!r} already has a correction unit")
        n = shapes[c.site][0]
        if max(c.indices) >= n or min(c.indices) < 0:
            raise GraphError(f"rank set for {c.site!r} references filters outside 0..{n - 1}")
    g.set_trainable(False)
    g.set_trainable(True, set(unfreeze))
    rng = np.random.default_rng(seed)
    dtype = g.dtype
    for c in configs:
        consumers = g.consumers(c.site)
        nodes, out = build_correction_unit(c, c.site, rng=rng, dtype=dtype)
        g.insert_after(c.site, nodes)
        for cn in consumers:
            cn.inputs = [out if i == c.site else i for i in cn.inputs]
    g.meta["correction_units"] = [c.to_json() for c in configs]
    g.validate()
    return g


def unit_groups(graph):
    return sorted({n.group for n in graph.nodes if n.group and n.group.startswith(GROUP_PREFIX)})


def default_betas(sites, first=0.75, rest=0.5):
    return {s: (first if k == 0 else rest) for k, s in enumerate(sites)}


def configs_from_table(table, betas, variant="full", k=3, stack=None, antirank=False):
    """Unit configs for each site in ``betas`` using ranked (or antiranked) filters."""
    from .ranking import antirank_filters, rank_filters

    pick = antirank_filters if antirank else rank_filters
    out = []
    for site, beta in betas.items():
        rs = pick(table, site, beta)
        if variant == "full":
            out.append(CorrectionUnitConfig.full(site, rs.indices, k, stack or 2))
        else:
            out.append(CorrectionUnitConfig.bottleneck(site, rs.indices, k, stack or 3))
    return out


# reference-net unit layouts (accounting only; filter choice is irrelevant to cost)
ALEXNET_BETAS = {"conv1": 0.75, "conv2": 0.75, "conv3": 0.5, "conv4": 0.5, "conv5": 0.5}


def reference_unit_configs(graph, variant="full"):
    """Correction-unit layouts for the reference nets.

    AlexNet: rank-set fractions 0.75/0.75/0.5/0.5/0.5; the full variant uses
    5x5 kernels in the first unit and 3x3 elsewhere (stack 2), the bottleneck
    variant halves the depth with 3x3 kernels and stack 3. ResNet18: 75% of the
    filters after the stem and after every merge; the bottleneck depth is
    31/62/124/248 for stage widths 64/128/256/512.
    """
    shapes = graph.shapes()
    out = []
    if graph.name == "alexnet-ref":
        for k, (site, beta) in enumerate(ALEXNET_BETAS.items()):
            idx = range(round(beta * shapes[site][0]))
            if variant == "full":
                out.append(CorrectionUnitConfig.full(site, idx, 5 if k == 0 else 3, 2))
            else:
                out.append(CorrectionUnitConfig.bottleneck(site, idx, 3, 3))
    elif graph.name == "resnet18-ref":
        for site in graph.sites:
            n = shapes[site][0]
            idx = range(round(0.75 * n))
            if variant == "full":
                out.append(CorrectionUnitConfig.full(site, idx, 3, 2))
            else:
                out.append(CorrectionUnitConfig.bottleneck(site, idx, 3, 3, depth=31 * n // 64))
    else:
        raise GraphError(f"no reference unit layout for {graph.name!r}")
    return out


# ---------------------------------------------------------------------------
# data handling
# ---------------------------------------------------------------------------


def augment(images, rng, crop=True, flip=True, pad=4):
    """Random ``pad``-pixel-padded crops and horizontal flips of a (B, C, H, W) batch."""
    x = np.asarray(images)
    B, C, H, W = x.shape
    out = x.copy()
    if crop:
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        dy = rng.integers(0, 2 * pad + 1, size=B)
        dx = rng.integers(0, 2 * pad + 1, size=B)
        for b in range(B):
            out[b] = xp[b, :, dy[b] : dy[b] + H, dx[b] : dx[b] + W]
    if flip:
        f = rng.random(B) < 0.5
        out[f] = out[f][..., ::-1]
    return out


def mixed_specs(n, family, severities, rng, orientation="horizontal"):
    """Per-sample draw from {clean} + severities, uniformly; ``None`` means clean."""
    if family == "Identity":
        return [None] * n
    levels = [None] + [float(s) for s in severities]
    pick = rng.integers(0, len(levels), size=n)
    seeds = rng.integers(0, 2**63, size=n)
    out = []
    for p, s in zip(pick, seeds):
        sev = levels[p]
        out.append(None if sev is None else DistortionSpec(family, sev, int(s), orientation))
    return out


def apply_specs(images, specs):
    out = np.asarray(images, dtype=np.float64).copy()
    idx = [k for k, s in enumerate(specs) if s is not None]
    if idx:
        out[idx] = distort_batch(out[idx], [specs[k] for k in idx])
    return out


def validation_specs(n, family, severities, seed=0, orientation="horizontal"):
    """Deterministic round-robin over {clean} + severities for validation images."""
    if family == "Identity":
        return [None] * n
    levels = [None] + [float(s) for s in severities]
    out = []
    for m in range(n):
        sev = levels[m % len(levels)]
        out.append(None if sev is None else DistortionSpec(family, sev, image_seed(seed, m), orientation))
    return out


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class History:
    rows: list = field(default_factory=list)  # dicts: epoch, train_loss, val_top1, iterations

    def append(self, **row):
        self.rows.append(row)

    def best_val(self):
        vals = [r["val_top1"] for r in self.rows if r.get("val_top1") is not None]
        return max(vals) if vals else None

    def iterations_to(self, target):
        """Iterations at the first epoch whose validation top-1 reaches ``target``; None if never."""
        for r in self.rows:
            if r.get("val_top1") is not None and r["val_top1"] >= target:
                return r["iterations"]
        return None

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "val_top1"])
            for r in self.rows:
                v = "" if r.get("val_top1") is None else repr(float(r["val_top1"]))
                w.writerow([r["epoch"], repr(float(r["train_loss"])), v])

    @classmethod
    def read_csv(cls, path):
        h = cls()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                h.append(
                    epoch=int(row["epoch"]),
                    train_loss=float(row["train_loss"]),
                    val_top1=float(row["val_top1"]) if row["val_top1"] else None,
                )
        return h


def train(graph, images, labels, tc: TrainConfig, mode="correction", val=None, log=None):
    """Minibatch SGD on ``graph`` in place; returns ``(graph, history)``.

    ``correction`` mode trains only the attached units (plus anything the
    caller left trainable); ``finetune`` marks every parameter trainable.
    Each sample is independently left clean or distorted at a severity drawn
    uniformly from ``tc.severities``. ``val`` is an optional ``(images, labels)``
    pair scored after every epoch under a fixed clean/distorted mix.
    """
    images = np.asarray(images)
    labels = np.asarray(labels, dtype=np.int64)
    if len(images) == 0:
        raise ConfigError("training set is empty")
    if mode == "correction":
        if not unit_groups(graph):
            raise StateError("correction mode needs attached correction units")
    elif mode == "finetune":
        graph.set_trainable(True)
    else:
        raise ConfigError(f"mode must be 'correction' or 'finetune', got {mode!r}")

    rng = np.random.default_rng(tc.seed)
    opt = SGD(tc.lr, tc.momentum, tc.weight_decay)
    hist = History()
    if val is not None:
        vspecs = validation_specs(len(val[0]), tc.family, tc.severities, tc.seed, tc.orientation)
        vx = prepare(graph, apply_specs(val[0], vspecs))
        vy = np.asarray(val[1])
    iters = 0
    n = len(images)
    for epoch in range(1, tc.epochs + 1):
        lr = tc.lr_at(epoch - 1)
        order = rng.permutation(n)
        total, seen = 0.0, 0
        for lo in range(0, n, tc.batch_size):
            idx = order[lo : lo + tc.batch_size]
            xb = augment(images[idx], rng, tc.crop, tc.flip) if (tc.crop or tc.flip) else images[idx]
            xb = apply_specs(xb, mixed_specs(len(idx), tc.family, tc.severities, rng, tc.orientation))
            fwd = forward(graph, prepare(graph, xb), "train", labels[idx])
            if not np.isfinite(fwd.loss):
                raise TrainingError(
                    f"non-finite loss {fwd.loss} at epoch {epoch}, iteration {iters + 1} (lr={lr}); "
                    "lower the learning rate"
                )
            opt.step(graph, backward(graph, fwd), lr=lr)
            total += fwd.loss * len(idx)
            seen += len(idx)
            iters += 1
        row = {"epoch": epoch, "train_loss": total / seen, "val_top1": None, "iterations": iters}
        if val is not None:
            row["val_top1"] = accuracy(graph, vx, vy)
        hist.append(**row)
        if log:
            log(row)
    return graph, hist


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def accuracy(graph, x, labels, batch_size=500) -> float:
    """Top-1 accuracy on already-prepared inputs."""
    correct = 0
    for lo in range(0, len(x), batch_size):
        logits = forward(graph, x[lo : lo + batch_size], "eval").logits
        correct += int((logits.argmax(axis=1) == labels[lo : lo + batch_size]).sum())
    return correct / len(x)


@dataclass
class AccuracyTable:
    clean: float
    per_spec: dict = field(default_factory=dict)  # (family, severity) -> accuracy

    def family_mean(self, family) -> float:
        v = [a for (f, _), a in self.per_spec.items() if f == family]
        return float(np.mean(v)) if v else float("nan")

    def families(self):
        return sorted({f for f, _ in self.per_spec})

    def to_json(self) -> dict:
        out = {"clean": self.clean, "families": {}}
        for fam in self.families():
            per = {f"{s:g}": a for (f, s), a in sorted(self.per_spec.items()) if f == fam}
            out["families"][fam] = {"mean": self.family_mean(fam), "per_severity": per}
        return out


def _content_key(image) -> int:
    digest = hashlib.blake2b(np.ascontiguousarray(image, dtype=np.float64).tobytes(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def evaluate(graph, images, labels, specs, seed=0, batch_size=500) -> AccuracyTable:
    """Top-1 accuracy for clean images and for every spec applied to the whole set.

    Stochastic families key each image's noise seed on ``spec.seed or seed`` and
    the image content, so the result does not depend on dataset order.
    """
    images = np.asarray(images)
    labels = np.asarray(labels, dtype=np.int64)
    if len(images) == 0:
        raise ConfigError("evaluation set is empty")
    table = AccuracyTable(clean=accuracy(graph, prepare(graph, images), labels, batch_size))
    for spec in specs:
        if spec.family == "Identity":
            continue
        base = spec.seed if spec.seed else seed
        if spec.family == "CameraShake":
            per = [spec] * len(images)
        else:
            per = [spec.with_seed(image_seed(base, _content_key(img))) for img in images]
        x = prepare(graph, distort_batch(images, per))
        table.per_spec[(spec.family, float(spec.severity))] = accuracy(graph, x, labels, batch_size)
    return table
