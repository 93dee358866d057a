"""Experiment configuration (canonical JSON) and per-stage seed derivation."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from ..correction import TrainConfig
from ..distortion import FAMILIES
from ..lowrank import DecompositionSpec
from ..nn.optim import ConfigError

# desk-resolution severities (32x32 inputs)
DESK_SEVERITIES = {
    "GaussianBlur": [0.5, 1.0, 1.5, 2.0, 2.5, 3.0],
    "AWGN": [10.0, 20.0, 40.0, 60.0, 80.0, 100.0],
    "MotionBlur": [2.0, 4.0, 6.0, 8.0],
    "DefocusBlur": [1.0, 2.0, 3.0, 4.0],
}

STAGES = ("ingest", "train-baseline", "eval", "rank", "train-correct", "train-finetune", "decompose", "report")
# order used by the "all" command: eval runs again once every model exists
RUN_ALL = STAGES[:-1] + ("eval", "report")


def dumps_canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1, ensure_ascii=False) + "\n"


def derive_seed(global_seed, stage) -> int:
    """Stage seed: first 8 bytes of sha256("<global seed>/<stage name>"), as a 63-bit integer."""
    h = hashlib.sha256(f"{int(global_seed)}/{stage}".encode()).digest()
    return int.from_bytes(h[:8], "little") & (2**63 - 1)


def _default_train():
    return {
        "baseline": {"lr": 0.01, "epochs": 8, "lr_step": 6, "batch_size": 64},
        "correct": {"lr": 0.01, "epochs": 4, "lr_step": 3, "batch_size": 64},
        "finetune": {"lr": 0.001, "epochs": 4, "lr_step": 3, "batch_size": 64},
    }


@dataclass
class ExperimentConfig:
    dataset: str
    output: str = "run"
    architecture: str = "desknet-p"
    seed: int = 0
    families: dict = field(default_factory=lambda: {k: DESK_SEVERITIES[k] for k in ("GaussianBlur", "AWGN")})
    betas: dict | None = None
    unit_k: int = 3
    rank_per_class: int = 10
    antirank: bool = True
    train: dict = field(default_factory=_default_train)
    decomposition: dict = field(default_factory=lambda: {"budget_ratio": 1.0})
    train_split: str = "train"
    val_split: str = "val"
    eval_split: str = "test"
    train_limit: int | None = None
    eval_limit: int | None = None
    base_dir: str = "."

    def __post_init__(self):
        if not self.families:
            raise ConfigError("config lists no distortion families")
        for fam, sev in self.families.items():
            if fam not in FAMILIES:
                raise ConfigError(f"unknown distortion family {fam!r}")
            # Identity is a clean-data control and takes no severities
            if fam == "Identity" and sev:
                raise ConfigError("Identity takes an empty severity list")
            if fam != "Identity" and not sev:
                raise ConfigError(f"severity list for {fam} is empty")
        for stage in ("baseline", "correct", "finetune"):
            if stage not in self.train:
                raise ConfigError(f"train config lacks the {stage!r} block")
            TrainConfig(**self.train[stage])  # validates
        DecompositionSpec.from_json(self.decomposition)

    # -- paths --------------------------------------------------------------
    def path(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else Path(self.base_dir) / p

    @property
    def dataset_path(self) -> Path:
        return self.path(self.dataset)

    @property
    def out_dir(self) -> Path:
        return self.path(self.output)

    def check_files(self):
        if not self.dataset_path.exists():
            raise ConfigError(f"dataset manifest {self.dataset_path} does not exist")

    # -- training blocks ----------------------------------------------------
    def train_config(self, stage, seed, family="Identity", severities=()) -> TrainConfig:
        d = dict(self.train[stage])
        d.update(seed=int(seed), family=family, severities=[float(s) for s in severities])
        return TrainConfig(**d)

    # -- serialisation ------------------------------------------------------
    def to_json(self) -> dict:
        return {
            "dataset": self.dataset,
            "output": self.output,
            "architecture": self.architecture,
            "seed": self.seed,
            "families": self.families,
            "betas": self.betas,
            "unit_k": self.unit_k,
            "rank_per_class": self.rank_per_class,
            "antirank": self.antirank,
            "train": self.train,
            "decomposition": self.decomposition,
            "train_split": self.train_split,
            "val_split": self.val_split,
            "eval_split": self.eval_split,
            "train_limit": self.train_limit,
            "eval_limit": self.eval_limit,
        }

    def digest(self) -> str:
        return hashlib.sha256(dumps_canonical(self.to_json()).encode()).hexdigest()[:16]

    @classmethod
    def from_json(cls, d, base_dir=".") -> ExperimentConfig:
        known = set(cls.__dataclass_fields__) - {"base_dir"}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config keys {sorted(extra)}")
        if "dataset" not in d:
            raise ConfigError("config needs a 'dataset' manifest path")
        train = _default_train()
        for k, v in d.get("train", {}).items():
            train[k] = {**train.get(k, {}), **v}
        return cls(**{**d, "train": train}, base_dir=str(base_dir))

    @classmethod
    def load(cls, path) -> ExperimentConfig:
        path = Path(path)
        try:
            d = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        return cls.from_json(d, base_dir=path.parent)

    def save(self, path):
        Path(path).write_text(dumps_canonical(self.to_json()), encoding="utf-8", newline="\n")
