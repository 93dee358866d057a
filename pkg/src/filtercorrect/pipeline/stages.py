"""Experiment stages. Each reads the config plus earlier artifacts and writes its own.

Output layout::

    config.json  ingest.json
    models/<name>.dckp         history/<name>.csv
    rank/<family>.json         decomp/<family>.json
    eval/<name>.json           report.json  report.txt

Per-family models are named ``<model>-<family>``; the baseline is shared.
"""

from __future__ import annotations

import json
import logging
from pathlib import Path

import numpy as np

from ..correction import (
    History,
    attach_correction_units,
    configs_from_table,
    default_betas,
    evaluate,
    train,
)
from ..distortion import DistortionSpec
from ..inputs import set_normalization
from ..lowrank import DecompositionSpec, candidate_layers, convert_model
from ..netgraph import build_architecture, cost_report, load_checkpoint, save_checkpoint
from ..ranking import PriorityTable, correction_priority
from .config import STAGES, ExperimentConfig, derive_seed, dumps_canonical
from .data import DatasetBundle, ingest

log = logging.getLogger("filtercorrect.pipeline")

PER_FAMILY_MODELS = ("finetune", "finetune-rc", "deepcorr", "deepcorr-b", "deepcorr-rc", "deepcorr-antirank")
MODELS = ("baseline",) + PER_FAMILY_MODELS


class PipelineError(RuntimeError):
    """A stage cannot run (usually because an earlier stage has not)."""


def model_name(model, family=None):
    return model if family is None or model == "baseline" else f"{model}-{family}"


class Run:
    def __init__(self, config: ExperimentConfig, out=None, stage_seed=None):
        self.config = config
        self.out = Path(out) if out is not None else config.out_dir
        self.stage_seed = stage_seed
        self._bundle = None

    # -- helpers ------------------------------------------------------------
    def seed(self, stage) -> int:
        return int(self.stage_seed) if self.stage_seed is not None else derive_seed(self.config.seed, stage)

    def path(self, *parts) -> Path:
        p = self.out.joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def model_path(self, name):
        return self.path("models", f"{name}.dckp")

    def history_path(self, name):
        return self.path("history", f"{name}.csv")

    def require(self, path: Path, stage):
        if not path.exists():
            raise PipelineError(f"missing {path}; run the '{stage}' stage first")
        return path

    def load_model(self, name, stage):
        return load_checkpoint(self.require(self.model_path(name), stage))

    @property
    def bundle(self) -> DatasetBundle:
        if self._bundle is None:
            self.config.check_files()
            self._bundle = ingest(self.config.dataset_path)
        return self._bundle

    def split(self, name, limit=None):
        x, y = self.bundle.split(name)
        if limit:
            x, y = x[:limit], y[:limit]
        return x, y

    def write_json(self, rel, obj):
        p = self.path(rel)
        p.write_text(dumps_canonical(obj), encoding="utf-8", newline="\n")
        return p

    def read_json(self, rel, stage):
        return json.loads(self.require(self.out / rel, stage).read_text(encoding="utf-8"))

    def betas(self, graph):
        return dict(self.config.betas) if self.config.betas else default_betas(graph.sites)

    # -- stages -------------------------------------------------------------
    def ingest(self):
        b = self.bundle
        self.write_json("config.json", self.config.to_json())
        info = {
            "num_classes": b.num_classes,
            "image_shape": list(b.images.shape[1:]),
            "splits": {k: len(v) for k, v in sorted(b.splits.items())},
            "mean": [float(v) for v in b.mean],
            "std": [float(v) for v in b.std],
        }
        self.write_json("ingest.json", info)
        return info

    def train_baseline(self):
        seed = self.seed("train-baseline")
        b = self.bundle
        g = build_architecture(self.config.architecture, num_classes=b.num_classes, seed=seed)
        set_normalization(g, b.mean, b.std)
        tc = self.config.train_config("baseline", seed)
        hist = self._fit(g, "baseline", tc, "finetune")
        return g, hist

    def _fit(self, g, name, tc, mode):
        val = self.split(self.config.val_split, self.config.eval_limit)
        x, y = self.split(self.config.train_split, self.config.train_limit)
        g.meta.update(model=name, train_config=tc.to_json(), config_digest=self.config.digest())
        _, hist = train(g, x, y, tc, mode, val=val, log=lambda r: log.info("%s %s", name, r))
        hist.write_csv(self.history_path(name))
        g.meta["iterations"] = [r["iterations"] for r in hist.rows]
        save_checkpoint(g, self.model_path(name))
        return hist

    def rank(self):
        base = self.load_model("baseline", "train-baseline")
        seed = self.seed("rank")
        x, y = self.split(self.config.train_split, self.config.train_limit)
        rng = np.random.default_rng(seed)
        pick = []
        for c in range(self.bundle.num_classes):
            cls = np.flatnonzero(y == c)
            pick.extend(rng.choice(cls, size=min(self.config.rank_per_class, len(cls)), replace=False))
        pick = np.sort(np.asarray(pick, dtype=np.int64))
        tables = {}
        for fam, sev in self.config.families.items():
            t = correction_priority(base, x[pick], y[pick], fam, sev, seed=seed)
            t.save(self.path("rank", f"{fam}.json"))
            tables[fam] = t
        return tables

    def train_correct(self):
        base = self.load_model("baseline", "train-baseline")
        seed = self.seed("train-correct")
        k = self.config.unit_k
        betas = self.betas(base)
        out = {}
        for fam, sev in self.config.families.items():
            table = PriorityTable.load(self.require(self.out / "rank" / f"{fam}.json", "rank"))
            variants = {
                "deepcorr": configs_from_table(table, betas, "full", k),
                "deepcorr-b": configs_from_table(table, betas, "bottleneck", k),
            }
            if self.config.antirank:
                variants["deepcorr-antirank"] = configs_from_table(table, betas, "full", k, antirank=True)
            for model, cfgs in variants.items():
                g = attach_correction_units(base, cfgs, seed=seed)
                tc = self.config.train_config("correct", seed, fam, sev)
                out[model_name(model, fam)] = self._fit(g, model_name(model, fam), tc, "correction")
        return out

    def train_finetune(self):
        base = self.load_model("baseline", "train-baseline")
        seed = self.seed("train-finetune")
        out = {}
        for fam, sev in self.config.families.items():
            g = base.copy()
            tc = self.config.train_config("finetune", seed, fam, sev)
            out[model_name("finetune", fam)] = self._fit(g, model_name("finetune", fam), tc, "finetune")
        return out

    def decompose(self):
        base = self.load_model("baseline", "train-baseline")
        ref = cost_report(base).flops
        spec = DecompositionSpec.from_json(self.config.decomposition)
        out = {}
        for fam in self.config.families:
            dcb = self.load_model(model_name("deepcorr-b", fam), "train-correct")
            ft = self.load_model(model_name("finetune", fam), "train-finetune")
            resolved = spec.resolve(dcb, reference_flops=ref)
            rc, err = convert_model(dcb, resolved)
            rc.meta["model"] = model_name("deepcorr-rc", fam)
            save_checkpoint(rc, self.model_path(model_name("deepcorr-rc", fam)))
            shared = set(candidate_layers(ft))
            ft_spec = DecompositionSpec(per_layer={k: v for k, v in resolved.per_layer.items() if k in shared})
            ftrc, ft_err = convert_model(ft, ft_spec)
            ftrc.meta["model"] = model_name("finetune-rc", fam)
            save_checkpoint(ftrc, self.model_path(model_name("finetune-rc", fam)))
            rec = {"spec": resolved.to_json(), "deepcorr-rc": err, "finetune-rc": ft_err}
            self.write_json(Path("decomp") / f"{fam}.json", rec)
            out[fam] = rec
        return out

    def eval(self):
        seed = self.seed("eval")
        x, y = self.split(self.config.eval_split, self.config.eval_limit)
        done = {}
        self.require(self.model_path("baseline"), "train-baseline")
        for model in MODELS:
            fams = list(self.config.families) if model == "baseline" else [None]
            if model != "baseline":
                fams = [f for f in self.config.families if self.model_path(model_name(model, f)).exists()]
            for fam in fams:
                name = model_name(model, fam)
                g = load_checkpoint(self.model_path(name))
                targets = self.config.families if model == "baseline" else {fam: self.config.families[fam]}
                specs = [DistortionSpec(f, s) for f, sev in targets.items() for s in sev]
                table = evaluate(g, x, y, specs, seed=seed)
                self.write_json(Path("eval") / f"{name}.json", table.to_json())
                done[name] = table
        return done

    def report(self):
        from .report import build_report, render_text

        rep = build_report(self)
        self.write_json("report.json", rep)
        text = render_text(rep)
        self.path("report.txt").write_text(text, encoding="utf-8", newline="\n")
        return rep

    def run(self, stage):
        if stage not in STAGES:
            raise PipelineError(f"unknown stage {stage!r}; expected one of {STAGES}")
        fn = {
            "ingest": self.ingest,
            "train-baseline": self.train_baseline,
            "eval": self.eval,
            "rank": self.rank,
            "train-correct": self.train_correct,
            "train-finetune": self.train_finetune,
            "decompose": self.decompose,
            "report": self.report,
        }[stage]
        log.info("stage %s (seed %d)", stage, self.seed(stage))
        return fn()


def run_stage(config, stage, out=None, stage_seed=None):
    return Run(config, out, stage_seed).run(stage)


def history_of(run, name):
    p = run.out / "history" / f"{name}.csv"
    return History.read_csv(p) if p.exists() else None
