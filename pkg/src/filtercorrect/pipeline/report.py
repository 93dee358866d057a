"""Aggregate stage artifacts into the report JSON and a plain-text table."""

from __future__ import annotations

import json

from ..netgraph import cost_report, load_checkpoint
from .stages import MODELS, History, PipelineError, model_name

BEST, SECOND = "*", "+"


def _iterations_to(history, iters, target):
    if history is None or target is None:
        return None
    for row, it in zip(history.rows, iters):
        if row["val_top1"] is not None and row["val_top1"] >= target:
            return int(it)
    return None


def build_report(run) -> dict:
    cfg = run.config
    if not (run.out / "eval" / "baseline.json").exists():
        raise PipelineError(f"no evaluation results under {run.out}; run the 'eval' stage first")
    rep = {
        "architecture": cfg.architecture,
        "config_digest": cfg.digest(),
        "eval_split": cfg.eval_split,
        "families": {f: [float(s) for s in sev] for f, sev in cfg.families.items()},
        "models": {},
    }
    for model in MODELS:
        entry = {"families": {}}
        for fam in cfg.families:
            name = model_name(model, fam)
            ev = run.out / "eval" / f"{name}.json"
            if not ev.exists():
                entry["families"][fam] = None
                continue
            acc = json.loads(ev.read_text(encoding="utf-8"))
            g = load_checkpoint(run.model_path(name))
            cost = cost_report(g)
            hist_path = run.out / "history" / f"{name}.csv"
            hist = History.read_csv(hist_path) if hist_path.exists() else None
            fam_acc = acc["families"].get(fam, {"mean": None, "per_severity": {}})
            entry["families"][fam] = {
                "clean": acc["clean"],
                "mean": fam_acc["mean"],
                "per_severity": fam_acc["per_severity"],
                "flops": cost.flops,
                "trainable_params": cost.trainable_params,
                "params": cost.params,
                "iterations_to_target": None,
                "_hist": (hist, g.meta.get("iterations", [])),
            }
        rep["models"][model] = entry

    # convergence: iterations to reach the fine-tuned model's best validation accuracy
    for fam in cfg.families:
        ft = rep["models"]["finetune"]["families"].get(fam)
        target = None
        if ft is not None and ft["_hist"][0] is not None:
            target = ft["_hist"][0].best_val()
        rep.setdefault("targets", {})[fam] = target
        for model in MODELS:
            e = rep["models"][model]["families"].get(fam)
            if e is not None:
                hist, iters = e.pop("_hist")
                e["iterations_to_target"] = _iterations_to(hist, iters, target)
    return rep


def _fmt_int(v):
    return f"{v:.3g}" if v >= 1e6 else str(v)


def render_text(rep) -> str:
    """Rows are models; accuracy columns carry * (best) and + (second best)."""
    fams = list(rep["families"])
    cols = []
    for f in fams:
        cols += [(f, "clean"), (f, "mean")]
    rows = []
    for model, entry in rep["models"].items():
        vals = {}
        for f in fams:
            e = entry["families"].get(f)
            vals[(f, "clean")] = None if e is None else e["clean"]
            vals[(f, "mean")] = None if e is None else e["mean"]
        first = next((e for e in entry["families"].values() if e is not None), None)
        rows.append((model, vals, first))

    marks = {}
    for c in cols:
        ranked = sorted({v[c] for _, v, _ in rows if v[c] is not None}, reverse=True)
        marks[c] = {
            v: (BEST if k == 0 else SECOND) for k, v in enumerate(ranked[:2])
        }

    head = ["model"] + [f"{f}:{k}" for f, k in cols] + ["FLOPs", "trainable", "iters"]
    lines = []
    body = []
    for model, vals, first in rows:
        cells = [model]
        for c in cols:
            v = vals[c]
            cells.append("-" if v is None else f"{v:.4f}{marks[c].get(v, ' ')}")
        if first is None:
            cells += ["-", "-", "-"]
        else:
            its = [str(e["iterations_to_target"]) for e in rep["models"][model]["families"].values() if e is not None]
            cells += [_fmt_int(first["flops"]), _fmt_int(first["trainable_params"]), "/".join(its)]
        body.append(cells)
    widths = [max(len(r[k]) for r in [head] + body) for k in range(len(head))]
    lines.append("  ".join(h.ljust(w) for h, w in zip(head, widths)))
    lines.append("  ".join("-" * w for w in widths))
    for r in body:
        lines.append("  ".join(c.ljust(w) for c, w in zip(r, widths)))
    lines.append("")
    lines.append(f"{BEST} best, {SECOND} second best per column; iters = iterations to the fine-tuned model's best val top-1")
    return "\n".join(lines) + "\n"
