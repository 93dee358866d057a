import json

import numpy as np
import pytest

from filtercorrect.netgraph import cost_report, load_checkpoint
from filtercorrect.nn import ConfigError
from filtercorrect.pipeline import (
    MODELS,
    RUN_ALL,
    DatasetError,
    ExperimentConfig,
    PipelineError,
    Run,
    channel_stats,
    derive_seed,
    ingest,
    make_synthetic,
    make_synthetic_bundle,
    read_idx,
    render_text,
    write_bundle,
    write_idx,
)
from filtercorrect.pipeline.cli import main
from filtercorrect.ranking import PriorityTable

FAST_TRAIN = {
    "baseline": {"epochs": 2, "lr_step": 0, "lr": 0.02},
    "correct": {"epochs": 1, "lr_step": 0},
    "finetune": {"epochs": 1, "lr_step": 0},
}
FAMILIES = {"GaussianBlur": [1.0, 2.0], "AWGN": [20.0, 60.0]}


def _write_config(path, dataset, **over):
    d = {"dataset": str(dataset), "output": "run", "seed": 4, "families": FAMILIES, "train": FAST_TRAIN, "rank_per_class": 3}
    d.update(over)
    path.write_text(json.dumps(d))
    return path


@pytest.fixture(scope="module")
def bundle(tmp_path_factory):
    return make_synthetic_bundle(tmp_path_factory.mktemp("data"), 1000, 100, 200, seed=3)


@pytest.fixture(scope="module")
def full_run(tmp_path_factory, bundle):
    d = tmp_path_factory.mktemp("exp")
    cfg = ExperimentConfig.load(_write_config(d / "config.json", bundle))
    run = Run(cfg)
    for stage in RUN_ALL:
        run.run(stage)
    return run


class TestData:
    def test_idx_round_trip(self, tmp_path):
        a = np.random.default_rng(0).integers(0, 256, (100, 3, 8, 8), dtype=np.uint8)
        write_idx(tmp_path / "a.idx", a)
        np.testing.assert_array_equal(read_idx(tmp_path / "a.idx"), a)
        assert (tmp_path / "a.idx").read_bytes()[:4] == b"\x00\x00\x08\x04"

    def test_bundle_round_trip(self, tmp_path):
        imgs, labels = make_synthetic(100, seed=1)
        m = write_bundle(tmp_path, imgs, labels, 10, {"train": range(80), "test": range(80, 100)})
        b = ingest(m)
        np.testing.assert_array_equal(b.images, imgs)
        np.testing.assert_array_equal(b.labels, labels)
        assert b.split("test")[0].shape == (20, 3, 32, 32)

    def test_label_out_of_range(self, tmp_path):
        imgs, labels = make_synthetic(20, seed=1)
        labels = labels.copy()
        labels[3] = 10
        with pytest.raises(DatasetError, match="out of range"):
            write_bundle(tmp_path, imgs, labels, 10, {"train": range(20)})

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x.idx").write_bytes(b"\x00\x00\x0d\x01\x00\x00\x00\x01\x00")
        with pytest.raises(DatasetError, match="magic"):
            read_idx(tmp_path / "x.idx")

    def test_truncated_idx(self, tmp_path):
        write_idx(tmp_path / "a.idx", np.zeros((4, 4), np.uint8))
        (tmp_path / "a.idx").write_bytes((tmp_path / "a.idx").read_bytes()[:-1])
        with pytest.raises(DatasetError, match="expected 16"):
            read_idx(tmp_path / "a.idx")

    def test_stats_from_train_split_only(self, tmp_path):
        imgs, labels = make_synthetic(60, seed=2)
        imgs = imgs.copy()
        imgs[40:] = 255
        b = ingest(write_bundle(tmp_path, imgs, labels, 10, {"train": range(40), "val": range(40, 60)}))
        direct = imgs[:40].astype(np.float64)
        for c in range(3):
            assert b.mean[c] == pytest.approx(direct[:, c].mean(), abs=1e-9)
            assert b.std[c] == pytest.approx(direct[:, c].std(), abs=1e-9)

    def test_channel_stats(self):
        x = np.zeros((2, 2, 1, 2))
        x[:, 1] = [[1.0, 3.0]]
        mean, std = channel_stats(x)
        np.testing.assert_allclose(mean, [0, 2])
        np.testing.assert_allclose(std, [0, 1])

    def test_synthetic_deterministic_and_labelled(self):
        a, ya = make_synthetic(50, seed=9)
        b, yb = make_synthetic(50, seed=9)
        np.testing.assert_array_equal(a, b)
        np.testing.assert_array_equal(ya, yb)
        assert a.dtype == np.uint8 and a.shape == (50, 3, 32, 32)
        assert set(np.unique(ya)) <= set(range(10))


class TestConfig:
    def test_defaults_and_round_trip(self, tmp_path):
        cfg = ExperimentConfig(dataset="d/manifest.json")
        assert cfg.families["GaussianBlur"] == [0.5, 1.0, 1.5, 2.0, 2.5, 3.0]
        cfg.save(tmp_path / "c.json")
        again = ExperimentConfig.load(tmp_path / "c.json")
        assert again.to_json() == cfg.to_json()
        assert again.digest() == cfg.digest()

    def test_canonical_json(self, tmp_path):
        ExperimentConfig(dataset="x").save(tmp_path / "c.json")
        text = (tmp_path / "c.json").read_text()
        d = json.loads(text)
        assert list(d) == sorted(d) and text.endswith("\n") and "\r" not in text

    @pytest.mark.parametrize(
        "over",
        [{"families": {"AWGN": []}}, {"families": {"Fog": [1]}}, {"train": {"correct": {"lr": -1}}}, {"bogus": 1}],
    )
    def test_invalid(self, tmp_path, over):
        with pytest.raises(ConfigError):
            ExperimentConfig.load(_write_config(tmp_path / "c.json", "m.json", **over))

    def test_stage_seed_derivation(self):
        assert derive_seed(0, "rank") == derive_seed(0, "rank")
        assert derive_seed(0, "rank") != derive_seed(1, "rank")
        assert derive_seed(0, "rank") != derive_seed(0, "eval")
        assert 0 <= derive_seed(7, "eval") < 2**63


class TestStages:
    def test_all_artifacts(self, full_run):
        out = full_run.out
        for name in ["baseline"] + [f"{m}-{f}" for m in MODELS[1:] for f in FAMILIES]:
            assert (out / "models" / f"{name}.dckp").exists(), name
            assert (out / "eval" / f"{name}.json").exists(), name
        for f in FAMILIES:
            assert (out / "rank" / f"{f}.json").exists()
            assert (out / "decomp" / f"{f}.json").exists()
        assert (out / "history" / "baseline.csv").read_text().startswith("epoch,train_loss,val_top1\n")

    def test_report_fields(self, full_run):
        rep = json.loads((full_run.out / "report.json").read_text())
        for model in MODELS:
            for fam in FAMILIES:
                e = rep["models"][model]["families"][fam]
                assert set(e) == {
                    "clean",
                    "mean",
                    "per_severity",
                    "flops",
                    "trainable_params",
                    "params",
                    "iterations_to_target",
                }
                assert 0 <= e["clean"] <= 1 and 0 <= e["mean"] <= 1
                assert e["mean"] == pytest.approx(np.mean(list(e["per_severity"].values())), abs=1e-15)

    def test_accounting_recomputable(self, full_run):
        rep = json.loads((full_run.out / "report.json").read_text())
        for model in MODELS:
            for fam in FAMILIES:
                name = model if model == "baseline" else f"{model}-{fam}"
                c = cost_report(load_checkpoint(full_run.model_path(name)))
                e = rep["models"][model]["families"][fam]
                assert (e["flops"], e["trainable_params"], e["params"]) == (c.flops, c.trainable_params, c.params)

    def test_rc_budget_matches_baseline(self, full_run):
        rep = json.loads((full_run.out / "report.json").read_text())
        for fam in FAMILIES:
            assert rep["models"]["deepcorr-rc"]["families"][fam]["flops"] <= rep["models"]["baseline"]["families"][fam]["flops"]

    def test_rerun_is_deterministic(self, full_run, tmp_path):
        before = {p.name: p.read_bytes() for p in (full_run.out / "eval").iterdir()}
        rank_before = (full_run.out / "rank" / "AWGN.json").read_bytes()
        full_run.run("rank")
        full_run.run("eval")
        assert (full_run.out / "rank" / "AWGN.json").read_bytes() == rank_before
        assert {p.name: p.read_bytes() for p in (full_run.out / "eval").iterdir()} == before

    def test_report_text_marks(self, full_run):
        text = (full_run.out / "report.txt").read_text()
        assert text.splitlines()[0].startswith("model")
        assert "*" in text

    def test_missing_prerequisite(self, tmp_path, bundle):
        cfg = ExperimentConfig.load(_write_config(tmp_path / "c.json", bundle))
        with pytest.raises(PipelineError, match="train-baseline"):
            Run(cfg).run("rank")

    def test_unknown_stage(self, tmp_path, bundle):
        cfg = ExperimentConfig.load(_write_config(tmp_path / "c.json", bundle))
        with pytest.raises(PipelineError):
            Run(cfg).run("deploy")

    def test_identity_rank_table_zero(self, tmp_path, bundle):
        cfg = ExperimentConfig.load(
            _write_config(tmp_path / "c.json", bundle, families={"Identity": []}, train_limit=200, rank_per_class=2)
        )
        run = Run(cfg)
        for stage in ("ingest", "train-baseline", "rank"):
            run.run(stage)
        t = PriorityTable.load(run.out / "rank" / "Identity.json")
        assert t.M == 20
        assert all(tau == 0.0 for _, tau in t.entries.values())


class TestReport:
    def _rep(self, models):
        fam = {"clean": 0.5, "mean": 0.3, "per_severity": {"1": 0.3}, "flops": 10, "trainable_params": 5, "params": 9}
        return {
            "families": {"AWGN": [1.0]},
            "models": {m: {"families": {"AWGN": dict(fam, mean=v, iterations_to_target=None)}} for m, v in models.items()},
        }

    def test_single_model_best_everywhere(self):
        text = render_text(self._rep({"baseline": 0.3}))
        row = text.splitlines()[2]
        assert row.count("*") == 2

    def test_best_and_second(self):
        text = render_text(self._rep({"a": 0.3, "b": 0.6, "c": 0.4}))
        rows = {r.split()[0]: r for r in text.splitlines()[2:5]}
        assert "0.6000*" in rows["b"] and "0.4000+" in rows["c"] and "0.3000 " in rows["a"]


class TestCLI:
    def test_make_synthetic(self, tmp_path, capsys):
        assert main(["make-synthetic", "--out", str(tmp_path / "d"), "--train", "30", "--val", "5", "--test", "5"]) == 0
        b = ingest(tmp_path / "d" / "manifest.json")
        assert {k: len(v) for k, v in b.splits.items()} == {"train": 30, "val": 5, "test": 5}

    def test_missing_stage_exit_code(self, tmp_path, bundle, capsys):
        cfg = _write_config(tmp_path / "c.json", bundle)
        assert main(["eval", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
        assert "train-baseline" in capsys.readouterr().err

    def test_missing_config(self, tmp_path, capsys):
        assert main(["ingest", "--config", str(tmp_path / "nope.json")]) == 2
        assert "not found" in capsys.readouterr().err

    def test_ingest_with_stage_seed(self, tmp_path, bundle, capsys):
        cfg = _write_config(tmp_path / "c.json", bundle)
        assert main(["ingest", "--config", str(cfg), "--stage-seed", "5"]) == 0
        info = json.loads((tmp_path / "run" / "ingest.json").read_text())
        assert info["splits"] == {"test": 200, "train": 1000, "val": 100}

    def test_requires_subcommand(self):
        with pytest.raises(SystemExit):
            main([])
