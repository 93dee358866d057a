import numpy as np
import pytest

from filtercorrect.correction import (
    CorrectionUnitConfig,
    History,
    TrainConfig,
    TrainingError,
    attach_correction_units,
    configs_from_table,
    default_betas,
    evaluate,
    mixed_specs,
    reference_unit_configs,
    train,
    unit_groups,
)
from filtercorrect.distortion import DistortionSpec
from filtercorrect.inputs import prepare, set_normalization
from filtercorrect.netgraph import build_desknet, build_reference_graph, cost_report
from filtercorrect.nn import ConfigError, GraphError, StateError, forward
from filtercorrect.ranking import FilterRef, PriorityTable


def _unit_params(r, d, k, stack):
    return (r * d + d) + stack * (d * d * k * k + d) + (d * r + r)


@pytest.fixture(scope="module")
def base():
    return set_normalization(build_desknet("P", seed=11), [127.5] * 3, [64.0] * 3)


@pytest.fixture(scope="module")
def batch():
    rng = np.random.default_rng(4)
    return rng.uniform(0, 255, (32, 3, 32, 32)), np.arange(32) % 10


@pytest.fixture
def corrected(base):
    return attach_correction_units(
        base,
        [CorrectionUnitConfig.full("conv1", [1, 4, 9, 30]), CorrectionUnitConfig.bottleneck("conv3", range(0, 128, 3))],
        seed=2,
    )


class TestUnitConfig:
    def test_full_depth(self):
        c = CorrectionUnitConfig.full("s", range(10))
        assert (c.depth, c.stack, c.width) == (10, 2, 10)

    def test_bottleneck_depth(self):
        c = CorrectionUnitConfig.bottleneck("s", range(11))
        assert (c.depth, c.stack) == (6, 3)

    @pytest.mark.parametrize(
        "kwargs",
        [dict(indices=()), dict(indices=(1, 1)), dict(depth=0), dict(k=4), dict(stack=0), dict(variant="wide")],
    )
    def test_invalid(self, kwargs):
        args = dict(site="s", indices=(0, 1), depth=2)
        args.update(kwargs)
        with pytest.raises(ConfigError):
            CorrectionUnitConfig(**args)

    def test_json_round_trip(self):
        c = CorrectionUnitConfig.bottleneck("conv2", [3, 1, 2])
        assert CorrectionUnitConfig.from_json(c.to_json()) == c

    def test_default_betas(self):
        assert default_betas(["a", "b", "c"]) == {"a": 0.75, "b": 0.5, "c": 0.5}

    def test_configs_from_table(self):
        t = PriorityTable(0.2, 5, {}, ["x"])
        for j, tau in enumerate([0.1, 0.4, 0.0, 0.2]):
            t.entries[FilterRef(1, j)] = (0.2 + tau, tau)
        (c,) = configs_from_table(t, {"x": 0.5})
        assert c.indices == (1, 3) and c.depth == 2
        (a,) = configs_from_table(t, {"x": 0.5}, antirank=True)
        assert a.indices == (2, 0)


class TestAttach:
    def test_identity_at_init(self, base, corrected, batch):
        x = batch[0].astype(np.float32) / 255
        np.testing.assert_array_equal(forward(base, x).logits, forward(corrected, x).logits)

    def test_identity_at_init_residual(self, batch):
        g = build_desknet("R", seed=1)
        h = attach_correction_units(g, [CorrectionUnitConfig.full(s, range(6)) for s in g.sites])
        x = batch[0].astype(np.float32) / 255
        np.testing.assert_array_equal(forward(g, x).logits, forward(h, x).logits)

    def test_bypass_purity(self, base, corrected, batch):
        rng = np.random.default_rng(0)
        for n in corrected.nodes:
            if n.group:
                for k in n.layer.params:
                    n.layer.params[k] = rng.standard_normal(n.layer.params[k].shape).astype(np.float32)
        x = batch[0].astype(np.float32) / 255
        plain = forward(base, x).acts["conv1"]
        out = forward(corrected, x).acts["conv1.corr.scatter"]
        keep = [j for j in range(32) if j not in (1, 4, 9, 30)]
        np.testing.assert_array_equal(out[:, keep], plain[:, keep])
        assert not np.array_equal(out[:, [1, 4, 9, 30]], plain[:, [1, 4, 9, 30]])

    def test_base_frozen_units_trainable(self, corrected):
        for n in corrected.nodes:
            if n.layer.params:
                assert n.layer.trainable == bool(n.group)
        assert unit_groups(corrected) == ["corr:conv1", "corr:conv3"]

    def test_unit_param_count(self, corrected):
        rep = cost_report(corrected)
        expected = _unit_params(4, 4, 3, 2) + _unit_params(43, 22, 3, 3)
        assert rep.trainable_params == rep.grouped().trainable_params == expected

    def test_consumers_rewired(self, corrected):
        assert corrected.node("relu1").inputs == ["conv1.corr.scatter"]

    def test_overlapping_units(self, base):
        with pytest.raises(GraphError, match="overlapping"):
            attach_correction_units(base, [CorrectionUnitConfig.full("conv1", [0]), CorrectionUnitConfig.full("conv1", [1])])

    def test_rank_set_out_of_range(self, base):
        with pytest.raises(GraphError, match="outside"):
            attach_correction_units(base, [CorrectionUnitConfig.full("conv1", [32])])

    def test_second_attachment_rejected(self, corrected):
        with pytest.raises(GraphError):
            attach_correction_units(corrected, [CorrectionUnitConfig.full("conv1", [0])])

    def test_base_graph_untouched(self, base, corrected):
        assert "conv1.corr.select" not in base
        assert all(n.layer.trainable for n in base.nodes if n.layer.params)


@pytest.fixture(scope="module")
def alexnet():
    return build_reference_graph("alexnet")


class TestReferenceUnits:
    def test_corr_unit_1_params(self, alexnet):
        g = attach_correction_units(alexnet, reference_unit_configs(alexnet))
        assert cost_report(g).group("corr:conv1").trainable_params == 269856 == _unit_params(72, 72, 5, 2)

    def test_deepcorr_total(self, alexnet):
        g = attach_correction_units(alexnet, reference_unit_configs(alexnet))
        assert abs(cost_report(g).trainable_params - 2.81e6) / 2.81e6 <= 0.01
        # parameter economy relative to the frozen base
        assert cost_report(g).trainable_params / cost_report(alexnet).params <= 0.05

    def test_bottleneck_flops(self, alexnet):
        g = attach_correction_units(alexnet, reference_unit_configs(alexnet, "bottleneck"))
        f = cost_report(g).grouped().flops
        assert abs(f - 4.4e8) / 4.4e8 <= 0.05


class TestTraining:
    def test_train_config_validation(self):
        with pytest.raises(ConfigError):
            TrainConfig(lr=0)
        with pytest.raises(ConfigError):
            TrainConfig(epochs=2, lr_step=3)
        with pytest.raises(ConfigError):
            TrainConfig(family="AWGN")
        assert TrainConfig(lr=0.1, lr_step=2, epochs=6).lr_at(5) == pytest.approx(0.001)

    def test_smoke_descent(self, corrected, batch):
        x, y = batch
        tc = TrainConfig(lr=0.05, epochs=1, batch_size=8, crop=False, flip=False, seed=0)
        before = forward(corrected, prepare(corrected, x), "eval", y).loss
        train(corrected, x, y, tc)
        after = forward(corrected, prepare(corrected, x), "eval", y).loss
        assert after < before

    def test_frozen_base_bit_identical(self, base, corrected, batch):
        tc = TrainConfig(lr=0.05, epochs=1, batch_size=16, family="AWGN", severities=[20.0], seed=1)
        train(corrected, *batch, tc)
        for n in base.nodes:
            for k, v in n.layer.params.items():
                np.testing.assert_array_equal(corrected.node(n.id).layer.params[k], v)

    def test_finetune_trains_everything(self, base, batch):
        g = base.copy()
        g.set_trainable(False)
        train(g, *batch, TrainConfig(lr=0.01, epochs=1, batch_size=32), mode="finetune")
        rep = cost_report(g)
        assert rep.trainable_params == rep.params == 425290

    def test_correction_mode_needs_units(self, base, batch):
        with pytest.raises(StateError):
            train(base.copy(), *batch, TrainConfig(epochs=1))

    def test_empty_dataset(self, corrected):
        with pytest.raises(ConfigError):
            train(corrected, np.zeros((0, 3, 32, 32)), np.zeros(0, int), TrainConfig(epochs=1))

    def test_nan_loss_aborts(self, corrected, batch):
        corrected.node("fc2").layer.params["bias"][0] = np.nan
        with pytest.raises(TrainingError, match="non-finite loss"):
            train(corrected, *batch, TrainConfig(epochs=1))

    def test_history_and_determinism(self, base, batch, tmp_path):
        tc = TrainConfig(lr=0.02, epochs=2, batch_size=16, family="GaussianBlur", severities=[1.0, 2.0], seed=5)
        runs = []
        for _ in range(2):
            g = attach_correction_units(base, [CorrectionUnitConfig.full("conv2", range(8))])
            runs.append(train(g, *batch, tc, val=batch))
        (g1, h1), (g2, h2) = runs
        assert h1.rows == h2.rows
        assert [r["iterations"] for r in h1.rows] == [2, 4]
        for (_, _, a), (_, _, b) in zip(g1.parameters(), g2.parameters()):
            np.testing.assert_array_equal(a, b)
        h1.write_csv(tmp_path / "h.csv")
        back = History.read_csv(tmp_path / "h.csv")
        assert [(r["epoch"], r["train_loss"], r["val_top1"]) for r in back.rows] == [
            (r["epoch"], r["train_loss"], r["val_top1"]) for r in h1.rows
        ]
        assert (tmp_path / "h.csv").read_text().splitlines()[0] == "epoch,train_loss,val_top1"

    def test_mixed_specs_cover_clean(self):
        specs = mixed_specs(400, "AWGN", [10, 20, 40], np.random.default_rng(0))
        counts = {None: 0, 10.0: 0, 20.0: 0, 40.0: 0}
        for s in specs:
            counts[None if s is None else s.severity] += 1
        assert all(70 <= c <= 130 for c in counts.values())


class TestEvaluate:
    def test_memorised_micro_set(self, base):
        rng = np.random.default_rng(3)
        x = rng.uniform(0, 255, (5, 3, 32, 32))
        y = forward(base, prepare(base, x)).logits.argmax(1)
        assert evaluate(base, x, y, []).clean == 1.0

    def test_chance_level(self, base):
        rng = np.random.default_rng(8)
        x = rng.uniform(0, 255, (1000, 3, 32, 32))
        y = np.repeat(np.arange(10), 100)
        assert abs(evaluate(base, x, y, []).clean - 0.1) <= 0.03

    def test_shuffle_invariance(self, base, batch):
        x, y = batch
        specs = [DistortionSpec("AWGN", 40.0), DistortionSpec("GaussianBlur", 2.0), DistortionSpec("CameraShake", 1.0, 3)]
        a = evaluate(base, x, y, specs, seed=7).to_json()
        p = np.random.default_rng(0).permutation(len(x))
        b = evaluate(base, x[p], y[p], specs, seed=7).to_json()
        assert a == b

    def test_family_means(self, base, batch):
        specs = [DistortionSpec("GaussianBlur", s) for s in (1.0, 2.0, 3.0)]
        t = evaluate(base, *batch, specs)
        assert t.family_mean("GaussianBlur") == pytest.approx(np.mean(list(t.per_spec.values())))
        assert set(t.to_json()["families"]["GaussianBlur"]["per_severity"]) == {"1", "2", "3"}
