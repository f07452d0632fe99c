import dataclasses
import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from promptnorm.harness import (DEFAULT_FACTORS, DEFAULT_VARIANCES, FrequencyTable, ModelConfig,
                                NormTrace, RunReport, SweepCell, SweepGrid, TrainConfig,
                                TrainingDiverged, corruption_sweep, count_low_norm_occurrences,
                                multi_seed, norm_telemetry, default_grids, train)
from promptnorm.losses import PANConfig, PUNConfig
from promptnorm.prompt import SoftPrompt
from promptnorm.rng import stream

from oracles import sweep_cells as oracle_sweep

SMALL = ModelConfig(length=6, dim=8, image_dim=6, feature_dim=12, classes=4, shots=4,
                    test_per_class=8, task_seed=1, encoder_seed=2)


def small(**kw) -> TrainConfig:
    kw.setdefault("epochs", 5)
    return TrainConfig(model=SMALL, **kw)


def report_bytes(report: RunReport) -> bytes:
    return json.dumps(report.to_dict(timing=False), sort_keys=True).encode()


class TestTrainConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            small(epochs=0)
        with pytest.raises(ValueError):
            small(batch_size=0)
        with pytest.raises(ValueError):
            small(mode="pun+pan")
        with pytest.raises(ValueError):
            small(lr=-1.0)

    def test_schedule_tracks_epochs(self):
        assert small(epochs=37).schedule.max_epochs == 37

    def test_dict_round_trip(self):
        cfg = small(mode="both", pun=PUNConfig(3.0, "one"), pan=PANConfig(2.0, 0.25, 2))
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg

    def test_effective_beta(self):
        assert small(mode="pun").effective_beta == 1.0
        assert small(mode="pan").effective_beta == 0.0


class TestTrain:
    def test_zero_lr_leaves_prompt(self):
        init = SoftPrompt.random(stream(0, "prompt-init"), 6, 8, 0.02)
        prompt, _ = train(small(lr=0.0, epochs=3))
        assert prompt.equals(init)

    def test_trace_shape(self):
        _, report = train(small(epochs=4))
        assert [r.epoch for r in report.trace.records] == [1, 2, 3, 4]
        for r in report.trace.records:
            assert len(r.norms) == 6
            assert abs(r.mean_norm - np.mean(r.norms)) <= 1e-12
            assert 0 <= r.test_accuracy <= 1

    def test_huge_omega_reduces_norm(self):
        init = SoftPrompt.random(stream(0, "init"), 6, 8, 1.0)
        _, report = train(small(mode="pun", pun=PUNConfig(1000.0), lr=0.001), init=init)
        assert report.final.mean_norm < float(np.linalg.norm(init.rows, axis=1).mean())

    @pytest.mark.parametrize("mode", ["ce", "pun", "pan", "both"])
    def test_deterministic(self, mode):
        a = train(small(mode=mode, seed=3))
        b = train(small(mode=mode, seed=3))
        assert a[0].equals(b[0])
        assert report_bytes(a[1]) == report_bytes(b[1])

    def test_seeds_differ(self):
        assert not train(small(seed=1))[0].equals(train(small(seed=2))[0])

    def test_pan_instrumentation(self):
        events = []
        train(small(mode="pan", epochs=3, batch_size=5, pan=PANConfig(1.0, 0.5, 2)),
              observer=lambda e, info: events.append((e, info)))
        batches_per_epoch = math.ceil(16 / 5)
        kinds = [e for e, _ in events]
        assert kinds == ["pre_inference", "step"] * (3 * batches_per_epoch)
        for (_, pre), (_, step) in zip(events[::2], events[1::2]):
            assert pre["tape_len_before"] == pre["tape_len_after"] == 0
            assert step["alphas"] is pre["alphas"]
            assert len(set(pre["positions"])) == 2

    def test_ce_mode_never_pre_infers(self):
        events = []
        _, report = train(small(epochs=2), observer=lambda e, info: events.append(e))
        assert "pre_inference" not in events
        assert all(r.pre_inference_passes == 0 for r in report.trace.records)

    def test_divergence_reports(self):
        with pytest.raises(TrainingDiverged) as err:
            train(small(lr=1e308, optimizer="sgd"))
        assert err.value.report.status == "diverged"


class TestPANGradientConfinement:
    def test_pan_only_gradient_is_zero_off_selection(self):
        # the PAN term adds nothing, bitwise, to rows outside each batch's selection
        from promptnorm import autodiff as ad
        from promptnorm.encoders import encode_images, encode_texts
        from promptnorm.losses import ce_loss, pan_loss, total_loss

        cfg = small(mode="pan", epochs=2, pan=PANConfig(5.0, 0.5, 3))
        enc, task = cfg.model.build()
        f = encode_images(enc, task.train_x)
        seen = []

        def observe(event, info):
            if event != "step" or info["alphas"].M == 0:
                return
            seen.append(info)

        train(cfg, observer=observe)
        assert seen, "no batch selected any position"
        V = np.random.default_rng(0).normal(size=(6, 8))
        for info in seen:
            tape = ad.GradientTape()
            v = tape.watch(V)
            pan = pan_loss(v, info["alphas"])
            g_pan = ad.backward(tape, pan)[v].data
            for j in range(6):
                if j + 1 not in info["alphas"].selected:
                    assert g_pan[j].tobytes() == np.zeros(8).tobytes()
        tape = ad.GradientTape()
        v = tape.watch(V)
        ce = ce_loss(f, encode_texts(enc, v, task.class_embeddings), task.train_y, 0.07)
        total = total_loss(ce, None, pan_loss(v, seen[0]["alphas"]), 0.0)
        g_total = ad.backward(tape, total)[v].data
        g_ce = ad.backward(tape, ce)[v].data
        for j in range(6):
            if j + 1 not in seen[0]["alphas"].selected:
                assert g_total[j].tobytes() == g_ce[j].tobytes()


@pytest.fixture(scope="module")
def trained_small():
    cfg = small(epochs=30)
    prompt, _ = train(cfg)
    enc, task = cfg.model.build()
    return prompt, enc, task


class TestSweep:
    def test_default_grids(self):
        rep, res = default_grids()
        assert rep.parameters == DEFAULT_VARIANCES == (0.0, 0.001, 0.01, 0.1, 0.5)
        assert res.parameters == DEFAULT_FACTORS == (0.001, 0.01, 0.1, 0.5, 2.0)

    def test_grid_validation(self):
        with pytest.raises(ValueError):
            SweepGrid("rescale", ())
        with pytest.raises(ValueError):
            SweepGrid("replace", (-0.1,))
        with pytest.raises(ValueError):
            SweepGrid("swap", (1.0,))

    def test_identity_rescale(self, trained_small):
        prompt, enc, task = trained_small
        table = corruption_sweep(prompt, task, enc, [SweepGrid("rescale", (1.0,))], [0, 1])
        assert table.count("rescale", 1.0) == 0
        assert all(c.delta == 0 and c.norm_after == c.norm_before for c in table.cells)
        assert table.norm_direction("rescale", 1.0) == "flat"

    def test_matches_brute_force_oracle(self, trained_small):
        prompt, enc, task = trained_small
        seeds = [0, 3]
        table = corruption_sweep(prompt, task, enc, default_grids(), seeds)
        assert len(table.cells) == 2 * 10 * 6
        for grid in default_grids():
            for param in grid.parameters:
                for seed in seeds:
                    want = oracle_sweep(prompt.rows, enc, task, grid.arm, param, seed)
                    got = [c for c in table.cells
                           if c.arm == grid.arm and c.parameter == param and c.seed == seed]
                    assert [c.position for c in got] == [w[0] for w in want]
                    for c, (_, base, acc, norm) in zip(got, want):
                        assert c.accuracy_base == base
                        assert c.accuracy_corrupted == acc
                        assert c.norm_after == pytest.approx(norm, rel=1e-12, abs=1e-15)
                    assert table.count(grid.arm, param, seed) == sum(w[2] > w[1] for w in want)

    def test_baseline_shared(self, trained_small):
        prompt, enc, task = trained_small
        table = corruption_sweep(prompt, task, enc, default_grids(), [0, 1, 2])
        assert len({c.accuracy_base for c in table.cells}) == 1

    def test_parallel_equals_serial(self, trained_small):
        prompt, enc, task = trained_small
        serial = corruption_sweep(prompt, task, enc, default_grids(), [0, 1], workers=1)
        parallel = corruption_sweep(prompt, task, enc, default_grids(), [0, 1], workers=2)
        assert json.dumps(serial.to_dict()) == json.dumps(parallel.to_dict())

    def test_seed_order_irrelevant(self, trained_small):
        prompt, enc, task = trained_small
        a = corruption_sweep(prompt, task, enc, default_grids(), [2, 0, 1])
        b = corruption_sweep(prompt, task, enc, default_grids(), [0, 1, 2])
        assert json.dumps(a.to_dict()) == json.dumps(b.to_dict())

    def test_directions_measured(self):
        prompt = SoftPrompt(np.full((6, 8), 0.01))  # row norm ~0.028
        enc, task = SMALL.build()
        table = corruption_sweep(prompt, task, enc, default_grids(), [0, 1])
        for f in (0.001, 0.01, 0.1, 0.5):
            assert table.norm_direction("rescale", f) == "down"
        assert table.norm_direction("rescale", 2.0) == "up"
        assert table.norm_direction("replace", 0.0) == "down"
        for v in (0.01, 0.1, 0.5):
            assert table.norm_direction("replace", v) == "up"


def random_table(rng, L=4, seeds=(0, 1)):
    cells = []
    for s in seeds:
        for arm, params in (("rescale", (0.1, 0.5, 2.0)), ("replace", (0.0, 0.5))):
            for p in params:
                grows = (arm == "rescale" and p > 1) or (arm == "replace" and p > 0)
                for pos in range(1, L + 1):
                    before = 1.0
                    after = before * (3.0 if grows else 0.2)
                    cells.append(SweepCell(s, arm, p, pos, 0.5, float(rng.choice([0.25, 0.5, 0.75])),
                                           before, after))
    return FrequencyTable(cells)


class TestLowNorm:
    def test_empty_table(self):
        assert count_low_norm_occurrences(FrequencyTable()).low_norm == 0

    def test_constructed_counts(self):
        cells = []
        for p, k in zip((0.001, 0.01, 0.1, 0.5), (2, 0, 1, 3)):
            for pos in range(1, 5):
                cells.append(SweepCell(0, "rescale", p, pos, 0.5, 0.75 if pos <= k else 0.5,
                                       2.0, 2.0 * p))
        for pos in range(1, 5):
            cells.append(SweepCell(0, "rescale", 2.0, pos, 0.5, 0.9, 2.0, 4.0))
        summary = count_low_norm_occurrences(FrequencyTable(cells))
        assert summary.low_norm == 6
        assert summary.norm_increasing == 4

    def test_ties_do_not_count(self):
        cells = [SweepCell(0, "rescale", 0.5, 1, 0.5, 0.5, 1.0, 0.5)]
        assert count_low_norm_occurrences(FrequencyTable(cells)).low_norm == 0

    @given(st.integers(0, 2**32 - 1))
    def test_up_arm_never_counted(self, seed):
        rng = np.random.default_rng(seed)
        table = random_table(rng)
        summary = count_low_norm_occurrences(table)
        down = [(a, p) for a, p in table.keys() if table.norm_direction(a, p) == "down"]
        up = [(a, p) for a, p in table.keys() if table.norm_direction(a, p) == "up"]
        assert summary.low_norm == pytest.approx(sum(table.count(a, p) for a, p in down))
        assert summary.norm_increasing == pytest.approx(sum(table.count(a, p) for a, p in up))
        # inflating every up-arm exceedance leaves the low-norm sum unchanged
        boosted = FrequencyTable([dataclasses.replace(c, accuracy_corrupted=1.0)
                                  if (c.arm, c.parameter) in up else c for c in table.cells])
        assert count_low_norm_occurrences(boosted).low_norm == summary.low_norm

    @given(st.integers(0, 2**32 - 1))
    def test_counts_bounded(self, seed):
        table = random_table(np.random.default_rng(seed))
        for a, p in table.keys():
            assert 0 <= table.count(a, p) <= 4


class TestTelemetry:
    def test_rows(self):
        _, report = train(small(epochs=1))
        rows = norm_telemetry(report.trace)
        assert rows[0] == ["epoch", "test_accuracy", "mean_norm"] + [f"norm_{j}" for j in range(1, 7)]
        assert len(rows) == 2

    def test_mean_consistency(self):
        _, report = train(small(epochs=6))
        for row in norm_telemetry(report.trace)[1:]:
            assert abs(row[2] - np.mean(row[3:])) <= 1e-12

    def test_empty_trace(self):
        assert norm_telemetry(NormTrace()) == [["epoch", "test_accuracy", "mean_norm"]]

    def test_epochs_must_increase(self):
        _, report = train(small(epochs=2))
        with pytest.raises(ValueError):
            report.trace.append(report.trace.records[0])


class TestMultiSeed:
    def test_single_seed_equals_run(self):
        cfg = small(epochs=3)
        agg = multi_seed(cfg, [4])
        _, report = train(dataclasses.replace(cfg, seed=4))
        assert agg["test_accuracy_mean"] == report.final.test_accuracy
        assert agg["test_accuracy_std"] == 0.0
        assert agg["runs"][0]["trace"] == [dataclasses.asdict(r) for r in report.trace.records]

    def test_permutation_invariant(self):
        cfg = small(epochs=3)
        a = multi_seed(cfg, [3, 1, 2])
        b = multi_seed(cfg, [1, 2, 3])
        assert json.dumps(a, sort_keys=True) == json.dumps(b, sort_keys=True)
        assert a["seeds"] == [1, 2, 3]

    def test_parallel_equals_serial(self):
        cfg = small(epochs=3)
        serial = multi_seed(cfg, range(5), workers=1)
        parallel = multi_seed(cfg, range(5), workers=3)
        assert json.dumps(serial, sort_keys=True) == json.dumps(parallel, sort_keys=True)

    def test_failure_marker(self):
        agg = multi_seed(small(lr=1e308, optimizer="sgd"), [0, 1])
        assert agg["status"] == "partial"
        assert all(r["status"] == "failed" for r in agg["runs"])
        assert agg["test_accuracy_mean"] is None

    def test_needs_seed(self):
        with pytest.raises(ValueError):
            multi_seed(small(), [])
