import csv
import json
from pathlib import Path

import numpy as np
import pytest

from stiffonet import cli
from stiffonet import kinetics as K
from stiffonet import operator as O


GEN_ARGS = ["gen", "--grid", "3x3", "--steps", "100", "--segment", "50",
            "--dt", "1e-3", "--seed", "7"]
FAST_TRAIN = ["--epochs", "30", "--eval-every", "15", "--minibatches", "4",
              "--minibatches-after", "4", "--switch-epoch", "100",
              "--weight-first", "10", "--weight-every", "10",
              "--branch-width", "16", "--trunk-width", "8", "--p", "4"]


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "ds"
    assert cli.main(GEN_ARGS + ["--out", str(out)]) == 0
    return out


class TestGen:
    def test_creates_dataset(self, dataset):
        loaded = K.load_dataset(dataset)
        assert loaded["train"].raw.shape == (7, 101, 3)
        assert loaded["test"].raw.shape == (2, 101, 3)
        assert loaded["segment_len"] == 51
        assert (dataset / "config.json").exists()

    def test_rerun_is_byte_identical(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert cli.main(GEN_ARGS + ["--out", str(a)]) == 0
        assert cli.main(GEN_ARGS + ["--out", str(b)]) == 0
        for f in ("train.bin", "test.bin", "manifest.json"):
            assert (a / f).read_bytes() == (b / f).read_bytes()

    def test_bad_grid_is_usage_error(self, tmp_path):
        assert cli.main(["gen", "--out", str(tmp_path / "x"), "--grid", "axb"]) == 2

    def test_indivisible_steps_rejected(self, tmp_path):
        code = cli.main(["gen", "--out", str(tmp_path / "x"), "--grid", "2x2",
                         "--steps", "101", "--segment", "50"])
        assert code == 2

    def test_config_file_with_flag_override(self, tmp_path):
        cfg = tmp_path / "gen.json"
        cfg.write_text(json.dumps({"grid": "2x2", "steps": 100, "segment": 50,
                                   "dt": 1e-3, "seed": 3}))
        out = tmp_path / "from_config"
        assert cli.main(["gen", "--config", str(cfg), "--out", str(out),
                         "--seed", "9"]) == 0
        resolved = json.loads((out / "config.json").read_text())
        assert resolved["grid"] == "2x2"
        assert resolved["seed"] == 9  # flag wins over file


class TestTrain:
    def test_one_step_run(self, dataset, tmp_path):
        out = tmp_path / "m"
        code = cli.main(["train", "--data", str(dataset), "--out", str(out),
                         "--loss", "ad-b", "--log-weights"] + FAST_TRAIN)
        assert code == 0
        assert (out / "run-0" / "checkpoint" / "manifest.json").exists()
        with (out / "run-0" / "history.csv").open() as fh:
            rows = list(csv.DictReader(fh))
        assert [r["epoch"] for r in rows] == ["15", "30"]
        assert all(float(r["train_rel_l2"]) > 0 for r in rows)
        with (out / "run-0" / "weights.csv").open() as fh:
            wrows = list(csv.DictReader(fh))
        assert {r["epoch"] for r in wrows} == {"10", "20", "30"}

    def test_two_step_emits_two_histories(self, dataset, tmp_path):
        out = tmp_path / "m2"
        code = cli.main(["train", "--data", str(dataset), "--out", str(out),
                         "--paradigm", "two-step", "--no-pou", "--no-com",
                         "--loss", "na"] + FAST_TRAIN)
        assert code == 0
        assert (out / "run-0" / "history-trunk.csv").exists()
        assert (out / "run-0" / "history-branch.csv").exists()
        model = O.load_model(out / "run-0" / "checkpoint")
        assert model.mode == O.TWO_STEP
        assert model.q_star is not None

    def test_runs_flag_produces_separate_seeds(self, dataset, tmp_path):
        out = tmp_path / "m3"
        code = cli.main(["train", "--data", str(dataset), "--out", str(out),
                         "--loss", "na", "--runs", "2"] + FAST_TRAIN)
        assert code == 0
        m0 = O.load_model(out / "run-0" / "checkpoint")
        m1 = O.load_model(out / "run-1" / "checkpoint")
        assert any(
            not np.array_equal(m0.branch_params[k].value, m1.branch_params[k].value)
            for k in m0.branch_params
        )

    def test_two_step_with_pou_rejected_before_compute(self, dataset, tmp_path):
        code = cli.main(["train", "--data", str(dataset), "--out",
                         str(tmp_path / "x"), "--paradigm", "two-step",
                         "--pou", "--no-com"] + FAST_TRAIN)
        assert code == 2
        assert not (tmp_path / "x").exists()

    def test_two_step_with_com_rejected(self, dataset, tmp_path):
        code = cli.main(["train", "--data", str(dataset), "--out",
                         str(tmp_path / "x"), "--paradigm", "two-step",
                         "--no-pou", "--com"] + FAST_TRAIN)
        assert code == 2

    def test_massmap_without_mass_group_rejected(self, tmp_path):
        # a dataset whose schema has no mass group: build one by hand
        mech = K.custom_mechanism(
            "lin", O.StateSchema(("u",), log_flags=(False,)),
            rhs=lambda y: -y, jac=lambda y: -np.eye(1),
            ic_from_params=lambda u, v: np.array([1.0 + u]),
        )
        raw = K.generate_trajectories(mech, (3, 1), 0.1, 10)
        train, test, tri, tei = K.split_dataset(raw, 0.1, mech.schema, seed=1)
        K.save_dataset(tmp_path / "lin", train, test, mech, tri, tei, seg_len=6)
        code = cli.main(["train", "--data", str(tmp_path / "lin"), "--out",
                         str(tmp_path / "x"), "--massmap"] + FAST_TRAIN)
        assert code == 2

    def test_deterministic_checkpoints(self, dataset, tmp_path):
        args = ["train", "--data", str(dataset), "--loss", "ad-a"] + FAST_TRAIN
        assert cli.main(args + ["--out", str(tmp_path / "a")]) == 0
        assert cli.main(args + ["--out", str(tmp_path / "b")]) == 0
        ckpt_a = tmp_path / "a" / "run-0" / "checkpoint"
        ckpt_b = tmp_path / "b" / "run-0" / "checkpoint"
        for f in sorted(ckpt_a.iterdir()):
            assert f.read_bytes() == (ckpt_b / f.name).read_bytes(), f.name
        assert (tmp_path / "a" / "run-0" / "history.csv").read_bytes() == \
            (tmp_path / "b" / "run-0" / "history.csv").read_bytes()


class TestEval:
    @pytest.fixture(scope="class")
    def trained(self, dataset, tmp_path_factory):
        out = tmp_path_factory.mktemp("trained") / "m"
        assert cli.main(["train", "--data", str(dataset), "--out", str(out),
                         "--loss", "ad-b"] + FAST_TRAIN) == 0
        return out / "run-0" / "checkpoint"

    def test_eval_train_split_matches_history(self, dataset, trained, tmp_path):
        out = tmp_path / "ev"
        assert cli.main(["eval", "--checkpoint", str(trained), "--data",
                         str(dataset), "--out", str(out), "--split", "train"]) == 0
        with (out / "report_segmented_summary.csv").open() as fh:
            rows = list(csv.DictReader(fh))
        global_mean = float(rows[-1]["mean"])
        with (trained.parent / "history.csv").open() as fh:
            hist = list(csv.DictReader(fh))
        assert abs(global_mean - float(hist[-1]["train_rel_l2"])) < 1e-12

    def test_recursive_rollout_outputs(self, dataset, trained, tmp_path):
        out = tmp_path / "ev2"
        assert cli.main(["eval", "--checkpoint", str(trained), "--data",
                         str(dataset), "--out", str(out), "--recursive", "2"]) == 0
        assert (out / "accumulation.csv").exists()
        with (out / "report_rollout_summary.csv").open() as fh:
            rows = list(csv.DictReader(fh))
        assert all(np.isfinite(float(r["q90"])) for r in rows[:-1])

    def test_recurse_alias_defaults_to_full_horizon(self, dataset, trained, tmp_path):
        out = tmp_path / "ev3"
        assert cli.main(["recurse", "--checkpoint", str(trained), "--data",
                         str(dataset), "--out", str(out)]) == 0
        with (out / "accumulation.csv").open() as fh:
            rows = list(csv.DictReader(fh))
        assert max(int(r["segment"]) for r in rows) == 2  # full horizon

    def test_missing_checkpoint_is_usage_error(self, dataset, tmp_path):
        code = cli.main(["eval", "--checkpoint", str(tmp_path / "nope"),
                         "--data", str(dataset), "--out", str(tmp_path / "o")])
        assert code != 0

    def test_schema_mismatch_reports_diff(self, trained, tmp_path, capsys):
        mech = K.toy_combustion()
        raw = K.generate_trajectories(mech, (2, 1), 1e-6, 10)
        train, test, tri, tei = K.split_dataset(raw, 1e-6, mech.schema, seed=1)
        K.save_dataset(tmp_path / "toy", train, test, mech, tri, tei, seg_len=6)
        code = cli.main(["eval", "--checkpoint", str(trained), "--data",
                         str(tmp_path / "toy"), "--out", str(tmp_path / "o")])
        assert code == 2
        err = capsys.readouterr().err
        assert "schema mismatch" in err


class TestMassmapCheck:
    def test_passes(self):
        assert cli.main(["massmap-check", "--samples", "500"]) == 0


class TestMassmapTrainEval:
    def test_massmap_end_to_end(self, dataset, tmp_path):
        out = tmp_path / "mm"
        code = cli.main(["train", "--data", str(dataset), "--out", str(out),
                         "--massmap", "--no-com", "--loss", "ad-b"] + FAST_TRAIN)
        assert code == 0
        model = O.load_model(out / "run-0" / "checkpoint")
        assert model.collapsed_from is not None
        assert model.schema.j == 2  # three species collapse to two coordinates
        ev = tmp_path / "mm-ev"
        assert cli.main(["eval", "--checkpoint", str(out / "run-0" / "checkpoint"),
                         "--data", str(dataset), "--out", str(ev),
                         "--recursive", "2"]) == 0
        with (ev / "report_segmented_summary.csv").open() as fh:
            rows = list(csv.DictReader(fh))
        assert [r["state"] for r in rows[:-1]] == ["y1", "y2", "y3"]

    def test_mass_conservation_is_exact_after_expansion(self, dataset, tmp_path):
        out = tmp_path / "mm2"
        assert cli.main(["train", "--data", str(dataset), "--out", str(out),
                         "--massmap", "--no-com", "--loss", "na"] + FAST_TRAIN) == 0
        model = O.load_model(out / "run-0" / "checkpoint")
        data = K.load_dataset(dataset)
        seg = K.time_decompose(data["test"], model.n_t1)
        pred = cli._predict_segments(model, seg, data["test"].schema)
        sums = pred.sum(axis=-1)
        np.testing.assert_allclose(sums, 1.0, atol=1e-12)
