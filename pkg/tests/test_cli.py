"""Command-line workflow: exit codes, manifest and CSV schemas, idempotent
reruns, and the cross-command averaging equivalence."""

import json
from pathlib import Path

import pytest

from distilab.cli import METRIC_COLUMNS, main

TINY = {
    "data": {"kind": "mixture", "num_classes": 3, "dim": 2, "n_per_class": 40,
             "spread": 0.6, "seed": 11},
    "model": {"hidden": [16, 16]},
    "optim": {"epochs": 6, "warmup_epochs": 1, "batch_size": 32},
    "distill": {"tau": 4.0, "alpha": 1.0, "num_teachers": 2},
    "method": "latentbe",
    "seeds": [0],
}


def write_config(tmp_path, **overrides):
    doc = json.loads(json.dumps(TINY))
    for key, value in overrides.items():
        if isinstance(value, dict) and key in doc:
            doc[key].update(value)
        else:
            doc[key] = value
    path = tmp_path / "config.json"
    path.write_text(json.dumps(doc))
    return path


def write_data_spec(tmp_path):
    path = tmp_path / "data.json"
    path.write_text(json.dumps(TINY["data"]))
    return path


@pytest.fixture()
def trained(tmp_path):
    cfg = write_config(tmp_path)
    out = tmp_path / "teachers"
    assert main(["train-teachers", "--config", str(cfg), "--out", str(out)]) == 0
    return cfg, out


class TestTrainTeachers:
    def test_writes_checkpoints_and_manifest(self, trained, tmp_path):
        _, out = trained
        seed_dir = out / "seed0"
        assert (seed_dir / "teacher0.json").exists()
        assert (seed_dir / "teacher1.json").exists()
        manifest = json.loads((seed_dir / "manifest.json").read_text())
        assert manifest["command"] == "train-teachers"
        assert set(manifest["data_digests"]) == {"train", "val", "test"}

    def test_single_teacher_run(self, tmp_path):
        cfg = write_config(tmp_path, distill={"num_teachers": 1}, method="kd")
        out = tmp_path / "t1"
        assert main(["train-teachers", "--config", str(cfg), "--out", str(out)]) == 0
        assert (out / "seed0" / "teacher0.json").exists()
        assert not (out / "seed0" / "teacher1.json").exists()

    def test_rerun_is_byte_identical(self, trained):
        cfg, out = trained
        before = (out / "seed0" / "teacher0.json").read_bytes()
        assert main(["train-teachers", "--config", str(cfg), "--out", str(out)]) == 0
        assert (out / "seed0" / "teacher0.json").read_bytes() == before

    def test_missing_config_exits_2(self, tmp_path):
        assert main(["train-teachers", "--config", str(tmp_path / "no.json"),
                     "--out", str(tmp_path / "x")]) == 2

    def test_invalid_method_exits_2(self, tmp_path):
        cfg = write_config(tmp_path, method="alchemy")
        assert main(["train-teachers", "--config", str(cfg),
                     "--out", str(tmp_path / "x")]) == 2


class TestDistill:
    def test_latentbe_emits_both_checkpoints_and_trace(self, trained, tmp_path):
        cfg, teachers = trained
        out = tmp_path / "latent"
        assert main(["distill", "--config", str(cfg), "--teachers", str(teachers),
                     "--out", str(out)]) == 0
        seed_dir = out / "seed0"
        assert (seed_dir / "student.json").exists()
        assert (seed_dir / "student_be.json").exists()
        trace = (seed_dir / "trace.csv").read_text().splitlines()
        assert trace[0] == "step,div_train,div_test,avg_test_nll"
        assert len(trace) > 1

    def test_kd_manifest_records_default_temperature(self, trained, tmp_path):
        cfg_path = write_config(tmp_path, method="kd")
        _, teachers = trained
        out = tmp_path / "kd"
        assert main(["distill", "--config", str(cfg_path), "--teachers",
                     str(teachers), "--out", str(out)]) == 0
        manifest = json.loads((out / "seed0" / "manifest.json").read_text())
        assert manifest["config"]["distill"]["tau"] == 4.0
        assert manifest["config"]["distill"]["alpha"] == 1.0

    def test_be_plus_average_equals_latentbe_with_zero_decay(self, trained, tmp_path):
        _, teachers = trained
        cfg_be = write_config(tmp_path, method="be", student_init="ones",
                              distill={"num_teachers": 2, "rank_decay": 0.0})
        out_be = tmp_path / "be"
        assert main(["distill", "--config", str(cfg_be), "--teachers",
                     str(teachers), "--out", str(out_be)]) == 0
        avg_path = tmp_path / "be_avg.json"
        assert main(["average", "--model", str(out_be / "seed0" / "student_be.json"),
                     "--out", str(avg_path)]) == 0

        cfg_latent = write_config(tmp_path, method="latentbe",
                                  distill={"num_teachers": 2, "rank_decay": 0.0})
        out_latent = tmp_path / "latent0"
        assert main(["distill", "--config", str(cfg_latent), "--teachers",
                     str(teachers), "--out", str(out_latent)]) == 0
        assert avg_path.read_bytes() == (out_latent / "seed0" / "student.json").read_bytes()

    def test_teacher_count_mismatch_exits_2(self, trained, tmp_path):
        cfg3 = write_config(tmp_path, distill={"num_teachers": 3})
        _, teachers = trained
        assert main(["distill", "--config", str(cfg3), "--teachers", str(teachers),
                     "--out", str(tmp_path / "x")]) == 2

    def test_proxy_end2_method_runs(self, trained, tmp_path):
        cfg = write_config(tmp_path, method="proxy_end2")
        _, teachers = trained
        out = tmp_path / "proxy"
        assert main(["distill", "--config", str(cfg), "--teachers", str(teachers),
                     "--out", str(out)]) == 0
        doc = json.loads((out / "seed0" / "student.json").read_text())
        assert doc["head"] == "dirichlet"


class TestEvaluate:
    def test_metrics_row_schema(self, trained, tmp_path):
        _, teachers = trained
        data = write_data_spec(tmp_path)
        out = tmp_path / "m.csv"
        assert main(["evaluate", "--model", str(teachers / "seed0" / "teacher0.json"),
                     "--data", str(data), "--out", str(out)]) == 0
        lines = out.read_text().splitlines()
        assert lines[0] == ",".join(METRIC_COLUMNS)
        cells = lines[1].split(",")
        assert len(cells) == len(METRIC_COLUMNS)
        tau_star = float(cells[METRIC_COLUMNS.index("tau_star")])
        assert tau_star > 0

    def test_corrupt_out_of_range_exits_2(self, trained, tmp_path):
        _, teachers = trained
        data = write_data_spec(tmp_path)
        assert main(["evaluate", "--model", str(teachers / "seed0" / "teacher0.json"),
                     "--data", str(data), "--corrupt", "6",
                     "--out", str(tmp_path / "m.csv")]) == 2

    def test_ood_flag_writes_entropy_histograms(self, trained, tmp_path):
        _, teachers = trained
        data = write_data_spec(tmp_path)
        ood = tmp_path / "ood.json"
        ood.write_text(json.dumps({"shift": 6.0, "seed": 3}))
        out = tmp_path / "m.csv"
        assert main(["evaluate", "--model", str(teachers / "seed0" / "teacher0.json"),
                     "--data", str(data), "--ood", str(ood), "--out", str(out)]) == 0
        hist = Path(str(out) + ".entropy.csv").read_text().splitlines()
        assert hist[0] == "tag,bin_lo,bin_hi,count"
        tags = {line.split(",")[0] for line in hist[1:]}
        assert tags == {"in", "ood"}

    def test_factored_checkpoint_reports_mean_div(self, trained, tmp_path):
        cfg, teachers = trained
        out_l = tmp_path / "latent"
        main(["distill", "--config", str(cfg), "--teachers", str(teachers),
              "--out", str(out_l)])
        data = write_data_spec(tmp_path)
        out = tmp_path / "m.csv"
        assert main(["evaluate", "--model", str(out_l / "seed0" / "student_be.json"),
                     "--data", str(data), "--out", str(out)]) == 0
        row = out.read_text().splitlines()[1].split(",")
        assert row[METRIC_COLUMNS.index("mean_div")] != ""

    def test_missing_model_exits_2(self, tmp_path):
        data = write_data_spec(tmp_path)
        assert main(["evaluate", "--model", str(tmp_path / "none.json"),
                     "--data", str(data), "--out", str(tmp_path / "m.csv")]) == 2

    def test_rerun_writes_byte_identical_csv(self, trained, tmp_path):
        _, teachers = trained
        data = write_data_spec(tmp_path)
        out = tmp_path / "m.csv"
        model = str(teachers / "seed0" / "teacher0.json")
        assert main(["evaluate", "--model", model, "--data", str(data),
                     "--out", str(out)]) == 0
        first = out.read_bytes()
        assert main(["evaluate", "--model", model, "--data", str(data),
                     "--out", str(out)]) == 0
        assert out.read_bytes() == first

    def test_thread_cap_does_not_change_results(self, trained, tmp_path,
                                                monkeypatch):
        _, teachers = trained
        data = write_data_spec(tmp_path)
        model = str(teachers / "seed0" / "teacher0.json")
        out1 = tmp_path / "serial.csv"
        assert main(["evaluate", "--model", model, "--data", str(data),
                     "--out", str(out1)]) == 0
        monkeypatch.setenv("DISTILAB_THREADS", "4")
        out4 = tmp_path / "threaded.csv"
        assert main(["evaluate", "--model", model, "--data", str(data),
                     "--out", str(out4)]) == 0
        assert out1.read_bytes() == out4.read_bytes()


class TestExitCodes:
    def test_numerical_failure_exits_3(self, trained, tmp_path):
        # an absurd learning rate reliably produces a non-finite loss
        cfg = write_config(tmp_path, optim={"base_lr": 1e9, "epochs": 6,
                                            "warmup_epochs": 1, "batch_size": 32})
        out = tmp_path / "boom"
        assert main(["train-teachers", "--config", str(cfg),
                     "--out", str(out)]) == 3


class TestLineScan:
    def test_scan_csv_contains_anchor_rows(self, trained, tmp_path):
        cfg, teachers = trained
        out_l = tmp_path / "latent"
        main(["distill", "--config", str(cfg), "--teachers", str(teachers),
              "--out", str(out_l)])
        data = write_data_spec(tmp_path)
        out = tmp_path / "scan.csv"
        assert main(["line-scan", "--model", str(out_l / "seed0" / "student_be.json"),
                     "--data", str(data), "--out", str(out)]) == 0
        lines = out.read_text().splitlines()
        assert lines[0] == "t,train_err,test_err,test_nll"
        ts = {float(line.split(",")[0]) for line in lines[1:]}
        assert {0.0, 0.5, 1.0} <= ts

    def test_plain_checkpoint_exits_2(self, trained, tmp_path):
        _, teachers = trained
        data = write_data_spec(tmp_path)
        assert main(["line-scan", "--model", str(teachers / "seed0" / "teacher0.json"),
                     "--data", str(data), "--out", str(tmp_path / "s.csv")]) == 2


class TestPerturbDiag:
    def test_schema_and_identical_teachers_give_zero_shift(self, trained, tmp_path):
        cfg, teachers = trained
        # identical-teacher ensemble: copy teacher0 over teacher1
        twin = tmp_path / "twin" / "seed0"
        twin.mkdir(parents=True)
        payload = (teachers / "seed0" / "teacher0.json").read_bytes()
        (twin / "teacher0.json").write_bytes(payload)
        (twin / "teacher1.json").write_bytes(payload)
        out_l = tmp_path / "latent"
        main(["distill", "--config", str(cfg), "--teachers", str(teachers),
              "--out", str(out_l)])
        data = write_data_spec(tmp_path)
        out = tmp_path / "diag.csv"
        assert main(["perturb-diag", "--teachers", str(tmp_path / "twin"),
                     "--student", str(out_l / "seed0" / "student_be.json"),
                     "--data", str(data), "--kind", "gaussian",
                     "--out", str(out)]) == 0
        lines = out.read_text().splitlines()
        assert lines[0] == "step,kind,mean_dT,mean_dS,frac_ascent"
        for line in lines[1:]:
            assert float(line.split(",")[2]) == 0.0  # dT identically zero

    def test_unknown_kind_exits_2(self, trained, tmp_path):
        cfg, teachers = trained
        out_l = tmp_path / "latent"
        main(["distill", "--config", str(cfg), "--teachers", str(teachers),
              "--out", str(out_l)])
        data = write_data_spec(tmp_path)
        assert main(["perturb-diag", "--teachers", str(teachers),
                     "--student", str(out_l / "seed0" / "student_be.json"),
                     "--data", str(data), "--kind", "warp",
                     "--out", str(tmp_path / "d.csv")]) == 2

    def test_tdiv_sdiv_requires_factored_student(self, trained, tmp_path):
        _, teachers = trained
        data = write_data_spec(tmp_path)
        assert main(["perturb-diag", "--teachers", str(teachers),
                     "--student", str(teachers / "seed0" / "teacher0.json"),
                     "--data", str(data), "--kind", "tdiv_sdiv",
                     "--out", str(tmp_path / "d.csv")]) == 2
