"""End-to-end command tests: artifacts, determinism, exit codes."""

import csv
import hashlib
import json
import subprocess
import sys

import numpy as np
import pytest

from lfit.cli import apply_thread_cap, main
from lfit.errors import ConfigError

K, TAU = 8, 2
QUANTILES = [0.1, 0.5, 0.9]
SYNTH = {"n_series": 3, "length": 60, "noise_covariates": 1, "seed": 11}


def sha(path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_config(path, **entries):
    path.write_text(json.dumps(entries, indent=2))
    return str(path)


def read_rows(path) -> list[dict]:
    with open(path) as f:
        return list(csv.DictReader(f))


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """One generated dataset and one trained run shared by the tests."""
    root = tmp_path_factory.mktemp("cli")
    gen_cfg = write_config(root / "gen.json", synthetic=SYNTH, out=str(root / "dataset"))
    assert main(["generate", "--config", gen_cfg]) == 0

    data = {
        "csv": str(root / "dataset" / "data.csv"),
        "schema": str(root / "dataset" / "schema.json"),
        "statics": str(root / "dataset" / "statics.csv"),
    }
    train_cfg = write_config(
        root / "train.json",
        data=data,
        scenario="MT-MPC",
        model={"encoder_length": K, "horizon": TAU, "d_model": 4, "n_heads": 2, "quantiles": QUANTILES},
        train={"batch_size": 64, "max_epochs": 2, "early_stop_patience": 5, "seed": 3},
        test_fraction=0.2,
        seed=0,
        out=str(root / "run"),
    )
    assert main(["train", "--config", train_cfg]) == 0

    post_cfg = write_config(
        root / "post.json",
        data=data,
        scenario="MT-MPC",
        model_path=str(root / "run" / "model.lfit"),
        test_fraction=0.2,
    )
    return {"root": root, "gen": gen_cfg, "train": train_cfg, "post": post_cfg, "data": data}


class TestGenerate:
    def test_row_count_matches_spec(self, workspace):
        rows = read_rows(workspace["root"] / "dataset" / "data.csv")
        assert len(rows) == SYNTH["n_series"] * SYNTH["length"]
        assert len({r["series_id"] for r in rows}) == SYNTH["n_series"]

    def test_same_seed_byte_identical(self, workspace, tmp_path):
        cfg = write_config(tmp_path / "gen.json", synthetic=SYNTH, out=str(tmp_path / "again"))
        assert main(["generate", "--config", cfg]) == 0
        assert sha(tmp_path / "again" / "data.csv") == sha(workspace["root"] / "dataset" / "data.csv")

    def test_seed_flag_overrides_config(self, workspace, tmp_path):
        cfg = write_config(tmp_path / "gen.json", synthetic=SYNTH, out=str(tmp_path / "other"))
        assert main(["generate", "--config", cfg, "--seed", "12"]) == 0
        assert sha(tmp_path / "other" / "data.csv") != sha(workspace["root"] / "dataset" / "data.csv")
        manifest = json.loads((tmp_path / "other" / "manifest.json").read_text())
        assert manifest["effective_config"]["seed"] == 12

    def test_metadata_names_driver_per_series(self, workspace):
        meta = json.loads((workspace["root"] / "dataset" / "metadata.json").read_text())
        rows = read_rows(workspace["root"] / "dataset" / "data.csv")
        assert set(meta["drivers"]) == {r["series_id"] for r in rows}
        assert all(d in ("water", "rainfall", "noise") for d in meta["drivers"].values())

    def test_generate_requires_synthetic_block(self, workspace, tmp_path):
        cfg = write_config(tmp_path / "bad.json", data=workspace["data"], out=str(tmp_path / "x"))
        assert main(["generate", "--config", cfg]) == 2


class TestTrain:
    def test_rerun_same_config_identical_model(self, workspace):
        first = sha(workspace["root"] / "run" / "model.lfit")
        assert main(["train", "--config", workspace["train"]]) == 0
        assert sha(workspace["root"] / "run" / "model.lfit") == first

    def test_model_bytes_independent_of_out_dir(self, workspace, tmp_path):
        assert main(["train", "--config", workspace["train"], "--out", str(tmp_path / "rerun")]) == 0
        assert sha(tmp_path / "rerun" / "model.lfit") == sha(workspace["root"] / "run" / "model.lfit")

    def test_manifest_echoes_config_and_hashes(self, workspace):
        manifest = json.loads((workspace["root"] / "run" / "manifest.json").read_text())
        assert manifest["effective_config"]["scenario"] == "MT-MPC"
        assert manifest["input_hashes"]["csv"] == sha(workspace["root"] / "dataset" / "data.csv")
        assert manifest["model_seed"] == 0

    def test_invalid_scenario_exit_2(self, workspace, capsys):
        assert main(["train", "--config", workspace["train"], "--scenario", "ST-XYZ"]) == 2
        assert "scenario" in capsys.readouterr().err

    def test_both_sources_rejected(self, workspace, tmp_path):
        raw = json.loads((workspace["root"] / "train.json").read_text())
        raw["synthetic"] = SYNTH
        cfg = tmp_path / "both.json"
        cfg.write_text(json.dumps(raw))
        assert main(["train", "--config", str(cfg)]) == 2

    def test_missing_config_file_exit_2(self, tmp_path):
        assert main(["train", "--config", str(tmp_path / "absent.json")]) == 2


class TestForecast:
    def test_row_count_series_by_horizon_by_quantiles(self, workspace, tmp_path):
        assert main(["forecast", "--config", workspace["post"], "--out", str(tmp_path)]) == 0
        rows = read_rows(tmp_path / "forecasts.csv")
        assert len(rows) == SYNTH["n_series"] * TAU * len(QUANTILES)

    def test_saved_model_matches_in_memory(self, workspace, tmp_path):
        assert main(["forecast", "--config", workspace["post"], "--out", str(tmp_path)]) == 0
        rows = read_rows(tmp_path / "forecasts.csv")

        from lfit.cli import _last_window_per_series
        from lfit.dataset import build_windows, load_csv, load_schema
        from lfit.evaluation import ScenarioSpec, predict_chunked, rewire_for_scenario
        from lfit.model import load_model

        d = workspace["data"]
        model = load_model(workspace["root"] / "run" / "model.lfit")
        ds = load_csv(d["csv"], load_schema(d["schema"]), statics_path=d["statics"])
        derived = rewire_for_scenario(ds, ScenarioSpec("MT-MPC"))
        windows = build_windows(derived, K, TAU)
        windows.standardizer = model.standardizer
        forecast, _ = predict_chunked(model, _last_window_per_series(windows))

        by_key = {(r["series_id"], int(r["step"]), r["quantile"]): float(r["value"]) for r in rows}
        for n, sid in enumerate(forecast.series_ids):
            for t in range(TAU):
                for j, q in enumerate(forecast.quantiles):
                    assert by_key[(sid, t, f"{q:g}")] == forecast.values[n, 0, t, j]

    def test_schema_mismatch_descriptive_exit_1(self, workspace, tmp_path, capsys):
        code = main(["forecast", "--config", workspace["post"], "--out", str(tmp_path), "--scenario", "ST-NSP"])
        assert code == 1
        assert "channel" in capsys.readouterr().err

    def test_missing_model_path_exit_2(self, workspace, tmp_path):
        cfg = write_config(tmp_path / "c.json", data=workspace["data"], scenario="MT-MPC", out=str(tmp_path))
        assert main(["forecast", "--config", cfg]) == 2


@pytest.fixture(scope="module")
def explained(workspace, tmp_path_factory):
    out = tmp_path_factory.mktemp("explain")
    assert main(["explain", "--config", workspace["post"], "--out", str(out)]) == 0
    return out


class TestExplain:
    def test_importance_groups_sum_to_one(self, explained):
        sums: dict[str, float] = {}
        for r in read_rows(explained / "importance.csv"):
            if r["group"] == "attention_lag":
                continue
            sums[r["group"]] = sums.get(r["group"], 0.0) + float(r["mean_weight"])
        assert set(sums) == {"past", "future", "static"}
        for total in sums.values():
            assert total == pytest.approx(1.0, abs=1e-6)

    def test_attention_files_are_square(self, explained):
        files = sorted((explained / "attention").glob("*.csv"))
        assert files
        grid = np.loadtxt(files[0], delimiter=",")
        assert grid.shape == (K + TAU, K + TAU)

    def test_reruns_byte_identical(self, workspace, explained, tmp_path):
        assert main(["explain", "--config", workspace["post"], "--out", str(tmp_path)]) == 0
        assert sha(tmp_path / "importance.csv") == sha(explained / "importance.csv")
        name = sorted((explained / "attention").glob("*.csv"))[0].name
        assert sha(tmp_path / "attention" / name) == sha(explained / "attention" / name)


class TestEvaluate:
    def test_baseline_columns_iff_flag(self, workspace, tmp_path):
        assert main(["evaluate", "--config", workspace["post"], "--out", str(tmp_path / "plain")]) == 0
        assert main(["evaluate", "--config", workspace["post"], "--out", str(tmp_path / "base"), "--baseline"]) == 0
        plain_header = (tmp_path / "plain" / "metrics.csv").read_text().splitlines()[0]
        base_header = (tmp_path / "base" / "metrics.csv").read_text().splitlines()[0]
        assert plain_header == "target,step,metric,value"
        assert base_header == "target,step,metric,value,baseline_value"

    def test_metrics_match_library_route(self, workspace, tmp_path):
        assert main(["evaluate", "--config", workspace["post"], "--out", str(tmp_path)]) == 0
        rows = read_rows(tmp_path / "metrics.csv")
        csv_mae = next(
            float(r["value"]) for r in rows if r["target"] == "__all__" and r["metric"] == "mae" and r["step"] == ""
        )

        from lfit.dataset import build_windows, load_csv, load_schema, split_windows
        from lfit.evaluation import ScenarioSpec, compute_metrics, predict_chunked, rewire_for_scenario
        from lfit.model import load_model

        d = workspace["data"]
        model = load_model(workspace["root"] / "run" / "model.lfit")
        ds = load_csv(d["csv"], load_schema(d["schema"]), statics_path=d["statics"])
        windows = build_windows(rewire_for_scenario(ds, ScenarioSpec("MT-MPC")), K, TAU)
        windows.standardizer = model.standardizer
        _, test = split_windows(windows, 0.2)
        forecast, _ = predict_chunked(model, test)
        actual = np.transpose(test.future_targets, (0, 2, 1))
        report = compute_metrics(forecast.values, actual, model.config.quantiles, ["displacement"])
        assert csv_mae == report.aggregates["mae"]

    def test_empty_test_split_is_data_error(self, workspace, tmp_path):
        short = dict(SYNTH, length=9, n_series=1)
        cfg = write_config(
            tmp_path / "short.json",
            synthetic=short,
            scenario="MT-MPC",
            model_path=str(workspace["root"] / "run" / "model.lfit"),
            out=str(tmp_path / "out"),
        )
        assert main(["evaluate", "--config", cfg]) == 1


class TestProcessContract:
    def test_console_entry_point(self, workspace, tmp_path):
        cfg = write_config(tmp_path / "gen.json", synthetic=SYNTH, out=str(tmp_path / "d"))
        proc = subprocess.run(
            [sys.executable, "-m", "lfit.cli", "generate", "--config", cfg],
            capture_output=True,
            text=True,
            env={"PATH": "/usr/bin:/bin", "LFIT_THREADS": "1"},
        )
        assert proc.returncode == 0, proc.stderr
        assert (tmp_path / "d" / "data.csv").exists()

    def test_usage_error_exit_2(self):
        proc = subprocess.run(
            [sys.executable, "-m", "lfit.cli", "train"],
            capture_output=True,
            text=True,
        )
        assert proc.returncode == 2

    def test_no_command_mutates_inputs(self, workspace, tmp_path):
        tracked = [workspace["root"] / "dataset" / name for name in ("data.csv", "schema.json", "statics.csv")]
        tracked.append(workspace["root"] / "run" / "model.lfit")
        before = [sha(p) for p in tracked]
        assert main(["forecast", "--config", workspace["post"], "--out", str(tmp_path / "f")]) == 0
        assert main(["explain", "--config", workspace["post"], "--out", str(tmp_path / "x")]) == 0
        assert main(["evaluate", "--config", workspace["post"], "--out", str(tmp_path / "e"), "--baseline"]) == 0
        assert [sha(p) for p in tracked] == before

    def test_thread_cap_sets_blas_vars(self):
        env = {"LFIT_THREADS": "2"}
        apply_thread_cap(env)
        assert env["OMP_NUM_THREADS"] == "2"
        assert env["OPENBLAS_NUM_THREADS"] == "2"

    def test_thread_cap_rejects_garbage(self):
        for bad in ("zero", "0", "-3", "1.5"):
            with pytest.raises(ConfigError):
                apply_thread_cap({"LFIT_THREADS": bad})

    def test_thread_cap_absent_is_noop(self):
        env: dict[str, str] = {}
        apply_thread_cap(env)
        assert env == {}
