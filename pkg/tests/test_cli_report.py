import json
import subprocess
import sys

import pandas as pd
import pytest

from clustertmle.cli import DATA_ENV, run
from clustertmle.report import (EFFECT_COLUMNS, ReportError, build_report, emit_report, render,
                                table_csv, table_json, verify_report)
from clustertmle.trial_data import write_trial

import golden
from clustertmle.trial_data import Trial


def _err(stderr):
    return json.loads(stderr.strip().splitlines()[-1])


def test_validate_bundled():
    code, out, _ = run(["validate"])
    d = json.loads(out)
    assert code == 0 and d["clinics"] == 28 and d["rejected_rows"] == 0


def test_power_command():
    code, out, _ = run(["power"])
    d = json.loads(out)
    assert code == 0 and d["clusters_per_arm"] == 14
    assert d["clusters_per_arm_raw"] == pytest.approx(13.0658, abs=1e-4)
    code, out, _ = run(["power", "--correction", "plus_one"])
    assert json.loads(out)["clusters_per_arm"] == 15


def test_power_bad_input_is_config_error():
    code, _, err = run(["power", "--pi0", "1.5"])
    assert code == 2 and _err(err)["error"] == "ConfigError"


def test_unknown_preset_exit_2():
    code, _, err = run(["analyze", "--preset", "nope"])
    assert code == 2 and "unknown preset" in _err(err)["message"]


def test_bad_arguments_exit_2():
    assert run(["analyze", "--frobnicate"])[0] == 2


def test_missing_data_exit_3(tmp_path):
    code, _, err = run(["validate", "--data", str(tmp_path / "none")])
    assert code == 3 and _err(err)["error"] == "DataError"


def test_schema_violation_exit_3(tmp_path):
    (tmp_path / "participants.csv").write_text("participant_id\nx\n")
    (tmp_path / "clinics.csv").write_text("clinic_id\nK1\n")
    code, _, err = run(["validate", "--data", str(tmp_path)])
    assert code == 3 and "missing required" in _err(err)["message"]


def test_strict_inestimable_exit_4(tmp_path):
    write_trial(Trial.from_records(golden.RECORDS, golden.CLINICS), tmp_path)
    code, _, err = run(["analyze", "--data", str(tmp_path), "--preset", "primary", "--strict"])
    assert code == 4 and _err(err)["error"] == "EstimationError"
    code, out, _ = run(["analyze", "--data", str(tmp_path), "--preset", "primary"])
    assert code == 0 and "inestimable" in out


def test_env_var_selects_data(tmp_path, monkeypatch):
    write_trial(Trial.from_records(golden.RECORDS, golden.CLINICS), tmp_path)
    monkeypatch.setenv(DATA_ENV, str(tmp_path))
    assert json.loads(run(["validate"])[1])["participants"] == 40


def test_analyze_plan_file(tmp_path):
    cfg = tmp_path / "plan.cfg"
    cfg.write_text("name = sz\nweights = size\nadaptive = false\n")
    code, out, _ = run(["analyze", "--plan", str(cfg), "--format", "json"])
    d = json.loads(out)
    assert code == 0 and d["columns"] == EFFECT_COLUMNS and d["rows"][0]["weights"] == "size"


def test_describe_json():
    code, out, _ = run(["describe", "--format", "json"])
    assert code == 0 and "# baseline" in out and "# exclusions" in out


def test_simulate_hash_is_deterministic(tmp_path):
    cfg = tmp_path / "sim.cfg"
    cfg.write_text("clusters_per_arm = 5\nm = 20\nestimators = two_stage\n")
    a = run(["simulate", "--spec", str(cfg), "--reps", "3", "--seed", "4"])[1]
    b = run(["simulate", "--spec", str(cfg), "--reps", "3", "--seed", "4"])[1]
    c = run(["simulate", "--spec", str(cfg), "--reps", "3", "--seed", "5"])[1]
    h = [s.splitlines()[-1] for s in (a, b, c)]
    assert h[0].startswith("output_hash:") and h[0] == h[1] != h[2]


def test_console_script_entry_point():
    out = subprocess.run([sys.executable, "-m", "clustertmle.cli", "power", "--m", "100"],
                         capture_output=True, text=True)
    assert out.returncode == 0 and json.loads(out.stdout)["m"] == 100


def test_report_is_byte_identical_and_verifiable(tmp_path, small_trial):
    presets = ("primary", "lapse", "satisfaction")
    emit_report(build_report(small_trial, presets, seed=3), tmp_path / "a")
    emit_report(build_report(small_trial, presets, seed=3), tmp_path / "b")
    for p in (tmp_path / "a").iterdir():
        assert p.read_bytes() == (tmp_path / "b" / p.name).read_bytes()
    assert verify_report(tmp_path / "a")
    (tmp_path / "a" / "effects_primary.csv").write_text("tampered\n")
    assert not verify_report(tmp_path / "a")


def test_report_timestamp_from_source_date_epoch(tmp_path, small_trial, monkeypatch):
    monkeypatch.setenv("SOURCE_DATE_EPOCH", "0")
    b = build_report(small_trial, ("primary",))
    assert b.manifest["generated"] == "1970-01-01T00:00:00Z"
    assert b.manifest["data_through"]


def test_partial_write_marks_bundle_invalid(tmp_path, small_trial):
    b = build_report(small_trial, ("primary",))
    with pytest.raises(ReportError):
        emit_report(b, tmp_path / "r", _fail_after=2)
    man = json.loads((tmp_path / "r" / "manifest.json").read_text())
    assert man["valid"] is False and "injected" in man["error"]
    assert not verify_report(tmp_path / "r")
    assert not (tmp_path / "r.partial").exists()


def test_failed_rewrite_keeps_nothing_stale(tmp_path, small_trial):
    b = build_report(small_trial, ("primary",))
    emit_report(b, tmp_path / "r")
    with pytest.raises(ReportError):
        emit_report(b, tmp_path / "r", _fail_after=0)
    assert not verify_report(tmp_path / "r")


def test_empty_trial_gives_headers_and_manifest(tmp_path):
    empty = Trial.from_records([], golden.CLINICS)
    files = render(build_report(empty, ("primary", "satisfaction")))
    assert "manifest.json" in files
    assert files["effects_primary.csv"].decode().splitlines()[0].split(",") == EFFECT_COLUMNS
    man = json.loads(files["manifest.json"])
    assert man["valid"] is True


def test_table_formats_round_trip():
    f = pd.DataFrame({"a": [1.0 / 3, float("nan")], "b": ["x", None], "c": [1, 2]})
    assert table_csv(f) == "a,b,c\n0.3333333333,x,1\n,,2\n"
    j = json.loads(table_json(f))
    assert j["columns"] == ["a", "b", "c"]
    assert j["rows"][1] == {"a": None, "b": None, "c": 2}


def test_report_command(tmp_path):
    code, out, _ = run(["report", "--out", str(tmp_path / "r"), "--presets", "primary,lapse"])
    assert code == 0 and "bundle_hash:" in out
    assert verify_report(tmp_path / "r")
    code, _, err = run(["report", "--out", str(tmp_path / "s"), "--presets", "primary,zzz"])
    assert code == 2
