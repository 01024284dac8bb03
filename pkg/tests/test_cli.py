import dataclasses
import json

import pytest

from gradrank.cli import main
from gradrank.config import ArchitectureError, dump_config, load_config, parse_architecture
from gradrank.experiments import HYPOTHESES, RankRecord, aggregate, default_config, run_experiment
from gradrank.report import parse_records, records_text, verify_bundle


def write_config(tmp_path, cfg, name="cfg.json"):
    path = tmp_path / name
    path.write_text(dump_config(cfg))
    return path


def tiny_h1(**kw):
    base = dict(epochs=1, folds=2, seeds=1, batch_size=32)
    base.update(kw)
    return dataclasses.replace(default_config("H1"), **base)


@pytest.fixture
def bundle(tmp_path):
    out = tmp_path / "out"
    assert main(["run", str(write_config(tmp_path, tiny_h1())), "--out-dir", str(out)]) == 0
    return out


def test_records_csv_round_trip():
    records, _, _ = run_experiment(tiny_h1())
    text = records_text(records)
    assert text.splitlines()[0] == ("experiment,sweep_value,fold,seed,epoch,layer,kind,"
                                    "observed_rank,bound,sigma_max,threshold")
    back = parse_records(text)
    assert back == records
    assert records_text(back) == text


def test_verify_untouched_bundle(bundle, capsys):
    assert sorted(p.name for p in bundle.iterdir()) == ["aggregate.json", "manifest.json",
                                                        "records.csv"]
    assert main(["verify", str(bundle)]) == 0
    assert "ok" in capsys.readouterr().out


def test_verify_cites_edited_row(bundle, capsys):
    path = bundle / "records.csv"
    lines = path.read_text().splitlines()
    fields = lines[3].split(",")
    fields[7] = str(int(fields[8]) + 1)
    lines[3] = ",".join(fields)
    path.write_text("\n".join(lines) + "\n")
    assert main(["verify", str(bundle)]) == 2
    out = capsys.readouterr().out
    assert "records.csv:4:" in out and "exceeds bound" in out


def test_verify_missing_manifest(bundle):
    (bundle / "manifest.json").unlink()
    assert not verify_bundle(bundle).ok
    assert main(["verify", str(bundle)]) == 1


def test_verify_detects_aggregate_edit(bundle):
    path = bundle / "aggregate.json"
    data = json.loads(path.read_text())
    data["groups"][0]["mean"] += 1
    path.write_text(json.dumps(data))
    problems = verify_bundle(bundle).problems
    assert any("aggregate.json" in p for p in problems)


def test_rerun_is_byte_identical(tmp_path, bundle):
    cfg = write_config(tmp_path, tiny_h1())
    assert main(["run", str(cfg), "--out-dir", str(tmp_path / "again")]) == 0
    for name in ("records.csv", "aggregate.json"):
        assert (bundle / name).read_bytes() == (tmp_path / "again" / name).read_bytes()


def test_malformed_config_writes_nothing(tmp_path, capsys):
    out = tmp_path / "out"
    bad = tmp_path / "bad.json"
    bad.write_text('{"schema_version": 1, "hypothesis": "H1", "colour": 1}')
    assert main(["run", str(bad), "--out-dir", str(out)]) == 1
    assert not out.exists()
    assert "colour" in capsys.readouterr().err
    bad.write_text('{"schema_version": 1,\n "hypothesis": }')
    assert main(["run", str(bad), "--out-dir", str(out)]) == 1
    assert "2:" in capsys.readouterr().err
    assert not out.exists()


def test_usage_errors_exit_one(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["run"])
    assert exc.value.code == 1
    with pytest.raises(SystemExit) as exc:
        main(["gen-config", "H9"])
    assert exc.value.code == 1
    with pytest.raises(SystemExit) as exc:
        main(["run", "x.json", "--epsilon", "3"])
    assert exc.value.code == 1
    assert main(["run", str(tmp_path / "missing.json")]) == 1


def test_violation_exit_code(tmp_path, monkeypatch):
    import gradrank.cli as cli

    real = cli.run_experiment

    def broken(cfg, jobs=1):
        records, _, rows = real(cfg, jobs)
        records[0] = dataclasses.replace(records[0], bound=records[0].observed_rank - 1)
        return records, aggregate(records), rows

    monkeypatch.setattr(cli, "run_experiment", broken)
    out = tmp_path / "out"
    assert main(["run", str(write_config(tmp_path, tiny_h1())), "--out-dir", str(out)]) == 2
    assert main(["verify", str(out)]) == 2


def test_numerical_failure_exit_code(tmp_path, monkeypatch):
    import gradrank.cli as cli

    def explode(cfg, jobs=1):
        raise FloatingPointError("non-finite loss")

    monkeypatch.setattr(cli, "run_experiment", explode)
    out = tmp_path / "out"
    assert main(["run", str(write_config(tmp_path, tiny_h1())), "--out-dir", str(out)]) == 3
    assert not out.exists()


@pytest.mark.parametrize("hypothesis", HYPOTHESES)
def test_gen_config_round_trips(tmp_path, hypothesis, capsys):
    assert main(["gen-config", hypothesis.lower(), "--out-dir", str(tmp_path)]) == 0
    cfg = load_config(tmp_path / f"{hypothesis.lower()}.json")
    assert cfg == default_config(hypothesis)


def test_gen_config_overrides(capsys):
    assert main(["gen-config", "H1", "--seed", "9", "--precision", "single", "--epsilon", "1e-5"]) == 0
    data = json.loads(capsys.readouterr().out)
    assert data["seed"] == 9 and data["precision"] == "single" and data["epsilon"] == 1e-5
    assert data["schema_version"] == 1


def test_charts_and_jobs(tmp_path):
    out = tmp_path / "out"
    cfg = write_config(tmp_path, tiny_h1(seeds=2))
    assert main(["run", str(cfg), "--out-dir", str(out), "--charts", "--jobs", "2"]) == 0
    svgs = sorted(out.glob("*.svg"))
    assert svgs
    for svg in svgs:
        assert svg.read_bytes().lstrip().startswith(b"<?xml") and b"<svg" in svg.read_bytes()
    assert main(["verify", str(out)]) == 0


def test_h3_bundle_has_thresholds(tmp_path, capsys):
    cfg = dataclasses.replace(default_config("H3"), matrix_count=5, sweep=[0.0, 0.5])
    out = tmp_path / "out"
    assert main(["run", str(write_config(tmp_path, cfg)), "--out-dir", str(out)]) == 0
    assert (out / "thresholds.csv").exists()
    assert "single" in capsys.readouterr().out
    assert main(["verify", str(out)]) == 0


def bound_rows(tmp_path, text, capsys):
    path = tmp_path / "net.arch"
    path.write_text(text)
    assert main(["bound", str(path)]) == 0
    return capsys.readouterr().out.splitlines()[1:]


def test_bound_command_dense(tmp_path, capsys):
    rows = bound_rows(tmp_path, "input 128\nbatch 256\ndense 128\ndense 16\ndense 128\n", capsys)
    assert len(rows) == 3
    assert all(row.split()[3] == "16" and "layer 2 width" in row for row in rows)


def test_bound_command_single_layer(tmp_path, capsys):
    rows = bound_rows(tmp_path, "input 10\nbatch 50\nloss_rank 3\ndense 7\n", capsys)
    assert rows[0].split()[3] == "3"


def test_bound_command_recurrent(tmp_path, capsys):
    rows = bound_rows(tmp_path, "input 128\nbatch 256\nsteps 50\nrecurrent 128\n"
                      "recurrent 2\nrecurrent 128\n", capsys)
    first = rows[0].split()
    assert first[1] == "U" and first[3] == "100"


def test_bound_command_conv_single_position(tmp_path, capsys):
    rows = bound_rows(tmp_path, "input 3 1x1\nbatch 4\nconv 8 kernel=1x1\n", capsys)
    assert rows[0].split()[3] == "3"
    assert "per-position bound B" in rows[0]
    rows = bound_rows(tmp_path, "input 3 32x32\nbatch 4\nconv 8 kernel=3x3 stride=2\n", capsys)
    assert rows[0].split()[3] == "8"


def test_architecture_errors_name_line_and_field(tmp_path, capsys):
    with pytest.raises(ArchitectureError, match=r"net:3: field 1: unsupported"):
        parse_architecture("input 4\nbatch 2\npool 2\n", "net")
    with pytest.raises(ArchitectureError, match=r"net:3: field 2"):
        parse_architecture("input 4\nbatch 2\ndense x\n", "net")
    path = tmp_path / "bad.arch"
    path.write_text("input 4\nbatch 2\ndense 3 activation=gelu\n")
    assert main(["bound", str(path)]) == 1
    assert "bad.arch:3" in capsys.readouterr().err


def test_record_row_types():
    r = RankRecord("H4", 0.5, 0, 1, 2, "3", "gradient", 4, 5, 1.5, 1e-12)
    assert parse_records(records_text([r])) == [r]
