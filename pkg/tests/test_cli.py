import csv
import json

import numpy as np
import pytest
import yaml

from confedlearn.cli import build_parser, cmd_generate, cmd_report, main
from confedlearn.cohort import STATE_SIZES, import_cohort
from confedlearn.exceptions import ConfigError
from confedlearn.experiment import (
    SWEEP_COLUMNS,
    config_from_dict,
    load_config,
    mean_metrics,
    prepare,
    run_methods,
)
from confedlearn.metrics import METHOD_ORDER, METHOD_TITLES

from helpers import TINY_CONFIG


def _write_config(tmp_path, data, name="config.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(data))
    return str(path)


def _manifest_consistent(out):
    manifest = json.loads((out / "manifest.json").read_text())
    listed = set(manifest["files"])
    on_disk = {str(p.relative_to(out)) for p in out.rglob("*")
               if p.is_file() and p.name != "manifest.json"}
    return manifest, listed == on_disk


class TestConfig:
    def test_defaults(self):
        config = load_config()
        assert config.cohort.n_people == 10000
        assert config.cohort.n_regions == 9
        assert config.cgan.noise_dim == 100
        assert config.single_types == ("diag",)

    def test_full_scale_preset(self):
        config = load_config(preset_name="paper-scale")
        assert config.cohort.n_people == 82143
        assert config.cohort.n_regions == 34
        # the region whose size is nearest the source study's 5,433-person analyzer
        assert config.topology.central_region == 7
        assert STATE_SIZES[7] == min(STATE_SIZES, key=lambda s: abs(s - 5433))

    def test_overrides(self, tmp_path):
        path = _write_config(tmp_path, {"seed": 3, "training": {"lr": 0.5}})
        config = load_config(path, seed=11, output_dir="elsewhere")
        assert config.seed == 11
        assert config.training.lr == 0.5
        assert config.output_dir == "elsewhere"

    @pytest.mark.parametrize("data, field", [
        ({"cohort": {"n_peeple": 5}}, "cohort.n_peeple"),
        ({"training": {"lr": "fast"}}, "training.lr"),
        ({"methods": []}, "methods"),
        ({"methods": ["magic"]}, "methods"),
        ({"topology": {"central_region": 9}}, "topology.central_region"),
        ({"cgan": {"match_loss": "l2"}}, "cgan.match_loss"),
        ({"sweep": []}, "sweep"),
        ({"cohort": {"n_people": -5}}, "cohort"),
    ])
    def test_errors_name_the_field(self, data, field):
        with pytest.raises(ConfigError) as info:
            config_from_dict(data)
        assert info.value.path == field or str(info.value).startswith(field)

    def test_bad_yaml(self, tmp_path):
        path = tmp_path / "bad.yaml"
        path.write_text("cohort: [unclosed\n")
        with pytest.raises(ConfigError):
            load_config(str(path))

    def test_hash_tracks_content(self):
        a = config_from_dict({})
        assert a.config_hash() == config_from_dict({}).config_hash()
        assert a.config_hash() != config_from_dict({"seed": 1}).config_hash()


class TestGenerate:
    def test_default_stats(self, tmp_path, capsys):
        stats = cmd_generate(load_config(), str(tmp_path))
        assert abs(stats["mean_codes"]["diag"] - 13.6) <= 0.05 * 13.6
        on_disk = json.loads((tmp_path / "cohort_stats.json").read_text())
        assert on_disk == stats
        assert "13." in capsys.readouterr().out
        _, consistent = _manifest_consistent(tmp_path)
        assert consistent

    def test_byte_identical(self, tmp_path):
        path = _write_config(tmp_path, TINY_CONFIG)
        for name in ("a", "b"):
            assert main(["generate", "--config", path, "--out", str(tmp_path / name)]) == 0
        a = (tmp_path / "a" / "cohort.tsv").read_bytes()
        assert a == (tmp_path / "b" / "cohort.tsv").read_bytes()
        assert len(import_cohort(tmp_path / "a" / "cohort.tsv")) == 1500

    def test_empty_cohort(self, tmp_path, capsys):
        path = _write_config(tmp_path, {"cohort": {"n_people": 0}})
        assert main(["generate", "--config", path, "--out", str(tmp_path / "o")]) == 2
        assert "n_people" in capsys.readouterr().err


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    path = _write_config(root, TINY_CONFIG)
    out = root / "out"
    assert main(["run", "--config", path, "--out", str(out)]) == 0
    return root, path, out


class TestRun:
    def test_outputs_listed(self, tiny_run):
        _, _, out = tiny_run
        manifest, consistent = _manifest_consistent(out)
        assert consistent
        assert manifest["audit_passed"]
        assert len([f for f in manifest["files"] if f.startswith("reports/")]) == 4 * 3
        assert len([f for f in manifest["files"] if f.startswith("histories/")]) == 4 * 3

    def test_table_row_order(self, tiny_run):
        _, _, out = tiny_run
        block = (out / "summary.txt").read_text().split("psychological")[0]
        positions = [block.index(METHOD_TITLES[m]) for m in METHOD_ORDER]
        assert positions == sorted(positions)

    def test_rerun_identical(self, tiny_run):
        root, path, out = tiny_run
        again = root / "again"
        assert main(["run", "--config", path, "--out", str(again)]) == 0
        assert (out / "summary.txt").read_bytes() == (again / "summary.txt").read_bytes()
        for report in (out / "reports").iterdir():
            assert report.read_bytes() == (again / "reports" / report.name).read_bytes()

    def test_centralized_only(self, tmp_path):
        path = _write_config(tmp_path, dict(TINY_CONFIG, methods=["centralized"]))
        assert main(["run", "--config", path, "--out", str(tmp_path / "o")]) == 0
        reports = sorted((tmp_path / "o" / "reports").iterdir())
        assert len(reports) == 3
        assert all(json.loads(r.read_text())["method"] == "centralized" for r in reports)

    def test_report_command(self, tiny_run, capsys):
        _, _, out = tiny_run
        assert main(["report", str(out)]) == 0
        text = capsys.readouterr().out
        assert text.count("AUCROC") >= 3
        assert "isolation audit: PASS" in text


class TestReport:
    def test_empty_dir(self, tmp_path):
        text, code = cmd_report(str(tmp_path))
        assert code == 1 and "manifest.json" in text

    def test_missing_listed_file(self, tiny_run, tmp_path):
        _, _, out = tiny_run
        copy = tmp_path / "copy"
        copy.mkdir()
        (copy / "manifest.json").write_bytes((out / "manifest.json").read_bytes())
        text, code = cmd_report(str(copy))
        assert code == 1
        assert "summary.txt" in text

    def test_audit_failure(self, tmp_path):
        rows = [{"silo": 4, "rule": "a", "detail": "holds a diag vector"},
                {"summary": True, "passed": False}]
        (tmp_path / "audit.jsonl").write_text("".join(json.dumps(r) + "\n" for r in rows))
        (tmp_path / "manifest.json").write_text(json.dumps({"files": {"audit.jsonl": ""}}))
        text, code = cmd_report(str(tmp_path))
        assert code == 2
        assert "rule (a)" in text and "AUDIT FAILED" in text


class TestSweep:
    def test_single_region(self, tmp_path):
        path = _write_config(tmp_path, dict(TINY_CONFIG, sweep=[1]))
        out = tmp_path / "o"
        assert main(["sweep", "--config", path, "--out", str(out)]) == 0
        with open(out / "sweep.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 1
        assert tuple(rows[0]) == SWEEP_COLUMNS
        assert rows[0]["region"] == "1"
        _, consistent = _manifest_consistent(out)
        assert consistent

    def test_missing_region_skipped(self, tmp_path, capsys):
        path = _write_config(tmp_path, dict(TINY_CONFIG, sweep=[7, 2]))
        out = tmp_path / "o"
        assert main(["sweep", "--config", path, "--out", str(out)]) == 0
        manifest = json.loads((out / "manifest.json").read_text())
        assert [s["region"] for s in manifest["skipped_regions"]] == [7]
        assert (out / "sweep.csv").read_text().count("\n") == 2
        assert "region 7" in capsys.readouterr().err


class TestParser:
    def test_flags(self):
        args = build_parser().parse_args(["run", "--config", "c.yaml", "--seed", "4",
                                          "--out", "o", "--threads", "2",
                                          "--preset", "paper-scale"])
        assert (args.config, args.seed, args.out, args.threads, args.preset) == (
            "c.yaml", 4, "o", 2, "paper-scale")

    def test_missing_config_file(self, tmp_path, capsys):
        assert main(["run", "--config", str(tmp_path / "nope.yaml")]) == 2
        assert "cannot read" in capsys.readouterr().err


@pytest.mark.slow
def test_default_run_seed_7():
    """Confederated beats central-only on most diseases of the default cohort."""
    config = load_config(seed=7)
    result = run_methods(config, prepare(config), ("central_only", "confederated"))
    by = {(r.method, r.disease): r.aucroc for r in result.reports}
    diseases = {d for _, d in by}
    wins = sum(by["confederated", d] > by["central_only", d] for d in diseases)
    assert wins >= 2
    assert mean_metrics(result.reports, "confederated")[0] > mean_metrics(
        result.reports, "central_only")[0]
    assert np.isfinite(list(by.values())).all()
