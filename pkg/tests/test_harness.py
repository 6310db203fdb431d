import re
import shutil
from pathlib import Path

import pytest

from macpnn import harness
from macpnn.cli import main
from macpnn.errors import ConfigurationError
from macpnn.mal import CommLedger

ROOT = Path(__file__).resolve().parents[1]
SMOKE = ROOT / "configs" / "smoke.yaml"

MINIMAL = """\
kind: srw
functions:
  A: {family: S1, alpha: 0.0, beta: 1.0, gamma: 1.2}
  B: {family: S2, alpha: 0.5, beta: -0.25, gamma: -2.2, sign: "<0"}
  C: {family: S1, alpha: 1.0, beta: -1.0, gamma: 0.8}
  D: {family: S2, alpha: 0.5, beta: -0.15, gamma: -1.8}
  E: {family: S1, alpha: 0.0, beta: 1.0, gamma: 0.9333, sign: "<0"}
devices:
  - [A, B, C, D, E]
  - [C, D, A, E, B]
  - [E, A, B, C, D]
"""


@pytest.fixture(scope="module")
def smoke_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("smoke")
    assert main(["run", "--config", str(SMOKE), "--out", str(out)]) == 0
    return out


def test_minimal_config_defaults():
    cfg = harness.parse_config_text(MINIMAL)
    h = cfg.scenario.hyper
    assert (h.epochs, h.batch_size, h.lr, h.hidden_size, h.window_size) == (10, 128, 0.01, 50, 10)
    assert (h.max_models, h.prop, h.num_batches) == (10, 0.3, 50)
    assert len(cfg.scenario.devices) == 3 and all(len(d) == 5 for d in cfg.scenario.devices)
    assert cfg.models == ["clstm", "cpnn", "macpnn"] and cfg.seeds == [0]
    assert cfg.scenario.offset == 2000 and cfg.scenario.concept_length == 25000


def test_max_models_zero_rejected():
    text = MINIMAL + "hyperparameters: {max_models: 0}\n"
    with pytest.raises(ConfigurationError, match="max_models"):
        harness.parse_config_text(text)


def test_unknown_key_reports_line():
    text = MINIMAL + "hyperparameters:\n  epochs: 3\n  epochz: 4\n"
    with pytest.raises(ConfigurationError) as e:
        harness.parse_config_text(text, "x.yaml")
    assert re.match(r"x\.yaml:14: hyperparameters\.epochz: unknown key", str(e.value))


def test_bad_values_are_reported():
    for extra, word in [("models: [arf]\n", "models"), ("seeds: []\n", "seed"),
                        ("scale: 0\n", "scale"), ("offset: -1\n", "offset")]:
        with pytest.raises(ConfigurationError, match=word):
            harness.parse_config_text(MINIMAL + extra)
    with pytest.raises(ConfigurationError, match="invalid YAML"):
        harness.parse_config_text("kind: [srw\n")
    with pytest.raises(ConfigurationError, match="unknown boundary family"):
        harness.parse_config_text(MINIMAL.replace("family: S1, alpha: 0.0, beta: 1.0, gamma: 1.2",
                                                  "family: S3, alpha: 0.0, beta: 1.0, gamma: 1.2"))


def test_unreadable_file(tmp_path):
    with pytest.raises(ConfigurationError, match="cannot read"):
        harness.load_config(tmp_path / "missing.yaml")


def test_config_round_trip():
    for path in [SMOKE, *sorted((ROOT / "configs").glob("srw_*.yaml"))]:
        cfg = harness.load_config(path)
        again = harness.parse_config_text(harness.dump_config(cfg), base_dir=path.parent)
        assert harness.config_to_dict(again) == harness.config_to_dict(cfg)
        assert harness.config_hash(again) == harness.config_hash(cfg)


def test_shipped_configs_are_valid():
    for path in sorted((ROOT / "configs").glob("*.yaml")):
        cfg, scenario = harness.parse_config(path, scale=0.2)
        assert len(scenario.devices) == 3


def test_scale_multiplies_lengths_only():
    cfg = harness.load_config(ROOT / "configs" / "srw_1.yaml")
    cfg.scale = 0.2
    sc = cfg.scaled_scenario()
    assert sc.concept_length == 5000 and sc.offset == 2000
    assert sc.hyper.num_batches == cfg.scenario.hyper.num_batches


def test_run_outputs(smoke_run):
    man = harness.RunManifest.read(smoke_run / "manifest.json")
    assert man.status == "ok"
    for files in man.files.values():
        assert all((smoke_run / f).exists() for f in files)
    assert man.communications["0/macpnn"]["ours"] == 24
    assert man.communications["0/clstm"]["ours"] == 0
    assert len(CommLedger.from_csv(smoke_run / "seed_0" / "cpnn" / "ledger.csv")) == 0
    assert len(set(man.stream_hashes)) == 3


def test_summary_rows(smoke_run):
    rows = harness.read_summary(smoke_run / "summary.csv")
    assert list(rows[0]) == harness.SUMMARY_COLUMNS
    per_kind = [r for r in rows if r["seed"] == "0" and r["kind"] == "cpnn"]
    assert len(per_kind) == 3 * 4 + 1
    assert {r["kind"] for r in rows if r["seed"] == "mean"} == {"clstm", "cpnn", "macpnn"}


def test_summarize_is_reproducible(smoke_run):
    before = (smoke_run / "summary.csv").read_bytes()
    assert main(["summarize", "--out", str(smoke_run)]) == 0
    assert (smoke_run / "summary.csv").read_bytes() == before


def test_svg_counts(smoke_run):
    svg = (smoke_run / "seed_0" / "kappa_device_1.svg").read_text()
    assert svg.startswith("<svg") and svg.rstrip().endswith("</svg>")
    assert svg.count('class="curve"') == 3
    assert svg.count('class="drift"') == 4
    assert "kappa" in svg and "stream position" in svg


def test_plot_is_pure(smoke_run, tmp_path):
    a = harness.emit_plot(smoke_run / "curves.csv", tmp_path / "a.svg", seed=1, device=2)
    b = harness.emit_plot(smoke_run / "curves.csv", tmp_path / "b.svg", seed=1, device=2)
    assert a.read_bytes() == b.read_bytes()
    assert a.read_bytes() == (smoke_run / "seed_1" / "kappa_device_2.svg").read_bytes()


def test_single_model_plot(smoke_run, tmp_path):
    lines = (smoke_run / "curves.csv").read_text().splitlines()
    one = [lines[0]] + [l for l in lines[1:] if ",cpnn," in l]
    (tmp_path / "c.csv").write_text("\n".join(one) + "\n")
    svg = harness.emit_plot(tmp_path / "c.csv", tmp_path / "c.svg", device=0).read_text()
    assert svg.count("<polyline") == 1


def test_plot_missing_input(tmp_path):
    with pytest.raises(ConfigurationError):
        harness.emit_plot(tmp_path / "none.csv", tmp_path / "x.svg")
    assert main(["plot", "--out", str(tmp_path)]) == 2


def test_repeat_run_is_byte_identical(smoke_run, tmp_path):
    out = tmp_path / "again"
    assert main(["run", "--config", str(SMOKE), "--out", str(out)]) == 0
    for rel in ["summary.csv", "curves.csv", "seed_1/macpnn/device_2.csv", "seed_1/macpnn/ledger.csv",
                "seed_0/kappa_device_0.svg", "config.yaml"]:
        assert (out / rel).read_bytes() == (smoke_run / rel).read_bytes(), rel


def test_streams_identical_across_kinds(smoke_run):
    # every kind logs the same truth sequence on each device
    for d in range(3):
        truths = {kind: [l.split(",")[3] for l in
                         (smoke_run / "seed_0" / kind / f"device_{d}.csv").read_text().splitlines()[1:]]
                  for kind in harness.MODEL_KINDS}
        assert truths["clstm"] == truths["cpnn"] == truths["macpnn"]


def test_generate(tmp_path):
    assert main(["generate", "--config", str(SMOKE), "--out", str(tmp_path)]) == 0
    files = sorted((tmp_path / "streams").glob("device_*.csv"))
    assert len(files) == 3
    assert files[0].read_text().splitlines()[0] == "global_index,feature_0,feature_1,label,concept_id"
    assert len(files[0].read_text().splitlines()) == 5 * 160 + 1


def test_cli_seed_and_scale(tmp_path):
    assert main(["run", "--config", str(SMOKE), "--out", str(tmp_path), "--seed", "3", "--scale", "0.5"]) == 0
    man = harness.RunManifest.read(tmp_path / "manifest.json")
    assert man.seeds == [3]
    lines = (tmp_path / "seed_3" / "cpnn" / "device_0.csv").read_text().splitlines()
    assert len(lines) == 5 * 80 + 1


def test_cli_config_error_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text(MINIMAL + "bogus: 1\n")
    assert main(["run", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert "bogus" in capsys.readouterr().err


def test_failure_leaves_marker(tmp_path, monkeypatch):
    cfg = harness.load_config(SMOKE)
    cfg.seeds = [0]

    def boom(*a, **k):
        raise RuntimeError("audit failed")

    monkeypatch.setattr(harness, "run_network", boom)
    with pytest.raises(RuntimeError):
        harness.run_experiment(cfg, tmp_path)
    assert (tmp_path / "FAILED").exists()
    assert harness.RunManifest.read(tmp_path / "manifest.json").status == "failed"
    assert (tmp_path / "seed_0" / "clstm" / "device_0.csv").exists()  # partial output kept
