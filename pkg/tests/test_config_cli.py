import csv
import json

import pytest
import yaml

from tactile_fewshot.cli import TABLE_FIELDS, main
from tactile_fewshot.config import OUTPUT_ENV, ConfigError, RunConfig, config_from_mapping, load_config, with_overrides
from tactile_fewshot.features import DEFAULT_CATALOG

FAST = {
    "episodes": 30,
    "dataset": {"synth": {"trials_per_class": 40, "perturbed_trials_per_cell": 1}},
    "featopt": {"nca": {"max_iters": 15}, "dscan": {"episodes_per_D": 30}},
}
TIMING_COLUMNS = {"pretrain_s", "adapt_ms"}
TIMING_KEYS = {"pretrain_wall_s", "adapt_ms_per_episode", "pretrain_wall_time_s"}


# ---------------------------------------------------------------------------
# config


def test_defaults():
    cfg = RunConfig().validate()
    assert (cfg.n_way, cfg.k_shot, cfg.q_query, cfg.episodes) == (5, 1, 15, 500)
    assert (cfg.alpha, cfg.lam, cfg.steps, cfg.lr) == (10.0, 0.10, 250, 1.5e-3)


def test_yaml_sections_map_to_fields(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text(
        yaml.safe_dump(
            {
                "seed": 3,
                "protocol": "cross-shape",
                "episode": {"n_way": 7, "k_shot": 2, "q_query": 4},
                "head": {"lambda": 0.5, "steps": 10},
                "featopt": {"nca": {"kernel_width": 2.0}, "dscan": {"grid": [4, 2]}},
                "dataset": {"synth": {"noise_sigma": 0.1}},
            }
        )
    )
    cfg = load_config(path).validate()
    assert (cfg.seed, cfg.protocol, cfg.n_way, cfg.k_shot, cfg.q_query) == (3, "cross-shape", 7, 2, 4)
    assert (cfg.lam, cfg.steps, cfg.kernel_width, cfg.dscan_grid) == (0.5, 10, 2.0, (4, 2))
    assert cfg.synth_config().noise_sigma == 0.1 and cfg.synth_config().seed == 3


@pytest.mark.parametrize(
    "doc",
    [
        {"epsiodes": 10},
        {"head": {"temperature": 3}},
        {"featopt": {"nca": {"lr": 1}}},
        {"head": 5},
        {"dataset": {"synth": {"colour": "red"}}},
    ],
)
def test_bad_keys_rejected(doc):
    with pytest.raises(ConfigError):
        config_from_mapping(doc).validate()


@pytest.mark.parametrize(
    "field,value",
    [("episodes", 0), ("n_way", 1), ("k_shot", 0), ("alpha", 0.0), ("lam", -1.0), ("steps", -1), ("lr", 0.0), ("protocol", "open-set"), ("episodes", "ten"), ("dscan_grid", (0,))],
)
def test_bounds(field, value):
    with pytest.raises(ConfigError):
        with_overrides(RunConfig(), **{field: value}).validate()


def test_invalid_yaml_and_missing_file(tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text("seed: [1,\n")
    with pytest.raises(ConfigError):
        load_config(bad)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.yaml")
    with pytest.raises(ConfigError):
        RunConfig(dataset_path=str(tmp_path / "absent.tact")).validate()


def test_output_dir_resolution(monkeypatch):
    monkeypatch.delenv(OUTPUT_ENV, raising=False)
    assert str(RunConfig().output_dir()) == "runs"
    monkeypatch.setenv(OUTPUT_ENV, "/tmp/envout")
    assert str(RunConfig().output_dir()) == "/tmp/envout"
    assert str(RunConfig(output="here").output_dir()) == "here"


def test_config_hash_ignores_output():
    assert RunConfig(output="a").config_hash() == RunConfig(output="b").config_hash()
    assert RunConfig(seed=1).config_hash() != RunConfig(seed=2).config_hash()


# ---------------------------------------------------------------------------
# CLI


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "fast.yaml"
    cfg.write_text(yaml.safe_dump(FAST))
    assert main(["synth", "--config", str(cfg), "-o", str(root / "data")]) == 0
    return root, cfg, root / "data" / "dataset.tact"


def _read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _eval(workspace, out, *extra):
    root, cfg, data = workspace
    return main(["eval", "--config", str(cfg), "--data", str(data), "-o", str(root / out), *extra])


def test_synth_writes_dataset_and_manifest(workspace):
    root, _, data = workspace
    assert data.is_file()
    manifest = json.loads((root / "data" / "manifest-synth.json").read_text())
    assert manifest["outputs"] == ["dataset.tact"]
    assert manifest["catalog_version"] == DEFAULT_CATALOG.version


def test_synth_csv_format(tmp_path):
    args = ["synth", "--trials-per-class", "2", "--perturbed-per-cell", "0", "--format", "csv", "-o", str(tmp_path)]
    assert main(args) == 0
    header = (tmp_path / "dataset.csv").read_text().splitlines()[0]
    assert header.startswith("trial_id,shape_id,material")


def test_eval_end_to_end(workspace):
    root = workspace[0]
    assert _eval(workspace, "run_a") == 0
    (row,) = _read_csv(root / "run_a" / "table1_afop_closed-set_5w1s.csv")
    assert tuple(row) == TABLE_FIELDS
    assert 0.2 < float(row["acc_mean"]) <= 1.0
    report = json.loads((root / "run_a" / "report_afop_closed-set_5w1s.json").read_text())
    assert report["method"] == "afop" and report["episode_spec"]["n_way"] == 5
    (fold,) = report["protocols"][0]["folds"]
    assert fold["episodes_run"] == 30 and len(fold["episode_accuracies"]) == 30
    manifest = json.loads((root / "run_a" / "manifest-eval.json").read_text())
    expected = with_overrides(load_config(workspace[1]), dataset_path=str(workspace[2]))
    assert manifest["config_hash"] == expected.config_hash()
    assert sorted(manifest["outputs"]) == ["report_afop_closed-set_5w1s.json", "table1_afop_closed-set_5w1s.csv"]


def _strip_timing(path):
    if path.suffix == ".csv":
        return [{k: v for k, v in r.items() if k not in TIMING_COLUMNS} for r in _read_csv(path)]
    doc = json.loads(path.read_text())

    def strip(x):
        if isinstance(x, dict):
            return {k: strip(v) for k, v in x.items() if k not in TIMING_KEYS}
        if isinstance(x, list):
            return [strip(v) for v in x]
        return x

    return strip(doc)


def test_eval_is_deterministic(workspace):
    root = workspace[0]
    assert _eval(workspace, "det_a", "--episodes", "10", "--k", "2") == 0
    assert _eval(workspace, "det_b", "--episodes", "10", "--k", "2") == 0
    names = sorted(p.name for p in (root / "det_a").iterdir())
    assert names == sorted(p.name for p in (root / "det_b").iterdir())
    for name in names:
        assert _strip_timing(root / "det_a" / name) == _strip_timing(root / "det_b" / name), name


def test_inputs_not_modified(workspace):
    root, cfg, data = workspace
    before = (cfg.read_bytes(), data.read_bytes())
    assert _eval(workspace, "mut", "--episodes", "5") == 0
    assert (cfg.read_bytes(), data.read_bytes()) == before


def test_pretrain_and_dscan_curve(workspace):
    root, cfg, data = workspace
    out = root / "pre"
    assert main(["pretrain", "--config", str(cfg), "--data", str(data), "-o", str(out)]) == 0
    model = json.loads((out / "model_closed-set.json").read_text())
    curve = _read_csv(out / "dscan_closed-set.csv")
    assert list(curve[0]) == ["D", "mean_acc", "ci_lo", "ci_hi"]
    assert any(int(r["D"]) == model["selected_D"] for r in curve)
    assert main(["dscan-curve", "--config", str(cfg), "--data", str(data), "-o", str(out)]) == 0
    assert list(_read_csv(out / "dscan_curve_closed-set.csv")[0]) == ["D", "acc", "ci"]


def test_extract_writes_matrix_and_catalog(workspace):
    root, cfg, data = workspace
    out = root / "ext"
    assert main(["extract", "--config", str(cfg), "--data", str(data), "-o", str(out)]) == 0
    header = (out / "features.csv").read_text().split("\n", 1)[0].split(",")
    assert header[:3] == ["trial_id", "shape_id", "material"] and len(header) == 3 + 386
    assert json.loads((out / "catalog.json").read_text())["version"] == DEFAULT_CATALOG.version


def test_bad_arguments_exit_2(workspace, tmp_path, capsys):
    root, cfg, data = workspace
    assert main(["eval", "--k", "0", "-o", str(tmp_path)]) == 2
    assert main(["eval", "--data", str(tmp_path / "missing.tact"), "-o", str(tmp_path)]) == 2
    assert main(["eval", "--config", str(tmp_path / "missing.yaml"), "-o", str(tmp_path)]) == 2
    assert main(["frobnicate"]) == 2
    assert "error" in capsys.readouterr().err


def test_infeasible_episode_exits_1(workspace, capsys):
    assert _eval(workspace, "infeasible", "--q", "100") == 1
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["stage"] == "eval" and err["error"] == "EpisodeInfeasibleError"
