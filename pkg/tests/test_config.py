"""Config grammar tests: value parsing, file loading, key resolution,
validation rules, and the content hash."""

import pytest

from cohortlearn.config import (
    METHODS,
    RunConfig,
    build_run_config,
    load_config_file,
    load_run_config,
    parse_value,
)
from cohortlearn.errors import ConfigError


def test_parse_value_scalars():
    assert parse_value("3") == 3
    assert parse_value("-7") == -7
    assert parse_value("0.25") == 0.25
    assert parse_value("1e-3") == 1e-3
    assert parse_value("true") is True
    assert parse_value("False") is False
    assert parse_value("code_mlp") == "code_mlp"
    assert parse_value('"quoted string"') == "quoted string"
    assert parse_value("'5'") == "5"  # quoting forces string


def test_parse_value_lists():
    assert parse_value("1, 2, 3") == [1, 2, 3]
    assert parse_value("0.1,0.2") == [0.1, 0.2]
    assert parse_value("core, knn") == ["core", "knn"]


def _write(tmp_path, text, name="run.cfg"):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return path


def test_load_config_file_basics(tmp_path):
    path = _write(tmp_path, """
# full line comment
method = core
gamma = 0.85   # trailing comment
epochs = 20

sweep.K = 5, 10, 20
""")
    values = load_config_file(path)
    assert values == {"method": "core", "gamma": 0.85, "epochs": 20,
                      "sweep.K": [5, 10, 20]}


def test_load_config_file_duplicate_key(tmp_path):
    path = _write(tmp_path, "gamma = 0.8\ngamma = 0.9\n")
    with pytest.raises(ConfigError, match="duplicate"):
        load_config_file(path)


def test_load_config_file_missing_equals(tmp_path):
    path = _write(tmp_path, "method core\n")
    with pytest.raises(ConfigError, match="line 1"):
        load_config_file(path)


def test_load_config_file_unreadable(tmp_path):
    with pytest.raises(ConfigError):
        load_config_file(tmp_path / "does_not_exist.cfg")


def test_build_run_config_dotted_keys():
    cfg = build_run_config({
        "method": "knn",
        "backbone": "seq_gru",
        "K": 7,
        "S": 3,
        "n_cohorts": 12,
        "eval.threshold": 0.4,
        "split.train": 0.7,
        "split.val": 0.2,
        "split.test": 0.1,
        "precontext.pos_k": 3,
        "model.use_tanh": True,
        "data.synthetic": True,
        "data.syn.n_patients": 50,
    })
    assert cfg.method == "knn"
    assert cfg.backbone == "seq_gru"
    assert cfg.intra_k == 7
    assert cfg.inter_degree == 3
    assert cfg.n_cohorts == 12
    assert cfg.threshold == 0.4
    assert (cfg.split_train, cfg.split_val, cfg.split_test) == (0.7, 0.2, 0.1)
    assert cfg.pos_k == 3
    assert cfg.use_tanh is True
    assert cfg.synthetic is True
    assert cfg.syn_n_patients == 50


def test_build_run_config_unknown_key():
    with pytest.raises(ConfigError, match="unknown config key"):
        build_run_config({"gama": 0.9, "data.synthetic": True})


def test_build_run_config_type_errors():
    with pytest.raises(ConfigError, match="expected int"):
        build_run_config({"epochs": 2.5, "data.synthetic": True})
    with pytest.raises(ConfigError, match="expected true/false"):
        build_run_config({"data.synthetic": "yes"})
    with pytest.raises(ConfigError, match="expected str"):
        build_run_config({"method": 3, "data.synthetic": True})
    # ints promote to float fields, bools never count as ints
    cfg = build_run_config({"gamma": 1, "data.synthetic": True})
    assert cfg.gamma == 1.0
    with pytest.raises(ConfigError):
        build_run_config({"epochs": True, "data.synthetic": True})


def test_build_run_config_overrides():
    cfg = build_run_config({"data.synthetic": True, "seed": 3, "out": "a"},
                           seed=9, out="elsewhere")
    assert cfg.seed == 9
    assert cfg.out_dir == "elsewhere"


def test_validate_rules():
    base = {"data.synthetic": True}
    bad_cases = [
        {"method": "magic"},
        {"gamma": 0.0},
        {"gamma": 1.0001},
        {"K": -1},
        {"S": -2},
        {"lambda_pre": -0.1},
        {"learning_rate": 0.0},
        {"epochs": 0},
        {"batch_size": 0},
        {"warmup_epochs": -1},
        {"n_cohorts": 1},
        {"d": 0},
        {"eval.threshold": 0.0},
        {"eval.threshold": 1.0},
        {"split.train": 0.5, "split.val": 0.5, "split.test": 0.1},
        {"precontext.pos_k": 0},
        {"model.node_dim": 1},
    ]
    for overrides in bad_cases:
        with pytest.raises(ConfigError):
            build_run_config({**base, **overrides})
    # every declared method name passes validation
    for method in METHODS:
        assert build_run_config({**base, "method": method}).method == method


def test_validate_requires_a_data_source():
    with pytest.raises(ConfigError, match="data.patients|synthetic"):
        build_run_config({})
    assert build_run_config({"data.patients": "p.jsonl"}).patients_path == "p.jsonl"


def test_sweep_grid_handling():
    cfg = build_run_config({"data.synthetic": True, "sweep.gamma": [0.8, 0.9]})
    assert cfg.sweep_grid == {"gamma": [0.8, 0.9]}
    cfg = build_run_config({"data.synthetic": True, "sweep.K": 5})
    assert cfg.sweep_grid == {"K": [5]}  # single value becomes a 1-grid
    with pytest.raises(ConfigError, match="not sweepable"):
        build_run_config({"data.synthetic": True, "sweep.epochs": [1, 2]})
    with pytest.raises(ConfigError, match="empty"):
        build_run_config({"data.synthetic": True, "sweep.gamma": []})


def test_config_hash_ignores_output_paths():
    a = build_run_config({"data.synthetic": True, "out": "runs/a"})
    b = build_run_config({"data.synthetic": True, "out": "runs/b"})
    c = build_run_config({"data.synthetic": True, "gamma": 0.5})
    assert a.config_hash() == b.config_hash()
    assert a.config_hash() != c.config_hash()
    assert len(a.config_hash()) == 16
    payload = a.hash_payload()
    assert "out_dir" not in payload and "sweep_grid" not in payload


def test_config_hash_stable_across_processes():
    # the hash feeds checkpoint/report compatibility checks, so it must not
    # depend on dict order or interpreter state
    a = build_run_config({"data.synthetic": True, "gamma": 0.75, "K": 4})
    b = build_run_config({"K": 4, "gamma": 0.75, "data.synthetic": True})
    assert a.config_hash() == b.config_hash()


def test_load_run_config_round_trip(tmp_path):
    path = _write(tmp_path, "data.synthetic = true\nmethod = kmeans\nseed = 4\n")
    cfg = load_run_config(path, seed=None, out="o")
    assert isinstance(cfg, RunConfig)
    assert cfg.method == "kmeans"
    assert cfg.seed == 4
    assert cfg.out_dir == "o"
