import csv
import json

import numpy as np
import pytest

from prunemia.harness import (
    ConfigError,
    ExperimentConfig,
    RunRecord,
    clear_cache,
    defense_filter,
    emit_matrix,
    emit_report,
    expand_grid,
    read_records,
    run_many,
    run_matrix,
    run_pipeline,
)

TINY = {
    "data": {"num_classes": 4, "num_features": 20, "samples_per_class": 40},
    "model": {"hidden": [16]},
    "prune": {"gamma": 0.5},
    "defense": {"max_epochs": 3},
    "attack": {"kinds": ["Conf", "Top1Conf", "BlindMI"], "shadows": 1, "sensitivity_n": 3,
               "probe_budget": 20, "matrix_attack": "Conf"},
}


def tiny(**sections) -> ExperimentConfig:
    return ExperimentConfig.from_dict(TINY).replace(**sections)


def without_clock(record) -> dict:
    d = record.to_dict()
    d.pop("wall_clock_seconds")
    return d


class TestConfig:
    def test_defaults(self):
        cfg = ExperimentConfig()
        assert cfg.prune.method == "L1Unstructured" and cfg.attack.shadows == 5
        assert cfg.adversary_method == cfg.prune.method and cfg.adversary_gamma == cfg.prune.gamma

    def test_yaml_round_trip(self, tmp_path):
        import yaml

        path = tmp_path / "c.yaml"
        path.write_text(yaml.safe_dump(TINY))
        cfg = ExperimentConfig.load(path)
        assert cfg.model.hidden == (16,)
        assert ExperimentConfig.from_dict(cfg.to_dict()) == cfg

    @pytest.mark.parametrize("raw,match", [
        ({"extra": {}}, "unknown sections"),
        ({"prune": {"sparsity": 0.5}}, "unknown keys"),
        ({"prune": {"gamma": 1.0}}, "sparsity"),
        ({"prune": {"method": "Random"}}, "method"),
        ({"prune": {"gammas": []}}, "empty"),
        ({"defense": {"kind": "MemGuard"}}, "defense"),
        ({"defense": {"kind": "Basic", "grid": [1, 2]}}, None),
        ({"attack": {"kinds": ["Oracle"]}}, "attack"),
        ({"run": {"parallel": 0}}, "parallel"),
    ])
    def test_errors(self, raw, match):
        if match is None:
            with pytest.raises(ConfigError):
                expand_grid(ExperimentConfig.from_dict(raw))
        else:
            with pytest.raises(ConfigError, match=match):
                ExperimentConfig.from_dict(raw)

    def test_load_errors(self, tmp_path):
        with pytest.raises(ConfigError):
            ExperimentConfig.load(tmp_path / "missing.yaml")
        (tmp_path / "list.yaml").write_text("- 1\n- 2\n")
        with pytest.raises(ConfigError, match="mapping"):
            ExperimentConfig.load(tmp_path / "list.yaml")

    def test_grid_expansion(self):
        cfg = tiny(prune={"methods": ("L1Unstructured", "L2Structured"), "gammas": (0.3, 0.5)},
                   defense={"kind": "PPB", "grid": True}, run={"repeats": 2})
        cells = expand_grid(cfg)
        assert len(cells) == 2 * 2 * 5 * 2
        assert {c.defense.lam for c in cells} == {1.0, 2.0, 4.0, 8.0, 16.0}
        assert len({c.run.seed for c in cells}) == 2


class TestPipeline:
    def test_gamma_zero_mirrors_original(self):
        rec = run_pipeline(tiny(prune={"gamma": 0.0}, attack={"adversary_gamma": 0.0}), raise_errors=True)
        assert rec.error is None
        for key in ("train_accuracy", "test_accuracy", "confidence_gap", "sensitivity_gap"):
            assert rec.pruned[key] == rec.original[key]
        assert rec.pruned["attacks"] == rec.original["attacks"]
        assert rec.pruned["sparsity"] == 0.0

    def test_record_well_formed(self):
        rec = run_pipeline(tiny(), raise_errors=True)
        for variant in ("original", "pruned"):
            section = getattr(rec, variant)
            assert 0 <= section["train_accuracy"] <= 1 and 0 <= section["test_accuracy"] <= 1
            assert set(section["attacks"]) == {"Conf", "Top1Conf", "BlindMI"}
            assert all(0 <= r["accuracy"] <= 1 for r in section["attacks"].values())
        assert rec.pruned["sparsity"] > 0.4
        assert rec.schema == "prunemia-run-1"

    def test_deterministic_without_cache(self):
        clear_cache()
        a = run_pipeline(tiny())
        clear_cache()
        b = run_pipeline(tiny())
        assert json.dumps(without_clock(a), sort_keys=True) == json.dumps(without_clock(b), sort_keys=True)

    def test_stage_tagged_error(self, tmp_path):
        rec = run_pipeline(tiny(data={"csv": str(tmp_path / "missing.csv")}))
        assert rec.error["stage"] == "data"

    def test_parallel_equals_serial(self):
        configs = expand_grid(tiny(prune={"gammas": (0.3, 0.5)}))
        clear_cache()
        serial = run_many(configs, 1)
        clear_cache()
        parallel = run_many(configs, 2)
        for a, b in zip(serial, parallel):
            assert json.dumps(without_clock(a), sort_keys=True) == json.dumps(without_clock(b), sort_keys=True)


class TestMatrix:
    def test_one_by_one(self):
        cfg = tiny(prune={"gammas": (0.5,), "include_unpruned": False})
        matrix = run_matrix(cfg)
        assert len(matrix.cells) == 1
        cell = matrix.cells[0]
        assert cell["known"] and cell["loss"] == 0.0
        clear_cache()
        standalone = run_pipeline(tiny(attack={"kinds": ("Conf",)}))
        assert cell["accuracy"] == standalone.attack_accuracy("Conf")

    def test_diagonal_zero_and_unpruned_targets(self, tmp_path):
        cfg = tiny(prune={"gammas": (0.3, 0.5)})
        matrix = run_matrix(cfg)
        assert len(matrix.cells) == 3 * 2
        assert {c["target_gamma"] for c in matrix.cells} == {0.0, 0.3, 0.5}
        for c in matrix.cells:
            assert c["error"] is None
            if c["known"]:
                assert c["loss"] == 0.0
        paths = emit_matrix(matrix, tmp_path)
        assert json.loads(paths["matrix"].read_text())["schema"] == "prunemia-matrix-1"

    def test_random_pairs(self):
        cfg = tiny(prune={"gammas": (0.3, 0.5)}, run={"pairs": 3})
        matrix = run_matrix(cfg)
        assert len(matrix.cells) == 3


@pytest.fixture(scope="module")
def records():
    cfgs = expand_grid(tiny(prune={"gammas": (0.3, 0.5)}))
    cfgs += expand_grid(tiny(defense={"kind": "PPB", "grid": [1.0]}))
    return run_many(cfgs)


class TestReport:

    def test_files(self, records, tmp_path):
        paths = emit_report(records, tmp_path)
        back = read_records(paths["records"])
        assert back == [r.to_dict() for r in records]
        assert [RunRecord.from_dict(d) for d in back] == records
        with paths["attacks"].open() as fh:
            assert len(list(csv.DictReader(fh))) == len(records) * 3 * 2
        with paths["gap_vs_attack"].open() as fh:
            gap_rows = list(csv.DictReader(fh))
        # primary attack here is Conf; PPB shares (L1Unstructured, 0.5) with a Basic run
        assert len(gap_rows) == 0
        emit_report(records, tmp_path / "conf", primary_attack="Conf")
        with (tmp_path / "conf" / "fig_gap_vs_attack.csv").open() as fh:
            gap_rows = list(csv.DictReader(fh))
        assert sorted((r["method"], r["gamma"]) for r in gap_rows) == [("L1Unstructured", "0.3"),
                                                                        ("L1Unstructured", "0.5")]
        assert all(r["defense"] == "Basic" for r in gap_rows)

    def test_defense_filter_flags_only_defended(self, records):
        dicts = [r.to_dict() for r in records]
        flags = defense_filter(dicts)
        assert flags and all(dicts[i]["config"]["defense"]["kind"] == "PPB" for i, _ in flags)

    def test_empty_and_unwritable(self, records, tmp_path):
        with pytest.raises(ValueError):
            emit_report([], tmp_path)
        blocker = tmp_path / "file"
        blocker.write_text("x")
        with pytest.raises(OSError):
            emit_report(records, blocker / "sub")
