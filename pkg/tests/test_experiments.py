import json
import shutil
from pathlib import Path

import jsonschema
import numpy as np
import pytest
import yaml

from mcr.cli import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, main
from mcr.errors import ConfigError
from mcr.experiments import (
    content_hash,
    correlation_report,
    defaults,
    load_schema,
    resolve,
    run_ablation,
    run_pretraining,
)
from mcr.synthbench import SynthEnv, generate_demos
from mcr.errors import UndefinedCorrelationError


def write_cfg(path: Path, data: dict) -> Path:
    path.write_text(yaml.safe_dump(data))
    return path


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    generate_demos(SynthEnv(), 8, np.random.default_rng(0), out_dir=root / "ds")
    return root / "ds"


@pytest.fixture(scope="module")
def checkpoint(tmp_path_factory, dataset):
    out = tmp_path_factory.mktemp("pre")
    cfg = resolve("pretrain", {"dataset": str(dataset), "steps": 6, "checkpoint_every": 3})
    run_pretraining(cfg, out, seed=0)
    return out / "checkpoints" / "final.pt"


def run_cli(tmp_path, verb, cfg, *extra):
    cfg_path = write_cfg(tmp_path / f"{verb}.yaml", cfg)
    return main([verb, "--config", str(cfg_path), *extra])


# ------------------------------------------------------------------ config


def test_paper_profile_defaults():
    d = defaults("pretrain", "paper")
    assert d["batch_size"] == 32 and d["learning_rate"] == 1e-4 and d["steps"] == 500_000
    assert d["backbone"] == 50 and d["input_size"] == 224 and d["crop_scale"] == [0.5, 1.0]
    assert d["augmentation"] is True and d["filter"]["min_length"] == 40


def test_unknown_keys_rejected(dataset):
    with pytest.raises(ConfigError, match="stepz"):
        resolve("pretrain", {"dataset": str(dataset), "stepz": 10})
    with pytest.raises(ConfigError, match="losses.dynamics"):
        resolve("pretrain", {"dataset": str(dataset), "losses": {"dynamics": False}})
    with pytest.raises(ConfigError, match="random_init.depth"):
        resolve("eval-centricity", {"dataset": str(dataset), "random_init": {"depth": 3}})


@pytest.mark.parametrize("bad", [
    {"steps": 0}, {"learning_rate": -1.0}, {"chunk_length": 4}, {"batch_size": 1},
    {"losses": {"dyn": False, "act": False, "tcl": False}}, {"backbone": 101},
    {"crop_scale": [0.9, 0.5]}, {"dataset": "/nonexistent/dir"}, {"augmentation": "yes"},
])
def test_invalid_values(dataset, bad):
    with pytest.raises(ConfigError):
        resolve("pretrain", {"dataset": str(dataset), **bad})


def test_source_must_be_exclusive(dataset, checkpoint):
    with pytest.raises(ConfigError):
        resolve("eval-centricity", {"dataset": str(dataset)})
    with pytest.raises(ConfigError):
        resolve("eval-centricity", {"dataset": str(dataset), "checkpoint": str(checkpoint),
                                    "random_init": {}})


def test_cli_exit_codes(tmp_path, dataset):
    assert run_cli(tmp_path, "pretrain", {"dataset": str(dataset), "stepz": 3}) == EXIT_CONFIG
    (tmp_path / "broken.yaml").write_text("steps: [1,\n")
    assert main(["pretrain", "--config", str(tmp_path / "broken.yaml")]) == EXIT_CONFIG
    assert main(["pretrain", "--config", str(tmp_path / "missing.yaml")]) == EXIT_CONFIG
    # everything filtered away is a runtime failure
    cfg = {"dataset": str(dataset), "steps": 2, "filter": {"min_length": 10_000}}
    assert run_cli(tmp_path, "pretrain", cfg, "--out", str(tmp_path / "p")) == EXIT_RUNTIME


# ---------------------------------------------------------------- commands


def test_gen_synth_and_manifest(tmp_path):
    out = tmp_path / "gen"
    assert run_cli(tmp_path, "gen-synth", {"n": 3}, "--out", str(out), "--seed", "4") == EXIT_OK
    man = json.loads((out / "manifest.json").read_text())
    jsonschema.validate(man, load_schema("run_manifest"))
    files = {p.relative_to(out).as_posix() for p in out.rglob("*") if p.is_file()}
    assert files - {"manifest.json"} == set(man["artifacts"])
    index = json.loads((out / "dataset" / "index.json").read_text())
    assert len(index["trajectories"]) == 3 and "synth_config" in index


def test_pretrain_outputs(tmp_path, dataset):
    out = tmp_path / "pre"
    cfg = {"dataset": str(dataset), "steps": 4, "checkpoint_every": 2,
           "losses": {"dyn": False, "tcl": False}}
    assert run_cli(tmp_path, "pretrain", cfg, "--out", str(out)) == EXIT_OK
    man = json.loads((out / "manifest.json").read_text())
    assert man["config"]["batch_size"] == 32 and man["config"]["learning_rate"] == 1e-3
    assert man["profile"] == "desk" and len(man["inputs"]["dataset"]) == 64
    assert "checkpoints/final.pt" in man["artifacts"] and "checkpoints/step_0000002.pt" in man["artifacts"]
    records = [json.loads(l) for l in (out / "loss_log.jsonl").read_text().splitlines()]
    assert [r["step"] for r in records] == list(range(5))
    assert all(set(r) == {"step", "total", "act"} for r in records)
    files = {p.relative_to(out).as_posix() for p in out.rglob("*") if p.is_file()}
    assert files - {"manifest.json"} == set(man["artifacts"])


def test_centricity_cli_deterministic_and_valid(tmp_path, dataset, checkpoint):
    cfg = {"dataset": str(dataset), "checkpoint": str(checkpoint)}
    for name in ("a", "b"):
        assert run_cli(tmp_path, "eval-centricity", cfg, "--out", str(tmp_path / name)) == EXIT_OK
    a = (tmp_path / "a" / "centricity.json").read_bytes()
    assert a == (tmp_path / "b" / "centricity.json").read_bytes()
    jsonschema.validate(json.loads(a), load_schema("centricity_report"))


def test_oracle_encoder_cli_scores_one(tmp_path, dataset):
    cfg = {"dataset": str(dataset), "random_init": {"backbone": "mask-oracle"}}
    assert run_cli(tmp_path, "eval-centricity", cfg, "--out", str(tmp_path / "o")) == EXIT_OK
    assert json.loads((tmp_path / "o" / "centricity.json").read_text())["centricity_mean"] == 1.0


def test_centricity_cli_names_trajectory_without_masks(tmp_path, dataset, capsys):
    ds = tmp_path / "ds"
    shutil.copytree(dataset, ds)
    victim = json.loads((ds / "index.json").read_text())["trajectories"][2]
    shutil.rmtree(ds / victim / "masks")
    cfg = {"dataset": str(ds), "random_init": {}}
    assert run_cli(tmp_path, "eval-centricity", cfg, "--out", str(tmp_path / "o")) == EXIT_RUNTIME
    assert victim in capsys.readouterr().err


def test_bc_cli(tmp_path, dataset, checkpoint):
    cfg = {"demos": str(dataset), "checkpoint": str(checkpoint), "epochs": 2, "eval_every": 1, "seeds": 1}
    for name in ("a", "b"):
        assert run_cli(tmp_path, "eval-bc", cfg, "--out", str(tmp_path / name)) == EXIT_OK
    a = json.loads((tmp_path / "a" / "bc_results.json").read_text())
    jsonschema.validate(a, load_schema("bc_results"))
    assert a["stderr"] == 0 and len(a["seeds"]) == 1
    assert a == json.loads((tmp_path / "b" / "bc_results.json").read_text())


# ------------------------------------------------------------------ report


def _write_pair(tmp_path, name, cent, success):
    c = tmp_path / f"{name}_c.json"
    b = tmp_path / f"{name}_b.json"
    c.write_text(json.dumps({"schema": "mcr-centricity-report-v1", "method": name, "per_frame": [],
                             "centricity_mean": cent, "success_rates": [], "pearson_r": None}))
    b.write_text(json.dumps({"schema": "mcr-bc-results-v1", "task": "pick_place",
                             "seeds": [{"seed": 0, "checkpoint_rates": [success], "best": success}],
                             "mean": success, "stderr": 0.0}))
    return {"method": name, "centricity": str(c), "bc": str(b)}


def test_report_linear_points(tmp_path):
    inputs = [_write_pair(tmp_path, f"m{i}", 0.1 * i, 0.2 * i + 0.1) for i in range(3)]
    out = tmp_path / "rep"
    assert run_cli(tmp_path, "report", {"inputs": inputs}, "--out", str(out)) == EXIT_OK
    rep = json.loads((out / "correlation.json").read_text())
    jsonschema.validate(rep, load_schema("correlation_report"))
    assert rep["pearson_r"] == pytest.approx(1.0)
    assert (out / "scatter.png").stat().st_size > 0
    first = (out / "correlation.json").read_bytes()
    assert run_cli(tmp_path, "report", {"inputs": inputs}, "--out", str(out)) == EXIT_OK
    assert (out / "correlation.json").read_bytes() == first


def test_report_errors(tmp_path):
    one = [_write_pair(tmp_path, "a", 0.1, 0.5)]
    assert run_cli(tmp_path, "report", {"inputs": one}, "--out", str(tmp_path / "r")) != EXIT_OK
    same = [_write_pair(tmp_path, "a", 0.1, 0.5), _write_pair(tmp_path, "b", 0.1, 0.5)]
    assert run_cli(tmp_path, "report", {"inputs": same}, "--out", str(tmp_path / "r")) == EXIT_RUNTIME
    with pytest.raises(UndefinedCorrelationError):
        correlation_report([{"method": m, "centricity_mean": 0.3,
                             "success_rates": [{"task": "t", "mean": 0.5, "stderr": 0}]} for m in "ab"])


# ----------------------------------------------------------------- ablation


def _ablate_cfg(dataset, **kw):
    base = {"dataset": str(dataset), "eval_dataset": str(dataset), "demos": str(dataset),
            "seeds": [0], "evaluate_bc": False, "pretrain": {"steps": 2, "batch_size": 4}}
    base.update(kw)
    return base


def test_ablation_objectives_rows(tmp_path, dataset):
    man = run_ablation(resolve("ablate", _ablate_cfg(dataset)), tmp_path / "ab")
    table = json.loads((man.out_dir / "ablation.json").read_text())
    jsonschema.validate(table, load_schema("ablation_table"))
    assert [r["name"] for r in table["rows"]] == ["full", "w/o dyn", "w/o act", "w/o tcl"]
    assert table["complete"] and "| w/o dyn |" in (man.out_dir / "ablation.md").read_text()
    files = {p.relative_to(man.out_dir).as_posix() for p in man.out_dir.rglob("*") if p.is_file()}
    assert files - {"manifest.json"} == set(man.artifacts)


def test_ablation_chunk_length_dims(tmp_path, dataset):
    man = run_ablation(resolve("ablate", _ablate_cfg(dataset, axis="chunk_length")), tmp_path / "ab")
    table = json.loads((man.out_dir / "ablation.json").read_text())
    assert [r["metadata"]["chunk_dim"] for r in table["rows"]] == [14, 56, 98, 140]


def test_ablation_deterministic_with_bc(tmp_path, dataset):
    cfg = _ablate_cfg(dataset, axis="backbone", backbones=["tiny"], evaluate_bc=True,
                      bc={"epochs": 2, "eval_every": 1, "seeds": 1})
    tables = []
    for name in ("a", "b"):
        run_ablation(resolve("ablate", cfg), tmp_path / name)
        tables.append((tmp_path / name / "ablation.json").read_bytes())
    assert tables[0] == tables[1]
    assert json.loads(tables[0])["rows"][0]["success_mean"] is not None


def test_ablation_marks_incomplete(tmp_path, dataset):
    # l=41 has no valid timestep on these short demos, so every cell fails
    cfg = resolve("ablate", _ablate_cfg(dataset, axis="chunk_length", chunk_lengths=[3, 41]))
    with pytest.raises(RuntimeError, match="incomplete"):
        run_ablation(cfg, tmp_path / "ab")
    table = json.loads((tmp_path / "ab" / "ablation.json").read_text())
    assert not table["complete"]
    assert [r["complete"] for r in table["rows"]] == [True, False]
    assert "INCOMPLETE" in (tmp_path / "ab" / "ablation.md").read_text()


def test_content_hash_tracks_changes(tmp_path):
    (tmp_path / "d").mkdir()
    (tmp_path / "d" / "x").write_text("1")
    h = content_hash(tmp_path / "d")
    assert h == content_hash(tmp_path / "d")
    (tmp_path / "d" / "x").write_text("2")
    assert content_hash(tmp_path / "d") != h
