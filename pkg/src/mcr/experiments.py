"""Config resolution, run manifests and the command implementations.

Every command takes a resolved config dict and an output directory, writes
its artifacts plus ``manifest.json`` there, and returns the manifest.  The
CLI in :mod:`mcr.cli` is a thin wrapper over these functions.
"""

from __future__ import annotations

import copy
import hashlib
import importlib.resources
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping

import numpy as np
import torch

from mcr.centricity import (
    CentricityReport,
    eval_frames_from_trajectories,
    manipulation_centricity,
    pearson_correlation,
)
from mcr.encoder import Encoder, EncoderConfig, build_encoder, load_checkpoint, save_checkpoint
from mcr.errors import ConfigError, DatasetError, SpecError
from mcr.losses import LossConfig
from mcr.policy_eval import BCConfig, EvalProtocol, ProtocolResult, evaluation_protocol
from mcr.pretrain import PretrainSettings, pretrain
from mcr.synthbench import SynthConfig, SynthEnv, generate_demos
from mcr.trajectory_data import ChunkSpec, FilterRules, filter_trajectories, read_dataset, read_index

log = logging.getLogger(__name__)

MANIFEST_SCHEMA = "mcr-run-manifest-v1"
CORRELATION_SCHEMA = "mcr-correlation-report-v1"
ABLATION_SCHEMA = "mcr-ablation-table-v1"
COMMANDS = ("gen-synth", "pretrain", "eval-centricity", "eval-bc", "ablate", "report")
PROFILES = ("paper", "desk")
ABLATION_AXES = ("objectives", "chunk_length", "backbone")
# arena grey of the synthetic renderer, in [0, 1]
SYNTH_PIXEL_MEAN = 128 / 255




def load_schema(name: str) -> dict:
    """Bundled JSON schema, e.g. ``load_schema("centricity_report")``."""
    res = importlib.resources.files("mcr") / "schemas" / f"{name}.schema.json"
    return json.loads(res.read_text())


# ------------------------------------------------------------------ defaults

_FILTER_PAPER = {"min_length": 40, "require_instruction": True, "min_instruction_tokens": 2}
_FILTER_DESK = {"min_length": 5, "require_instruction": True, "min_instruction_tokens": 2}
_LOSSES = {"dyn": True, "act": True, "tcl": True}

_PRETRAIN = {
    "paper": {
        "dataset": None,
        "steps": 500_000,
        "batch_size": 32,
        "learning_rate": 1e-4,
        "chunk_length": 3,
        "backbone": 50,
        "feature_dim": None,
        "input_size": 224,
        "pixel_mean": None,
        "augmentation": True,
        "crop_scale": [0.5, 1.0],
        "losses": _LOSSES,
        "tcl_all_negatives": False,
        "reduction": "mean",
        "checkpoint_every": 5000,
        "log_every": 100,
        "filter": _FILTER_PAPER,
    },
    "desk": {
        "dataset": None,
        "steps": 3000,
        "batch_size": 32,
        "learning_rate": 1e-3,
        "chunk_length": 3,
        "backbone": "tiny",
        "feature_dim": None,
        "input_size": 64,
        "pixel_mean": SYNTH_PIXEL_MEAN,
        "augmentation": False,
        "crop_scale": [0.5, 1.0],
        "losses": _LOSSES,
        "tcl_all_negatives": False,
        "reduction": "mean",
        "checkpoint_every": 1000,
        "log_every": 100,
        "filter": _FILTER_DESK,
    },
}

_ENCODER_SOURCE = {"checkpoint": None, "random_init": None, "method": None}
_RANDOM_INIT = {"backbone": "tiny", "input_size": 64, "pixel_mean": SYNTH_PIXEL_MEAN, "feature_dim": None}

_CENTRICITY = {**_ENCODER_SOURCE, "dataset": None, "threshold": 2, "batch_size": 128}

_BC = {
    **_ENCODER_SOURCE,
    "demos": None,
    "env": None,
    "epochs": 100,
    "batch_size": 256,
    "learning_rate": 1e-3,
    "hidden": 256,
    "layers": 3,
    "episodes_per_eval": 20,
    "eval_every": 10,
    "seeds": 3,
}

_GEN = {"n": 200, "synth": None, "id_prefix": None}

_REPORT = {"inputs": None, "plot": True}

_ABLATE_BC = {k: v for k, v in _BC.items() if k not in _ENCODER_SOURCE and k not in ("demos", "env")}

_ABLATE = {
    "axis": "objectives",
    "dataset": None,
    "eval_dataset": None,
    "demos": None,
    "env": None,
    "seeds": [0, 1, 2],
    "chunk_lengths": [1, 3, 5, 7],
    "backbones": None,
    "evaluate_bc": True,
    "threshold": 2,
    "pretrain": None,
    "bc": _ABLATE_BC,
}


def defaults(command: str, profile: str = "desk") -> dict:
    """Profile defaults for ``command`` (a fresh copy)."""
    if command not in COMMANDS:
        raise ConfigError(f"unknown command {command!r}")
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; choose from {PROFILES}")
    if command == "pretrain":
        base = _PRETRAIN[profile]
    elif command == "eval-centricity":
        base = _CENTRICITY
    elif command == "eval-bc":
        base = _BC
    elif command == "gen-synth":
        base = _GEN
    elif command == "report":
        base = _REPORT
    else:
        base = {**_ABLATE, "backbones": [18, 34, 50] if profile == "paper" else ["tiny", 18]}
        pre = {k: v for k, v in _PRETRAIN[profile].items() if k != "dataset"}
        base["pretrain"] = pre
    return copy.deepcopy(base)


# ---------------------------------------------------------------- validation

# nested keys whose value is a dict validated against the default's keys
_NESTED = {"losses", "filter", "pretrain", "bc"}


def _merge(base: dict, override: Mapping, where: str) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        path = f"{where}.{key}" if where else key
        if key not in base:
            raise ConfigError(f"unknown config key {path!r}")
        if key in _NESTED and base[key] is not None:
            if not isinstance(value, Mapping):
                raise ConfigError(f"{path} must be a mapping")
            out[key] = _merge(base[key], value, path)
        else:
            out[key] = copy.deepcopy(value)
    return out


def _check(cond: bool, msg: str) -> None:
    if not cond:
        raise ConfigError(msg)


def _no_unknown(given: Mapping, allowed, where: str) -> None:
    unknown = sorted(set(given) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown config key '{where}.{unknown[0]}'")


def _is_int(v: Any) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _is_num(v: Any) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v)


def _positive_ints(cfg: Mapping, keys, where: str = "") -> None:
    for k in keys:
        _check(_is_int(cfg[k]) and cfg[k] > 0, f"{where}{k} must be a positive integer, got {cfg[k]!r}")


def _existing_dir(value: Any, key: str) -> Path:
    _check(isinstance(value, (str, os.PathLike)), f"{key} must be set to a directory path")
    path = Path(value)
    _check(path.is_dir(), f"{key}: directory {str(path)!r} does not exist")
    return path


def _validate_pretrain(cfg: Mapping, where: str = "", need_dataset: bool = True) -> None:
    if need_dataset:
        _existing_dir(cfg["dataset"], f"{where}dataset")
    _positive_ints(cfg, ("steps", "batch_size", "chunk_length", "input_size", "checkpoint_every",
                         "log_every"), where)
    _check(_is_num(cfg["learning_rate"]) and cfg["learning_rate"] > 0,
           f"{where}learning_rate must be positive")
    _check(cfg["batch_size"] >= 2, f"{where}batch_size must be >= 2")
    _check(cfg["chunk_length"] % 2 == 1, f"{where}chunk_length must be odd")
    _check(isinstance(cfg["augmentation"], bool), f"{where}augmentation must be a boolean")
    scale = cfg["crop_scale"]
    _check(isinstance(scale, (list, tuple)) and len(scale) == 2 and all(map(_is_num, scale))
           and 0 < scale[0] <= scale[1] <= 1, f"{where}crop_scale must be [lo, hi] in (0, 1]")
    _check(all(isinstance(v, bool) for v in cfg["losses"].values()), f"{where}losses must be booleans")
    _check(any(cfg["losses"].values()), f"{where}losses: at least one term must be enabled")
    _check(cfg["reduction"] in ("mean", "sum"), f"{where}reduction must be mean or sum")
    f = cfg["filter"]
    _check(_is_int(f["min_length"]) and f["min_length"] >= 1, f"{where}filter.min_length must be >= 1")
    _check(isinstance(f["require_instruction"], bool), f"{where}filter.require_instruction must be a boolean")
    _check(_is_int(f["min_instruction_tokens"]) and f["min_instruction_tokens"] >= 0,
           f"{where}filter.min_instruction_tokens must be >= 0")
    _encoder_config(cfg, where)


def _encoder_config(cfg: Mapping, where: str = "") -> EncoderConfig:
    pm = cfg.get("pixel_mean")
    _check(pm is None or _is_num(pm), f"{where}pixel_mean must be a number or null")
    fd = cfg.get("feature_dim")
    _check(fd is None or (_is_int(fd) and fd > 0), f"{where}feature_dim must be a positive integer")
    try:
        return EncoderConfig(backbone=cfg["backbone"], feature_dim=fd,
                             input_size=cfg["input_size"], pixel_mean=pm)
    except SpecError as exc:
        raise ConfigError(f"{where}{exc}") from exc


def _validate_source(cfg: Mapping) -> None:
    ck, ri = cfg["checkpoint"], cfg["random_init"]
    _check((ck is None) != (ri is None), "set exactly one of checkpoint and random_init")
    if ck is not None:
        _check(Path(ck).is_file(), f"checkpoint: file {str(ck)!r} does not exist")
    else:
        _check(isinstance(ri, Mapping), "random_init must be a mapping")
        _no_unknown(ri, _RANDOM_INIT, "random_init")
        _encoder_config({**_RANDOM_INIT, **ri}, "random_init.")
    _check(cfg["method"] is None or isinstance(cfg["method"], str), "method must be a string")


def _synth_config(d: Mapping | None, where: str) -> SynthConfig:
    if d is None:
        return SynthConfig()
    _check(isinstance(d, Mapping), f"{where} must be a mapping")
    try:
        return SynthConfig.from_dict(d)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc
    except SpecError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _validate_bc(cfg: Mapping, where: str = "") -> None:
    _positive_ints(cfg, ("epochs", "batch_size", "hidden", "layers", "episodes_per_eval",
                         "eval_every", "seeds"), where)
    _check(_is_num(cfg["learning_rate"]) and cfg["learning_rate"] > 0, f"{where}learning_rate must be positive")
    _check(cfg["episodes_per_eval"] >= 20, f"{where}episodes_per_eval must be >= 20")


def validate(command: str, cfg: Mapping) -> None:
    """Raise ConfigError for any value the command cannot run with."""
    if command == "gen-synth":
        _positive_ints(cfg, ("n",))
        _synth_config(cfg["synth"], "synth")
        _check(cfg["id_prefix"] is None or isinstance(cfg["id_prefix"], str), "id_prefix must be a string")
    elif command == "pretrain":
        _validate_pretrain(cfg)
    elif command == "eval-centricity":
        _validate_source(cfg)
        _existing_dir(cfg["dataset"], "dataset")
        _positive_ints(cfg, ("batch_size",))
        _check(_is_int(cfg["threshold"]) and 0 <= cfg["threshold"] <= 255, "threshold must be in [0, 255]")
    elif command == "eval-bc":
        _validate_source(cfg)
        _existing_dir(cfg["demos"], "demos")
        _synth_config(cfg["env"], "env")
        _validate_bc(cfg)
    elif command == "report":
        inputs = cfg["inputs"]
        _check(isinstance(inputs, list), "inputs must be a list of {method, centricity, bc}")
        _check(len(inputs) >= 2, f"report needs at least 2 method points, got {len(inputs)}")
        for i, item in enumerate(inputs):
            _check(isinstance(item, Mapping), f"inputs[{i}] must be a mapping")
            _no_unknown(item, ("method", "centricity", "bc"), f"inputs[{i}]")
            _check("centricity" in item and "bc" in item, f"inputs[{i}] needs centricity and bc")
            bcs = item["bc"] if isinstance(item["bc"], list) else [item["bc"]]
            for p in [item["centricity"], *bcs]:
                _check(Path(p).is_file(), f"inputs[{i}]: file {str(p)!r} does not exist")
        _check(isinstance(cfg["plot"], bool), "plot must be a boolean")
    elif command == "ablate":
        _check(cfg["axis"] in ABLATION_AXES, f"axis must be one of {ABLATION_AXES}")
        _existing_dir(cfg["dataset"], "dataset")
        _existing_dir(cfg["eval_dataset"], "eval_dataset")
        _check(isinstance(cfg["evaluate_bc"], bool), "evaluate_bc must be a boolean")
        if cfg["evaluate_bc"]:
            _existing_dir(cfg["demos"], "demos")
            _validate_bc(cfg["bc"], "bc.")
        _synth_config(cfg["env"], "env")
        seeds = cfg["seeds"]
        _check(isinstance(seeds, list) and seeds and all(_is_int(s) for s in seeds),
               "seeds must be a non-empty list of integers")
        _check(all(_is_int(l) and l > 0 and l % 2 for l in cfg["chunk_lengths"]),
               "chunk_lengths must be odd positive integers")
        _check(isinstance(cfg["backbones"], list) and cfg["backbones"], "backbones must be a list")
        for b in cfg["backbones"]:
            _encoder_config({**cfg["pretrain"], "backbone": b}, "backbones: ")
        _validate_pretrain(cfg["pretrain"], "pretrain.", need_dataset=False)
    else:
        raise ConfigError(f"unknown command {command!r}")


def resolve(command: str, user: Mapping | None = None, profile: str = "desk") -> dict:
    """Profile defaults overlaid with ``user`` keys; unknown keys are rejected."""
    if user is not None and not isinstance(user, Mapping):
        raise ConfigError("config file must contain a mapping at the top level")
    cfg = _merge(defaults(command, profile), user or {}, "")
    validate(command, cfg)
    return cfg


# ----------------------------------------------------------------- manifests


def file_digest(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def content_hash(path: str | os.PathLike) -> str:
    """sha256 of a file, or of a directory's sorted ``relpath\\0digest`` listing."""
    path = Path(path)
    if path.is_file():
        return file_digest(path)
    h = hashlib.sha256()
    for p in sorted(q for q in path.rglob("*") if q.is_file()):
        h.update(f"{p.relative_to(path).as_posix()}\0{file_digest(p)}\n".encode())
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    profile: str
    seed: int
    config: dict
    inputs: dict[str, str] = field(default_factory=dict)
    timings: dict[str, float] = field(default_factory=dict)
    artifacts: list[str] = field(default_factory=list)
    out_dir: Path = Path(".")

    def add(self, path: str | os.PathLike) -> Path:
        """Register an artifact (a path inside ``out_dir``) and return it."""
        p = Path(path)
        rel = p.relative_to(self.out_dir).as_posix() if p.is_absolute() else p.as_posix()
        if rel not in self.artifacts:
            self.artifacts.append(rel)
        return self.out_dir / rel

    def to_json(self) -> dict:
        return {
            "schema": MANIFEST_SCHEMA,
            "command": self.command,
            "profile": self.profile,
            "seed": self.seed,
            "config": self.config,
            "inputs": self.inputs,
            "timings": self.timings,
            "artifacts": sorted(self.artifacts),
        }

    def write(self) -> Path:
        path = self.out_dir / "manifest.json"
        write_json(path, self.to_json())
        return path


def write_json(path: Path, data: Any) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, path)


def _start(command: str, cfg: dict, out: str | os.PathLike, seed: int, profile: str,
           inputs: Mapping[str, Any]) -> RunManifest:
    out_dir = Path(out).resolve()
    out_dir.mkdir(parents=True, exist_ok=True)
    hashes = {k: content_hash(v) for k, v in inputs.items() if v is not None}
    return RunManifest(command, profile, seed, copy.deepcopy(cfg), hashes, out_dir=out_dir)


# ------------------------------------------------------------------ commands


def run_gen_synth(cfg: dict, out: str | os.PathLike, seed: int = 0, profile: str = "desk") -> RunManifest:
    man = _start("gen-synth", cfg, out, seed, profile, {})
    t0 = time.perf_counter()
    env = SynthEnv(_synth_config(cfg["synth"], "synth"))
    generate_demos(env, cfg["n"], np.random.default_rng(seed), out_dir=man.out_dir / "dataset",
                   id_prefix=cfg["id_prefix"])
    man.timings["generate"] = time.perf_counter() - t0
    for p in sorted((man.out_dir / "dataset").rglob("*")):
        if p.is_file():
            man.add(p)
    man.write()
    return man


def _loss_config(cfg: Mapping) -> LossConfig:
    l = cfg["losses"]
    return LossConfig(l["dyn"], l["act"], l["tcl"], cfg["reduction"], cfg["tcl_all_negatives"])


def _load_filtered(path: str | os.PathLike, rules: FilterRules) -> list:
    data = read_dataset(path)
    kept = filter_trajectories(data, rules)
    if not kept:
        raise DatasetError(
            f"dataset {str(path)!r}: all {len(data)} trajectories removed by filter rules {asdict(rules)}"
        )
    return kept


def pretrain_from_config(cfg: Mapping, seed: int, checkpoint_dir: Path | None,
                         on_log: Callable[[dict], None] | None = None, dataset=None):
    """Shared by ``pretrain`` and ``ablate``; ``dataset`` skips the disk read."""
    rules = FilterRules(**cfg["filter"])
    data = dataset if dataset is not None else _load_filtered(cfg["dataset"], rules)
    enc_cfg = _encoder_config(cfg)
    traj = data[0]
    spec = ChunkSpec(cfg["chunk_length"], traj.state_dim, traj.action_dim)
    settings = PretrainSettings(
        steps=cfg["steps"], batch_size=cfg["batch_size"], learning_rate=cfg["learning_rate"],
        augment=cfg["augmentation"], crop_scale=tuple(cfg["crop_scale"]),
        checkpoint_every=cfg["checkpoint_every"], log_every=cfg["log_every"], seed=seed,
    )
    return pretrain(data, enc_cfg, spec, _loss_config(cfg), settings, checkpoint_dir, on_log)


def run_pretraining(cfg: dict, out: str | os.PathLike, seed: int = 0, profile: str = "desk") -> RunManifest:
    man = _start("pretrain", cfg, out, seed, profile, {"dataset": cfg["dataset"]})
    log_path = man.add("loss_log.jsonl")
    t0 = time.perf_counter()
    with open(log_path, "w") as fh:
        def on_log(record: dict) -> None:
            log.info("step %d total %.4f", record["step"], record["total"])

        result = pretrain_from_config(cfg, seed, man.out_dir / "checkpoints", on_log)
        for record in result.history:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    man.timings["pretrain"] = time.perf_counter() - t0
    for p in result.checkpoints:
        man.add(p)
    man.write()
    return man


def _encoder_from_source(cfg: Mapping, seed: int) -> tuple[Encoder, str]:
    if cfg["checkpoint"] is not None:
        enc = load_checkpoint(cfg["checkpoint"]).encoder
        method = cfg["method"] or Path(cfg["checkpoint"]).stem
    else:
        enc = build_encoder(_encoder_config({**_RANDOM_INIT, **cfg["random_init"]}), seed=seed)
        method = cfg["method"] or "random-init"
    return enc.eval(), method


def centricity_report(encoder: Encoder, trajectories, method: str, threshold: int = 2,
                      batch_size: int = 128) -> CentricityReport:
    frames = eval_frames_from_trajectories(trajectories)
    result = manipulation_centricity(encoder, frames, threshold=threshold, batch_size=batch_size)
    return CentricityReport.from_result(method, result)


def run_centricity_eval(cfg: dict, out: str | os.PathLike, seed: int = 0, profile: str = "desk") -> RunManifest:
    man = _start("eval-centricity", cfg, out, seed, profile,
                 {"checkpoint": cfg["checkpoint"], "dataset": cfg["dataset"]})
    t0 = time.perf_counter()
    encoder, method = _encoder_from_source(cfg, seed)
    report = centricity_report(encoder, read_dataset(cfg["dataset"]), method,
                               cfg["threshold"], cfg["batch_size"])
    write_json(man.add("centricity.json"), report.to_json())
    man.timings["centricity"] = time.perf_counter() - t0
    man.write()
    return man


def _env_for(demos_dir: str | os.PathLike, override: Mapping | None) -> SynthEnv:
    if override is not None:
        return SynthEnv(_synth_config(override, "env"))
    index = read_index(demos_dir)
    return SynthEnv(SynthConfig.from_dict(index["synth_config"]) if "synth_config" in index else SynthConfig())


def bc_results(encoder: Encoder, env: SynthEnv, demos, cfg: Mapping, seed: int, method: str) -> dict:
    protocol = EvalProtocol(cfg["episodes_per_eval"], cfg["eval_every"], cfg["seeds"])
    bc = BCConfig(cfg["epochs"], cfg["batch_size"], cfg["learning_rate"], cfg["hidden"], cfg["layers"])
    result = evaluation_protocol(encoder, env, demos, protocol, bc, base_seed=seed)
    return {**result.to_json(), "method": method}


def run_bc_eval(cfg: dict, out: str | os.PathLike, seed: int = 0, profile: str = "desk") -> RunManifest:
    man = _start("eval-bc", cfg, out, seed, profile,
                 {"checkpoint": cfg["checkpoint"], "demos": cfg["demos"]})
    t0 = time.perf_counter()
    encoder, method = _encoder_from_source(cfg, seed)
    env = _env_for(cfg["demos"], cfg["env"])
    results = bc_results(encoder, env, read_dataset(cfg["demos"]), cfg, seed, method)
    write_json(man.add("bc_results.json"), results)
    man.timings["bc"] = time.perf_counter() - t0
    man.write()
    return man


# ------------------------------------------------------------------- report


def correlation_report(points: list[dict]) -> dict:
    """``points``: ``[{method, centricity_mean, success_rates: [{task, mean, stderr}]}]``.

    Success per method is the mean over its tasks.  Raises
    UndefinedCorrelationError when either axis is constant.
    """
    if len(points) < 2:
        raise ConfigError(f"need at least 2 method points, got {len(points)}")
    rows = []
    for p in points:
        success = float(np.mean([r["mean"] for r in p["success_rates"]]))
        rows.append({**p, "success_mean": success})
    r = pearson_correlation([p["centricity_mean"] for p in rows], [p["success_mean"] for p in rows])
    return {"schema": CORRELATION_SCHEMA, "points": rows, "pearson_r": r, "n_points": len(rows)}


def scatter_plot(report: dict, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4.5, 3.5))
    for p in report["points"]:
        ax.scatter(p["centricity_mean"], p["success_mean"], s=40)
        ax.annotate(p["method"], (p["centricity_mean"], p["success_mean"]),
                    textcoords="offset points", xytext=(4, 4), fontsize=8)
    ax.set_xlabel("manipulation centricity")
    ax.set_ylabel("success rate")
    ax.set_title(f"R = {report['pearson_r']:.2f}")
    fig.tight_layout()
    # fixed metadata keeps the file byte-stable across runs
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def run_report(cfg: dict, out: str | os.PathLike, seed: int = 0, profile: str = "desk") -> RunManifest:
    inputs = {}
    for i, item in enumerate(cfg["inputs"]):
        inputs[f"inputs[{i}].centricity"] = item["centricity"]
        for j, p in enumerate(item["bc"] if isinstance(item["bc"], list) else [item["bc"]]):
            inputs[f"inputs[{i}].bc[{j}]"] = p
    man = _start("report", cfg, out, seed, profile, inputs)
    points = []
    for item in cfg["inputs"]:
        cent = json.loads(Path(item["centricity"]).read_text())
        bcs = item["bc"] if isinstance(item["bc"], list) else [item["bc"]]
        rates = []
        for p in bcs:
            res = ProtocolResult.from_json(json.loads(Path(p).read_text()))
            rates.append({"task": res.task, "mean": res.mean, "stderr": res.stderr})
        points.append({"method": item.get("method") or cent["method"],
                       "centricity_mean": cent["centricity_mean"], "success_rates": rates})
    report = correlation_report(points)
    write_json(man.add("correlation.json"), report)
    if cfg["plot"]:
        scatter_plot(report, man.add("scatter.png"))
    man.write()
    return man


# ------------------------------------------------------------------ ablation


def ablation_rows(cfg: Mapping) -> list[tuple[str, dict, dict]]:
    """``(name, pretrain config, metadata)`` per row of the requested axis."""
    base = cfg["pretrain"]
    rows = []
    if cfg["axis"] == "objectives":
        rows.append(("full", copy.deepcopy(base), {"dropped": None}))
        for term in ("dyn", "act", "tcl"):
            c = copy.deepcopy(base)
            c["losses"] = {**base["losses"], term: False}
            rows.append((f"w/o {term}", c, {"dropped": term}))
    elif cfg["axis"] == "chunk_length":
        for l in cfg["chunk_lengths"]:
            c = copy.deepcopy(base)
            c["chunk_length"] = l
            rows.append((f"l={l}", c, {"chunk_length": l}))
    else:
        for b in cfg["backbones"]:
            c = copy.deepcopy(base)
            c["backbone"] = b
            if b != "tiny":
                c["pixel_mean"] = None
            rows.append((f"backbone={b}", c, {"backbone": b}))
    return rows


def ablation_table_markdown(table: dict) -> str:
    lines = [f"| {table['axis']} | centricity (median) | success (mean) | complete |",
             "|---|---|---|---|"]
    for row in table["rows"]:
        c = "n/a" if row["centricity_median"] is None else f"{row['centricity_median']:.4f}"
        s = "n/a" if row["success_mean"] is None else f"{row['success_mean']:.3f}"
        lines.append(f"| {row['name']} | {c} | {s} | {'yes' if row['complete'] else 'INCOMPLETE'} |")
    return "\n".join(lines) + "\n"


def run_ablation(cfg: dict, out: str | os.PathLike, seed: int = 0, profile: str = "desk") -> RunManifest:
    """pretrain -> centricity -> BC for every (row, seed) cell of one axis.

    Cells that fail are recorded with their error; the table is then marked
    incomplete and the run raises after writing it.
    """
    man = _start("ablate", cfg, out, seed, profile,
                 {"dataset": cfg["dataset"], "eval_dataset": cfg["eval_dataset"], "demos": cfg["demos"]})
    pre = cfg["pretrain"]
    rules = FilterRules(**pre["filter"])
    train = _load_filtered(cfg["dataset"], rules)
    eval_set = read_dataset(cfg["eval_dataset"])
    demos = read_dataset(cfg["demos"]) if cfg["evaluate_bc"] else None
    env = _env_for(cfg["demos"], cfg["env"]) if cfg["evaluate_bc"] else None
    rows = []
    t0 = time.perf_counter()
    for name, row_cfg, meta in ablation_rows(cfg):
        spec = ChunkSpec(row_cfg["chunk_length"], train[0].state_dim, train[0].action_dim)
        meta = {**meta, "chunk_dim": spec.dim, "losses": row_cfg["losses"]}
        cells = []
        for s in cfg["seeds"]:
            slug = name.replace("/", "").replace(" ", "_").replace("=", "")
            cell_dir = man.out_dir / "cells" / slug / f"seed_{s}"
            cell = {"seed": s, "status": "ok", "centricity": None, "success_mean": None}
            t_cell = time.perf_counter()
            try:
                result = pretrain_from_config({**row_cfg, "dataset": cfg["dataset"]}, s, None, dataset=train)
                cell_dir.mkdir(parents=True, exist_ok=True)
                save_checkpoint(cell_dir / "final.pt", result.encoder, result.projector, result.actor,
                                spec, {"step": row_cfg["steps"]})
                man.add(cell_dir / "final.pt")
                rep = centricity_report(result.encoder, eval_set, name, cfg["threshold"])
                write_json(man.add(cell_dir / "centricity.json"), rep.to_json())
                cell["centricity"] = rep.centricity_mean
                cell["final_loss"] = result.history[-1]["total"]
                if cfg["evaluate_bc"]:
                    res = bc_results(result.encoder, env, demos, cfg["bc"], s, name)
                    write_json(man.add(cell_dir / "bc_results.json"), res)
                    cell["success_mean"] = res["mean"]
            except Exception as exc:  # recorded per cell; the table is marked incomplete
                log.exception("cell %s seed %s failed", name, s)
                cell["status"] = f"failed: {type(exc).__name__}: {exc}"
            # timings live in the manifest so ablation.json stays byte-stable
            man.timings[f"cells/{slug}/seed_{s}"] = time.perf_counter() - t_cell
            cells.append(cell)
        ok = [c for c in cells if c["status"] == "ok"]
        cents = [c["centricity"] for c in ok]
        succ = [c["success_mean"] for c in ok if c["success_mean"] is not None]
        rows.append({
            "name": name,
            "metadata": meta,
            "cells": cells,
            "centricity_median": float(np.median(cents)) if cents else None,
            "centricity_mean": float(np.mean(cents)) if cents else None,
            "success_mean": float(np.mean(succ)) if succ else None,
            "complete": len(ok) == len(cells),
        })
    man.timings["ablation"] = time.perf_counter() - t0
    table = {"schema": ABLATION_SCHEMA, "axis": cfg["axis"], "seeds": list(cfg["seeds"]),
             "rows": rows, "complete": all(r["complete"] for r in rows)}
    write_json(man.add("ablation.json"), table)
    man.add("ablation.md").write_text(ablation_table_markdown(table))
    man.write()
    if not table["complete"]:
        bad = [r["name"] for r in rows if not r["complete"]]
        raise RuntimeError(f"ablation incomplete; failed rows: {bad}")
    return man


RUNNERS: dict[str, Callable[..., RunManifest]] = {
    "gen-synth": run_gen_synth,
    "pretrain": run_pretraining,
    "eval-centricity": run_centricity_eval,
    "eval-bc": run_bc_eval,
    "ablate": run_ablation,
    "report": run_report,
}
