"""Run configuration and experiment orchestration.

A run configuration is a nested JSON document in which every field has
a default; file values merge over the defaults and CLI flags merge over
the file. Unknown keys are rejected. The effective configuration is
echoed into every artifact a run produces.
"""

import dataclasses
import json
import os
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import metrics as metrics_mod
from .contrast import AugmentSpec, OBJECTIVES
from .errors import ConfigError
from .segnet import ModelConfig, SegModel, checkpoint_hash, load_checkpoint, save_checkpoint
from .synthvid import DomainSpec, default_source_spec, default_target_spec, \
    generate_dataset, read_dataset
from .trainer import TrainConfig, adapt_sfda, train_source

METHOD_ORDER = ("selftrain", "duplicate", "temporal", "spatial", "naive", "stpl")


def default_run_config():
    return {
        "data": {
            "num_train": 60,
            "num_eval": 20,
            "frames": 2,
            "height": 64,
            "width": 64,
            "classes": 4,
            "source_seed": 1000,
            "target_seed": 2000,
        },
        "source_domain": dataclasses.asdict(default_source_spec()),
        "target_domain": dataclasses.asdict(default_target_spec()),
        "model": dataclasses.asdict(ModelConfig()),
        "train_source": {
            "iterations": 800,
            "lr0": 1e-3,
            "momentum": 0.9,
            "poly_power": 0.9,
            "seed": 0,
        },
        "adapt": {
            "iterations": 1500,
            "lr0": 1e-3,
            "momentum": 0.9,
            "poly_power": 0.9,
            "seed": 0,
            "objective": "stpl",
            "tau": 0.07,
            "k": 0.7,
            "cap_m": 256,
        },
        "augment": dataclasses.asdict(AugmentSpec()),
        "metrics": {
            "per_class": 500,
            "knn_ks": [1, 2, 5, 10, 20, 50],
            "distance": "euclidean",
        },
    }


def _merge(base, update, path=""):
    for key, value in update.items():
        if key not in base:
            raise ConfigError(f"unknown config key {path + key!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {path + key!r} must be a mapping")
            _merge(base[key], value, path=path + key + ".")
        else:
            base[key] = value
    return base


def load_run_config(config_path=None, overrides=None):
    config = default_run_config()
    if config_path is not None:
        with open(config_path) as fh:
            _merge(config, json.load(fh))
    if overrides:
        _merge(config, overrides)
    return config


def domain_spec_from(config, domain):
    section = dict(config[f"{domain}_domain"])
    section["palette_shift"] = tuple(tuple(c) for c in section["palette_shift"])
    return DomainSpec(**section)


def model_config_from(config):
    section = dict(config["model"])
    section["widths"] = tuple(section["widths"])
    return ModelConfig(**section)


def train_config_from(config, section_name, **extra):
    section = dict(config[section_name])
    section.update(extra)
    augment = AugmentSpec(**config["augment"])
    if section_name == "train_source":
        return TrainConfig(augment=augment, fusion=config["model"]["fusion"], **section)
    return TrainConfig(augment=augment, fusion=config["model"]["fusion"], **section)


def generate_split(out_dir, domain, base_seed, count, config, force=False):
    out_dir = Path(out_dir)
    if out_dir.exists() and any(out_dir.iterdir()) and not force:
        raise ConfigError(
            f"output directory {out_dir} is not empty (use --force to overwrite)")
    data = config["data"]
    spec = domain_spec_from(config, domain)
    return generate_dataset(
        out_dir, domain=domain, seed=base_seed, spec=spec, num_sequences=count,
        num_frames=data["frames"], height=data["height"], width=data["width"],
        classes=data["classes"])


def ensure_benchmark_data(workdir, config, force=False):
    """Generate the four dataset splits under workdir/data if missing."""
    data_dir = Path(workdir) / "data"
    layout = {
        "source_train": ("source", config["data"]["source_seed"], config["data"]["num_train"]),
        "source_eval": ("source", config["data"]["source_seed"] + 1, config["data"]["num_eval"]),
        "target_train": ("target", config["data"]["target_seed"], config["data"]["num_train"]),
        "target_eval": ("target", config["data"]["target_seed"] + 1, config["data"]["num_eval"]),
    }
    paths = {}
    for name, (domain, seed, count) in layout.items():
        split_dir = data_dir / name
        if force or not (split_dir / "manifest.json").exists():
            generate_split(split_dir, domain, seed, count, config, force=True)
        paths[name] = split_dir
    return paths


def train_source_to(ckpt_dir, data_dir, config, seed):
    """Train a fresh source model on a labeled dataset directory."""
    model_cfg = model_config_from(config)
    train_cfg = train_config_from(config, "train_source", seed=seed, objective="selftrain")
    model = SegModel.initialize(model_cfg, seed=seed)
    _, sequences = read_dataset(data_dir)
    model, log = train_source(model, sequences, train_cfg)
    ckpt_dir = Path(ckpt_dir)
    save_checkpoint(model, ckpt_dir)
    log.write(ckpt_dir / "loss.csv",
              config_echo=json.dumps({"seed": seed, "config": config}, sort_keys=True))
    return ckpt_dir


def run_adaptation(workdir, ckpt_dir, target_dir, method, config, seed):
    train_cfg = train_config_from(config, "adapt", seed=seed, objective=method)
    model, log = adapt_sfda(ckpt_dir, target_dir, train_cfg)
    out_dir = Path(workdir) / f"seed{seed}" / f"adapt_{method}"
    save_checkpoint(model, out_dir)
    log.write(out_dir / "loss.csv",
              config_echo=json.dumps({"seed": seed, "method": method, "config": config},
                                     sort_keys=True))
    return out_dir


def run_eval(ckpt_dir, eval_dir, config, seed=0):
    model = load_checkpoint(ckpt_dir)
    _, sequences = read_dataset(eval_dir)
    return metrics_mod.evaluate_model(model, sequences, seed=seed,
                                      config_echo={"seed": seed, "config": config})


def _mean_std(values):
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())


def run_benchmark(workdir, seeds, methods=METHOD_ORDER, config=None, force_data=False):
    """Source training once per seed, adaptation per method, evaluation of all.

    Returns the table structure that cmd_reproduce renders; it is also
    written to workdir as metrics.json / table.csv / table.md.
    """
    config = config if config is not None else default_run_config()
    for method in methods:
        if method not in OBJECTIVES:
            raise ConfigError(f"unknown method {method!r}")
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    data_paths = ensure_benchmark_data(workdir, config, force=force_data)

    source_ckpts = {}
    source_hashes = {}
    for seed in seeds:
        ckpt = train_source_to(workdir / f"seed{seed}" / "source_ckpt",
                               data_paths["source_train"], config, seed)
        source_ckpts[seed] = ckpt
        source_hashes[seed] = checkpoint_hash(ckpt)

    jobs = [(seed, method) for seed in seeds for method in methods]

    def one_job(job):
        seed, method = job
        adapted = run_adaptation(workdir, source_ckpts[seed], data_paths["target_train"],
                                 method, config, seed)
        report = run_eval(adapted, data_paths["target_eval"], config, seed=seed)
        return job, report

    workers = int(os.environ.get("STPL_THREADS", "1") or "1")
    results = {}
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            for job, report in pool.map(one_job, jobs):
                results[job] = report
    else:
        for job in jobs:
            job_key, report = one_job(job)
            results[job_key] = report

    rows = []
    source_reports = {seed: run_eval(source_ckpts[seed], data_paths["target_eval"],
                                     config, seed=seed) for seed in seeds}
    miou_mean, miou_std = _mean_std([source_reports[s].miou for s in seeds])
    tc_mean, tc_std = _mean_std([source_reports[s].temporal_consistency for s in seeds])
    rows.append({
        "method": "source-only",
        "miou_by_seed": [source_reports[s].miou for s in seeds],
        "miou_mean": miou_mean, "miou_std": miou_std,
        "tc_by_seed": [source_reports[s].temporal_consistency for s in seeds],
        "tc_mean": tc_mean, "tc_std": tc_std,
        "failed": False,
    })
    for method in methods:
        reports = [results[(seed, method)] for seed in seeds]
        miou_mean, miou_std = _mean_std([r.miou for r in reports])
        tc_mean, tc_std = _mean_std([r.temporal_consistency for r in reports])
        rows.append({
            "method": method,
            "miou_by_seed": [r.miou for r in reports],
            "miou_mean": miou_mean, "miou_std": miou_std,
            "tc_by_seed": [r.temporal_consistency for r in reports],
            "tc_mean": tc_mean, "tc_std": tc_std,
            "failed": False,
        })

    table = {
        "seeds": list(seeds),
        "source_checkpoint_hashes": {str(s): source_hashes[s] for s in seeds},
        "rows": rows,
        "config": config,
    }
    _write_table(workdir, table)
    return table


def _write_table(workdir, table):
    workdir = Path(workdir)
    with open(workdir / "metrics.json", "w") as fh:
        json.dump(table, fh, indent=2, sort_keys=True)
    seeds = table["seeds"]
    hashes = table["source_checkpoint_hashes"]
    with open(workdir / "table.csv", "w", newline="") as fh:
        fh.write("method,miou_mean,miou_std,tc_mean,tc_std,source_checkpoint\n")
        for row in table["rows"]:
            src = ";".join(hashes[str(s)] for s in seeds)
            fh.write(f"{row['method']},{row['miou_mean']:.6f},{row['miou_std']:.6f},"
                     f"{row['tc_mean']:.6f},{row['tc_std']:.6f},{src}\n")
    lines = ["| method | target mIoU | temporal consistency (%) |",
             "| --- | --- | --- |"]
    for row in table["rows"]:
        lines.append(f"| {row['method']} | {row['miou_mean']:.4f} ± {row['miou_std']:.4f} "
                     f"| {row['tc_mean']:.2f} ± {row['tc_std']:.2f} |")
    (workdir / "table.md").write_text("\n".join(lines) + "\n")
