"""Experiment runner: config handling, seeding, metrics CSV, manifests.

Subcommands: input-select, mask-learn, augment-learn, bound-check, fed-sim,
sweep.  Configuration is a single JSON object; --set overrides values by
dotted path.  Exit codes: 0 success, 1 validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import os
import sys
import time

import numpy as np

from . import __version__, bound, data, federated, hyper, partition, training
from .rng import substream
from .training import ConfigError


# ---------------------------------------------------------------------------
# configuration

DEFAULTS = {
    "input-select": {
        "seed": 0,
        "data": {"source": "input-selection", "n_train": 1000, "n_test": 1000,
                 "n_features": 30, "n_informative": 15},
        "model": {"hidden": [256, 256], "activation": "gelu",
                  "defaults": "init", "scheme": "random"},
        "partition": {"chunks": 8, "chunk_ratios": None, "param_ratios": None},
        "training": {"iterations": 10000, "batch_size": 256, "lr": 0.001,
                     "hyper_lr": 0.001, "weight_decay": 0.0003,
                     "wd_exponent": 1.0, "eval_interval": 500,
                     "lr_schedule": "constant", "select_best_lml": True},
        "mask_k": [0, 5, 10, 15, 20, 25, 30],
    },
    "mask-learn": {
        "seed": 0,
        "data": {"source": "input-selection", "n_train": 1000, "n_test": 1000,
                 "n_features": 30, "n_informative": 15},
        "model": {"hidden": [256, 256], "activation": "gelu",
                  "defaults": "init", "scheme": "random"},
        "partition": {"chunks": 4, "chunk_ratios": None, "param_ratios": None},
        "training": {"iterations": 30000, "batch_size": 256, "lr": 0.001,
                     "hyper_lr": 0.001, "weight_decay": 0.0003,
                     "wd_exponent": 1.0, "eval_interval": 500,
                     "lr_schedule": "constant", "select_best_lml": False},
        "hyper": {"temperature": 0.5, "mask_init": 0.0},
    },
    "augment-learn": {
        "seed": 0,
        "data": {"source": "glyphs", "n_train": 1250, "n_test": 1000,
                 "image_size": 16, "rotated": True, "noise": 0.08,
                 "images": None, "labels": None, "test_images": None,
                 "test_labels": None},
        "model": {"hidden": [128, 128], "activation": "gelu",
                  "defaults": "init", "scheme": "random"},
        "partition": {"chunks": 3, "chunk_ratios": [0.8, 0.1, 0.1],
                      "param_ratios": [0.8, 0.1, 0.1]},
        "training": {"iterations": 4000, "batch_size": 128, "lr": 0.001,
                     "hyper_lr": 0.01, "weight_decay": 0.0, "wd_exponent": 1.0,
                     "eval_interval": 250, "lr_schedule": "constant",
                     "select_best_lml": False},
        "hyper": {"n_aug_samples": 20, "affine_init": 0.0, "learn_affine": True},
    },
    "bound-check": {
        "seed": 0,
        "n_datasets": 100,
        "max_chunks": 5,
        "max_flips": 20,
        "prior": None,  # null = random per dataset, else [a0, b0]
    },
    "fed-sim": {
        "seed": 0,
        "data": {"source": "glyphs", "n_train": 1250, "n_test": 1000,
                 "image_size": 16, "rotated": False, "noise": 0.08,
                 "images": None, "labels": None, "test_images": None,
                 "test_labels": None},
        "model": {"hidden": [64], "activation": "gelu",
                  "defaults": "init", "scheme": "random"},
        "partition": {"param_ratios": [0.7, 0.2, 0.1]},
        "federated": {"n_clients": 20, "chunk_ratios": [0.7, 0.2, 0.1],
                      "rounds": 200, "local_lr": 0.05, "local_epochs": 1,
                      "local_batch_size": 64, "server_lr": 0.001,
                      "server_hyper_lr": 0.003, "server_opt": "adam",
                      "alpha": 0.1, "eval_interval": 10, "participation": 1.0,
                      "hyper_batch_size": None, "shard_by": "label"},
        "hyper": {"learn_affine": True, "learn_dropout": True,
                  "n_aug_samples": 10, "temperature": 0.5,
                  "dropout_init_keep": 0.9, "affine_init": 0.0},
    },
    "sweep": {
        "seed": 0,
        "base_experiment": "augment-learn",
        "base": {},
        "grid": {"chunk_ratios": [[0.8, 0.2], [0.5, 0.5]],
                 "param_ratios": [[0.8, 0.2], [0.5, 0.5]]},
    },
}


def merge_config(defaults, user, path=""):
    """Deep-merge user config over defaults; unknown keys are rejected."""
    if not isinstance(user, dict):
        raise ConfigError(f"config section {path or '<root>'} must be an object")
    out = copy.deepcopy(defaults)
    for key, value in user.items():
        here = f"{path}.{key}" if path else key
        if key not in defaults:
            raise ConfigError(f"unknown config key {here!r}")
        if isinstance(defaults[key], dict) and defaults[key]:
            out[key] = merge_config(defaults[key], value, here)
        else:
            out[key] = copy.deepcopy(value)
    return out


def apply_override(config, dotted, raw):
    """Set config[dotted.path] = parsed value; path must already exist."""
    keys = dotted.split(".")
    node = config
    for key in keys[:-1]:
        if not isinstance(node, dict) or key not in node:
            raise ConfigError(f"unknown config path {dotted!r}")
        node = node[key]
    if not isinstance(node, dict) or keys[-1] not in node:
        raise ConfigError(f"unknown config path {dotted!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node[keys[-1]] = value


def write_atomic(path, text):
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def write_csv(path, rows, fieldnames=None):
    if fieldnames is None:
        fieldnames = list(rows[0].keys())
    tmp = f"{path}.tmp"
    with open(tmp, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(row.get(k, "")) for k in fieldnames})
    os.replace(tmp, path)


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.12g}"
    return v


# ---------------------------------------------------------------------------
# shared experiment plumbing

def build_partition_spec(part_cfg, default_chunks=None):
    chunks = part_cfg.get("chunks", default_chunks)
    chunk_ratios = part_cfg.get("chunk_ratios")
    param_ratios = part_cfg.get("param_ratios")
    if chunk_ratios is None and chunks is not None:
        chunk_ratios = [1.0 / chunks] * chunks
    if chunk_ratios is None:
        raise ConfigError("partition config needs 'chunks' or 'chunk_ratios'")
    if param_ratios is None:
        param_ratios = list(chunk_ratios)
    return partition.PartitionSpec(len(chunk_ratios), tuple(param_ratios),
                                   tuple(chunk_ratios))


def load_tabular(cfg, seed):
    rng = substream(seed, "data")
    train = data.gen_input_selection(cfg["n_train"], rng, cfg["n_informative"],
                                     cfg["n_features"])
    test = data.gen_input_selection(cfg["n_test"], rng, cfg["n_informative"],
                                    cfg["n_features"])
    return train, test


def load_images(cfg, seed):
    rng = substream(seed, "data")
    if cfg["source"] == "idx":
        for key in ("images", "labels", "test_images", "test_labels"):
            if not cfg.get(key):
                raise ConfigError(f"idx data source requires the {key!r} path")
        train = data.ImageDataset(
            data.idx_to_images(data.parse_idx(open(cfg["images"], "rb").read())),
            data.idx_to_labels(data.parse_idx(open(cfg["labels"], "rb").read())))
        test = data.ImageDataset(
            data.idx_to_images(data.parse_idx(open(cfg["test_images"], "rb").read())),
            data.idx_to_labels(data.parse_idx(open(cfg["test_labels"], "rb").read())))
    elif cfg["source"] == "glyphs":
        train = data.gen_glyphs(cfg["n_train"], rng, cfg["image_size"], cfg["noise"])
        test = data.gen_glyphs(cfg["n_test"], rng, cfg["image_size"], cfg["noise"])
    else:
        raise ConfigError(f"unknown image data source {cfg['source']!r}")
    if cfg.get("rotated"):
        train = data.rotate_fixed(train, rng)
        test = data.rotate_fixed(test, rng)
    return train, test


def build_training_config(spec, tc, seed):
    return training.TrainingConfig(
        spec=spec, iterations=tc["iterations"], batch_size=tc["batch_size"],
        lr=tc["lr"], hyper_lr=tc["hyper_lr"], weight_decay=tc["weight_decay"],
        wd_exponent=tc["wd_exponent"], lr_schedule=tc["lr_schedule"],
        eval_interval=tc["eval_interval"], select_best_lml=tc["select_best_lml"],
        seed=seed)


def require_hyper_chunks(spec):
    if spec.n_partitions < 2:
        raise ConfigError("hyperparameter optimization requires >= 2 chunks")


# ---------------------------------------------------------------------------
# experiments

def run_input_select(config, out_dir):
    seed = config["seed"]
    spec = build_partition_spec(config["partition"])
    train, test = load_tabular(config["data"], seed)
    rows, per_k = [], []
    for k_mask in config["mask_k"]:
        model = training.ModelSpec(
            in_dim=config["data"]["n_features"], hidden=tuple(config["model"]["hidden"]),
            n_classes=2, activation=config["model"]["activation"],
            input_mask=hyper.fixed_mask(config["data"]["n_features"], k_mask))
        params = training.init_mlp_params(
            model, spec, substream(seed, "partition"),
            defaults=config["model"]["defaults"], scheme=config["model"]["scheme"])
        chunks = data.chunk_split(train.features, train.labels, spec.chunk_ratios,
                                  substream(seed, "data", 1))
        trainer = training.Trainer(params, chunks, model,
                                   build_training_config(spec, config["training"], seed),
                                   hp=None, test_data=(test.features, test.labels))
        run_rows, summary = trainer.train()
        for row in run_rows:
            rows.append({"k": k_mask, **row})
        per_k.append({"k": k_mask, "lml": summary["lml"],
                      "train_acc": summary["train_acc"],
                      "train_loglik": summary["train_loglik"],
                      "test_acc": summary["test_acc"],
                      "test_loglik": summary["test_loglik"]})
    best = max(per_k, key=lambda r: r["lml"])
    summary = {"per_k": per_k, "argmax_k": best["k"], "argmax_lml": best["lml"]}
    write_csv(os.path.join(out_dir, "metrics.csv"), rows)
    return summary


def run_mask_learn(config, out_dir):
    seed = config["seed"]
    spec = build_partition_spec(config["partition"])
    require_hyper_chunks(spec)
    train, test = load_tabular(config["data"], seed)
    d_in = config["data"]["n_features"]
    model = training.ModelSpec(in_dim=d_in, hidden=tuple(config["model"]["hidden"]),
                               n_classes=2, activation=config["model"]["activation"])
    hp = hyper.HyperParams(
        mask_logits=np.full(d_in, float(config["hyper"]["mask_init"])),
        temperature=config["hyper"]["temperature"])
    params = training.init_mlp_params(
        model, spec, substream(seed, "partition"),
        defaults=config["model"]["defaults"], scheme=config["model"]["scheme"])
    chunks = data.chunk_split(train.features, train.labels, spec.chunk_ratios,
                              substream(seed, "data", 1))
    trainer = training.Trainer(params, chunks, model,
                               build_training_config(spec, config["training"], seed),
                               hp=hp, test_data=(test.features, test.labels))
    rows, summary = trainer.train()
    probs = 1.0 / (1.0 + np.exp(-trainer.hp.mask_logits))
    n_inf = config["data"]["n_informative"]
    summary["mean_prob_informative"] = float(probs[:n_inf].mean())
    summary["mean_prob_spurious"] = float(probs[n_inf:].mean())
    write_csv(os.path.join(out_dir, "metrics.csv"), rows)
    partition.save_checkpoint(os.path.join(out_dir, "model.pnet"), trainer.params)
    return summary


def run_augment_learn(config, out_dir):
    seed = config["seed"]
    spec = build_partition_spec(config["partition"])
    train, test = load_images(config["data"], seed)
    size = train.images.shape[1]
    model = training.ModelSpec(
        in_dim=size * size, hidden=tuple(config["model"]["hidden"]),
        n_classes=int(train.labels.max()) + 1,
        activation=config["model"]["activation"], image_hw=(size, size))
    hp = None
    if config["hyper"]["learn_affine"]:
        require_hyper_chunks(spec)
        hp = hyper.HyperParams(
            affine_ranges=np.full(6, float(config["hyper"]["affine_init"])),
            n_aug_samples=config["hyper"]["n_aug_samples"])
    params = training.init_mlp_params(
        model, spec, substream(seed, "partition"),
        defaults=config["model"]["defaults"], scheme=config["model"]["scheme"])
    chunks = data.chunk_split(train.images, train.labels, spec.chunk_ratios,
                              substream(seed, "data", 1))
    trainer = training.Trainer(params, chunks, model,
                               build_training_config(spec, config["training"], seed),
                               hp=hp, test_data=(test.images, test.labels))
    rows, summary = trainer.train()
    if trainer.hp is not None:
        summary["theta_rot_abs"] = float(abs(trainer.hp.affine_ranges[0]))
    write_csv(os.path.join(out_dir, "metrics.csv"), rows)
    partition.save_checkpoint(os.path.join(out_dir, "model.pnet"), trainer.params)
    return summary


def run_bound_check(config, out_dir):
    reports = list(bound.sweep(config["seed"], config["n_datasets"],
                               config["max_chunks"], config["max_flips"],
                               config["prior"]))
    worst_gap = min(r["gap"] for r in reports)
    max_disc = max(r["discrepancy"] for r in reports)
    for r in reports:
        print(f"lhs={r['lhs']:+.9f} rhs={r['rhs']:+.9f} gap={r['gap']:+.9f} "
              f"gap_via_kl={r['gap_via_kl']:+.9f}")
    print(f"max |gap - gap_via_kl| = {max_disc:.3e}; min gap = {worst_gap:.3e}")
    rows = [{"lhs": r["lhs"], "rhs": r["rhs"], "gap": r["gap"],
             "gap_via_kl": r["gap_via_kl"], "discrepancy": r["discrepancy"]}
            for r in reports]
    write_csv(os.path.join(out_dir, "metrics.csv"), rows)
    if worst_gap < -1e-12:
        raise RuntimeError(f"bound violated: gap {worst_gap} < -1e-12")
    return {"n_datasets": len(reports), "min_gap": worst_gap,
            "max_discrepancy": max_disc}


def run_fed_sim(config, out_dir):
    seed = config["seed"]
    fc = config["federated"]
    train, test = load_images(config["data"], seed)
    size = train.images.shape[1]
    cfg = federated.FedConfig(
        n_clients=fc["n_clients"], chunk_ratios=tuple(fc["chunk_ratios"]),
        rounds=fc["rounds"], local_lr=fc["local_lr"],
        local_epochs=fc["local_epochs"], local_batch_size=fc["local_batch_size"],
        server_lr=fc["server_lr"], server_hyper_lr=fc["server_hyper_lr"],
        server_opt=fc["server_opt"], alpha=fc["alpha"],
        eval_interval=fc["eval_interval"], participation=fc["participation"],
        hyper_batch_size=fc["hyper_batch_size"], seed=seed)
    spec = partition.PartitionSpec(cfg.n_chunks,
                                   tuple(config["partition"]["param_ratios"]),
                                   tuple(fc["chunk_ratios"]))
    model = training.ModelSpec(
        in_dim=size * size, hidden=tuple(config["model"]["hidden"]),
        n_classes=int(train.labels.max()) + 1,
        activation=config["model"]["activation"], image_hw=(size, size))
    hc = config["hyper"]
    kw = {"temperature": hc["temperature"]}
    if hc["learn_affine"]:
        kw["affine_ranges"] = np.full(6, float(hc["affine_init"]))
        kw["n_aug_samples"] = hc["n_aug_samples"]
    if hc["learn_dropout"]:
        keep = float(hc["dropout_init_keep"])
        logit = float(np.log(keep / (1.0 - keep)))
        kw["dropout_logits"] = [np.full(h, logit) for h in config["model"]["hidden"]]
    hp = hyper.HyperParams(**kw) if (hc["learn_affine"] or hc["learn_dropout"]) else None
    if hp is not None and cfg.n_chunks < 2:
        raise ConfigError("hyperparameter optimization requires >= 2 chunks")

    rng_shard = substream(seed, "federated")
    if fc["shard_by"] == "rotation":
        clients = federated.shard_rotation_bins(train, cfg.n_clients, cfg.alpha,
                                                rng_shard)
    elif fc["shard_by"] == "label":
        clients = federated.shard_label_skew(train.images, train.labels,
                                             cfg.n_clients, cfg.alpha, rng_shard)
    else:
        raise ConfigError(f"unknown shard_by {fc['shard_by']!r}")
    federated.assign_chunks(clients, cfg.chunk_ratios, rng_shard)
    params = training.init_mlp_params(
        model, spec, substream(seed, "partition"),
        defaults=config["model"]["defaults"], scheme=config["model"]["scheme"])
    state = federated.ServerState(params, hp, cfg)
    rows = federated.run_federated(state, clients, model,
                                   (test.images, test.labels))
    write_csv(os.path.join(out_dir, "metrics.csv"), rows)
    partition.save_checkpoint(os.path.join(out_dir, "model.pnet"), state.params)
    summary = dict(rows[-1]) if rows else {}
    summary["expected_upload_fraction"] = federated.expected_upload_fraction(
        cfg.chunk_ratios, spec.param_ratios)
    return summary


def run_sweep(config, out_dir):
    kind = config["base_experiment"]
    if kind not in ("augment-learn", "mask-learn", "input-select"):
        raise ConfigError(f"sweep cannot wrap experiment {kind!r}")
    base = merge_config(DEFAULTS[kind], config["base"])
    base["seed"] = config["seed"]
    rows = []
    for chunk_ratios in config["grid"]["chunk_ratios"]:
        for param_ratios in config["grid"]["param_ratios"]:
            if len(chunk_ratios) != len(param_ratios):
                continue
            cell = copy.deepcopy(base)
            cell["partition"]["chunks"] = len(chunk_ratios)
            cell["partition"]["chunk_ratios"] = list(chunk_ratios)
            cell["partition"]["param_ratios"] = list(param_ratios)
            cell_dir = os.path.join(
                out_dir, "cell_" + "-".join(f"{u:g}" for u in chunk_ratios)
                + "_" + "-".join(f"{p:g}" for p in param_ratios))
            os.makedirs(cell_dir, exist_ok=True)
            summary = EXPERIMENTS[kind](cell, cell_dir)
            rows.append({
                "chunk_ratios": "/".join(f"{u:g}" for u in chunk_ratios),
                "param_ratios": "/".join(f"{p:g}" for p in param_ratios),
                "test_acc": summary.get("test_acc", ""),
                "lml": summary.get("lml", summary.get("argmax_lml", "")),
            })
    write_csv(os.path.join(out_dir, "sweep.csv"), rows)
    return {"cells": len(rows)}


EXPERIMENTS = {
    "input-select": run_input_select,
    "mask-learn": run_mask_learn,
    "augment-learn": run_augment_learn,
    "bound-check": run_bound_check,
    "fed-sim": run_fed_sim,
    "sweep": run_sweep,
}


# ---------------------------------------------------------------------------
# entry point

def resolve_config(kind, config_path=None, seed=None, overrides=()):
    if kind not in DEFAULTS:
        raise ConfigError(f"unknown experiment {kind!r}")
    user = {}
    if config_path:
        with open(config_path) as fh:
            user = json.load(fh)
    config = merge_config(DEFAULTS[kind], user)
    for dotted, raw in overrides:
        apply_override(config, dotted, raw)
    if seed is not None:
        config["seed"] = seed
    return config


def run_experiment(kind, config, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    started = time.time()
    summary = EXPERIMENTS[kind](config, out_dir)
    manifest = {
        "experiment": kind,
        "config": config,
        "seed": config["seed"],
        "version": __version__,
        "started": started,
        "finished": time.time(),
        "summary": summary,
    }
    write_atomic(os.path.join(out_dir, "manifest.json"),
                 json.dumps(manifest, indent=2, sort_keys=True))
    return summary


def _parse_set(values):
    pairs = []
    for item in values or ():
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, _, raw = item.partition("=")
        pairs.append((key, raw))
    return pairs


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="partnet",
                                     description="partitioned-network experiments")
    sub = parser.add_subparsers(dest="experiment", required=True)
    for kind in EXPERIMENTS:
        p = sub.add_parser(kind)
        p.add_argument("--config", default=None, help="JSON config path")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config value by dotted path")
    args = parser.parse_args(argv)
    try:
        config = resolve_config(args.experiment, args.config, args.seed,
                                _parse_set(args.set))
    except (ConfigError, OSError, json.JSONDecodeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    out_dir = args.out or os.path.join("runs", args.experiment)
    try:
        summary = run_experiment(args.experiment, config, out_dir)
    except (ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - runtime failures exit 2
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2
    print(json.dumps(summary, indent=2, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
