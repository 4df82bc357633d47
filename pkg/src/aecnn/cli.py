"""Command-line entry points.

Subcommands: train, eval, invariance-audit, ablate, lrf-dump. Every machine
output is one JSON object per line tagged with a "type" field; the first
line of each command's output carries "schema": 1. Exit codes: 0 success,
2 validation or input failure, 3 invariance audit failure.

Seeds: one --seed governs a command end to end. Training derives its
synthetic data, its per-epoch shuffling/augmentation, and its weight
initialization from that seed through separate fixed streams, so any
command run twice with the same arguments produces identical bytes.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace

import numpy as np

from . import data as dat
from . import geometry as geo
from . import lrf as lrfmod
from . import neighbors as nb
from .config import (
    ConfigError,
    NetworkConfig,
    TrainConfig,
    load_config,
    save_config,
)
from .network import Model, count_operations, count_parameters
from .nn import CheckpointError, load_checkpoint
from .training import (
    predict_parts,
    train_classifier,
    train_segmenter,
    weights_from_checkpoint,
)

SCHEMA_VERSION = 1
TRAIN_DATA_STREAM = 23
TEST_DATA_STREAM = 24
EVAL_ROTATION_STREAM = 25
AUDIT_CLOUD_STREAM = 26

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_AUDIT_FAILED = 3

ABLATION_VARIANTS = ("edgeconv", "aeconv1", "aeconv3")
ABLATION_SEARCHES = ("knn", "ball")
ABLATION_ANCHORS = ("mean", "max_projection")
ABLATION_KS = (10, 16, 32, 48)


def _emit(obj: dict):
    print(json.dumps(obj))


def _fail(message) -> int:
    print(f"error: {message}", file=sys.stderr)
    return EXIT_VALIDATION


def _fail_config(exc: ConfigError) -> int:
    for problem in exc.problems:
        print(f"config error: {problem}", file=sys.stderr)
    return EXIT_VALIDATION


# ---------------------------------------------------------------------------
# shared plumbing
# ---------------------------------------------------------------------------

def _load_configs(path, args) -> tuple:
    """Config file plus flag overrides -> validated (network, training)."""
    network, training = load_config(path)
    if training is None:
        training = TrainConfig()
    if getattr(args, "variant", None):
        network = replace(network, variant=args.variant)
    updates = {}
    for flag, field_name in [("seed", "seed"), ("setting", "setting"),
                             ("epochs", "epochs"),
                             ("batch_size", "batch_size"),
                             ("early_stop_acc", "early_stop_train_acc"),
                             ("votes", "votes")]:
        v = getattr(args, flag, None)
        if v is not None:
            updates[field_name] = v
    if updates:
        training = replace(training, **updates)
    return network.validated(), training.validated()


def _synth_dataset(kind: str, n_per_class: int, n_points: int, seed: int,
                   stream: int) -> dat.Dataset:
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(stream,)))
    if kind == "segmentation":
        return dat.synth_segmentation(n_per_class, n_points, rng)
    return dat.synth_classification(n_per_class, n_points, rng)


def _resolve_dataset(token: str, n_per_class: int, n_points: int, seed: int,
                     stream: int) -> dat.Dataset:
    """A dataset argument is a file path or a synth-<kind> token."""
    if token == "synth-classification":
        return _synth_dataset("classification", n_per_class, n_points, seed,
                              stream)
    if token == "synth-segmentation":
        return _synth_dataset("segmentation", n_per_class, n_points, seed,
                              stream)
    return dat.load_dataset_bin(token)


def _model_from_checkpoint(args) -> tuple:
    """(model, network_config) for eval-style commands."""
    config_path = args.config
    if config_path is None:
        config_path = os.path.join(os.path.dirname(os.path.abspath(args.checkpoint)),
                                   "config.ini")
    if not os.path.exists(config_path):
        raise FileNotFoundError(
            f"no config at {config_path}; pass --config explicitly"
        )
    network, _ = load_config(config_path)
    network = network.validated()
    model = Model(network, seed=0)
    arrays = load_checkpoint(args.checkpoint)
    model.load_values(weights_from_checkpoint(arrays))
    return model, network


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    try:
        network, training = _load_configs(args.config, args)
    except ConfigError as e:
        return _fail_config(e)
    except OSError as e:
        return _fail(e)

    os.makedirs(args.out_dir, exist_ok=True)
    seg = network.n_parts > 0
    try:
        if args.dataset is not None:
            train_set = dat.load_dataset_bin(args.dataset)
            test_set = (dat.load_dataset_bin(args.eval_dataset)
                        if args.eval_dataset else None)
        else:
            kind = "segmentation" if seg else "classification"
            train_set = _synth_dataset(kind, args.n_per_class,
                                       network.n_points, training.seed,
                                       TRAIN_DATA_STREAM)
            test_set = _synth_dataset(kind, max(1, args.n_per_class // 2),
                                      network.n_points, training.seed,
                                      TEST_DATA_STREAM)
    except (dat.FileFormatError, ValueError, OSError) as e:
        return _fail(e)

    if seg and any(s.part_labels is None for s in train_set):
        return _fail("segmentation model but the dataset has no part labels")

    model = Model(network, seed=training.seed)
    ckpt = os.path.join(args.out_dir, "model.ckpt")
    save_config(os.path.join(args.out_dir, "config.ini"), network, training)
    _emit({"type": "run", "schema": SCHEMA_VERSION, "seed": training.seed,
           "setting": training.setting, "out_dir": args.out_dir})

    def show(stats):
        _emit({"type": "epoch", **stats.to_dict()})

    trainer = train_segmenter if seg else train_classifier
    record = trainer(model, train_set, training, checkpoint_path=ckpt,
                     on_epoch=show)

    if test_set is not None:
        rot_rng = np.random.default_rng(
            np.random.SeedSequence(training.seed, spawn_key=(EVAL_ROTATION_STREAM,))
        )
        if seg:
            preds = predict_parts(model, test_set, training.setting, rot_rng)
            record.final_metrics = dat.evaluate_miou(preds, test_set)
        else:
            record.final_metrics = dat.evaluate_classification(
                model, test_set, training.setting, rot_rng, votes=training.votes
            )

    lines = record.to_lines()
    with open(os.path.join(args.out_dir, "run.jsonl"), "a") as f:
        for line in lines:
            f.write(line + "\n")
    print(lines[-1])
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def cmd_eval(args) -> int:
    try:
        model, network = _model_from_checkpoint(args)
        test_set = _resolve_dataset(args.dataset, args.n_per_class,
                                    network.n_points, args.seed,
                                    TEST_DATA_STREAM)
    except ConfigError as e:
        return _fail_config(e)
    except (CheckpointError, dat.FileFormatError, ValueError, OSError) as e:
        return _fail(e)

    rng = np.random.default_rng(
        np.random.SeedSequence(args.seed, spawn_key=(EVAL_ROTATION_STREAM,))
    )
    if network.n_parts and all(s.part_labels is not None for s in test_set):
        preds = predict_parts(model, test_set, args.setting, rng)
        metrics = dat.evaluate_miou(preds, test_set)
        metrics.setting = args.setting
    else:
        metrics = dat.evaluate_classification(model, test_set, args.setting,
                                              rng, votes=args.votes)
    _emit({"type": "metrics", "schema": SCHEMA_VERSION, **metrics.to_dict()})
    return EXIT_OK


# ---------------------------------------------------------------------------
# invariance audit
# ---------------------------------------------------------------------------

def cmd_invariance_audit(args) -> int:
    try:
        model, network = _model_from_checkpoint(args)
    except ConfigError as e:
        return _fail_config(e)
    except (CheckpointError, ValueError, OSError) as e:
        return _fail(e)

    if args.rotations == 0:
        _emit({"type": "audit", "schema": SCHEMA_VERSION, "rotations": 0,
               "clouds": args.clouds, "warning": "no rotations tested; "
               "vacuous pass", "passed": True})
        return EXIT_OK

    rng = np.random.default_rng(
        np.random.SeedSequence(args.seed, spawn_key=(AUDIT_CLOUD_STREAM,))
    )
    worst = 0.0
    agree = 0
    trials = 0
    for _ in range(args.clouds):
        pts = geo.normalize(
            geo.PointCloud(rng.normal(size=(network.n_points, 3)))
        ).points
        base = model.predict_logits(pts)
        base_label = int(base.argmax())
        for _ in range(args.rotations):
            rot = geo.sample_arbitrary_rotation(rng)
            got = model.predict_logits(pts @ rot.T)
            worst = max(worst, float(np.abs(got - base).max()))
            agree += int(got.argmax()) == base_label
            trials += 1
    agreement = agree / trials
    passed = worst <= args.tolerance
    _emit({"type": "audit", "schema": SCHEMA_VERSION, "clouds": args.clouds,
           "rotations": args.rotations, "max_abs_deviation": worst,
           "argmax_agreement": agreement, "tolerance": args.tolerance,
           "passed": passed})
    return EXIT_OK if passed else EXIT_AUDIT_FAILED


# ---------------------------------------------------------------------------
# ablation grid
# ---------------------------------------------------------------------------

def _parse_csv(text: str, cast=str) -> tuple:
    return tuple(cast(t.strip()) for t in text.split(",") if t.strip())


def cmd_ablate(args) -> int:
    try:
        network, training = _load_configs(args.config, args)
    except ConfigError as e:
        return _fail_config(e)
    except OSError as e:
        return _fail(e)

    variants = _parse_csv(args.variants)
    searches = _parse_csv(args.searches)
    anchors = _parse_csv(args.anchors)
    ks = _parse_csv(args.ks, int)
    seeds = _parse_csv(args.seeds, int)

    os.makedirs(args.out_dir, exist_ok=True)
    out_path = os.path.join(args.out_dir, "ablation.jsonl")
    rows = []
    _emit({"type": "ablation_header", "schema": SCHEMA_VERSION,
           "grid": {"variant": list(variants), "search": list(searches),
                    "anchor": list(anchors), "k": list(ks)},
           "seeds": list(seeds), "setting": training.setting,
           "cells": len(variants) * len(searches) * len(anchors) * len(ks)})

    for variant in variants:
        for search in searches:
            for anchor in anchors:
                for k in ks:
                    cfg = replace(
                        network, variant=variant,
                        sa_first=replace(network.sa_first, search=search,
                                         anchor=anchor, k=k),
                    )
                    try:
                        cfg = cfg.validated()
                    except ConfigError as e:
                        return _fail_config(e)
                    accs = []
                    for seed in seeds:
                        tc = replace(training, seed=seed)
                        train_set = _synth_dataset(
                            "classification", args.n_per_class, cfg.n_points,
                            seed, TRAIN_DATA_STREAM)
                        test_set = _synth_dataset(
                            "classification", max(1, args.n_per_class // 2),
                            cfg.n_points, seed, TEST_DATA_STREAM)
                        model = Model(cfg, seed=seed)
                        train_classifier(model, train_set, tc)
                        rot_rng = np.random.default_rng(
                            np.random.SeedSequence(seed,
                                                   spawn_key=(EVAL_ROTATION_STREAM,))
                        )
                        m = dat.evaluate_classification(
                            model, test_set, tc.setting, rot_rng,
                            votes=tc.votes)
                        accs.append(m.accuracy)
                    row = {
                        "type": "ablation", "variant": variant,
                        "search": search, "anchor": anchor, "k": k,
                        "accuracy_mean": float(np.mean(accs)),
                        "accuracies": accs,
                        "parameters": count_parameters(cfg),
                        "macs_per_sample": count_operations(cfg)["total_macs"],
                    }
                    rows.append(row)
                    _emit(row)

    with open(out_path, "w") as f:
        for row in rows:
            f.write(json.dumps(row) + "\n")
    return EXIT_OK


# ---------------------------------------------------------------------------
# LRF inspection
# ---------------------------------------------------------------------------

def cmd_lrf_dump(args) -> int:
    try:
        cloud = dat.load_xyz(args.cloud)
    except (dat.FileFormatError, OSError) as e:
        return _fail(e)
    pts = cloud.points
    k = min(args.k, pts.shape[0])
    neighbors = nb.knn_points(pts, pts, k)
    counts: dict = {}
    bases = lrfmod.compute_lrf_batch(pts, pts[neighbors], strategy=args.anchor,
                                     counts=counts)
    _emit({"type": "lrf_dump_header", "schema": SCHEMA_VERSION,
           "points": int(pts.shape[0]), "k": int(k), "anchor": args.anchor,
           "degenerate_fallbacks": {key: int(v) for key, v in counts.items()}})
    for i in range(pts.shape[0]):
        rirs = lrfmod.rir_batch(pts[neighbors[i]][None], pts[i][None],
                                bases[i][None])[0]
        _emit({
            "type": "lrf", "index": i, "origin": pts[i].tolist(),
            "basis": bases[i].tolist(),
            "neighbors": neighbors[i].tolist(),
            "rirs": rirs.tolist(),
        })
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="aecnn",
        description="Rotation-invariant point-cloud networks: training, "
                    "evaluation, invariance audits, ablations, and frame "
                    "inspection.",
    )
    sub = p.add_subparsers(dest="command", required=True)

    def add_eval_flags(sp, with_votes=True):
        sp.add_argument("--config", default=None,
                        help="config INI (default: config.ini next to the checkpoint)")
        sp.add_argument("--seed", type=int, default=0)
        if with_votes:
            sp.add_argument("--setting", default="ARAR",
                            choices=["YY", "YAR", "ARAR"])
            sp.add_argument("--votes", type=int, default=1,
                            help="average softmax over this many rotated copies")

    t = sub.add_parser("train", help="train a model and write checkpoint + run record")
    t.add_argument("config", help="INI file with [network] and optional [training]")
    t.add_argument("out_dir")
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--setting", default=None, choices=["YY", "YAR", "ARAR"])
    t.add_argument("--variant", default=None,
                   choices=["edgeconv", "aeconv1", "aeconv2", "aeconv3"])
    t.add_argument("--epochs", type=int, default=None)
    t.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    t.add_argument("--early-stop-acc", dest="early_stop_acc", type=float,
                   default=None,
                   help="stop once train accuracy reaches this fraction")
    t.add_argument("--votes", type=int, default=None)
    t.add_argument("--dataset", default=None,
                   help="AEDS1 file (default: synthetic data from the seed)")
    t.add_argument("--eval-dataset", default=None,
                   help="AEDS1 file scored after training")
    t.add_argument("--n-per-class", dest="n_per_class", type=int, default=200)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on a dataset")
    e.add_argument("checkpoint")
    e.add_argument("dataset",
                   help="AEDS1 file, synth-classification, or synth-segmentation")
    e.add_argument("--n-per-class", dest="n_per_class", type=int, default=100)
    add_eval_flags(e)
    e.set_defaults(fn=cmd_eval)

    a = sub.add_parser("invariance-audit",
                       help="measure logit deviation under random rotations")
    a.add_argument("checkpoint")
    a.add_argument("--rotations", type=int, default=20)
    a.add_argument("--clouds", type=int, default=50)
    a.add_argument("--tolerance", type=float, default=1e-5)
    add_eval_flags(a, with_votes=False)
    a.set_defaults(fn=cmd_invariance_audit)

    b = sub.add_parser("ablate", help="train/evaluate an alignment ablation grid")
    b.add_argument("config")
    b.add_argument("out_dir")
    b.add_argument("--variants", default=",".join(ABLATION_VARIANTS))
    b.add_argument("--searches", default=",".join(ABLATION_SEARCHES))
    b.add_argument("--anchors", default=",".join(ABLATION_ANCHORS))
    b.add_argument("--ks", default=",".join(str(k) for k in ABLATION_KS))
    b.add_argument("--seeds", default="0,1,2")
    b.add_argument("--setting", default="YAR", choices=["YY", "YAR", "ARAR"])
    b.add_argument("--seed", type=int, default=None)
    b.add_argument("--epochs", type=int, default=None)
    b.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    b.add_argument("--early-stop-acc", dest="early_stop_acc", type=float,
                   default=None)
    b.add_argument("--n-per-class", dest="n_per_class", type=int, default=200)
    b.set_defaults(fn=cmd_ablate)

    d = sub.add_parser("lrf-dump",
                       help="dump per-point frames and neighbor coordinates")
    d.add_argument("cloud", help=".xyz file")
    d.add_argument("--k", type=int, default=8)
    d.add_argument("--anchor", default="mean",
                   choices=["mean", "max_projection"])
    d.set_defaults(fn=cmd_lrf_dump)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
