"""Batch command-line interface.

One binary, one --seed per command; identical flags and seed always produce
byte-identical data artifacts (training logs additionally record wall time).
Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from .errors import DataError, FpiError, NumericError, UsageError
from .rng import SeededRng
from .volume import (
    DatasetManifest,
    ManifestEntry,
    SPLIT_TEST_ANOMALY,
    SPLIT_TEST_NORMAL,
    assign_splits,
    load_volume,
    normalize,
    save_volume,
)


def _set_threads(n: int):
    import torch

    torch.set_num_threads(max(1, n))


def _parse_shape(text: str) -> tuple[int, int, int]:
    parts = [p for p in text.replace("x", ",").split(",") if p]
    try:
        dims = [int(p) for p in parts]
    except ValueError:
        raise UsageError(f"bad shape {text!r}; expected e.g. 64,64,64") from None
    if len(dims) == 1:
        dims = dims * 3
    if len(dims) != 3:
        raise UsageError(f"shape needs 1 or 3 components, got {text!r}")
    return tuple(dims)


def cmd_phantom(args) -> int:
    from .phantom import generate_phantom

    if args.count < 1:
        raise UsageError(f"--count must be >= 1, got {args.count}")
    shape = _parse_shape(args.shape)
    root = SeededRng(args.seed)
    os.makedirs(args.out, exist_ok=True)
    splits = assign_splits(args.count)
    manifest = DatasetManifest()
    for i in range(args.count):
        vol_id = f"phantom-{i:04d}"
        vol = generate_phantom(root.child(i), shape, vol_id=vol_id)
        raw = save_volume(vol, os.path.join(args.out, vol_id))
        manifest.entries.append(ManifestEntry(vol_id=vol_id, path=raw, split=splits[i]))
    manifest_path = os.path.join(args.out, "manifest.json")
    manifest.save(manifest_path)
    print(f"wrote {args.count} phantoms and {manifest_path}")
    return 0


def cmd_synth(args) -> int:
    from .synth import AlphaMode, DISCRETE_ALPHAS, make_training_batch
    from .volume import pair_slices, save_array

    try:
        mode = AlphaMode(args.mode)
    except ValueError:
        raise UsageError(f"unknown mode {args.mode!r}; choose from "
                         f"{[m.value for m in AlphaMode]}") from None
    if args.count < 1:
        raise UsageError(f"--count must be >= 1, got {args.count}")
    manifest = DatasetManifest.load(args.manifest)
    root = SeededRng(args.seed)
    pairs = pair_slices(manifest, root.child(0).seed)
    samples = make_training_batch(pairs, root.child(1), mode, args.count)
    os.makedirs(args.out, exist_ok=True)
    index = {"format_version": 1, "mode": mode.value, "pairs": []}
    for i, s in enumerate(samples):
        img_path = os.path.join(args.out, f"sample-{i:05d}_input")
        lab_path = os.path.join(args.out, f"sample-{i:05d}_label")
        save_array(s.image.pixels, img_path, array_id=f"sample-{i:05d}-input")
        label = s.label
        if mode is AlphaMode.DISCRETE:
            label = np.asarray(DISCRETE_ALPHAS, dtype=np.float32)[s.label]
        save_array(label.astype(np.float32), lab_path, array_id=f"sample-{i:05d}-label")
        index["pairs"].append({
            "input": os.path.basename(img_path) + ".raw",
            "label": os.path.basename(lab_path) + ".raw",
            "alpha": s.alpha,
            "patch_bounds": list(s.patch.bounds),
            "sources": list(s.sources),
        })
    index_path = os.path.join(args.out, "index.json")
    with open(index_path, "w") as f:
        json.dump(index, f, sort_keys=True, indent=1)
        f.write("\n")
    print(f"wrote {args.count} sample pairs and {index_path}")
    return 0


def cmd_make_testset(args) -> int:
    from .testbench import build_testset, save_testset

    manifest = DatasetManifest.load(args.manifest)
    sources = [normalize(load_volume(p)) for p in manifest.paths(SPLIT_TEST_ANOMALY)]
    normals = [normalize(load_volume(p)) for p in manifest.paths(SPLIT_TEST_NORMAL)]
    if not sources or not normals:
        raise DataError("manifest needs nonempty test-anomaly-source and test-normal splits")
    cases, passthrough = build_testset(sources, normals, SeededRng(args.seed))
    index_path = save_testset(cases, passthrough, args.out)
    kinds = {}
    for c in cases:
        kinds[c.spec.kind] = kinds.get(c.spec.kind, 0) + 1
    print(f"wrote {len(cases)} anomalous + {len(passthrough)} normal cases, "
          f"kinds={json.dumps(kinds, sort_keys=True)}, index={index_path}")
    return 0


_RUN_CONFIG_KEYS = {"seed", "threads", "mode", "epochs", "lr", "batch_size",
                    "model", "swa", "manifest", "out_dir"}
_SWA_KEYS = {"epochs", "lr_high", "lr_low"}


def load_run_config(path: str):
    """Parse and strictly validate a training run config file."""
    from .network import ModelConfig, head_for_mode
    from .synth import AlphaMode
    from .trainer import TrainConfig

    if not os.path.exists(path):
        raise UsageError(f"config file not found: {path}")
    with open(path) as f:
        data = json.load(f)
    unknown = set(data) - _RUN_CONFIG_KEYS
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    for key in ("manifest", "out_dir"):
        if key not in data:
            raise UsageError(f"config is missing required key {key!r}")
    try:
        mode = AlphaMode(data.get("mode", "continuous"))
    except ValueError:
        raise UsageError(f"unknown mode {data.get('mode')!r}") from None

    swa = dict(data.get("swa", {}))
    unknown = set(swa) - _SWA_KEYS
    if unknown:
        raise UsageError(f"unknown swa config keys: {sorted(unknown)}")
    train_cfg = TrainConfig(
        epochs=int(data.get("epochs", 50)),
        lr=float(data.get("lr", 1e-3)),
        batch_size=int(data.get("batch_size", 16)),
        mode=mode,
        seed=int(data.get("seed", 0)),
        swa_epochs=int(swa.get("epochs", 10)),
        swa_lr_high=float(swa.get("lr_high", 1e-3)),
        swa_lr_low=float(swa.get("lr_low", 1e-4)),
    )

    model_data = dict(data.get("model", {}))
    model_data.setdefault("head", head_for_mode(mode))
    if "input_size" not in model_data:
        raise UsageError("config is missing model.input_size")
    model_cfg = ModelConfig.from_dict(model_data)
    if model_cfg.head != head_for_mode(mode):
        raise UsageError(
            f"model head {model_cfg.head!r} does not match mode {mode.value!r}"
        )
    return {
        "train": train_cfg,
        "model": model_cfg,
        "threads": int(data.get("threads", 1)),
        "manifest": data["manifest"],
        "out_dir": data["out_dir"],
    }


def cmd_train(args) -> int:
    from .network import init_model, save_checkpoint
    from .trainer import train

    cfg = load_run_config(args.config)
    _set_threads(cfg["threads"])
    manifest = DatasetManifest.load(cfg["manifest"])
    model = init_model(cfg["model"], SeededRng(cfg["train"].seed))
    out_dir = cfg["out_dir"]
    os.makedirs(out_dir, exist_ok=True)
    train(manifest, model, cfg["train"], log_path=os.path.join(out_dir, "train_log.jsonl"))
    ckpt = save_checkpoint(model, os.path.join(out_dir, "model.ckpt"))
    print(f"trained {cfg['train'].epochs} epochs; checkpoint at {ckpt}")
    return 0


def cmd_swa(args) -> int:
    from .network import load_checkpoint, save_checkpoint
    from .trainer import swa_finetune

    cfg = load_run_config(args.config)
    _set_threads(cfg["threads"])
    manifest = DatasetManifest.load(cfg["manifest"])
    model = load_checkpoint(args.checkpoint)
    out_dir = cfg["out_dir"]
    result = swa_finetune(model, manifest, cfg["train"], out_dir)
    ckpt = save_checkpoint(model, os.path.join(out_dir, "model_swa.ckpt"))
    with open(os.path.join(out_dir, "swa_log.jsonl"), "w") as f:
        for rec in result.log:
            f.write(json.dumps(rec, sort_keys=True) + "\n")
    print(f"averaged {len(result.snapshot_paths)} snapshots; checkpoint at {ckpt}")
    return 0


def cmd_score(args) -> int:
    from .network import load_checkpoint
    from .scoring import save_subject_record, score_volume
    from .testbench import load_testset_index
    from .volume import save_array

    _set_threads(args.threads)
    model = load_checkpoint(args.checkpoint)
    index_path = args.volumes
    if os.path.isdir(index_path):
        index_path = os.path.join(index_path, "index.json")
    index = load_testset_index(index_path)
    base = os.path.dirname(index_path)
    os.makedirs(args.out, exist_ok=True)
    for case in index["cases"]:
        vol = load_volume(os.path.join(base, case["img"]))
        score_map, subj = score_volume(model, vol, aggregator=args.subject_aggregator)
        map_path = os.path.join(args.out, f"{case['id']}_score")
        save_array(score_map, map_path, array_id=f"{case['id']}-score")
        save_subject_record(
            os.path.join(args.out, f"{case['id']}_subject.json"),
            case["id"], subj, map_path + ".raw",
        )
    print(f"scored {len(index['cases'])} volumes into {args.out}")
    return 0


def _case_records(index: dict, testset_dir: str, scores_dir: str):
    from .metrics import BODY_THRESHOLD, CaseRecord
    from .scoring import load_subject_record
    from .volume import load_array

    records = []
    for case in index["cases"]:
        cid = case["id"]
        subj_path = os.path.join(scores_dir, f"{cid}_subject.json")
        map_path = os.path.join(scores_dir, f"{cid}_score.raw")
        if not (os.path.exists(subj_path) and os.path.exists(map_path)):
            raise DataError(f"missing score record for case {cid!r}")
        subj = load_subject_record(subj_path)
        score_map = load_array(map_path)
        vol = load_volume(os.path.join(testset_dir, case["img"]))
        if case.get("mask"):
            mask = load_array(os.path.join(testset_dir, case["mask"])) > 0.5
        else:
            mask = np.zeros(vol.shape, dtype=bool)
        if mask.shape != score_map.shape:
            raise DataError(f"mask/score shape mismatch for case {cid!r}")
        records.append(CaseRecord(
            case_id=cid,
            kind=case.get("kind", "normal"),
            subject_label=int(case["subject_label"]),
            subject_score=float(subj["subject_score"]),
            voxel_scores=score_map.ravel(),
            voxel_labels=mask.ravel(),
            body_mask=(vol.voxels > BODY_THRESHOLD).ravel(),
        ))
    return records


def cmd_evaluate(args) -> int:
    from .metrics import curve_tables, evaluate
    from .testbench import load_testset_index

    index_path = args.testset
    if os.path.isdir(index_path):
        index_path = os.path.join(index_path, "index.json")
    index = load_testset_index(index_path)
    records = _case_records(index, os.path.dirname(index_path), args.scores)
    report = evaluate(records)
    report.save(args.out)
    if args.curves:
        os.makedirs(args.curves, exist_ok=True)
        normals = [r for r in records if r.subject_label == 0]
        for kind in sorted({r.kind for r in records if r.kind != "normal"}):
            pool = [r for r in records if r.kind == kind] + normals
            scores = np.concatenate([r.voxel_scores for r in pool])
            labels = np.concatenate([r.voxel_labels for r in pool])
            tables = curve_tables(scores, labels)
            for curve, header in (("roc", ["threshold", "fpr", "tpr"]),
                                  ("pr", ["threshold", "recall", "precision"])):
                path = os.path.join(args.curves, f"{kind}_{curve}.csv")
                with open(path, "w", newline="") as f:
                    w = csv.writer(f)
                    w.writerow(header)
                    w.writerows(tables[curve])
    print(json.dumps(report.to_dict()["pixel"], sort_keys=True))
    print(f"report written to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="fpi",
        description="Patch-interpolation anomaly detection pipeline",
    )
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("phantom", help="generate phantom volumes + manifest")
    sp.add_argument("--count", type=int, required=True)
    sp.add_argument("--shape", default="64,64,64")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_phantom)

    sp = sub.add_parser("synth", help="export interpolation training pairs")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--mode", default="continuous")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--count", type=int, default=16)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("make-testset", help="build the synthetic anomaly test set")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_make_testset)

    sp = sub.add_parser("train", help="train a model from a JSON config")
    sp.add_argument("--config", required=True)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("swa", help="stochastic weight averaging fine-tune")
    sp.add_argument("--config", required=True)
    sp.add_argument("--checkpoint", required=True)
    sp.set_defaults(func=cmd_swa)

    sp = sub.add_parser("score", help="score test volumes with a checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--volumes", required=True,
                    help="testset directory or its index.json")
    sp.add_argument("--out", required=True)
    sp.add_argument("--subject-aggregator", default="max", choices=("max", "mean"))
    sp.add_argument("--threads", type=int, default=1)
    sp.set_defaults(func=cmd_score)

    sp = sub.add_parser("evaluate", help="compute the evaluation report")
    sp.add_argument("--testset", required=True,
                    help="testset directory or its index.json")
    sp.add_argument("--scores", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--curves", default=None,
                    help="optional directory for per-kind ROC/PR CSV tables")
    sp.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 2
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 4
    except FpiError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def entrypoint():
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
