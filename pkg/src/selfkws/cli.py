"""Command-line surface: every phase of the self-learning loop plus the
resource estimators.

Every flag can also be supplied through a JSON config file (--config);
explicit flags override config values.  Failures exit nonzero and print a
machine-readable error JSON on stderr.
"""

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import calibrate as cal_mod
from . import evaluate as eval_mod
from . import pipeline as pipe_mod
from . import resources as res_mod
from . import trainer
from .corpus import (
    Manifest,
    ManifestEntry,
    SynthSpec,
    generate_synthetic_corpus,
    load_manifest,
    load_manifest_clips,
    save_manifest,
    write_wav,
)
from .encoder import ARCH_NAMES, build_arch, init_encoder, load_checkpoint, save_checkpoint
from .frontend import FrameWindow
from .labeler import SampleStore, load_store, run_stream, save_store


def _merged(args, key, default=None):
    val = getattr(args, key, None)
    if val is not None:
        return val
    return args._config.get(key, default)


def _window(args):
    return FrameWindow(stride_s=float(_merged(args, "stride", 0.125)))


def _taus(args):
    return float(_merged(args, "tau_l", 0.4)), float(_merged(args, "tau_h", 0.9))


def _synth_spec(args):
    return SynthSpec(
        n_pretrain_classes=int(_merged(args, "classes", 6)),
        n_clips_per_class=int(_merged(args, "clips_per_class", 30)),
        keyword_pattern_seed=int(_merged(args, "pattern_seed", _merged(args, "seed"))),
        rng_seed=int(_merged(args, "seed")),
    )


def cmd_synth(args):
    out = Path(_merged(args, "out", "synth_corpus"))
    out.mkdir(parents=True, exist_ok=True)
    spec = _synth_spec(args)
    pretrain, target, negative = generate_synthetic_corpus(spec)

    pretrain_dir = out / "pretrain"
    pretrain_dir.mkdir(exist_ok=True)
    index = []
    for clip in pretrain:
        write_wav(pretrain_dir / f"{clip.clip_id}.wav", clip)
        index.append({"file": f"{clip.clip_id}.wav", "class_id": clip.class_id})
    with open(out / "pretrain_index.json", "w") as f:
        json.dump(index, f, indent=2, sort_keys=True)

    entries = []
    k = 3
    for i, clip in enumerate(target):
        split = "user_enroll" if i < k else ("adaptation" if i < (k + len(target)) // 2 else "test")
        write_wav(out / f"{clip.clip_id}.wav", clip)
        entries.append(ManifestEntry(f"{clip.clip_id}.wav", "positive", "synth_speaker", split))
    for i, clip in enumerate(negative):
        split = "user_neg" if i < k else ("adaptation" if i < (k + len(negative)) // 2 else "test")
        write_wav(out / f"{clip.clip_id}.wav", clip)
        entries.append(ManifestEntry(f"{clip.clip_id}.wav", "negative", "synth_speaker", split))
    save_manifest(out / "manifest.jsonl", Manifest(entries=entries))
    print(json.dumps({"out": str(out), "n_pretrain": len(pretrain), "n_target": len(target),
                      "n_negative": len(negative)}))


def cmd_pretrain(args):
    spec = _synth_spec(args)
    pretrain_set, _, _ = generate_synthetic_corpus(spec)
    arch = _merged(args, "arch", "tiny")
    enc = init_encoder(arch, rng_seed=int(_merged(args, "seed")))
    cfg = trainer.PretrainConfig(
        epochs=int(_merged(args, "epochs", 30)), rng_seed=int(_merged(args, "seed"))
    )
    enc = trainer.pretrain(enc, pretrain_set, cfg)
    out = _merged(args, "out", "pretrained.ckpt")
    save_checkpoint(out, enc)
    print(json.dumps({"checkpoint": str(out), "arch": arch, "params": enc.arch.param_count}))


def _speakers(args):
    manifest_path = _merged(args, "manifest")
    if manifest_path is None:
        raise ValueError("--manifest is required")
    manifest = load_manifest(manifest_path)
    return pipe_mod.speakers_from_manifest(manifest, Path(manifest_path).parent)


def _encoder(args):
    ckpt = _merged(args, "checkpoint")
    if ckpt is None:
        raise ValueError("--checkpoint is required")
    return load_checkpoint(ckpt, expect_arch=_merged(args, "arch"))


def cmd_calibrate(args):
    enc = _encoder(args)
    tau_l, tau_h = _taus(args)
    data = _speakers(args)[0]
    cfg = cal_mod.calibrate(enc, data.user_enroll, data.user_neg, tau_l, tau_h, _window(args))
    if args.alpha is not None:
        cfg.alpha = int(args.alpha)
    out = _merged(args, "out", "calibration.json")
    cal_mod.save_config(out, cfg)
    print(json.dumps({"config": str(out), "alpha": cfg.alpha, "th_L": cfg.th_L,
                      "th_H": cfg.th_H, "dist_p": cfg.dist_p, "dist_n": cfg.dist_n}))


def cmd_label(args):
    enc = _encoder(args)
    cfg = cal_mod.load_config(_merged(args, "labeler_config", "calibration.json"))
    data = _speakers(args)[0]
    store = SampleStore()
    stats = run_stream(data.adaptation, enc, cfg, store)
    store_dir = _merged(args, "store", "store")
    save_store(store_dir, store)
    print(json.dumps({"store": str(store_dir), "n_pos": stats.n_pos, "n_neg": stats.n_neg,
                      "n_abstain": stats.n_abstain}))


def cmd_train(args):
    enc = _encoder(args)
    store = load_store(_merged(args, "store", "store"))
    data = _speakers(args)[0]
    profile = _merged(args, "profile", "recorded")
    cfg = (trainer.public_profile if profile == "public" else trainer.recorded_profile)(
        rng_seed=int(_merged(args, "seed"))
    )
    if args.epochs is not None:
        cfg.epochs = int(args.epochs)
    tuned = trainer.finetune(enc, store, data.user_enroll, cfg)
    out = _merged(args, "out", "finetuned.ckpt")
    save_checkpoint(out, tuned)
    print(json.dumps({"checkpoint": str(out), "epochs": cfg.epochs}))


def cmd_eval(args):
    enc = _encoder(args)
    tau_l, tau_h = _taus(args)
    window = _window(args)
    far = float(_merged(args, "far_per_hour", 0.5))
    profile = _merged(args, "profile", "recorded")
    out_dir = Path(_merged(args, "out", "eval_out"))
    out_dir.mkdir(parents=True, exist_ok=True)
    train_cfg = (trainer.public_profile if profile == "public" else trainer.recorded_profile)(
        rng_seed=int(_merged(args, "seed"))
    )
    if args.epochs is not None:
        train_cfg.epochs = int(args.epochs)
    speakers = _speakers(args)
    sweep = _merged(args, "sweep")
    if sweep == "tau":
        rows = eval_mod.sweep_tau_grid(speakers[0], enc, window, train_cfg, far)
        eval_mod.write_csv(out_dir / "tau_grid.csv", rows)
        print(json.dumps({"csv": str(out_dir / "tau_grid.csv"), "cells": len(rows)}))
        return
    if sweep == "stride":
        rows = eval_mod.sweep_stride_filter(speakers[0], enc, far)
        eval_mod.write_csv(out_dir / "stride_filter.csv", rows)
        print(json.dumps({"csv": str(out_dir / "stride_filter.csv"), "cells": len(rows)}))
        return
    arms = _merged(args, "arms", ["pretrained", "self"])
    if isinstance(arms, str):
        arms = arms.split(",")
    results = []
    rows = []
    for data in speakers:
        cache = {}
        for arm in arms:
            result, _ = eval_mod.run_arm(
                arm, data, enc, tau_l, tau_h, window, train_cfg, far, map_cache=cache
            )
            results.append(result)
            rows.append(
                {
                    "speaker_id": result.speaker_id,
                    "arm": result.arm,
                    "accuracy": result.accuracy,
                    "gamma_at_far": result.gamma_at_far,
                    "n_pos_tested": result.n_pos_tested,
                    "neg_hours": result.neg_hours,
                }
            )
    eval_mod.write_csv(out_dir / "results.csv", rows)
    summary = eval_mod.summarize(results)
    with open(out_dir / "summary.json", "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
    print(json.dumps(summary, sort_keys=True))


def cmd_estimate(args):
    arch_name = _merged(args, "arch")
    names = [arch_name] if arch_name else [n for n in ARCH_NAMES if n != "tiny"]
    platform = res_mod.PlatformConstants()
    reports = [res_mod.estimate_report(build_arch(n), platform) for n in names]
    out_dir = Path(_merged(args, "out", "estimate_out"))
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "estimate.json", "w") as f:
        json.dump(reports, f, indent=2, sort_keys=True)
    rows = []
    intervals = np.geomspace(1.0, 1000.0, 25)
    for rep in reports:
        if "energy" not in rep:
            continue
        for t, j_day in res_mod.crossover_curve(rep["energy"]["e_train_j"], intervals):
            rows.append({"arch": rep["arch"], "interval_s": t, "training_j_per_day": j_day,
                         "labeling_j_per_day": rep["energy"]["labeling_j_per_day"]})
    if rows:
        eval_mod.write_csv(out_dir / "energy_tradeoff.csv", rows)
    for rep in reports:
        mem = rep["memory"]
        line = (f"{rep['arch']}: weights+grads {mem['weights_grads_mib']:.2f} MiB, "
                f"data {mem['data_mib']:.2f} MiB, activations {mem['activations_mib']:.2f} MiB")
        if "energy" in rep:
            e = rep["energy"]
            line += (f", crossover {e['crossover_interval_10x_s']:.2f} s, "
                     f"avg power {e['avg_power_with_sleep_mw']:.3f} mW, "
                     f"lifetime {e['battery_lifetime_months']:.1f} months")
        print(line)
    print(json.dumps({"out": str(out_dir)}))


def cmd_pipeline(args):
    if args.config and Path(args.config).exists():
        cfg = pipe_mod.load_run_config(args.config)
    else:
        cfg = pipe_mod.RunConfig(synth=_synth_spec(args))
    if args.arch is not None:
        cfg.arch = args.arch
    if args.seed is not None:
        cfg.rng_seed = int(args.seed)
        if cfg.synth is not None:
            cfg.synth.rng_seed = int(args.seed)
    if args.tau_l is not None:
        cfg.tau_L = float(args.tau_l)
    if args.tau_h is not None:
        cfg.tau_H = float(args.tau_h)
    if args.stride is not None:
        cfg.stride_s = float(args.stride)
    if args.epochs is not None:
        cfg.epochs = int(args.epochs)
    if args.far_per_hour is not None:
        cfg.far_per_hour = float(args.far_per_hour)
    if args.out is not None:
        cfg.out_dir = args.out
    if getattr(args, "checkpoint", None) is not None:
        cfg.checkpoint = args.checkpoint
    report = pipe_mod.run_pipeline(cfg)
    print(json.dumps(report["summary"], sort_keys=True))


def build_parser():
    parser = argparse.ArgumentParser(prog="selfkws", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, **kwargs):
        p = sub.add_parser(name, **kwargs)
        p.set_defaults(func=func)
        p.add_argument("--config", help="JSON config file; flags override its values")
        p.add_argument("--arch", choices=ARCH_NAMES)
        p.add_argument("--checkpoint")
        p.add_argument("--manifest")
        p.add_argument("--tau-l", dest="tau_l", type=float)
        p.add_argument("--tau-h", dest="tau_h", type=float)
        p.add_argument("--stride", type=float)
        p.add_argument("--alpha", type=int, help="override the calibrated filter length")
        p.add_argument("--epochs", type=int)
        p.add_argument("--profile", choices=["public", "recorded"])
        p.add_argument("--far-per-hour", dest="far_per_hour", type=float)
        p.add_argument("--seed", type=int)
        p.add_argument("--jobs", type=int, default=1, help="worker cap for parallel sections")
        p.add_argument("--out")
        return p

    add("synth", cmd_synth, help="generate a seeded synthetic corpus")
    add("pretrain", cmd_pretrain, help="triplet pretraining on the synthetic classes")
    add("calibrate", cmd_calibrate, help="derive thresholds from the user clips")
    p = add("label", cmd_label, help="run the streaming pseudo-labeling task")
    p.add_argument("--labeler-config", dest="labeler_config")
    p.add_argument("--store")
    p = add("train", cmd_train, help="incremental fine-tuning on a sample store")
    p.add_argument("--store")
    p = add("eval", cmd_eval, help="FAR-calibrated evaluation and sweeps")
    p.add_argument("--arms")
    p.add_argument("--sweep", choices=["tau", "stride"])
    add("estimate", cmd_estimate, help="memory/energy cost report")
    add("pipeline", cmd_pipeline, help="full calibrate-label-train-evaluate run")
    for name in ("synth", "pretrain", "pipeline"):
        p = sub.choices[name]
        p.add_argument("--classes", type=int)
        p.add_argument("--clips-per-class", dest="clips_per_class", type=int)
        p.add_argument("--pattern-seed", dest="pattern_seed", type=int)
    return parser


def main(argv=None):
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    args._config = {}
    if getattr(args, "config", None):
        try:
            with open(args.config) as f:
                args._config = json.load(f)
        except (OSError, json.JSONDecodeError) as exc:
            print(json.dumps({"error": str(exc), "type": type(exc).__name__}), file=sys.stderr)
            return 2
    seeded_commands = {"synth", "pretrain", "train", "eval", "pipeline"}
    if (args.command in seeded_commands
            and getattr(args, "seed", None) is None and "seed" not in args._config):
        print(json.dumps({"error": f"--seed is required for {args.command}",
                          "type": "ValueError"}), file=sys.stderr)
        return 2
    args._config.setdefault("seed", 0)
    try:
        args.func(args)
    except Exception as exc:  # surfaced verbatim as machine-readable JSON
        print(json.dumps({"error": str(exc), "type": type(exc).__name__}), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
