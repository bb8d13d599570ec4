"""End-to-end orchestration: calibrate -> label -> train -> reinitialize ->
evaluate, with per-phase artifact persistence and resume.

Every phase writes its artifact into the output directory and is skipped on
rerun if the artifact already exists, so a run can resume from any persisted
phase.  With fixed seeds the final report is byte-identical across runs.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import calibrate as cal_mod
from . import trainer
from .corpus import Manifest, SynthSpec, generate_synthetic_corpus, load_manifest, load_manifest_clips
from .encoder import EncoderState, init_encoder, load_checkpoint, save_checkpoint
from .evaluate import ARMS, SpeakerData, run_arm, summarize
from .frontend import FrameWindow
from .labeler import SampleStore, load_store, save_store


class PipelineError(RuntimeError):
    pass


@dataclass
class RunConfig:
    arch: str = "tiny"
    checkpoint: str = None
    synth: SynthSpec = None
    manifest: str = None
    tau_L: float = 0.4
    tau_H: float = 0.9
    stride_s: float = 0.125
    profile: str = "recorded"
    epochs: int = None  # overrides the profile's epoch count
    far_per_hour: float = 0.5
    arms: tuple = ("pretrained", "self", "oracle")
    rng_seed: int = 0
    out_dir: str = "runs/out"
    pretrain_epochs: int = 30
    store_caps: tuple = (400, 2400)

    def train_config(self) -> trainer.TrainConfig:
        if self.profile == "public":
            cfg = trainer.public_profile(rng_seed=self.rng_seed)
        elif self.profile == "recorded":
            cfg = trainer.recorded_profile(rng_seed=self.rng_seed)
        else:
            raise PipelineError(f"unknown profile {self.profile!r}")
        if self.epochs is not None:
            cfg.epochs = self.epochs
        return cfg

    def validate(self):
        if (self.synth is None) == (self.manifest is None):
            raise PipelineError("exactly one of synth / manifest must be given")
        if not self.tau_L < self.tau_H:
            raise PipelineError("tau_L must be < tau_H")
        for arm in self.arms:
            if arm not in ARMS:
                raise PipelineError(f"unknown arm {arm!r}")
        FrameWindow(stride_s=self.stride_s)  # validates the stride


def config_from_dict(d: dict) -> RunConfig:
    d = dict(d)
    if d.get("synth"):
        synth = dict(d["synth"])
        if "clip_duration_range_s" in synth:
            synth["clip_duration_range_s"] = tuple(synth["clip_duration_range_s"])
        d["synth"] = SynthSpec(**synth)
    if "arms" in d:
        d["arms"] = tuple(d["arms"])
    if "store_caps" in d:
        d["store_caps"] = tuple(d["store_caps"])
    return RunConfig(**d)


def load_run_config(path) -> RunConfig:
    with open(path) as f:
        return config_from_dict(json.load(f))


def split_synthetic_speaker(target, negatives, rng_seed: int, k: int = 3) -> SpeakerData:
    """Deterministic single-speaker partition of the synthetic sets: K
    enrollment / calibration clips, then half of the remainder feeds the
    adaptation stream and half the test split."""
    if len(target) < k + 4 or len(negatives) < k + 4:
        raise PipelineError("synthetic corpus too small to partition")
    enroll, rest_pos = target[:k], target[k:]
    user_neg, rest_neg = negatives[:k], negatives[k:]
    n_ap = len(rest_pos) // 2
    n_an = len(rest_neg) // 2
    adapt = list(rest_pos[:n_ap]) + list(rest_neg[:n_an])
    rng = np.random.default_rng(rng_seed)
    adapt = [adapt[i] for i in rng.permutation(len(adapt))]
    return SpeakerData(
        speaker_id="synth_speaker",
        user_enroll=enroll,
        user_neg=user_neg,
        adaptation=adapt,
        test_pos=list(rest_pos[n_ap:]),
        test_neg=list(rest_neg[n_an:]),
    )


def speakers_from_manifest(manifest: Manifest, base_dir) -> list:
    """One SpeakerData per speaker appearing in the user_enroll split.

    Adaptation and test clips not tagged with that speaker are shared."""
    clips = load_manifest_clips(manifest, base_dir)
    by_split = {}
    for entry, clip in zip(manifest.entries, clips):
        by_split.setdefault(entry.split, []).append((entry, clip))
    speakers = sorted({e.speaker_id for e, _ in by_split.get("user_enroll", [])})
    if not speakers:
        raise PipelineError("manifest has no user_enroll entries")
    out = []
    for spk in speakers:
        def owned(split, label=None):
            picked = []
            for e, c in by_split.get(split, []):
                if e.speaker_id not in (spk, "shared"):
                    continue
                if label is not None and e.label != label:
                    continue
                picked.append(c)
            return picked

        out.append(
            SpeakerData(
                speaker_id=spk,
                user_enroll=owned("user_enroll"),
                user_neg=owned("user_neg"),
                adaptation=owned("adaptation"),
                test_pos=owned("test", "positive"),
                test_neg=owned("test", "negative"),
            )
        )
    return out


def run_pipeline(cfg: RunConfig) -> dict:
    """Execute all phases, persisting artifacts under cfg.out_dir, and
    return the run report (also written as report.json)."""
    cfg.validate()
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    window = FrameWindow(stride_s=cfg.stride_s)
    train_cfg = cfg.train_config()
    map_cache = {}

    # phase: data
    if cfg.synth is not None:
        pretrain_set, target, negatives = generate_synthetic_corpus(cfg.synth)
        speakers = [split_synthetic_speaker(target, negatives, cfg.rng_seed)]
    else:
        manifest = load_manifest(cfg.manifest)
        speakers = speakers_from_manifest(manifest, Path(cfg.manifest).parent)
        pretrain_set = None

    # phase: encoder
    ckpt_path = out / "pretrained.ckpt"
    if cfg.checkpoint:
        enc = load_checkpoint(cfg.checkpoint, expect_arch=cfg.arch)
    elif ckpt_path.exists():
        enc = load_checkpoint(ckpt_path, expect_arch=cfg.arch)
    else:
        enc = init_encoder(cfg.arch, rng_seed=cfg.rng_seed)
        if pretrain_set is None:
            raise PipelineError("manifest runs need a pretrained --checkpoint")
        pre_cfg = trainer.PretrainConfig(epochs=cfg.pretrain_epochs, rng_seed=cfg.rng_seed)
        enc = trainer.pretrain(enc, pretrain_set, pre_cfg, log_path=out / "pretrain_log.jsonl")
        save_checkpoint(ckpt_path, enc)

    report = {
        "seed": cfg.rng_seed,
        "arch": cfg.arch,
        "tau_L": cfg.tau_L,
        "tau_H": cfg.tau_H,
        "stride_s": cfg.stride_s,
        "far_per_hour": cfg.far_per_hour,
        "speakers": {},
    }

    results = []
    for data in speakers:
        spk_dir = out / data.speaker_id
        spk_dir.mkdir(exist_ok=True)

        # phase: calibrate
        calib_path = spk_dir / "calibration.json"
        if calib_path.exists():
            labeler_cfg = cal_mod.load_config(calib_path)
        else:
            labeler_cfg = cal_mod.calibrate(
                enc, data.user_enroll, data.user_neg, cfg.tau_L, cfg.tau_H, window, map_cache
            )
            cal_mod.save_config(calib_path, labeler_cfg)

        # phase: label (persisted so reruns can skip streaming)
        store_dir = spk_dir / "store"
        from .labeler import run_stream

        if (store_dir / "index.json").exists():
            store = load_store(store_dir)
            stream_stats = None
        else:
            store = SampleStore(max_pos=cfg.store_caps[0], max_neg=cfg.store_caps[1])
            stream_stats = run_stream(data.adaptation, enc, labeler_cfg, store, map_cache)
            save_store(store_dir, store)

        # phase: train
        tuned_path = spk_dir / "finetuned.ckpt"
        if tuned_path.exists():
            tuned = load_checkpoint(tuned_path, expect_arch=cfg.arch)
        elif len(store.positives) >= train_cfg.n_b_p and store.negatives:
            tuned = trainer.finetune(
                enc, store, data.user_enroll, train_cfg, log_path=spk_dir / "train_log.jsonl"
            )
            save_checkpoint(tuned_path, tuned)
        else:
            tuned = enc  # self-learning does not execute

        # phase: reinitialize
        post_path = spk_dir / "calibration_post.json"
        if post_path.exists():
            post_cfg = cal_mod.load_config(post_path)
        else:
            post_cfg = trainer.reinitialize_after_training(
                tuned, data.user_enroll, data.user_neg, cfg.tau_L, cfg.tau_H, window
            )
            cal_mod.save_config(post_path, post_cfg)

        # phase: evaluate
        spk_report = {
            "calibration": cal_mod.config_to_dict(labeler_cfg),
            "post_calibration": cal_mod.config_to_dict(post_cfg),
            "store": {"n_pos": len(store.positives), "n_neg": len(store.negatives)},
            "arms": {},
        }
        if stream_stats is not None:
            spk_report["labeling_stats"] = {
                "n_pos": stream_stats.n_pos,
                "n_neg": stream_stats.n_neg,
                "n_abstain": stream_stats.n_abstain,
                "false_pos_rate": stream_stats.false_pos_rate,
                "false_neg_rate": stream_stats.false_neg_rate,
            }
        from .evaluate import EvalResult, negative_hours, select_gamma_at_far, speaker_accuracy

        def evaluate_with(model, proto_cfg, arm):
            neg_hours = negative_hours(data.test_neg)
            cache = map_cache if model is enc else None
            gamma = select_gamma_at_far(
                data.test_neg, model, proto_cfg.prototype, proto_cfg.alpha, window,
                cfg.far_per_hour, neg_hours, cache,
            )
            acc = speaker_accuracy(
                data.test_pos, model, proto_cfg.prototype, proto_cfg.alpha, window, gamma, cache
            )
            return EvalResult(
                speaker_id=data.speaker_id, arm=arm, gamma_at_far=gamma, accuracy=acc,
                n_pos_tested=len(data.test_pos), far_target_per_hour=cfg.far_per_hour,
                neg_hours=neg_hours,
            )

        for arm in cfg.arms:
            # the self arm reuses the persisted phase artifacts so a resumed
            # run skips labeling and training entirely
            if arm == "pretrained":
                result, stats = evaluate_with(enc, labeler_cfg, arm), None
            elif arm == "self":
                result, stats = evaluate_with(tuned, post_cfg, arm), stream_stats
            else:
                result, details = run_arm(
                    arm, data, enc, cfg.tau_L, cfg.tau_H, window, train_cfg,
                    cfg.far_per_hour, store_caps=cfg.store_caps, map_cache=map_cache,
                )
                stats = details["labeling_stats"]
            results.append(result)
            arm_report = {
                "accuracy": result.accuracy,
                "gamma_at_far": result.gamma_at_far,
                "n_pos_tested": result.n_pos_tested,
                "neg_hours": result.neg_hours,
            }
            if stats is not None:
                arm_report["labeling_stats"] = {
                    "n_pos": stats.n_pos,
                    "n_neg": stats.n_neg,
                    "n_abstain": stats.n_abstain,
                    "false_pos_rate": stats.false_pos_rate,
                    "false_neg_rate": stats.false_neg_rate,
                }
            spk_report["arms"][arm] = arm_report
        report["speakers"][data.speaker_id] = spk_report

    report["summary"] = summarize(results)
    with open(out / "report.json", "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)
        f.write("\n")
    return report
