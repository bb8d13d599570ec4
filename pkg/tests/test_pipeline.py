import json
import shutil

import numpy as np
import pytest

from selfkws.corpus import AudioClip, Manifest, ManifestEntry, SynthSpec, save_manifest, write_wav
from selfkws.pipeline import (
    PipelineError,
    RunConfig,
    config_from_dict,
    load_run_config,
    run_pipeline,
    speakers_from_manifest,
    split_synthetic_speaker,
)

SMALL_SYNTH = SynthSpec(n_pretrain_classes=3, n_clips_per_class=8, keyword_pattern_seed=7, rng_seed=7)
# large enough that the adaptation stream yields >= n_b_p pseudo-positives,
# so the training phase actually executes
PIPE_SYNTH = SynthSpec(n_pretrain_classes=3, n_clips_per_class=36, keyword_pattern_seed=7, rng_seed=7)


def small_cfg(out_dir, **overrides):
    base = dict(
        arch="tiny",
        synth=PIPE_SYNTH,
        profile="recorded",
        epochs=2,
        pretrain_epochs=2,
        tau_L=0.5,
        arms=("pretrained", "self"),
        rng_seed=7,
        out_dir=str(out_dir),
    )
    base.update(overrides)
    return RunConfig(**base)


def test_validation_errors(tmp_path):
    with pytest.raises(PipelineError, match="exactly one"):
        RunConfig(synth=None, manifest=None).validate()
    with pytest.raises(PipelineError, match="exactly one"):
        RunConfig(synth=SMALL_SYNTH, manifest="m.jsonl").validate()
    with pytest.raises(PipelineError, match="tau_L"):
        small_cfg(tmp_path, tau_L=0.9, tau_H=0.4).validate()
    with pytest.raises(PipelineError, match="unknown arm"):
        small_cfg(tmp_path, arms=("pretrained", "bogus")).validate()
    with pytest.raises(PipelineError, match="unknown profile"):
        small_cfg(tmp_path, profile="fast").train_config()


def test_config_from_dict_and_file(tmp_path):
    d = {
        "arch": "tiny",
        "synth": {"n_pretrain_classes": 2, "n_clips_per_class": 3, "rng_seed": 1,
                  "clip_duration_range_s": [1.0, 1.2]},
        "arms": ["pretrained"],
        "store_caps": [10, 20],
        "rng_seed": 1,
    }
    cfg = config_from_dict(d)
    assert cfg.synth.n_pretrain_classes == 2
    assert cfg.synth.clip_duration_range_s == (1.0, 1.2)
    assert cfg.arms == ("pretrained",)
    assert cfg.store_caps == (10, 20)
    path = tmp_path / "run.json"
    path.write_text(json.dumps(d))
    cfg2 = load_run_config(path)
    assert cfg2 == cfg


def test_split_synthetic_speaker_partition(small_corpus):
    _, target, neg = small_corpus
    data = split_synthetic_speaker(target, neg, rng_seed=0)
    assert len(data.user_enroll) == 3 and len(data.user_neg) == 3
    # enrollment, adaptation and test sets are disjoint and cover everything
    ids = lambda clips: {c.clip_id for c in clips}
    all_ids = ids(target) | ids(neg)
    parts = [ids(data.user_enroll), ids(data.user_neg), ids(data.adaptation),
             ids(data.test_pos), ids(data.test_neg)]
    assert set().union(*parts) == all_ids
    assert sum(len(p) for p in parts) == len(all_ids)
    # deterministic shuffle
    again = split_synthetic_speaker(target, neg, rng_seed=0)
    assert [c.clip_id for c in again.adaptation] == [c.clip_id for c in data.adaptation]
    with pytest.raises(PipelineError, match="too small"):
        split_synthetic_speaker(target[:4], neg, rng_seed=0)


def _write_manifest(tmp_path):
    rng = np.random.default_rng(0)
    entries = []

    def add(name, label, speaker, split):
        clip = AudioClip(samples=rng.normal(0, 0.1, 18000).astype(np.float32))
        write_wav(tmp_path / name, clip)
        entries.append(ManifestEntry(name, label, speaker, split))

    for i in range(3):
        add(f"e{i}.wav", "positive", "alice", "user_enroll")
        add(f"n{i}.wav", "negative", "alice", "user_neg")
    for i in range(4):
        add(f"a{i}.wav", "positive" if i % 2 else "negative", "shared", "adaptation")
        add(f"t{i}.wav", "positive" if i % 2 else "negative", "shared", "test")
    mpath = tmp_path / "manifest.jsonl"
    save_manifest(mpath, Manifest(entries=entries))
    return mpath


def test_speakers_from_manifest(tmp_path):
    from selfkws.corpus import load_manifest

    mpath = _write_manifest(tmp_path)
    speakers = speakers_from_manifest(load_manifest(mpath), tmp_path)
    assert len(speakers) == 1
    data = speakers[0]
    assert data.speaker_id == "alice"
    assert len(data.user_enroll) == 3 and len(data.user_neg) == 3
    assert len(data.adaptation) == 4
    assert len(data.test_pos) == 2 and len(data.test_neg) == 2


def test_speakers_from_manifest_requires_enroll(tmp_path):
    from selfkws.corpus import load_manifest

    rng = np.random.default_rng(0)
    clip = AudioClip(samples=rng.normal(0, 0.1, 16000).astype(np.float32))
    write_wav(tmp_path / "t.wav", clip)
    save_manifest(tmp_path / "m.jsonl", Manifest(entries=[ManifestEntry("t.wav", "positive", "s", "test")]))
    with pytest.raises(PipelineError, match="user_enroll"):
        speakers_from_manifest(load_manifest(tmp_path / "m.jsonl"), tmp_path)


def test_manifest_run_requires_checkpoint(tmp_path):
    mpath = _write_manifest(tmp_path)
    cfg = RunConfig(arch="tiny", manifest=str(mpath), rng_seed=0, out_dir=str(tmp_path / "out"),
                    arms=("pretrained",))
    with pytest.raises(PipelineError, match="checkpoint"):
        run_pipeline(cfg)


@pytest.fixture(scope="module")
def pipeline_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("pipe")
    cfg = small_cfg(out)
    report = run_pipeline(cfg)
    return out, cfg, report


def test_pipeline_report_schema(pipeline_run):
    out, cfg, report = pipeline_run
    assert set(report["speakers"]) == {"synth_speaker"}
    spk = report["speakers"]["synth_speaker"]
    assert set(spk["arms"]) == {"pretrained", "self"}
    for arm in spk["arms"].values():
        assert 0.0 <= arm["accuracy"] <= 1.0
    assert "pretrained" in report["summary"] and "self" in report["summary"]
    # artifacts persisted
    assert (out / "pretrained.ckpt").exists()
    assert (out / "synth_speaker" / "calibration.json").exists()
    assert (out / "synth_speaker" / "store" / "index.json").exists()
    assert (out / "synth_speaker" / "finetuned.ckpt").exists()  # training executed
    assert (out / "report.json").exists()


def test_pipeline_determinism_and_resume(pipeline_run, tmp_path):
    out, cfg, report = pipeline_run
    first = (out / "report.json").read_bytes()

    # full rerun from scratch in a new directory: byte-identical report
    cfg2 = small_cfg(tmp_path / "fresh")
    run_pipeline(cfg2)
    assert (tmp_path / "fresh" / "report.json").read_bytes() == first

    # resumed rerun from the persisted artifacts: same accuracies, labeling skipped
    report2 = run_pipeline(cfg)
    a1 = report["speakers"]["synth_speaker"]["arms"]
    a2 = report2["speakers"]["synth_speaker"]["arms"]
    for arm in a1:
        assert a2[arm]["accuracy"] == a1[arm]["accuracy"]
        assert a2[arm]["gamma_at_far"] == a1[arm]["gamma_at_far"]
    assert "labeling_stats" in a1["self"]
    assert "labeling_stats" not in a2["self"]  # stream was not re-run


def test_pipeline_phase_isolation(pipeline_run, tmp_path):
    """Deleting downstream artifacts and rerunning reproduces them."""
    out, cfg, report = pipeline_run
    clone = tmp_path / "clone"
    shutil.copytree(out, clone)
    (clone / "synth_speaker" / "finetuned.ckpt").unlink()
    (clone / "synth_speaker" / "calibration_post.json").unlink()
    (clone / "report.json").unlink()
    cfg3 = small_cfg(clone)
    run_pipeline(cfg3)
    assert (clone / "synth_speaker" / "finetuned.ckpt").read_bytes() == (
        out / "synth_speaker" / "finetuned.ckpt"
    ).read_bytes()
    assert (clone / "synth_speaker" / "calibration_post.json").read_bytes() == (
        out / "synth_speaker" / "calibration_post.json"
    ).read_bytes()


def test_pipeline_epochs_zero_self_equals_pretrained(tmp_path):
    cfg = small_cfg(tmp_path / "zero", epochs=0)
    report = run_pipeline(cfg)
    arms = report["speakers"]["synth_speaker"]["arms"]
    assert arms["self"]["accuracy"] == arms["pretrained"]["accuracy"]
    assert arms["self"]["gamma_at_far"] == arms["pretrained"]["gamma_at_far"]
