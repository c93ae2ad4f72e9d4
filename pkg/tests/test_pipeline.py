import json
import shutil

import numpy as np
import pytest

from cogesture.checkpoint import file_hash
from cogesture.config import tiny_config
from cogesture.errors import CheckpointMismatchError, StateError, ValidationError
from cogesture.evaluation import read_report
from cogesture.pipeline import (
    OUTPUTS,
    Workspace,
    corpus_split,
    evaluate_workspace,
    load_models,
    prompt_bank,
    run_pipeline,
    stage_ablation,
    style_schedule,
    synthesize,
    train_all,
)
from cogesture.speech import Sentence


@pytest.fixture
def ws_copy(tiny_workspace, tmp_path):
    return Workspace(shutil.copytree(tiny_workspace.root, tmp_path / "ws"))


@pytest.fixture(scope="module")
def models(tiny_workspace, tiny_cfg):
    return load_models(tiny_workspace, tiny_cfg)


@pytest.fixture(scope="module")
def sentences(tiny_cfg):
    _, _, test = corpus_split(tiny_cfg)
    return [Sentence.from_item(it) for it in test[:3]]


def _hashes(ws):
    return {k: file_hash(ws.path(v)) for k, v in OUTPUTS.items() if ws.path(v).exists()}


def test_manifest_records_lineage(tiny_workspace):
    stages = tiny_workspace.manifest()["stages"]
    assert {"vqvae", "embedding", "style", "classifier", "diffusion", "bodypart"} <= set(stages)
    assert stages["diffusion"]["consumed"]["codec.pt"] == file_hash(tiny_workspace.path("codec.pt"))


def test_resume_skips_current_stages(ws_copy, tiny_cfg):
    before = _hashes(ws_copy)
    train_all(tiny_cfg, ws_copy, resume=True)
    assert _hashes(ws_copy) == before


def test_resume_retrains_only_changed_stage(ws_copy, tiny_cfg):
    before = _hashes(ws_copy)
    cfg = tiny_config(denoiser={"train_steps": 10})
    train_all(cfg, ws_copy, resume=True)
    after = _hashes(ws_copy)
    assert after["diffusion"] != before["diffusion"]
    assert {k: v for k, v in after.items() if k != "diffusion"} == {k: v for k, v in before.items() if k != "diffusion"}


def test_lineage_mismatch_detected(ws_copy, tiny_cfg):
    path = ws_copy.path("embedding.pt")
    path.write_bytes(path.read_bytes() + b"\0")
    with pytest.raises(CheckpointMismatchError):
        load_models(ws_copy, tiny_cfg)
    ws_copy.path("style.pt").unlink()
    with pytest.raises((StateError, CheckpointMismatchError)):
        load_models(ws_copy, tiny_cfg)


def test_missing_checkpoint_is_state_error(tmp_path, tiny_cfg):
    with pytest.raises(StateError):
        load_models(Workspace(tmp_path / "empty"), tiny_cfg)


def test_mismatched_skeleton_refused(tiny_workspace):
    with pytest.raises(CheckpointMismatchError):
        load_models(tiny_workspace, tiny_config(corpus={"num_joints": 6}))


def test_unknown_ablation(ws_copy, tiny_cfg):
    with pytest.raises(ValidationError):
        stage_ablation(tiny_cfg, ws_copy, "no_audio")


def test_synthesis_deterministic_and_sized(models, sentences):
    a = synthesize(models, sentences, None, np.random.default_rng(3))
    b = synthesize(models, sentences, None, np.random.default_rng(3))
    assert all(x == y for x, y in zip(a, b))
    assert [m.num_frames for m in a] == [s.num_frames for s in sentences]


def test_schedule_single_sentence_equals_plain_generation(models, sentences):
    z = models.style_space.encode_style_text("large").z_s
    plain = synthesize(models, sentences[:1], z[None], np.random.default_rng(8))[0]
    sched = style_schedule(models, sentences[:1], [z], np.random.default_rng(8))
    np.testing.assert_array_equal(sched.poses, plain.poses)


def test_schedule_without_prompts_is_unconditional(models, sentences):
    plain = synthesize(models, sentences[:1], None, np.random.default_rng(2))[0]
    sched = style_schedule(models, sentences[:1], [], np.random.default_rng(2))
    np.testing.assert_array_equal(sched.poses, plain.poses)


def test_schedule_concatenates_sentences(models, sentences):
    space = models.style_space
    prompts = [space.encode_style_text(t).z_s for t in ("large", "small", "fast")]
    take = style_schedule(models, sentences, prompts, np.random.default_rng(0))
    assert take.num_frames == sum(s.num_frames for s in sentences)
    with pytest.raises(ValidationError):
        style_schedule(models, sentences, prompts[:2], np.random.default_rng(0))


def test_prompt_bank(models, tiny_cfg):
    _, train, _ = corpus_split(tiny_cfg)
    bank = prompt_bank(models.style_space, train, 3, (96, 120), np.random.default_rng(0))
    assert set(bank) == set(models.tags)
    for rows in bank.values():
        assert rows.shape == (3, models.style_space.cfg.width)
        np.testing.assert_allclose(np.linalg.norm(rows, axis=1), 1.0, atol=1e-5)


def test_evaluate_workspace_report_shape(tiny_workspace, tiny_cfg):
    metrics = evaluate_workspace(tiny_cfg, tiny_workspace)
    assert set(metrics) == {"SC", "SRA", "FGD"}
    assert all(np.isfinite(v["mean"]) and v["std"] >= 0 for v in metrics.values())
    assert -1 <= metrics["SC"]["mean"] <= 1 and 0 <= metrics["SRA"]["mean"] <= 1


def test_pipeline_reruns_are_identical(tmp_path, tiny_cfg):
    reports = []
    for name in ("a", "b"):
        ws = Workspace(tmp_path / name)
        run_pipeline(tiny_cfg, ws)
        reports.append(ws.path("report.json").read_bytes())
    assert reports[0] == reports[1]
    assert read_report(tmp_path / "a" / "report.json")["format"] == "cogesture-report"
    json.loads(reports[0])
