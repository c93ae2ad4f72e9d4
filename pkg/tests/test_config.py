import json

import pytest

from cogesture.config import (
    DESK_OVERRIDES,
    PipelineConfig,
    build_config,
    desk_config,
    dump_config,
    load_config,
    parse_override,
    tiny_config,
)
from cogesture.errors import ValidationError


def test_reference_defaults():
    cfg = PipelineConfig()
    assert cfg.vqvae.latent_dim == 512 and cfg.vqvae.codebook_size == 512
    assert cfg.style.width == 768 and cfg.denoiser.diffusion_steps == 1000
    assert cfg.denoiser.w_semantic == pytest.approx(0.1) and cfg.denoiser.w_style == pytest.approx(0.07)
    assert cfg.bodypart.w_body == pytest.approx(0.01)
    assert cfg.evaluation.min_classifier_accuracy == pytest.approx(0.9)


def test_shared_widths_are_derived():
    cfg = build_config({"corpus": {"num_joints": 8}, "vqvae": {"latent_dim": 24}, "style": {"width": 40}})
    assert cfg.vqvae.input_dim == 3 + 6 * 8
    assert cfg.embedding.latent_dim == cfg.denoiser.latent_dim == 24
    assert cfg.denoiser.style_dim == 40
    assert cfg.denoiser.text_dim == cfg.embedding.width
    assert cfg.style.style_tags == tuple(cfg.corpus.style_tags)


def test_presets_apply_overrides():
    d = desk_config()
    for block, kv in DESK_OVERRIDES.items():
        for k, v in kv.items():
            if k != "parts":
                assert getattr(getattr(d, block), k) == v
    t = tiny_config()
    assert t.corpus.num_items == 64 and t.denoiser.diffusion_steps == 20
    assert tiny_config(seed=5).seed == 5
    with pytest.raises(ValidationError):
        build_config({}, preset="huge")


def test_unknown_keys_report_their_path():
    with pytest.raises(ValidationError, match="denoiser.*widht|widht"):
        build_config({"denoiser": {"widht": 3}})
    with pytest.raises(ValidationError, match="bogus"):
        build_config({"bogus": 1})


def test_parse_override():
    assert parse_override("denoiser.width=48") == {"denoiser": {"width": 48}}
    assert parse_override("corpus.style_tags=[a, b]") == {"corpus": {"style_tags": ["a", "b"]}}
    assert parse_override("seed=3") == {"seed": 3}
    for bad in ("denoiser.width", "a..b=1"):
        with pytest.raises(ValidationError):
            parse_override(bad)


@pytest.mark.parametrize("suffix", [".json", ".yaml"])
def test_dump_load_round_trip(tmp_path, suffix):
    cfg = tiny_config(seed=7)
    path = tmp_path / f"c{suffix}"
    dump_config(cfg, path)
    back = load_config(path, preset="tiny")
    assert back.to_dict() == cfg.to_dict()


def test_preset_key_and_overrides(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"preset": "tiny", "denoiser": {"layers": 3}}))
    cfg = load_config(path, overrides=["seed=11"])
    assert cfg.denoiser.layers == 3 and cfg.seed == 11 and cfg.corpus.num_items == 64
    assert load_config(None).vqvae.latent_dim == 512


def test_bad_files(tmp_path):
    with pytest.raises(ValidationError):
        load_config(tmp_path / "missing.yaml")
    (tmp_path / "list.yaml").write_text("- 1\n- 2\n")
    with pytest.raises(ValidationError):
        load_config(tmp_path / "list.yaml")
    (tmp_path / "broken.json").write_text("{")
    with pytest.raises(ValidationError):
        load_config(tmp_path / "broken.json")
