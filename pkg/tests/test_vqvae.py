import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cogesture.checkpoint import load_checkpoint
from cogesture.errors import CheckpointMismatchError, NumericalError, ShapeError, StateError, ValidationError
from cogesture.motion.corpus import CorpusConfig, generate_corpus
from cogesture.motion.types import Motion, pose_dim
from cogesture.vqvae import (
    LatentSequence,
    MotionCodec,
    VQVAEConfig,
    feature_arrays,
    load_codec,
    quantize,
    renormalize_poses,
    save_codec,
    train_vqvae,
)

TOY = dict(latent_dim=8, codebook_size=16, width=16, clip_frames=32)


@pytest.fixture(scope="module")
def small_corpus():
    c = generate_corpus(0, CorpusConfig(num_items=48, sentences_per_session=4))
    tr, te = c.split(0.15)
    return feature_arrays(tr), feature_arrays(te)


@pytest.fixture(scope="module")
def trained(small_corpus):
    tr, te = small_corpus
    cfg = VQVAEConfig(latent_dim=16, codebook_size=32, width=32, epochs=40, batch_size=16, clip_frames=96)
    return train_vqvae(tr, cfg, te)


def test_downsample_rate_eight():
    codec = MotionCodec(VQVAEConfig(**TOY))
    assert codec.downsample == 8
    lat = codec.encode(Motion(np.zeros((32, pose_dim(8)))))
    assert lat.codes.shape == (4, 8)


def test_encode_pads_to_multiple_of_d(rng):
    codec = MotionCodec(VQVAEConfig(**TOY))
    m = Motion(rng.standard_normal((13, pose_dim(8))))
    lat = codec.encode(m)
    assert len(lat) == 2 and lat.pad_length == 3
    out = codec.decode(codec.quantize(lat))
    assert out.num_frames == 16 and out.trimmed().num_frames == 13


def test_identical_motions_identical_latents(rng):
    codec = MotionCodec(VQVAEConfig(**TOY))
    m = Motion(rng.standard_normal((24, pose_dim(8))))
    assert np.array_equal(codec.encode(m).codes, codec.encode(Motion(m.poses.copy())).codes)


def test_pool_toy_encoder_is_pooled_projection(rng):
    cfg = VQVAEConfig(kind="pool", **TOY)
    codec = MotionCodec(cfg)
    W = rng.standard_normal((8, pose_dim(8)))
    b = rng.standard_normal(8)
    with torch.no_grad():
        codec.encoder.proj.weight.copy_(torch.tensor(W))
        codec.encoder.proj.bias.copy_(torch.tensor(b))
    poses = rng.standard_normal((8, pose_dim(8)))
    z = codec.encode(Motion(poses)).codes
    assert z.shape == (1, 8)
    np.testing.assert_allclose(z[0], W @ poses.mean(0) + b, rtol=1e-5, atol=1e-5)


def test_width_mismatch_raises(rng):
    codec = MotionCodec(VQVAEConfig(**TOY))
    with pytest.raises(ShapeError):
        codec.encode(Motion(rng.standard_normal((8, pose_dim(6)))))


def test_quantize_exact_member_and_hand_case():
    book = np.array([[0.0, 0.0], [1.0, 1.0]])
    idx, zq = quantize([[0.1, 0.2]], book)
    assert idx.tolist() == [0] and np.array_equal(zq, [[0.0, 0.0]])
    rng = np.random.default_rng(0)
    big = rng.standard_normal((10, 4))
    idx, zq = quantize(big[3:4], big)
    assert idx.tolist() == [3] and np.array_equal(zq[0], big[3])


def test_quantize_errors():
    with pytest.raises(StateError):
        quantize([[0.0]], np.zeros((0, 1)))
    with pytest.raises(ShapeError):
        quantize([[0.0, 1.0]], np.zeros((3, 3)))


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (12, 3), elements=st.floats(-5, 5)), arrays(np.float64, (7, 3), elements=st.floats(-5, 5)))
def test_quantize_idempotent_and_optimal(codes, book):
    idx, zq = quantize(codes, book)
    idx2, zq2 = quantize(zq, book)
    assert np.array_equal(zq, zq2)
    d = ((codes[:, None] - book[None]) ** 2).sum(-1)
    np.testing.assert_allclose(d[np.arange(12), idx], d.min(1))
    # lowest index among ties
    for i in range(12):
        assert idx[i] == np.flatnonzero(d[i] == d[i].min())[0]


def test_decode_shape_and_determinism(rng):
    codec = MotionCodec(VQVAEConfig(**TOY))
    lat = LatentSequence(rng.standard_normal((1, 8)))
    a, b = codec.decode(lat), codec.decode(lat)
    assert a.num_frames == 8 and a == b


def test_decode_renormalizes_rotations(rng):
    codec = MotionCodec(VQVAEConfig(**TOY))
    out = codec.decode(LatentSequence(rng.standard_normal((2, 8))))
    a = out.joint_rotations[..., :3]
    np.testing.assert_allclose(np.linalg.norm(a, axis=-1), 1.0, atol=1e-12)


def test_renormalize_poses_leaves_root_alone(rng):
    p = rng.standard_normal((4, pose_dim(2)))
    out = renormalize_poses(p)
    assert np.array_equal(out[:, :3], p[:, :3])


def test_loss_terms_on_exact_codebook_latent(rng):
    codec = MotionCodec(VQVAEConfig(**TOY))
    x = torch.tensor(rng.standard_normal((1, 8, pose_dim(8))), dtype=torch.float32)
    with torch.no_grad():
        z = codec.encode_tensor(x)
        codec.reset_codes(torch.arange(1), z.reshape(-1, 8)[:1])
    out = codec.losses(x)
    assert out["indices"].item() == 0
    assert out["codebook"].item() == 0.0 and out["commitment"].item() == 0.0


def test_beta_zero_total_is_reconstruction_plus_codebook(rng):
    codec = MotionCodec(VQVAEConfig(beta=0.0, **TOY))
    out = codec.losses(torch.tensor(rng.standard_normal((2, 16, pose_dim(8))), dtype=torch.float32))
    assert out["commitment"].item() == 0.0
    assert out["total"].item() == pytest.approx(out["reconstruction"].item() + out["codebook"].item(), rel=1e-6)


def test_memorized_item_reconstructs_near_zero():
    # a codec whose encoder/decoder are exact inverses on a one-code dataset
    cfg = VQVAEConfig(kind="pool", latent_dim=pose_dim(1), codebook_size=2, width=8, clip_frames=8, rot6d_offset=-1,
                      input_dim=pose_dim(1))
    codec = MotionCodec(cfg)
    with torch.no_grad():
        for lin in (codec.encoder.proj, codec.decoder.proj):
            lin.weight.copy_(torch.eye(pose_dim(1)))
            lin.bias.zero_()
    poses = np.tile(np.linspace(-1, 1, pose_dim(1)), (8, 1))
    with torch.no_grad():
        codec.reset_codes(torch.arange(1), torch.tensor(poses[:1], dtype=torch.float32))
    rec = codec.reconstruct(Motion(poses))
    np.testing.assert_allclose(rec.poses, poses, atol=1e-6)


def test_training_improves_and_keeps_codes_alive(trained):
    _, rep = trained
    assert rep["heldout_mse"] < rep["initial_heldout"]
    assert rep["final_dead_fraction"] < 0.2
    assert all("dead_fraction" in e for e in rep["epochs"])


def test_training_is_reproducible(small_corpus):
    tr, _ = small_corpus
    cfg = dict(latent_dim=8, codebook_size=16, width=16, epochs=3, batch_size=16, clip_frames=48)
    _, r1 = train_vqvae(tr, VQVAEConfig(**cfg))
    _, r2 = train_vqvae(tr, VQVAEConfig(**cfg))
    assert abs(r1["final_loss"] - r2["final_loss"]) < 1e-6


def test_training_divergence_raises(small_corpus):
    tr, _ = small_corpus
    with pytest.raises(NumericalError):
        train_vqvae(tr, VQVAEConfig(lr=1e30, epochs=3, batch_size=16, **{k: v for k, v in TOY.items()}))


def test_empty_corpus_rejected():
    with pytest.raises(ValidationError):
        train_vqvae([], VQVAEConfig(**TOY))


def test_checkpoint_round_trip(tmp_path, trained):
    codec, _ = trained
    save_codec(codec, tmp_path / "c.pt")
    back = load_codec(tmp_path / "c.pt", expect_input_dim=codec.cfg.input_dim)
    assert np.array_equal(back.codebook_array(), codec.codebook_array())
    with pytest.raises(CheckpointMismatchError):
        load_codec(tmp_path / "c.pt", expect_input_dim=39)
    with pytest.raises(CheckpointMismatchError):
        load_checkpoint(tmp_path / "c.pt", "style")
