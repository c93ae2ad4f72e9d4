import numpy as np
import pytest
import torch

from cogesture.bodypart import (
    BodyPartition,
    StackedCodes,
    channel_masks,
    check_masks,
    combine_noises,
    decode_stacked,
    sample_bodypart,
    smoothness_term,
    split_and_encode,
)
from cogesture.denoiser import generate_latents
from cogesture.errors import ShapeError, StateError, ValidationError
from cogesture.motion.corpus import CorpusConfig, generate_corpus
from cogesture.motion.skeleton import TOY_SKELETON
from cogesture.motion.types import pose_dim
from cogesture.pipeline import condition_batch, load_models, synthesize_parts
from cogesture.speech import Sentence
from cogesture.vqvae import MotionCodec, VQVAEConfig

TWO = {"upper": ("spine", "l_shoulder", "l_elbow", "r_shoulder", "r_elbow"), "lower": ("pelvis", "l_hip", "r_hip")}


@pytest.fixture(scope="module")
def motion():
    return generate_corpus(0, CorpusConfig(num_items=2, sentences_per_session=2)).items[0].motion


def _codecs(partition):
    torch.manual_seed(0)
    return {n: MotionCodec(VQVAEConfig(input_dim=len(partition.columns(n)), latent_dim=4, codebook_size=8, width=8,
                                       clip_frames=32, rot6d_offset=partition.rot6d_offset(n)))
            for n in partition.names}


def test_partition_columns_cover_pose_once():
    p = BodyPartition.from_names()
    cols = np.concatenate([p.columns(n) for n in p.names])
    assert sorted(cols.tolist()) == list(range(pose_dim(8)))
    assert p.columns("torso")[:3].tolist() == [0, 1, 2]


def test_split_assemble_round_trip(rng):
    p = BodyPartition.from_names(TWO, root_part="upper")
    poses = rng.standard_normal((5, pose_dim(8)))
    assert np.array_equal(p.assemble(p.split(poses)), poses)
    t = torch.tensor(poses)
    assert torch.equal(p.assemble_torch({k: torch.tensor(v) for k, v in p.split(poses).items()}), t)
    with pytest.raises(ShapeError):
        p.split(rng.standard_normal((5, pose_dim(6))))


@pytest.mark.parametrize("mapping", [{"a": ("pelvis",)}, {"a": tuple(TOY_SKELETON.names), "b": ("pelvis",)}])
def test_bad_partitions(mapping):
    with pytest.raises(ValidationError):
        BodyPartition.from_names(mapping, root_part="a")


def test_two_part_split_shapes_and_reassembly(motion):
    p = BodyPartition.from_names(TWO, root_part="upper")
    codecs = _codecs(p)
    stacked = split_and_encode(motion, p, codecs)
    L = -(-motion.num_frames // 8)
    assert stacked.codes.shape == (2, L, 4)
    assert stacked.flat().shape == (L, 8)
    back = StackedCodes.from_flat(stacked.flat(), p.names)
    assert np.array_equal(back.codes, stacked.codes)
    m = decode_stacked(stacked, p, codecs)
    assert m.poses.shape[1] == pose_dim(8) and m.trimmed().num_frames == motion.num_frames


def test_channel_masks():
    m = channel_masks(3, 2)
    assert m.tolist() == [[1, 1, 0, 0, 0, 0], [0, 0, 1, 1, 0, 0], [0, 0, 0, 0, 1, 1]]
    check_masks(m)
    with pytest.raises(ValidationError):
        check_masks(np.array([[1, 1], [0, 1.0]]))
    with pytest.raises(ValidationError):
        check_masks(np.array([[1, 0], [0, 0.0]]))
    with pytest.raises(ValidationError):
        check_masks(np.array([[0.5, 1], [0.5, 0]]))


def _noise_fns(O, W, seed=0):
    g = torch.Generator().manual_seed(seed)
    mats = [torch.randn(W, W, generator=g, dtype=torch.float64) for _ in range(O)]
    return lambda z: [torch.tanh(z @ m) for m in mats]


def test_identical_noises_reduce_to_single():
    z = torch.randn(2, 3, 6, dtype=torch.float64, requires_grad=True)
    e = torch.tanh(z)
    out = combine_noises([e, e, e], channel_masks(3, 2), 0.5, z)
    assert torch.equal(out, e.detach())
    assert smoothness_term([e, e, e]).item() == 0.0


def test_zero_weight_is_masked_stitch():
    z = torch.randn(1, 4, 6, dtype=torch.float64, requires_grad=True)
    eps = _noise_fns(3, 6)(z)
    out = combine_noises(eps, channel_masks(3, 2), 0.0)
    expected = torch.cat([eps[0][..., :2], eps[1][..., 2:4], eps[2][..., 4:]], -1)
    assert torch.equal(out, expected.detach())


def test_combine_needs_differentiable_input():
    eps = [torch.zeros(1, 2, 4), torch.ones(1, 2, 4)]
    with pytest.raises(ValidationError):
        combine_noises(eps, channel_masks(2, 2), 0.1)
    with pytest.raises(ValidationError):
        combine_noises(eps, channel_masks(3, 2)[:, :4], 0.0)


def test_smoothness_term_hand_value():
    a = torch.zeros(1, 1, 2, dtype=torch.float64)
    b = torch.tensor([[[3.0, 4.0]]], dtype=torch.float64)
    # ordered pairs: |a-b| + |b-a|
    assert smoothness_term([a, b]).item() == 10.0


def test_smoothness_gradient_matches_finite_differences():
    fn = _noise_fns(3, 6, seed=2)
    z0 = torch.randn(2, 4, 6, dtype=torch.float64, generator=torch.Generator().manual_seed(5))
    z = z0.clone().requires_grad_(True)
    eps = fn(z)
    w = 0.3
    out = combine_noises(eps, channel_masks(3, 2), w, z)
    stitch = combine_noises([e.detach() for e in eps], channel_masks(3, 2), 0.0)
    grad = (out - stitch) / w
    numeric = torch.zeros_like(z0)
    h = 1e-6
    flat = z0.view(-1)
    for i in range(flat.numel()):
        up, down = z0.clone(), z0.clone()
        up.view(-1)[i] += h
        down.view(-1)[i] -= h
        numeric.view(-1)[i] = (smoothness_term(fn(up)) - smoothness_term(fn(down))) / (2 * h)
    rel = (grad - numeric).norm() / numeric.norm()
    assert rel.item() < 1e-3


# -- sampling with the tiny body-part model ---------------------------------------

@pytest.fixture(scope="module")
def bp_models(tiny_workspace, tiny_cfg):
    return load_models(tiny_workspace, tiny_cfg, bodypart=True)


@pytest.fixture(scope="module")
def sentence(tiny_parts):
    return Sentence.from_item(tiny_parts[5][0])


def test_identical_prompts_bit_equal_single_prompt(bp_models, sentence):
    z_s = bp_models.style_space.encode_style_text("the person is large").z_s
    batch = condition_batch(bp_models, [sentence], z_s[None])
    single = generate_latents(bp_models.denoiser, batch, np.random.default_rng(9), s=1.5)
    O = len(bp_models.partition)
    masks = channel_masks(O, bp_models.denoiser.cfg.latent_dim // O)
    parts = sample_bodypart(bp_models.denoiser, condition_batch(bp_models, [sentence]), [z_s[None]] * O, 1.5,
                            np.random.default_rng(9), bp_models.denoiser.cfg.make_schedule(), masks, w_body=0.01)
    assert np.array_equal(parts, single)


def test_unconditional_parts_match_unconditional_sampling(bp_models, sentence):
    batch = condition_batch(bp_models, [sentence])
    single = generate_latents(bp_models.denoiser, batch, np.random.default_rng(4), s=1.5, use_style=False)
    O = len(bp_models.partition)
    masks = channel_masks(O, bp_models.denoiser.cfg.latent_dim // O)
    parts = sample_bodypart(bp_models.denoiser, batch, [None] * O, 1.5, np.random.default_rng(4),
                            bp_models.denoiser.cfg.make_schedule(), masks)
    assert np.array_equal(parts, single)


def test_mixed_prompts_deterministic(bp_models, sentence):
    space = bp_models.style_space
    styles = {"upper": space.encode_style_text("large").z_s, "torso": space.encode_style_text("small").z_s}
    a = synthesize_parts(bp_models, sentence, styles, np.random.default_rng(1))
    b = synthesize_parts(bp_models, sentence, styles, np.random.default_rng(1))
    assert a == b and a.num_frames == sentence.num_frames
    with pytest.raises(ValidationError):
        synthesize_parts(bp_models, sentence, {"tail": styles["upper"]}, np.random.default_rng(1))


def test_parts_need_bodypart_models(tiny_workspace, tiny_cfg, sentence):
    models = load_models(tiny_workspace, tiny_cfg)
    with pytest.raises(StateError):
        synthesize_parts(models, sentence, {}, np.random.default_rng(0))
