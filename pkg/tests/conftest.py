import os

import numpy as np
import pytest
import torch

from cogesture.config import tiny_config
from cogesture.pipeline import Workspace, stage_bodypart, train_all
from cogesture.utils import seed_everything

torch.set_num_threads(1)


@pytest.fixture(autouse=True)
def _seed():
    seed_everything(0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_cfg():
    return tiny_config()


@pytest.fixture(scope="session")
def tiny_workspace(tmp_path_factory, tiny_cfg):
    """Every stage trained once on the tiny preset (a few seconds)."""
    ws = Workspace(tmp_path_factory.mktemp("tiny-ws"))
    train_all(tiny_cfg, ws)
    stage_bodypart(tiny_cfg, ws)
    return ws


@pytest.fixture(scope="session")
def cogesture_home(tmp_path_factory):
    return tmp_path_factory.mktemp("home")


@pytest.fixture(autouse=True)
def _isolated_home(monkeypatch, cogesture_home):
    # keep CLI defaults away from the user's cache unless a test opts in
    if "COGESTURE_ACCEPTANCE_HOME" not in os.environ:
        monkeypatch.setenv("COGESTURE_HOME", str(cogesture_home))


@pytest.fixture(scope="session")
def tiny_parts(tiny_workspace, tiny_cfg):
    """Frozen codec, embedding and style space from the tiny workspace plus diffusion data for a few items."""
    from cogesture.denoiser import build_diffusion_data
    from cogesture.pipeline import corpus_split, load_codec_checked, load_embedding_checked, load_style_checked

    codec = load_codec_checked(tiny_workspace, tiny_cfg)
    emb = load_embedding_checked(tiny_workspace, codec)
    space = load_style_checked(tiny_workspace, tiny_cfg)
    _, train, test = corpus_split(tiny_cfg)
    data = build_diffusion_data(train[:6], codec, emb, space, seed=0)
    return codec, emb, space, data, train, test
