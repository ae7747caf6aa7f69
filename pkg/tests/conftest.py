import numpy as np
import pytest
import torch

from uvmapid.datakit import load_manifest
from uvmapid.fusion import DenoiserConfig
from uvmapid.render import load_layout
from uvmapid.synthetic import write_training_set
from uvmapid.trainer import ModelConfig


@pytest.fixture(scope="session")
def layout():
    return load_layout()


@pytest.fixture(scope="session")
def dataset_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("synthetic")
    write_training_set(d, n_ids=4, maps_per_id=2, seed=0)
    return d


@pytest.fixture
def manifest(dataset_dir):
    return load_manifest(dataset_dir / "manifest.jsonl")


def make_tiny_model_cfg():
    """Under 10^4 parameters in total, for finite-difference checks."""
    return ModelConfig(
        denoiser=DenoiserConfig(
            latent_channels=4, channels=4, d_text=8, d_img=8, d_k=4, d_v=4, d_time=8,
            num_timesteps=1000, zero_init_image_branch=False,
        ),
        d_face=16,
        num_face_tokens=2,
        max_text_tokens=3,
        texture_size=32,
        latent_size=8,
    )


@pytest.fixture
def tiny_model_cfg():
    return make_tiny_model_cfg()


@pytest.fixture
def rng():
    return np.random.default_rng(20261016)


@pytest.fixture(autouse=True)
def _torch_threads():
    torch.set_num_threads(1)
    yield
