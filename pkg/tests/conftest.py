import pytest
import torch

from hshield.core import DiffusionModel, ModelConfig

# Small architecture used by most unit tests; the acceptance suite builds the
# default desk-scale config separately.
TINY = ModelConfig(image_size=16, base_channels=8, d_text=16, seq_len=10,
                   timesteps=50, init_seed=7)


@pytest.fixture(scope="session")
def tiny_model():
    return DiffusionModel(TINY)


@pytest.fixture()
def tiny_clone(tiny_model):
    return tiny_model.clone()


@pytest.fixture(scope="session")
def tiny_prompt(tiny_model):
    return tiny_model.encode_prompt("a photo of sks person")


def rand_image(size: int, seed: int = 0) -> torch.Tensor:
    gen = torch.Generator().manual_seed(seed)
    return torch.rand((3, size, size), generator=gen)
