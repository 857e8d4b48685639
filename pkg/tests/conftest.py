import numpy as np
import pytest
import torch

from raffnet.anchors import preset_anchor_config
from raffnet.model import ModelConfig, build_model
from raffnet.synthetic import make_blob_dataset

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_blob(tmp_path_factory):
    """40-image blob dataset shared across tests that only read it."""
    root = tmp_path_factory.mktemp("blob40")
    manifest = make_blob_dataset(root, n_images=40, image_size=48, n_subjects=5, seed=11)
    return manifest


@pytest.fixture()
def tiny_model():
    cfg = ModelConfig(
        backend="toy-vit-d8",
        anchors=preset_anchor_config(22),
        seed=7,
        fecal_enabled=True,
    )
    return build_model(cfg)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
