import pytest
import torch

from vicprompt.backbone import BackboneConfig, pretrain_backbone
from vicprompt.data import SHAPE_CLASSES, DatasetSpec, generate_dataset

torch.set_num_threads(1)

TINY = BackboneConfig(enc_channels=16, d_model=32, heads=2, depth=1, tok_steps=40, pred_steps=40,
                      tok_batch=8, pred_batch=8, label_tasks=("mask",))


@pytest.fixture(scope="session")
def toy_data():
    return generate_dataset(DatasetSpec(classes=SHAPE_CLASSES[:4], per_class_count=8, seed=3))


@pytest.fixture(scope="session")
def tiny_bundle(toy_data):
    """Barely trained backbone: enough for contracts, not for accuracy."""
    return pretrain_backbone(toy_data, TINY, seed=0)
