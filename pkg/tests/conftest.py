import numpy as np
import pytest

from reinlab.adapter import ReinConfig
from reinlab.data import generate_benchmark
from reinlab.head import HeadConfig
from reinlab.train import TrainConfig
from reinlab.vit import ViTConfig


@pytest.fixture(scope="session")
def tiny_benchmark(tmp_path_factory):
    """6-class 32px benchmark with a handful of scenes, shared per session."""
    root = tmp_path_factory.mktemp("bench32")
    generate_benchmark(root, k=6, size=32, counts=(8, 3, 3), seed=0)
    return root


def tiny_train_config(data_root, mode="rein", variant="rein-lora", **overrides):
    vit = ViTConfig(image_size=32, patch_size=8, depth=2, dim=32, heads=4)
    rein = ReinConfig.from_variant(variant, c=32, depth=2, m=6, r=2, c_prime=8)
    head = HeadConfig(num_classes=6, embed_dim=16, num_queries=6)
    base = dict(vit=vit, head=head, rein=rein, mode=mode, iterations=20,
                batch_size=2, eval_interval=10, loss_window=10,
                data_root=str(data_root), seed=0)
    base.update(overrides)
    return TrainConfig(**base)
