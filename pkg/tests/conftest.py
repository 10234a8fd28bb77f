import numpy as np
import pytest

from muxformer.data import Dataset
from muxformer.models import ModelConfig, MuxBatch


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_config(**overrides) -> ModelConfig:
    base = dict(image_size=8, channels=1, patch_size=2, dim=8, heads=2, total_layers=3,
                concat_point=1, n_mux=2, num_classes=3, demux_hidden=8, codebook_size=16)
    base.update(overrides)
    return ModelConfig(**base).validate()


def random_batch(cfg: ModelConfig, group: int, seed: int = 0, dtype=np.float32) -> MuxBatch:
    r = np.random.default_rng(seed)
    shape = (group, cfg.channels, cfg.image_size, cfg.image_size)
    return MuxBatch(
        groups=[r.standard_normal(shape).astype(dtype) for _ in range(cfg.n_mux)],
        labels=[r.integers(0, cfg.num_classes, group) for _ in range(cfg.n_mux)],
        ids=[np.arange(i * group, (i + 1) * group) for i in range(cfg.n_mux)],
    )


def synthetic_dataset(count: int, size: int = 8, classes: int = 3, seed: int = 0) -> Dataset:
    """Class k brightens row band k, so a model can actually learn it."""
    r = np.random.default_rng(seed)
    labels = np.arange(count) % classes
    images = 0.1 * r.standard_normal((count, 1, size, size)).astype(np.float32)
    band = size // classes
    for i, k in enumerate(labels):
        images[i, 0, k * band:(k + 1) * band] += 1.0
    return Dataset(images, labels.astype(np.int64), np.arange(count, dtype=np.int64), classes)
