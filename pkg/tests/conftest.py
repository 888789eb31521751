import numpy as np
import pytest

from auxcnn.data import AugmentConfig, SplitSpec, generate_synthetic_dataset, split_dataset
from auxcnn.networks import DNetConfig, FNetConfig, RNetConfig, build_bundle


@pytest.fixture(scope="session")
def tiny_splits():
    """A small 3-class dataset split for fast training tests."""
    ds = generate_synthetic_dataset(3, (20, 28, 24), 32, seed=42)
    return split_dataset(ds, SplitSpec(test_per_class=4, validation_fraction=0.2, seed=42))


@pytest.fixture(scope="session")
def easy_splits():
    """A larger, easily separable dataset where loss descent is reliable."""
    ds = generate_synthetic_dataset(3, (44, 60, 52), 32, seed=17)
    return split_dataset(ds, SplitSpec(test_per_class=6, validation_fraction=0.2, seed=17))


@pytest.fixture
def tiny_augment():
    return AugmentConfig(target_size=32)


def small_full_bundle(class_count=3, dtype=np.float32, d_base=8):
    return build_bundle(
        FNetConfig(depth=12, image_size=32),
        class_count,
        RNetConfig(image_size=32, reshape_side=8),
        DNetConfig(image_size=32, class_count=class_count, base_channels=d_base),
        dtype=dtype,
    )


def small_baseline_bundle(class_count=3, dtype=np.float32):
    return build_bundle(FNetConfig(depth=12, image_size=32), class_count, dtype=dtype)
