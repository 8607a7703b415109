"""Shared fixtures: trained toy models and corpora, built once per session."""

import numpy as np
import pytest

from localadv.models import (
    ToyConvNet,
    ToyReferenceModel,
    make_dataset,
    train,
)
from localadv.oracle import MeanSubtractAdapter, RangeAdapter

TRAIN_SEED = 11
TEST_SEED = 999


@pytest.fixture(scope="session")
def train_ds():
    return make_dataset(240, seed=TRAIN_SEED)


@pytest.fixture(scope="session")
def test_ds():
    return make_dataset(100, seed=TEST_SEED)


@pytest.fixture(scope="session")
def target_net(train_ds):
    net = ToyConvNet(
        conv_channels=(16, 24),
        num_classes=2,
        adapter=MeanSubtractAdapter([128.0] * 3),
        seed=7,
    )
    return train(net, train_ds, epochs=20, seed=107)


@pytest.fixture(scope="session")
def reference_net(train_ds):
    net = ToyConvNet(
        conv_channels=(16,),
        num_classes=2,
        adapter=RangeAdapter(),
        seed=57,
    )
    return train(net, train_ds, epochs=20, seed=157)


@pytest.fixture(scope="session")
def reference(reference_net):
    return ToyReferenceModel(reference_net)


@pytest.fixture(scope="session")
def target_reference(target_net):
    """White-box view of the target, used only to compare salience masks."""
    return ToyReferenceModel(target_net)


@pytest.fixture(scope="session")
def correctly_classified(test_ds, target_net):
    """Indices of test images the target gets right (attack candidates)."""
    xs = np.stack([im.data for im in test_ds.images])
    preds = target_net.predict_batch_raw(xs)
    return [i for i in range(len(test_ds)) if preds[i] == test_ds.labels[i]]
