import numpy as np
import pytest

from qpdn.autoencoder import AutoencoderSpec, train
from qpdn.quantum import PHI_GRID
from qpdn.tomography import generate_dataset, normalize


@pytest.fixture(scope="session")
def tiny_dataset():
    """Small but complete dataset: 4 angles x 12 instances x 2 signal levels."""
    ds = generate_dataset(phis=PHI_GRID[[3, 7, 11, 15]], instances=12, ratios=(1.0, 0.1), seed=424242)
    return normalize(ds)


@pytest.fixture(scope="session")
def tiny_ae_spec():
    return AutoencoderSpec(
        kernel=2,
        encoder_filters=(16, 8, 4),
        decoder_filters=(8, 16),
        epochs=30,
        patience=30,
        learning_rate=3e-3,
        seed=99,
    )


@pytest.fixture(scope="session")
def tiny_ae_model(tiny_dataset, tiny_ae_spec):
    model, log = train(tiny_ae_spec, tiny_dataset)
    return model, log
