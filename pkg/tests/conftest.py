import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from vcead import data, nets, train


@pytest.fixture(scope="session")
def tiny_dataset():
    """Small synthetic pool with a patient-wise train/val split."""
    samples = data.synth_dataset(120, 120, 16, seed=101)
    split = data.patient_split(sorted({s.patient_id for s in samples}),
                               ratio=0.8, seed=0)
    parts = split.partition(samples)
    test = data.synth_dataset(50, 50, 16, seed=202)
    return {"train": parts["train"], "val": parts["val"], "test": test}


@pytest.fixture(scope="session")
def trained_bundle(tiny_dataset):
    """All three learners trained briefly on the tiny dataset."""
    bundle = nets.build_bundle("desk_tiny", seed=3)
    cfg = train.TrainConfig(
        epochs=6, batch_size=32, seed=4,
        augment=data.AugmentPolicy(p_hflip=0.5, p_vflip=0.5))
    train.train_classifier(bundle, tiny_dataset["train"], cfg)
    normals = [s for s in tiny_dataset["train"] if s.label == data.NORMAL]
    train.train_autoencoder(bundle, normals, cfg)
    train.train_semi(bundle, tiny_dataset["train"], cfg)
    return bundle
