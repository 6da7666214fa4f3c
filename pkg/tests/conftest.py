import numpy as np
import pytest

from stiffonet import kinetics as K


@pytest.fixture(scope="session")
def mini_rober():
    """Small ROBER set: 9 trajectories, 2 segments of 100 points each."""
    mech = K.rober()
    raw = K.generate_trajectories(mech, (3, 3), 1e-3, 198)
    train, test, tri, tei = K.split_dataset(raw, 1e-3, mech.schema, seed=7)
    return {
        "mech": mech,
        "raw": raw,
        "train": train,
        "test": test,
        "seg_train": K.time_decompose(train, 100),
        "seg_test": K.time_decompose(test, 100),
    }
