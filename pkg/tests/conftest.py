import os
import sys

# keep BLAS single-threaded: small matrices, deterministic timing, and the
# suite parallelizes across images at the process level instead
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")

sys.path.insert(0, os.path.dirname(__file__))

import numpy as np
import pytest


@pytest.fixture(scope="session")
def tiny_stack():
    """Untrained-but-wired stack for mechanics tests; no quality claims."""
    from sdlab.config import RunConfig
    from sdlab.denoiser import Denoiser
    from sdlab.pipeline import TrainedStack
    from sdlab.schedule import make_schedule
    from sdlab.toyworld import (ImageEncoder, TextEncoder, ToyClassifier,
                                make_dataset)

    cfg = RunConfig(dataset_size=12, train_steps=1, encoder_steps=1,
                    classifier_steps=1, K=2)
    den = Denoiser(seed=3)
    rng = np.random.default_rng(0)
    # small random head so eps responds to the conditioning path
    den.params["head.w"].data = rng.standard_normal(
        den.params["head.w"].shape).astype(np.float32) * 0.05
    den.set_trainable(False)
    te = TextEncoder(seed=4)
    te.freeze()
    ie = ImageEncoder(seed=5)
    ie.freeze()
    clf = ToyClassifier(seed=6)
    clf.freeze()
    return TrainedStack(cfg, make_schedule(cfg.T),
                        make_dataset(cfg.dataset_size, 0), den, te, ie, clf)


@pytest.fixture(scope="session")
def tiny_run(tiny_stack):
    from sdlab.pipeline import _invert_scene

    return _invert_scene(tiny_stack, tiny_stack.dataset[0], seed=7)
