"""Shared fixtures.

The desk-scale overfit experiment (16 synthetic 64px images, default desk
model at depth 1 per stage, bridge depth 4, protocol defaults) is expensive,
so it runs once per session and is shared by the trainer tests and the
acceptance suite.  It trains twice with the same seed to support the
bit-identical determinism claims.
"""

import time

import pytest

from bfseg import data as D
from bfseg import model as M
from bfseg import train as R

OVERFIT_DATA_SEED = 7
OVERFIT_TRAIN_SEED = 0


@pytest.fixture(scope="session")
def overfit_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("overfit")
    data_dir = root / "data"
    D.synth_generate(16, 64, seed=OVERFIT_DATA_SEED, out_dir=data_dir)
    model_config = M.ModelConfig(depths=(1, 1, 1, 1))
    train_config = R.TrainConfig(seed=OVERFIT_TRAIN_SEED)

    tic = time.perf_counter()
    first = R.train(model_config, train_config, data_dir, root / "run_a")
    seconds = time.perf_counter() - tic
    second = R.train(model_config, train_config, data_dir, root / "run_b")
    train_metrics, _, _ = R.evaluate(first.checkpoint_path, data_dir, "train")

    return {
        "data_dir": data_dir,
        "first": first,
        "second": second,
        "seconds": seconds,
        "train_metrics": train_metrics,
        "model_config": model_config,
        "train_config": train_config,
        "run_dirs": (root / "run_a", root / "run_b"),
    }
