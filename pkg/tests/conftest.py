import numpy as np
import pytest

from pinnmpc.bench import TrainJob, run_training
from pinnmpc.embedding import TrainedNetwork
from pinnmpc.nn_engine import load_params
from pinnmpc.plants import make_plant


@pytest.fixture(scope="session")
def b1():
    return make_plant("b1")


@pytest.fixture(scope="session")
def b2():
    return make_plant("b2")


@pytest.fixture(scope="session")
def b3_desk():
    return make_plant("b3", n_fe=10)


@pytest.fixture(scope="session")
def artifact_dir(tmp_path_factory):
    return tmp_path_factory.mktemp("artifacts")


def _trained(artifact_dir, benchmark, arch):
    job = TrainJob(benchmark, arch, "desk", 0)
    path = artifact_dir / f"{job.stem}.nnp"
    if not path.is_file():
        run_training(job, artifact_dir)
    spec, params = load_params(path)
    return TrainedNetwork(spec, params)


@pytest.fixture(scope="session")
def b1_pinn(artifact_dir):
    """Desk-scale B1 PINN trained once per session (about two minutes)."""
    return _trained(artifact_dir, "b1", "pinn")


@pytest.fixture(scope="session")
def b1_picnn(artifact_dir):
    return _trained(artifact_dir, "b1", "picnn")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
