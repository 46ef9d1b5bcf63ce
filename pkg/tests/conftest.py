import numpy as np
import pytest

from toolrl.hopqa import HopQAConfig, make_instances, make_registry, vocab_for


@pytest.fixture(scope="session")
def task_cfg():
    return HopQAConfig()


@pytest.fixture(scope="session")
def vocab(task_cfg):
    return vocab_for(task_cfg)


@pytest.fixture(scope="session")
def instances(task_cfg):
    return make_instances(11, 20, task_cfg)


@pytest.fixture
def instance(instances):
    return instances[0]


@pytest.fixture
def registry(instance, vocab):
    return make_registry(instance, vocab)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
