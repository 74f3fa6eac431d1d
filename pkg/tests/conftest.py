import pytest

from ringbalance.core import DatasetSpec, ExperimentConfig, ModelSpec, RunMode, StabilitySpec, WorkerProfile


def make_config(costs, mode="adaptive", weights=None, jitter=0.0, **kw):
    workers = [WorkerProfile(i, c, jitter) for i, c in enumerate(costs)]
    return ExperimentConfig(workers=workers, mode=RunMode(mode, weights), **kw)


@pytest.fixture
def config_factory():
    return make_config


__all__ = ["make_config", "DatasetSpec", "ModelSpec", "StabilitySpec"]
