import dataclasses

import pytest
import torch
from hypothesis import HealthCheck, settings

from petl_retrieval.config import EncoderConfig, RunConfig

settings.register_profile(
    "default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")

torch.set_num_threads(1)


def toy_run_config(kind="mrs_adapter", params=None, **overrides) -> RunConfig:
    """A small run config on the synthetic dataset."""
    data = {
        "encoder": dataclasses.asdict(EncoderConfig.toy()),
        "strategy": {"kind": kind, "params": params if params is not None else {}},
        "k_folds": 1,
    }
    data.update(overrides)
    return RunConfig.from_dict(data)


@pytest.fixture
def toy_cfg():
    return EncoderConfig.toy()
