import time

import numpy as np
import pytest

from read_pvla.backbone import Backbone, ModelConfig, build_pretrained_backbone
from read_pvla.synth import DatasetSpec, generate_dataset

TINY_MODEL = ModelConfig(
    d=8, num_blocks=2, num_heads=2, d_in_video=6, d_in_lang=5, max_len_video=8, max_len_lang=8
)
TINY_DATA = DatasetSpec(
    seed=0,
    n_train=6,
    n_val=4,
    n_test=2,
    n_video=(5, 7),
    n_lang=(3, 4),
    span_length=(1, 3),
    concept_dim=4,
    video_dim=6,
    lang_dim=5,
)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def tiny_backbone():
    return Backbone.initialize(TINY_MODEL, 0).freeze()


@pytest.fixture(scope="session")
def tiny_data():
    return generate_dataset(TINY_DATA)


# wall-clock seconds of session-wide builds, read by the acceptance runtime checks
TIMINGS: dict[str, float] = {}


@pytest.fixture(scope="session")
def pretrained():
    """Default stand-in backbone (d=64, M=4, 1024-wide inputs), built once per session."""
    t0 = time.perf_counter()
    backbone = build_pretrained_backbone(ModelConfig(), generate_dataset(DatasetSpec.source()), 0)
    TIMINGS["pretrain"] = time.perf_counter() - t0
    return backbone


# acceptance lines collected by tests/test_acceptance.py, echoed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
