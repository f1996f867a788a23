import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from deskdetr.data import SceneSpec, generate
from deskdetr.model import DETR, ModelConfig

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_config():
    return ModelConfig(hidden_dim=16, num_heads=2, enc_layers=1, dec_layers=2, num_queries=6, num_classes=3,
                       ffn_dim=32, num_scales=2, dtype="float64")


@pytest.fixture
def tiny_model(tiny_config):
    return DETR(tiny_config, seed=0)


@pytest.fixture(scope="session")
def small_data():
    return generate(SceneSpec(seed=7, max_objects=4), 12)


@pytest.fixture(scope="session")
def two_images(small_data):
    images = small_data.float_images(dtype=np.float64)[:2]
    gts = small_data.gts[:2]
    return images, gts



# -- acceptance summary: one line per criterion ------------------------------------------------------
CRITERIA = {
    1: "assignment solver agrees with brute force on 1000 matrices",
    2: "finite-difference gradients of every loss regime within 1e-4",
    3: "GIoU bounds, ordering, symmetry and worked examples",
    4: "RoIAlign agrees with the naive oracle; full-region crop is identity",
    5: "flip involutions and flip-consistent loss of an equivariant head",
    6: "feature flip beats the baseline on >= 2 of 3 seeds with positive mean gain",
    7: "encoder-output flip is no better than backbone-output flip",
    8: "flip pilot: reassignment > 0.5 and unchanged-pair IoU above random-pair IoU",
    9: "inference counters, parameters and predictions identical across training schemes",
    10: "hybrid branch gives every gt exactly two positives, as brute force",
    11: "AP evaluator worked examples and score-monotone invariance",
}
_criterion_outcomes: dict[int, list[bool]] = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_criterion_" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        number = int(report.nodeid.split("test_criterion_")[1][:2])
        _criterion_outcomes.setdefault(number, []).append(report.outcome == "passed")


def pytest_terminal_summary(terminalreporter):
    if not _criterion_outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for number, text in CRITERIA.items():
        outcomes = _criterion_outcomes.get(number)
        status = "NOT RUN" if outcomes is None else ("PASS" if all(outcomes) else "FAIL")
        terminalreporter.write_line(f"criterion {number:2d}: {status:7s} {text}")
