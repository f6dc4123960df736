import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")


@pytest.fixture(scope="session")
def tiny_dataset():
    from protoparts.data import DatasetManifest, build_dataset

    return build_dataset(DatasetManifest(patches_per_class=24, seed=3))


@pytest.fixture(scope="session")
def tiny_model(tiny_dataset):
    """A briefly trained and pushed model: enough structure for plumbing tests."""
    from protoparts.backbone import BackboneConfig
    from protoparts.prototypes import ProtoPNet
    from protoparts.training import TrainConfig, fit

    ds = tiny_dataset
    model = ProtoPNet.create(BackboneConfig(block_channels=[4, 8, 8], add_on_dim=8),
                             ds.manifest.classes, seed=1)
    cfg = TrainConfig(epochs_warmup=1, epochs_joint=1, push_every=1, epochs_last_layer=2, seed=1)
    fit(model, ds.train, cfg, ds.stats)
    return model


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by a test")


_ACCEPTANCE: dict[int, list] = {}


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.failed):
        return
    props = dict(report.user_properties)
    if "criterion" in props:
        _ACCEPTANCE[props["criterion"]] = [report.outcome, props.get("title", ""), props.get("detail", "")]


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        outcome, title, detail = _ACCEPTANCE[n]
        verdict = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"[{verdict}] criterion {n}: {title} | {detail}")
