import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from rptlab.backbone import Backbone, BackboneConfig

settings.register_profile("rpt", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("rpt")


def tiny_config(arch="encoder-decoder", **kw):
    base = dict(arch=arch, layers=1, d=8, heads=2, ffn=16, vocab=64, max_len=64, seed=3)
    base.update(kw)
    return BackboneConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(params=["encoder-only", "encoder-decoder"])
def arch(request):
    return request.param


@pytest.fixture
def tiny_backbone(arch):
    bb = Backbone(tiny_config(arch))
    bb.freeze()
    return bb


@pytest.fixture(scope="session")
def runs_root(tmp_path_factory):
    """Run root shared by the slow modules, so the default backbone is pretrained once.

    ``RPT_ACCEPTANCE_ROOT`` keeps it between sessions.
    """
    path = os.environ.get("RPT_ACCEPTANCE_ROOT")
    return path if path else str(tmp_path_factory.mktemp("runs"))


# acceptance verdicts, printed once at the end of the session
ACCEPTANCE: dict[int, str] = {}


def record_verdict(criterion: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[criterion] = f"criterion {criterion:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(ACCEPTANCE[criterion])


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
