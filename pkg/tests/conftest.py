import numpy as np
import pytest

from fmrgc.layer import FmrGcConfig
from fmrgc.models import BackboneConfig, build_backbone

TINY = dict(input_shape=(3, 8, 8), widths=(4, 6, 8), num_classes=3)


def tiny_model(seed=0, slots=None, **kw):
    cfg = BackboneConfig(**{**TINY, **kw}, slots=slots or {})
    return build_backbone(cfg, seed)


def tiny_batch(n=6, seed=0, classes=3, shape=(3, 8, 8)):
    rng = np.random.default_rng(seed)
    return rng.uniform(0, 1, (n,) + shape), rng.integers(0, classes, n)


@pytest.fixture
def plain_model():
    return tiny_model()


@pytest.fixture
def gc_model():
    return tiny_model(slots={"conv1": FmrGcConfig(k=2)})


# acceptance criteria report one line each; collected here so the lines
# show up in the terminal summary even without -s
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for line in ACCEPTANCE:
        terminalreporter.write_line(line)
