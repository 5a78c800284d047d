import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("ppc", deadline=None, max_examples=60)
settings.load_profile("ppc")

from ppc.contrast import ContrastConfig, total_contrast_loss  # noqa: E402
from ppc.tensor import RngStream  # noqa: E402
from ppc.views import SpatialTransform, build_view_pair  # noqa: E402


def random_pair(seed, batch=2, num_classes=4, size=8, feat_dim=6, proj_dim=5,
                transform=SpatialTransform(rescale=0.5), theta_bg=0.3):
    """View pair built from random features and head weights (no encoder)."""
    gen = np.random.default_rng(seed)
    hs, ht = size, max(1, int(round(size * transform.rescale)))
    f_s = gen.normal(size=(batch, feat_dim, hs, hs))
    f_t = gen.normal(size=(batch, feat_dim, ht, ht))
    cam_w = gen.normal(size=(num_classes, feat_dim))
    proj_w = gen.normal(size=(proj_dim, feat_dim))
    tags = gen.random((batch, num_classes)) < 0.6
    tags[np.arange(batch), gen.integers(0, num_classes, batch)] = True
    return build_view_pair(f_s, f_t, transform, cam_w, proj_w, tags, theta_bg, stride=1)


def frozen(pair, seed, **cfg):
    config = ContrastConfig(**cfg)
    _, sel, _ = total_contrast_loss(pair, config, RngStream(seed))
    return config, sel


@pytest.fixture
def small_pair():
    return random_pair(0)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "REPORT", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
