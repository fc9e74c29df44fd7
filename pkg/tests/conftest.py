import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from splatmask import harness


@pytest.fixture(scope="session")
def default_synth():
    """The default benchmark scene (seed 0, 200 teachers, 12 cams, 64x64)."""
    return harness.generate_scene(0)


@pytest.fixture(scope="session")
def small_synth():
    """A cheap scene for smoke-level training tests."""
    return harness.generate_scene(7, n_teacher=60, n_cams=6, dims=(32, 32))
