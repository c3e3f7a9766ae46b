import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from bell_lab.apparatus import ideal_stations  # noqa: E402

CHSH_ANGLES = (0.0, 45.0, 22.5, -22.5)


@pytest.fixture
def stations():
    return ideal_stations(CHSH_ANGLES)
