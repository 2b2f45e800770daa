import os
import tempfile

import pytest

# keep log files out of the user's home directory
os.environ.setdefault("MDIQKD_BASE_DIR", tempfile.mkdtemp(prefix="mdiqkd-test-"))

from metrics import RunMetrics  # noqa: E402


@pytest.fixture(autouse=True)
def fresh_metrics():
    RunMetrics.reset_instance()
    yield
    RunMetrics.reset_instance()
