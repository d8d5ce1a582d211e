"""BRIDGE-1: the primary transport suite must pass unmodified against the
bridge running in echo mode, by pointing it at the live endpoint through
GSGP_TEST_ENDPOINT."""

import os
import subprocess
import sys
from pathlib import Path

import pytest

PRIMARY_TESTS = Path(__file__).resolve().parents[2] / "tests" / "test_protocol.py"


@pytest.mark.skipif(not PRIMARY_TESTS.exists(),
                    reason="primary package tests not available")
def test_primary_transport_suite_against_bridge(bridge):
    env = dict(os.environ)
    env["GSGP_TEST_ENDPOINT"] = f"{bridge.host}:{bridge.port}"
    result = subprocess.run(
        [sys.executable, "-m", "pytest", str(PRIMARY_TESTS), "-q",
         "--no-header", "-p", "no:cacheprovider"],
        capture_output=True, text=True, env=env,
        cwd=str(PRIMARY_TESTS.parent.parent))
    assert result.returncode == 0, \
        f"primary suite failed against the bridge:\n{result.stdout[-3000:]}"
    print(f"[ACCEPT] BRIDGE-1: PASS — primary transport suite green against "
          f"the echo bridge at {bridge.host}:{bridge.port}")
