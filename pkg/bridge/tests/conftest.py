import re
import socket
import subprocess
import sys
import time
from pathlib import Path

import pytest


class BridgeProcess:
    """The bridge running as a real subprocess in echo mode."""

    def __init__(self):
        self.proc = subprocess.Popen(
            [sys.executable, "-m", "gsedit_bridge", "serve",
             "--listen", "127.0.0.1:0", "--echo", "--timeout", "5"],
            stdout=subprocess.PIPE, stderr=subprocess.STDOUT, text=True,
            cwd=str(Path(__file__).parent))
        line = self.proc.stdout.readline()
        match = re.search(r"listening on ([\d.]+):(\d+)", line)
        if not match:
            self.proc.kill()
            raise RuntimeError(f"bridge failed to start: {line!r}")
        self.host, self.port = match.group(1), int(match.group(2))

    def alive(self) -> bool:
        return self.proc.poll() is None

    def connect(self, timeout=5.0) -> socket.socket:
        deadline = time.time() + timeout
        while True:
            try:
                return socket.create_connection((self.host, self.port),
                                                timeout=timeout)
            except OSError:
                if time.time() > deadline:
                    raise
                time.sleep(0.05)

    def stop(self):
        self.proc.terminate()
        try:
            self.proc.wait(timeout=5)
        except subprocess.TimeoutExpired:
            self.proc.kill()


@pytest.fixture(scope="session")
def bridge():
    proc = BridgeProcess()
    yield proc
    proc.stop()
