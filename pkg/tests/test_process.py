"""Tests of the process behavior of snflow."""

import subprocess
import sys

from snflow import __version__


def run_snflow(*args):
    proc = subprocess.run(
        [sys.executable, "-m", "snflow", *args],
        capture_output=True,
        text=True,
        check=False,
    )
    output = proc.stdout + proc.stderr
    print(output)
    return proc.returncode, output


def test_dashm():
    status, output = run_snflow()
    assert status in (0, 2)
    assert "Usage: snflow [OPTIONS] COMMAND [ARGS]..." in output
    assert "Version " + __version__ in output


def test_dashm_version():
    status, output = run_snflow("--version")
    assert status == 0
    assert __version__ in output
