import os
import sys

sys.path.insert(0, os.path.dirname(__file__))

from acceptance_log import RESULTS  # noqa: E402


def pytest_terminal_summary(terminalreporter):
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(RESULTS):
        ok, detail = RESULTS[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'} - {detail}")
