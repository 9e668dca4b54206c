import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

# one "criterion N: PASS|FAIL" line per acceptance test, echoed at the end of the run
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
        terminalreporter.write_line(line)
