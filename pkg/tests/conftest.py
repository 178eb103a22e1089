import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))


def pytest_terminal_summary(terminalreporter):
    lines = []
    for outcome in ("passed", "failed"):
        for rep in terminalreporter.stats.get(outcome, []):
            if "test_acceptance.py::" not in rep.nodeid or rep.when != "call":
                continue
            detail = dict(rep.user_properties).get("detail", "")
            name = rep.nodeid.split("::")[-1].removeprefix("test_")
            lines.append((name, f"{'PASS' if outcome == 'passed' else 'FAIL'}  {name}  {detail}"))
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
