import re

LINE = re.compile(r"^(PASS|FAIL) criterion")


def pytest_terminal_summary(terminalreporter):
    lines = []
    for key in ("passed", "failed"):
        for rep in terminalreporter.stats.get(key, []):
            if rep.when == "call" and "test_acceptance" in rep.nodeid:
                lines += [ln for ln in rep.capstdout.splitlines() if LINE.match(ln)]
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda ln: int(ln.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
