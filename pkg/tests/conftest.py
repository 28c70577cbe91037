import sys


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """Replay the acceptance checklist after the capture-happy test run."""
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None) if mod else None
    if results:
        terminalreporter.section("acceptance checklist")
        for line in results:
            terminalreporter.write_line(line)
