def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One PASS/FAIL line per acceptance criterion at the end of the run."""
    results = {}
    for report in terminalreporter.stats.get("passed", []):
        nodeid = getattr(report, "nodeid", "")
        if "test_acceptance.py" in nodeid and getattr(report, "when", "call") == "call":
            results[nodeid.split("::")[-1]] = "PASS"
    for status in ("failed", "error"):
        for report in terminalreporter.stats.get(status, []):
            nodeid = getattr(report, "nodeid", "")
            if "test_acceptance.py" in nodeid:
                results[nodeid.split("::")[-1]] = "FAIL"
    if not results:
        return
    terminalreporter.write_sep("-", "acceptance criteria")
    for name in sorted(results):
        terminalreporter.write_line(f"{name}: {results[name]}")
