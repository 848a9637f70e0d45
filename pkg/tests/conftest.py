import re

_CRITERION = re.compile(r"test_acceptance\.py::test_c(\d\d)_(\w+)")


def pytest_terminal_summary(terminalreporter):
    """One line per acceptance criterion, taken from the actual test outcomes,
    followed by whatever the test recorded with ``record_property``."""
    verdicts = {}
    for outcome in ("passed", "failed", "error", "skipped"):
        for rep in terminalreporter.stats.get(outcome, []):
            m = _CRITERION.search(getattr(rep, "nodeid", ""))
            if not m or (outcome == "passed" and rep.when != "call"):
                continue
            key = (int(m.group(1)), m.group(2).replace("_", " "))
            measured = ", ".join(f"{k}={v}" for k, v in getattr(rep, "user_properties", []))
            if key not in verdicts or outcome != "passed":
                verdicts[key] = ("PASS" if outcome == "passed" else "FAIL", measured)
    if not verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for (num, name), (verdict, measured) in sorted(verdicts.items()):
        terminalreporter.write_line(f"criterion {num:2d} {verdict}  {name:<32} {measured}")
