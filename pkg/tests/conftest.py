"""Collects acceptance verdicts and prints one line per criterion."""

ACCEPTANCE = {}
N_CRITERIA = 9


def record(number, ok, detail=""):
    ACCEPTANCE[number] = (bool(ok), detail)
    return ok


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    ran = any("test_acceptance" in str(item.fspath) for item in getattr(config, "_acceptance_items", []))
    if not ACCEPTANCE and not ran:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, N_CRITERIA + 1):
        ok, detail = ACCEPTANCE.get(n, (False, "not run"))
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")


def pytest_collection_modifyitems(session, config, items):
    config._acceptance_items = [i for i in items if "test_acceptance" in str(i.fspath)]
