"""Shared test plumbing: the acceptance results banner.

Acceptance tests register one line each via record_criterion; the summary
hook prints them after the run, outside stdout capture, so the verdicts are
visible even when every test passes.
"""

ACCEPTANCE_RESULTS: dict = {}


def record_criterion(name: str, ok: bool, detail: str):
    ACCEPTANCE_RESULTS[name] = (bool(ok), detail)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for name, (ok, detail) in ACCEPTANCE_RESULTS.items():
        verdict = "PASS" if ok else "FAIL"
        terminalreporter.write_line(f"[{verdict}] {name}: {detail}")
