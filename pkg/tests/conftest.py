"""Collects acceptance outcomes and prints one line per criterion at the end of the run."""

import pytest

_LOG = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_LOG] = {}


@pytest.fixture(scope="session")
def acceptance_log(request):
    log = request.config.stash[_LOG]

    def record(criterion, clause, ok, detail=""):
        log.setdefault(criterion, []).append((clause, bool(ok), detail))
        line = f"criterion {criterion} [{clause}]: {'PASS' if ok else 'FAIL'} {detail}"
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    log = config.stash.get(_LOG, {})
    if not log:
        return
    terminalreporter.section("acceptance criteria")
    for criterion in sorted(log, key=lambda c: (not str(c).isdigit(), int(c) if str(c).isdigit() else 0, str(c))):
        clauses = log[criterion]
        ok = all(c[1] for c in clauses)
        failed = [c[0] for c in clauses if not c[1]]
        tail = "" if ok else f"  (failing: {', '.join(failed)}; see /root/notes/decisions.md)"
        terminalreporter.write_line(f"criterion {criterion}: {'PASS' if ok else 'FAIL'}{tail}")
        for clause, cok, detail in clauses:
            terminalreporter.write_line(f"    {'PASS' if cok else 'FAIL'} {clause}: {detail}")
