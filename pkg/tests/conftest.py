import pytest

ACCEPTANCE: dict[int, str] = {}
_config = None


def pytest_configure(config):
    global _config
    _config = config


def emit(n: int, line: str):
    """Record an acceptance line and print it live, past output capture."""
    ACCEPTANCE[n] = line
    capman = _config.pluginmanager.getplugin("capturemanager") if _config else None
    if capman is None:
        print(line)
        return
    with capman.global_and_fixture_disabled():
        print("\n" + line, flush=True)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance summary")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
