from ondemand_etl.harness.config import PipelineConfig

# fast settings shared by the end-to-end tests
FAST = PipelineConfig(quiescence_s=0.1, sweep_interval_s=0.01, deadline_s=120.0)

ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


def record(number: int, name: str, ok: bool, detail: str) -> None:
    """Remember an acceptance verdict for the end-of-run summary."""
    ACCEPTANCE[number] = (name, bool(ok), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        name, ok, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {number:>2}. {name}: {detail}")
