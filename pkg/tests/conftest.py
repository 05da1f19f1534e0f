import pytest

CRITERIA = {
    "AC1": "quantizer matches scalar oracle code-for-code",
    "AC2": "quantizer idempotence",
    "AC3": "sparse ternary kernel matches masked dense oracle",
    "AC4": "MAC accounting at s=0.6 and live counter equality",
    "AC5": "student file >= 5x smaller, exact ternary payloads",
    "AC6": "gradient suite vs central finite differences",
    "AC7": "distillation progress and identical-twin zero loss",
    "AC8": "fine-tune freezing contracts",
    "AC9": "end-to-end retrieval sanity",
    "AC10": "CLI determinism across reruns and thread counts",
    "AC11": "schedule endpoints",
}

_results: dict[str, tuple[bool, str]] = {}


@pytest.fixture(scope="session")
def record():
    """``record(ac, passed, detail)`` stores one acceptance outcome and returns ``passed``."""

    def _record(ac: str, passed: bool, detail: str = "") -> bool:
        prev = _results.get(ac)
        passed = bool(passed) and (prev is None or prev[0])
        details = "; ".join(d for d in ((prev[1] if prev else ""), detail) if d)
        _results[ac] = (passed, details)
        return passed

    return _record


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for ac, title in CRITERIA.items():
        if ac in _results:
            ok, detail = _results[ac]
            status = "PASS" if ok else "FAIL"
        else:
            status, detail = "FAIL", "not run"
        terminalreporter.write_line(f"{ac:<5} {status}  {title} ({detail})")
