"""Shared pytest hooks."""


def pytest_runtest_logreport(report):
    """Print one verdict line per acceptance criterion, pass or fail."""
    if report.when != "call":
        return
    for name, value in report.user_properties:
        if name == "acceptance":
            num, title = value
            verdict = "PASS" if report.passed else "FAIL"
            print(f"\nACCEPTANCE {num:>2}: {title} -- {verdict}", flush=True)
