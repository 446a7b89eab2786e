import pytest


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    """Print a FAIL line for acceptance criteria; the tests print PASS themselves."""
    outcome = yield
    rep = outcome.get_result()
    if rep.when == "call" and rep.failed and \
            item.module.__name__ == "test_acceptance":
        print(f"\nACCEPTANCE {item.name.removeprefix('test_criterion_')}: FAIL")
