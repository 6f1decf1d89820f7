import os
from pathlib import Path

import pytest
import torch
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("thorough", deadline=None, max_examples=300)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

torch.set_num_threads(max(1, torch.get_num_threads()))


@pytest.fixture(scope="session")
def desk_cache(tmp_path_factory) -> Path:
    """Where desk-scale backends are cached; persistent if ``LATENT_RESCALE_DESK_CACHE`` is set."""
    env = os.environ.get("LATENT_RESCALE_DESK_CACHE")
    return Path(env) if env else tmp_path_factory.mktemp("desk-backends")


# -- acceptance summary ---------------------------------------------------------

_ACCEPTANCE: dict[str, tuple[str, str]] = {}
_DETAILS: dict[str, list[str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(cid, title): headline acceptance criterion")


def pytest_runtest_logreport(report):
    # a criterion fails if any phase fails; it passes once its call phase passes
    cid = getattr(report, "acceptance_id", None)
    if cid is None:
        return
    if report.when == "call":
        _DETAILS.setdefault(cid, []).extend(v for k, v in report.user_properties if k == "measured")
    if report.failed:
        _ACCEPTANCE[cid] = ("FAIL", report.acceptance_title)
    elif report.when == "call" and report.passed and cid not in _ACCEPTANCE:
        _ACCEPTANCE[cid] = ("PASS", report.acceptance_title)
    elif report.skipped and cid not in _ACCEPTANCE:
        _ACCEPTANCE[cid] = ("SKIP", report.acceptance_title)


import pytest  # noqa: E402


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    marker = item.get_closest_marker("acceptance")
    if marker is not None:
        rep = outcome.get_result()
        rep.acceptance_id, rep.acceptance_title = marker.args


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(_ACCEPTANCE, key=lambda c: int(c[2:])):
        status, title = _ACCEPTANCE[cid]
        detail = "; ".join(_DETAILS.get(cid, []))
        terminalreporter.write_line(f"{cid:<5} {status}  {title}" + (f"  [{detail}]" if detail else ""))
