import json
import os

import pytest
import torch

from stylereg.data import make_toy_corpus
from stylereg.pretrain import CACHE_ENV, pretrained_toy_backbone
from stylereg.toy_ldm import ToyModelConfig, build_toy_backbone


@pytest.fixture(scope="session", autouse=True)
def shared_cache(tmp_path_factory):
    """One pretraining / content-reference cache for the whole session."""
    root = os.environ.get(CACHE_ENV) or str(tmp_path_factory.mktemp("stylereg-cache"))
    previous = os.environ.get(CACHE_ENV)
    os.environ[CACHE_ENV] = root
    yield root
    if previous is None:
        os.environ.pop(CACHE_ENV, None)


@pytest.fixture
def backbone():
    return build_toy_backbone(ToyModelConfig())


@pytest.fixture(scope="session")
def pretrained_base(shared_cache):
    return pretrained_toy_backbone(ToyModelConfig(), steps=1000, cache_dir=shared_cache)


@pytest.fixture
def pretrained(pretrained_base):
    return pretrained_base.clone()


@pytest.fixture(scope="session")
def corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    return make_toy_corpus(out, 2, seed=7, image_size=32)


class ScriptedVlm:
    """Replays canned responses in order, then repeats the last one."""

    def __init__(self, responses, max_retries=3):
        self.responses = list(responses)
        self.max_retries = max_retries
        self.timeout = 0.0
        self.calls = 0
        self.requests = []

    def send(self, request):
        self.requests.append(request)
        self.calls += 1
        return self.responses[min(self.calls, len(self.responses)) - 1]


@pytest.fixture
def scripted_vlm():
    return ScriptedVlm


def valid_response(keywords: str) -> str:
    return json.dumps({"style keywords": keywords})


def snapshot(module: torch.nn.Module) -> dict:
    return {k: v.detach().clone() for k, v in module.state_dict().items()}


_CRITERIA: dict[int, tuple[str, str, float]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, summary = marker.args
    if report.when == "call" or (report.when == "setup" and report.failed):
        _CRITERIA[number] = (summary, "PASS" if report.passed else "FAIL", report.duration)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        summary, status, duration = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:2d}: {status}  {summary}  ({duration:.1f}s)")
