import os
import sys

import pytest
import torch

sys.path.insert(0, os.path.dirname(__file__))

from msmedcap.config import RunConfig  # noqa: E402
from msmedcap.data import generate_synthetic_corpus  # noqa: E402
from msmedcap.training import CorpusData, FeatureStore, train_lm  # noqa: E402

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def default_cfg():
    return RunConfig().validate()


@pytest.fixture(scope="session")
def corpus(tmp_path_factory, default_cfg):
    root = tmp_path_factory.mktemp("corpus")
    _, manifest = generate_synthetic_corpus(default_cfg.corpus, default_cfg.seed, root)
    return manifest


@pytest.fixture(scope="session")
def data(corpus, default_cfg):
    return CorpusData.from_manifest(corpus, default_cfg)


@pytest.fixture(scope="session")
def store(default_cfg):
    return FeatureStore(default_cfg)


@pytest.fixture(scope="session")
def trained_lm(default_cfg, data):
    return train_lm(default_cfg, data)


# -- acceptance summary: one PASS/FAIL line per criterion -------------------------

_criteria: dict[int, list[str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        _criteria.setdefault(mark.args[0], []).append(rep.outcome)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        ok = all(o == "passed" for o in _criteria[n])
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}")
