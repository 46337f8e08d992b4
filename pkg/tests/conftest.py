import pytest

from cfground.demo import make_demo_corpus
from cfground.evidence import StubEvidenceClient
from cfground.pipeline import build_dataset


@pytest.fixture(scope="session")
def demo(tmp_path_factory):
    return make_demo_corpus(tmp_path_factory.mktemp("demo"))


@pytest.fixture(scope="session")
def built(demo, tmp_path_factory):
    out = tmp_path_factory.mktemp("built")
    report = build_dataset(demo["source"], StubEvidenceClient(demo["fixtures"]), out, seed=7)
    return report


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in mod.RESULTS:
            terminalreporter.write_line(line)
