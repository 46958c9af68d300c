import numpy as np
import pytest

from cotope.graph import chain_graph
from cotope.verbal import TemplateSet, build_vocabulary
from cotope.verify import TOY_TEMPLATES, toy_chain_parts


@pytest.fixture(scope="session")
def chain():
    graph = chain_graph()
    templates = TemplateSet.from_dict(TOY_TEMPLATES)
    return graph, templates, build_vocabulary(graph, templates)


@pytest.fixture(scope="session")
def toy_parts():
    """graph, templates, vocab, base, preference for the 3-entity chain."""
    return toy_chain_parts()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: dict = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[key])
