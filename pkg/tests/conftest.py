import json
from pathlib import Path

import pytest

from ltw.corpus import synthetic_corpus
from ltw.token_model import fit_ngram

FIXTURES = Path(__file__).parent / "fixtures"

# criterion lines collected by test_acceptance.py, echoed after the run
ACCEPTANCE_LINES: dict[int, str] = {}


def load_fixture(name):
    return json.loads((FIXTURES / name).read_text())


@pytest.fixture(scope="session")
def small_docs():
    return synthetic_corpus(30_000, seed=0)


@pytest.fixture(scope="session")
def small_model(small_docs):
    return fit_ngram(small_docs, order=2, alpha=0.1, vocab_cap=2000)


@pytest.fixture
def ab_model():
    """``a b a b`` bigram model: vocab (<unk>, <bos>, <eos>, a, b)."""
    return fit_ngram("a b a b", order=1, alpha=1.0, vocab_cap=16)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])
