"""Shared fixtures and the acceptance-criteria summary printer."""

import pytest

from ssmprune.model import Model, toy_descriptor
from ssmprune.training import Corpus, TrainConfig, train

# (number, text, ok) rows appended by tests/test_acceptance.py
ACCEPTANCE = []


def record(n, text, ok):
    """One pass/fail line per criterion, echoed inline and in the summary."""
    ACCEPTANCE.append((n, text, ok))
    print(f"[{'PASS' if ok else 'FAIL'}] {n:2d}. {text}")
    assert ok, f"criterion {n}: {text}"


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n, text, ok in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {n:2d}. {text}")


@pytest.fixture(scope="session")
def corpus():
    return Corpus.bundled()


HYBRID6 = dict(n_blocks=6, transformer_at=(2, 4), d_model=48, d_state=8,
               mlp_hidden=96)
HYBRID6_TRAIN = TrainConfig(steps=200, batch_size=6, seq_len=80, warmup=20)


@pytest.fixture(scope="session")
def hybrid6(corpus):
    """A trained 6-block hybrid (mamba at 0,1,3,5; transformers at 2,4).

    Session-scoped and shared: tests must clone() before mutating.
    """
    model = Model.build(toy_descriptor(**HYBRID6), 0)
    train(model, corpus, HYBRID6_TRAIN)
    return model
