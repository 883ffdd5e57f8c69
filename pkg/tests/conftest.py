import numpy as np
import pytest

from fisearch.core import Instance
from fisearch.toymodel import ToyClassifier, TrainConfig, generate_corpus, train


@pytest.fixture(scope="session")
def corpus():
    return generate_corpus(600, seed=3)


@pytest.fixture(scope="session")
def split(corpus):
    return corpus.split(500)


@pytest.fixture(scope="session")
def trained(split):
    return train(split[0], TrainConfig(epochs=10, seed=0))


def random_model(seed: int, vocab: int = 20, dim: int = 4, hidden: int = 5, classes: int = 3, scale: float = 1.0):
    rng = np.random.default_rng(seed)
    return ToyClassifier(
        embeddings=rng.normal(size=(vocab, dim)) * scale,
        w_hidden=rng.normal(size=(dim, hidden)) * scale,
        b_hidden=rng.normal(size=hidden) * 0.1,
        w_out=rng.normal(size=(hidden, classes)) * scale,
        b_out=rng.normal(size=classes) * 0.1,
    )


def random_instance(rng, length: int, vocab: int = 20, n_protected: int = 0, id: str = "x") -> Instance:
    tokens = rng.integers(1, vocab, size=length)
    protected = [True] * n_protected + [False] * (length - n_protected)
    return Instance(tuple(tokens), tuple(protected), 0, id)


# one line per acceptance criterion, repeated in the terminal summary so it survives output capture
ACCEPTANCE_LINES: list[str] = []


def report_criterion(number: int, passed: bool, text: str) -> None:
    line = f"{'PASS' if passed else 'FAIL'} criterion {number:>2}: {text}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
