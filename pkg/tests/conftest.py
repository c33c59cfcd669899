import numpy as np
import pytest

from wico.domain import BinaryMask, InstanceTripletSet, PixelEmbeddings, ProbabilityMap, Sample
from wico.harness import ErrorProfile, SceneSpec, generate_corpus
from wico.tensor import Tensor


def random_triplet(rng, n=3, c=8, h=6, w=6, scores=None):
    masks = tuple(BinaryMask(rng.random((h, w)) < 0.3) for _ in range(n))
    s = rng.random(n) if scores is None else np.asarray(scores, dtype=float)
    return InstanceTripletSet(masks, Tensor(rng.normal(size=(n, c))), s)


def random_sample(rng, n=3, c=8, h=6, w=6, identifier="t0"):
    trip = random_triplet(rng, n, c, h, w)
    return Sample(identifier, BinaryMask(rng.random((h, w)) < 0.4), trip,
                  PixelEmbeddings(Tensor(rng.normal(size=(c, h, w)))),
                  ProbabilityMap(rng.random((h, w))))


@pytest.fixture
def rng():
    return np.random.default_rng(2024)


@pytest.fixture(scope="session")
def small_corpus():
    return generate_corpus(40, SceneSpec(height=16, width=16, embedding_dim=8), ErrorProfile(), seed=7)


# One line per acceptance criterion, printed in the terminal summary.
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
