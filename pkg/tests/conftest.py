import numpy as np
import pytest

from bihl.boxes import ScoredBox
from bihl.imgpyr import ImagePlane, ScaleSpec
from bihl.proposer import propose
from bihl.synth import synthetic_corpus
from bihl.trainer import TrainConfig, train_model

# acceptance corpus: disjoint seeded train / test splits
TRAIN_SEED, TEST_SEED, CORPUS_SIZE = 1, 2, 200


@pytest.fixture(scope="session")
def train_corpus():
    return synthetic_corpus(CORPUS_SIZE, seed=TRAIN_SEED, prefix="tr")


@pytest.fixture(scope="session")
def test_corpus():
    return synthetic_corpus(CORPUS_SIZE, seed=TEST_SEED, prefix="te")


@pytest.fixture(scope="session")
def trained_model(train_corpus):
    model, _ = train_model([s.image for s in train_corpus], [s.boxes for s in train_corpus], TrainConfig())
    return model


@pytest.fixture(scope="session")
def corpus_runs(test_corpus, trained_model):
    """Test-corpus proposals with and without merge, plus per-stage timings."""
    gt = {s.name: s.boxes for s in test_corpus}
    propose(test_corpus[0].image, trained_model)  # compile kernels outside the timed runs
    runs = {}
    for merge in (False, True):
        timings = {}
        props = {s.name: propose(s.image, trained_model, merge=merge, timings=timings) for s in test_corpus}
        runs[merge] = (props, timings)
    return gt, runs


@pytest.fixture(scope="session")
def small_corpus():
    return synthetic_corpus(12, seed=7, prefix="sm")


@pytest.fixture(scope="session")
def toy_model():
    scenes = synthetic_corpus(40, seed=11, prefix="toy")
    model, _ = train_model([s.image for s in scenes], [s.boxes for s in scenes], TrainConfig())
    return model


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_plane(rng, h, w) -> ImagePlane:
    return ImagePlane(rng.integers(0, 256, (h, w), dtype=np.uint8))


def random_boxes(rng, n, scales=((0, 0), (1, 1))):
    out = []
    for _ in range(n):
        s = ScaleSpec(*scales[rng.integers(len(scales))])
        x, y = int(rng.integers(0, 60)), int(rng.integers(0, 60))
        w, h = int(rng.integers(1, 30)), int(rng.integers(1, 30))
        out.append(ScoredBox(x, y, w, h, float(rng.integers(-3, 10)) / 4, s))
    return out


def rectangle_scene(w=160, h=120, box=(64, 40, 32, 32), bg=40, fg=200) -> ImagePlane:
    data = np.full((h, w), bg, np.uint8)
    x, y, bw, bh = box
    data[y : y + bh, x : x + bw] = fg
    return ImagePlane(data)


# acceptance lines collected by tests/test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE, key=lambda k: int(k[1:])):
            terminalreporter.write_line(ACCEPTANCE[key])
