import time

import numpy as np
import pytest

from didfuse import cli

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def seen_runs(tmp_path_factory):
    """Two independent ``experiment --seed 7`` runs (seen condition)."""
    root = tmp_path_factory.mktemp("seen")
    outs, seconds = [], []
    for name in ("run1", "run2"):
        out = root / name
        start = time.perf_counter()
        assert cli.main(["experiment", "--seed", "7", "--out", str(out)]) == 0
        seconds.append(time.perf_counter() - start)
        outs.append(out)
    return SeenRuns(outs, seconds)


class SeenRuns(list):
    def __init__(self, outs, seconds):
        super().__init__(outs)
        self.seconds = seconds


def small_spec(seed=0, labels=("p", "q"), per_class=20, separation=3.0, spread=0.3, noise=0.3,
               channel=0.0, n_domains=2, frames=(20, 30)):
    from didfuse.datagen import CorpusSpec, DomainSpec
    doms = [DomainSpec(name, [per_class] * len(labels), [2] * len(labels), [per_class] * len(labels),
                       channel_strength=channel, noise=noise, min_frames=frames[0], max_frames=frames[1])
            for name in "ABC"[:n_domains]]
    return CorpusSpec(labels=list(labels), domains=doms, separation=separation,
                      utterance_spread=spread, seed=seed)


@pytest.fixture
def make_corpus(tmp_path):
    from didfuse import datagen

    def make(name="corpus", **kw):
        return datagen.generate(small_spec(**kw), tmp_path / name)

    return make
