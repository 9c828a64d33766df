import time
from dataclasses import dataclass

import numpy as np
import pytest

from facevc.config import TrainConfig
from facevc.corpus import Corpus, CorpusSpec, load_corpus, synth_corpus
from facevc.network import FaceVCNetwork
from facevc.training import History, label_map, train_network

# criterion number -> (passed, detail); filled by test_acceptance, printed at the end
ACCEPTANCE: dict = {}


@dataclass
class ToyRun:
    corpus: Corpus
    train: Corpus
    held: Corpus
    net: FaceVCNetwork
    history: History
    seconds: float


@pytest.fixture(scope="session")
def small_corpus_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus") / "small"
    synth_corpus(root, CorpusSpec(seed=3, n_speakers=4, utts_per_speaker=6))
    return root


@pytest.fixture(scope="session")
def small_corpus(small_corpus_dir):
    return load_corpus(small_corpus_dir)


@pytest.fixture(scope="session")
def quick_config():
    return TrainConfig(epochs=2, batch_size=6, seed=1)


@pytest.fixture(scope="session")
def trained_net(small_corpus, quick_config):
    train, _ = small_corpus.split_heldout(quick_config.heldout_fraction)
    net = FaceVCNetwork(quick_config, len(label_map(train.speakers)))
    train_network(net, train)
    return net


@pytest.fixture(scope="session")
def toy_run(tmp_path_factory):
    """K=4 speakers, M=50 utterances each, default configuration (30 epochs)."""
    root = tmp_path_factory.mktemp("toy") / "corpus"
    synth_corpus(root, CorpusSpec(seed=0, n_speakers=4, utts_per_speaker=50))
    corpus = load_corpus(root)
    cfg = TrainConfig()
    train, held = corpus.split_heldout(cfg.heldout_fraction)
    net = FaceVCNetwork(cfg, len(label_map(train.speakers)))
    start = time.perf_counter()
    history = train_network(net, train)
    return ToyRun(corpus, train, held, net, history, time.perf_counter() - start)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
