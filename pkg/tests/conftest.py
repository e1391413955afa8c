import hypothesis
import numpy as np
import pytest
import torch

hypothesis.settings.register_profile("default", max_examples=25, deadline=None)
hypothesis.settings.register_profile("ci", max_examples=10, deadline=None)
hypothesis.settings.load_profile("default")

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def prepared_corpus(tmp_path_factory):
    """Two synthetic utterances, features extracted."""
    from sifisinger import synthetic
    from sifisinger.data import prepare_dataset

    root = tmp_path_factory.mktemp("corpus")
    synthetic.make_corpus(root / "raw", n=2, seed=3)
    return prepare_dataset(root / "raw" / "transcriptions.txt", root / "raw" / "wavs", root / "prepared")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def sine(freq, seconds=1.0, sr=44100, amp=0.5):
    t = np.arange(int(seconds * sr)) / sr
    return (amp * np.sin(2 * np.pi * freq * t)).astype(np.float32)
