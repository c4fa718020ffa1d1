"""Shared fixtures.

The pretrained speech model is trained once (a few minutes) and cached under
``$MAD_CACHE_DIR`` (default ``~/.cache/mad``); later sessions load it.
"""
import numpy as np
import pytest

from mad.data import SpeechWorld, SynthConfig, synth_generate
from mad.pretrain import load_or_pretrain
from mad.seq2seq import Seq2SeqConfig, init_seq2seq


@pytest.fixture(scope="session")
def world():
    return SpeechWorld()


@pytest.fixture(scope="session")
def pretrained_speech(world):
    return load_or_pretrain(world)


@pytest.fixture(scope="session")
def tiny_config():
    return SynthConfig(sentences_per_story=[12, 10, 24, 24], n_subjects=2, seed=3)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory, tiny_config):
    out = tmp_path_factory.mktemp("tiny_ds")
    synth_generate(tiny_config, out)
    return out


@pytest.fixture(scope="session")
def random_speech():
    """Untrained but frozen speech model, enough for mechanics tests."""
    return init_seq2seq(Seq2SeqConfig(), seed=np.random.default_rng(11), frozen=True)
