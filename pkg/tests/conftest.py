import numpy as np
import pytest
import torch

from musit.corpus import make_corpus

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def corpus8():
    return make_corpus(8, 7)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


TINY_VAE = dict(hidden=32, blocks=1)
TINY_ENC = dict(width=16, layers=1, heads=2, d_e=16)
TINY_BB = dict(d_model=32, n_layers=1, n_heads=2, time_freq_dim=32, lyric_vocab_size=600)


@pytest.fixture(scope="session")
def songs3(corpus8):
    from musit.pipeline import songs_from_entries
    return songs_from_entries(corpus8[:3])


def train_tiny(songs, ckpt, path, steps=4):
    from musit.audio import MelConfig
    from musit.backbone import BackboneConfig
    from musit.corpus import description_vocabulary
    from musit.encoder import EncoderConfig
    from musit.pipeline import TrainConfig, finetune, pretrain, train_encoder, train_vae
    from musit.vae import VaeConfig

    train_vae(songs, VaeConfig(**TINY_VAE), MelConfig(), TrainConfig(phase="vae", steps=steps), ckpt)
    train_encoder(songs, EncoderConfig(vocab=tuple(description_vocabulary()), **TINY_ENC),
                  TrainConfig(phase="encoder", steps=steps), ckpt)
    pretrain(songs, ckpt, BackboneConfig(**TINY_BB), TrainConfig(path=path, steps=steps))
    finetune(songs, ckpt, TrainConfig(phase="diffusion_finetune", path=path, steps=steps, lyric_dropout=0.5))
    return ckpt


@pytest.fixture(scope="session")
def tiny_ckpt(tmp_path_factory, songs3):
    """Briefly trained musit checkpoints; quality is irrelevant, shapes and plumbing are not."""
    return train_tiny(songs3, tmp_path_factory.mktemp("ckpt_musit"), "musit")


@pytest.fixture(scope="session")
def tiny_ckpt_mudit(tmp_path_factory, songs3):
    return train_tiny(songs3, tmp_path_factory.mktemp("ckpt_mudit"), "mudit")


def pytest_terminal_summary(terminalreporter):
    acc = __import__("sys").modules.get("test_acceptance")
    if acc is None or not acc.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(acc.RESULTS):
        terminalreporter.write_line(acc.RESULTS[n])
