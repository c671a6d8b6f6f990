import numpy as np
import pytest
import torch
from hypothesis import settings

from tvp.config import ModelConfig, TrainConfig
from tvp.dataset import arrays_from_clips, build_vocabulary, make_balanced
from tvp.generator import StyleGenerator, freeze, param_digest
from tvp.motion import Inverter
from tvp.trainer import GeneratorArtifact

torch.set_num_threads(1)
settings.register_profile("fast", max_examples=25, deadline=None)
settings.register_profile("thorough", max_examples=200, deadline=None)
settings.load_profile("fast")

TINY = ModelConfig(height=16, width=16, n_frames=4, max_len=12, d_u=8, d_t=8, n_layers=2, d_w=8,
                   gen_channels=8, inv_channels=8, disc_channels=8, text_depth=1, text_heads=2)


@pytest.fixture(scope="session")
def tiny_model():
    return TINY


@pytest.fixture(scope="session")
def tiny_clips():
    return make_balanced(40, 123, (16, 16, 5))


@pytest.fixture(scope="session")
def tiny_vocab(tiny_clips):
    return build_vocabulary(c.caption for c in tiny_clips)


@pytest.fixture(scope="session")
def tiny_arrays(tiny_clips, tiny_vocab):
    return arrays_from_clips(tiny_clips, tiny_vocab, TINY.n_frames, TINY.max_len)


def make_artifact(m=TINY, seed=0):
    torch.manual_seed(seed)
    gen = freeze(StyleGenerator(m.n_layers, m.d_w, m.gen_channels, m.height))
    inv = freeze(Inverter(m.n_layers, m.d_w, m.inv_channels, m.height))
    return GeneratorArtifact(gen, inv, m, param_digest(gen))


@pytest.fixture
def tiny_artifact():
    return make_artifact()


def tiny_train_config(**kw):
    kw.setdefault("model", TINY)
    kw.setdefault("batch_size", 4)
    kw.setdefault("steps", 6)
    return TrainConfig(**kw)


# one line per acceptance criterion, printed after the run
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
