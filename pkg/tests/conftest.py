import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from fscil_prompts import EncoderSpec, build_toy_bundle, pretrain_toy_alignment, synthesize_dataset
from fscil_prompts.config import RunConfig
from fscil_prompts.data import vocabulary_words

torch.set_num_threads(1)

VOCAB = vocabulary_words() + ["a", "photo", "of"]


def make_bundle(K=2, d_nlp=16, d_cv=24, heads=2, seed=0, joint_dim=8, image_size=16, patch_size=4,
                text_len=32, vision_len=64, **kw):
    return build_toy_bundle(
        EncoderSpec(K, d_nlp, heads, text_len, "language"),
        EncoderSpec(K, d_cv, heads, vision_len, "vision"),
        seed=seed, joint_dim=joint_dim, image_size=image_size, patch_size=patch_size, vocab=VOCAB, **kw,
    )


@pytest.fixture
def bundle():
    return make_bundle().freeze()


@pytest.fixture(scope="session")
def small_data():
    return synthesize_dataset(8, 12, 16, seed=1)


@pytest.fixture(scope="session")
def aligned_bundle(small_data):
    """Briefly aligned 16x16 backbone; enough for fast training tests."""
    corpus = synthesize_dataset(12, 8, 16, seed=2, exclude=small_data.class_names)
    b = make_bundle(seed=0, logit_scale=10.0)
    return pretrain_toy_alignment(b, corpus, 40, benchmark_classes=small_data.class_names, batch_size=12)


@pytest.fixture(scope="session")
def experiment():
    """The default run configuration's backbone and benchmark (built once)."""
    from fscil_prompts.reporting import Experiment

    return Experiment(RunConfig().validate())


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(RESULTS, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
