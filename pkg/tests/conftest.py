import numpy as np
import pytest

from promptforge.encoders import EncoderConfig, init_frozen_weights


@pytest.fixture(scope="session")
def small_config():
    return EncoderConfig(embed_dim=16, layers=2, heads=2, patch_size=8, image_size=32, vocab_hash_buckets=256, max_text_len=16)


@pytest.fixture(scope="session")
def small_weights(small_config):
    return init_frozen_weights(small_config, seed=3)


@pytest.fixture
def images():
    return np.random.default_rng(0).uniform(size=(3, 32, 32, 3))


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(RESULTS):
        passed, detail = RESULTS[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'} - {detail}")
