import numpy as np
import pytest

from tern import numerics as nx
from tern.config import TernConfig
from tern.data_io import RegionSet, TokenSequence
from tern.model import TERN


@pytest.fixture(autouse=True)
def float64_mode():
    """Tests run in 64-bit mode unless they switch explicitly."""
    with nx.precision("float64"):
        yield


def tiny_config(**overrides) -> TernConfig:
    base = dict(d_r=6, d_visual=8, d_text=8, d_common=8, n_visual_te=1, n_text_te=0,
                n_shared_te=1, d_ff=12, heads=2, vocab_size=20, max_regions=36,
                max_tokens=16, dropout=0.0)
    base.update(overrides)
    return TernConfig(**base)


def random_region_set(rng, n=3, d_r=6, image_id="img", width=100.0, height=80.0) -> RegionSet:
    x1 = rng.uniform(0, width / 2, n)
    y1 = rng.uniform(0, height / 2, n)
    x2 = x1 + rng.uniform(0, width / 2, n)
    y2 = y1 + rng.uniform(0, height / 2, n)
    return RegionSet(image_id, width, height, np.stack([x1, y1, x2, y2], 1), rng.normal(size=(n, d_r)))


def random_caption(rng, m=4, vocab=20, caption_id="cap", image_id="img") -> TokenSequence:
    return TokenSequence(caption_id, image_id, rng.integers(3, vocab, size=m).tolist())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_model():
    return TERN(tiny_config(), seed=3)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for line in results:
            terminalreporter.write_line(line)
