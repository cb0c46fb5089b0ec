import sys
from pathlib import Path

import numpy as np
import pytest

from latentatt.nnet import EncoderConfig, Model, ModelConfig


def tiny_config(variant="hard", vocab=2, feat=3, seed=0, pool=(1,), **kw):
    return ModelConfig(
        vocab_size=vocab,
        feature_dim=feat,
        encoder=EncoderConfig(num_layers=len(pool), hidden_per_direction=3, pool_factors=pool),
        decoder_hidden=4,
        embedding_dim=3,
        attention_dim=4,
        readout_dim=4,
        variant=variant,
        init_seed=seed,
        **kw,
    )


def tiny_model(variant="hard", seed=0, scale=1.0, **kw):
    """Small random model; ``scale`` sharpens the distributions."""
    model = Model(tiny_config(variant, seed=seed, **kw))
    if scale != 1.0:
        for p in model.parameters():
            p.data *= scale
    return model


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def pkg_root():
    return Path(__file__).resolve().parent.parent


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
