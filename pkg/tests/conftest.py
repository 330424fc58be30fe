import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_run():
    """A 3-utterance corpus, a small model, and its unit targets."""
    from jedssl.frontend import CorpusSpec, FrontendConfig, extract_features, generate_synthetic_corpus
    from jedssl.model import DecoderConfig, EncoderConfig, ModelConfig, init_encoder_params
    from jedssl.training import label_units
    from jedssl.units import kmeans_fit

    corpus = generate_synthetic_corpus(CorpusSpec(n_utterances=3, min_duration=0.3, max_duration=0.4, seed=2))
    cfg = ModelConfig(frontend=FrontendConfig(channels=8),
                      encoder=EncoderConfig(n_layers=1, n_heads=2, d_model=8, d_ff=16, dropout=0.1),
                      decoder=DecoderConfig(n_layers=1, n_heads=2, d_model=8, d_ff=16, dropout=0.1),
                      n_units=4, n_chars=3)
    fp = init_encoder_params(cfg, 0)
    km = kmeans_fit([f.frames for f in extract_features(corpus, fp, cfg.frontend)], 4, seed=0)
    return corpus, cfg, label_units(corpus, km, fp, cfg)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(mod.RESULTS, key=lambda s: int(s.split("[")[1].split("]")[0])):
        terminalreporter.write_line(line)
