import json
import sys
from pathlib import Path

import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

from affedit.diffusion import Autoencoder, Denoiser, build_schedule, train_autoencoder  # noqa: E402
from affedit.editing import Pipeline  # noqa: E402
from affedit.mapper import EmotionalMapper, MapperConfig, SemanticEncoder  # noqa: E402
from affedit.spectrum import RequestEncoder  # noqa: E402
from affedit.toy import warm_dark_corpus  # noqa: E402

settings.register_profile("affedit", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("affedit")

FIXTURES = Path(__file__).parent / "fixtures"
ACCEPTANCE: list[str] = []


@pytest.fixture
def fixtures_dir():
    return FIXTURES


@pytest.fixture
def report_criterion():
    """Record one acceptance line; printed again in the terminal summary."""

    def _report(name: str, passed: bool, detail: str):
        line = f"{'PASS' if passed else 'FAIL'}  {name}: {detail}"
        print(line)
        ACCEPTANCE.append(line)

    return _report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def small_corpus():
    return warm_dark_corpus(256, seed=11)


@pytest.fixture(scope="session")
def trained_autoencoder(small_corpus):
    torch.manual_seed(0)
    ae = Autoencoder()
    train_autoencoder(ae, small_corpus.images, steps=300, batch_size=32, lr=2e-3, seed=0)
    return ae


def tiny_pipeline(autoencoder=None, eta=0.0, T=50, seed=0) -> Pipeline:
    """Untrained but deterministic pipeline; the denoiser output layer gets small
    random weights so reverse steps are not the identity map."""
    torch.manual_seed(seed)
    ae = autoencoder if autoencoder is not None else Autoencoder(width=16)
    den = Denoiser(width=16)
    with torch.no_grad():
        den.conv_out.weight.normal_(0, 0.05)
    pipe = Pipeline(RequestEncoder(channels=32, seed=seed), SemanticEncoder(), EmotionalMapper(MapperConfig(depth=1)),
                    ae, den, build_schedule(T, eta=eta))
    return pipe.freeze()


@pytest.fixture
def pipeline():
    return tiny_pipeline()


@pytest.fixture
def stub_distribution():
    return json.loads((FIXTURES / "scene_distribution.json").read_text())


@pytest.fixture
def fixture_eps():
    return torch.from_numpy(np.load(FIXTURES / "eps.npy"))
