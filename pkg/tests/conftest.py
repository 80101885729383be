import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from cognilab.model import ModelConfig, init_params

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def tiny_cfg():
    return ModelConfig(n_layers=2, n_heads=2, d_model=16, vocab_size=40, max_seq_len=24, seed=3)


@pytest.fixture
def tiny_params(tiny_cfg):
    params = init_params(tiny_cfg)
    # larger weights than the init so gradients are not vanishingly small
    rng = np.random.default_rng(11)
    for k, v in params.items():
        if k != "gates" and v.ndim == 2:
            params[k] = rng.normal(0, 0.3, size=v.shape)
    return params


SMOKE_STEPS = (["gen-data"], ["clean"], ["label"], ["split"], ["train", "--mode", "curriculum"],
               ["train", "--mode", "baseline"], ["eval"], ["analyze-heads"], ["analyze-attn"],
               ["analyze-pca"], ["stats"], ["report"])


@pytest.fixture(scope="session")
def smoke_ws(tmp_path_factory):
    """A workspace that has been through the whole CLI pipeline on the smoke config."""
    from cognilab.cli import main

    root = tmp_path_factory.mktemp("smoke")
    for step in SMOKE_STEPS:
        rc = main(step + ["--config", "configs/smoke.json", "--run-dir", str(root)])
        assert rc == 0, step
    return root
