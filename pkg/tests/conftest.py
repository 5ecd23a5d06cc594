import numpy as np
import pytest

from window_diffusion.decoding import GenerationConfig
from window_diffusion.model import ModelConfig, ToyTransformer
from window_diffusion.oracle import OracleConfig, SyntheticOracle


def make_prompt(n, seed=0, high=95):
    return np.random.default_rng(1000 + seed).integers(0, high, n)


def toy(seed=0, **kw):
    return ToyTransformer.from_config(ModelConfig(rng_seed=seed, **kw))


@pytest.fixture(scope="session")
def toy0():
    return toy(0)


@pytest.fixture
def oracle():
    return SyntheticOracle(OracleConfig())


@pytest.fixture
def small_gen():
    return GenerationConfig(total_steps=32, gen_len=32, tokens_per_step=1, w_ex_len=12, w_in_len=4, refresh_cycle=6)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
