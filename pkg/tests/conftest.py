import numpy as np
import pytest

from plateau_lab.model import ModelConfig, Prompt, init_checkpoint
from plateau_lab.training import attach_projector

TINY = ModelConfig(num_layers=2, hidden_dim=8, num_heads=2, vocab_size=64, max_seq_len=32,
                   vision_feature_dim=16, ffn_dim=16)
SMALL = ModelConfig(num_layers=4, hidden_dim=16, num_heads=2, vocab_size=64, max_seq_len=32,
                    vision_feature_dim=16, ffn_dim=32)


def random_mllm(seed: int, config: ModelConfig = SMALL, jitter: float = 0.1):
    base = init_checkpoint(config, seed, gain_jitter=jitter)
    return attach_projector(base, seed + 1000, std=0.3)


def random_prompt(rng: np.random.Generator, config: ModelConfig = SMALL, n_pre=None, n_vis=None, n_ins=None):
    n_pre = int(rng.integers(1, 4)) if n_pre is None else n_pre
    n_vis = int(rng.integers(1, 7)) if n_vis is None else n_vis
    n_ins = int(rng.integers(1, 5)) if n_ins is None else n_ins
    vision = rng.standard_normal((n_vis, config.vision_feature_dim)).astype(np.float32)
    return Prompt(vision, rng.integers(0, config.vocab_size, n_pre).tolist(),
                  rng.integers(0, config.vocab_size, n_ins).tolist())


@pytest.fixture
def small_mllm():
    return random_mllm(0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in mod.RESULTS:
            terminalreporter.write_line(line)
