import numpy as np
import pytest
import torch

from ecogdec.data import N_CHANNELS, Dataset, Session, SynthConfig, generate_synthetic, n_target_steps


def make_session(n_samples, sid=0, seed=0):
    rng = np.random.default_rng(seed)
    raw = rng.normal(size=(N_CHANNELS, n_samples)).astype(np.float32)
    targets = rng.normal(size=(n_target_steps(n_samples), 3)).astype(np.float32)
    targets /= np.linalg.norm(targets, axis=1, keepdims=True)
    return Session(sid, raw, targets)


@pytest.fixture(scope="session")
def tiny_config():
    # 2 s sessions hold 10 windows each
    return SynthConfig(n_sessions=8, session_duration_s=2.0, seed=7, target_step=0.3)


@pytest.fixture(scope="session")
def tiny_dataset(tiny_config) -> Dataset:
    return generate_synthetic(tiny_config)


@pytest.fixture(autouse=True)
def _torch_threads():
    torch.set_num_threads(1)
    yield


# one line per acceptance criterion, echoed after the run
ACCEPTANCE_LINES: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])
