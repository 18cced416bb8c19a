import json

import pytest

TINY = {
    "fleet": {"num_devices": 3, "per_device": 30},
    "channel": {"n_samples": 1024},
    "stft": {"window_len": 128, "hop": 128},
    "teacher": {"lstm_layers": 1, "lstm_hidden": 8, "model_dim": 16, "attn_layers": 1},
    "student": {"channels": [4, 8], "strides": [2, 2]},
    "teacher_train": {"epochs": 2},
    "distill": {"epochs": 3},
    "controller": {"horizon": 2},
    "fixed_taus": [2.0, 4.0, 6.0, 8.0],
    "latency_runs": 3,
}


@pytest.fixture
def tiny_config_path(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY))
    return path


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
