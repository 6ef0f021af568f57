import pytest

from ecogdec.config import ConfigError, build, load_config

TEXT = """
[synth]
n_sessions = 10
informative_bands = 70:10, 20:4
snr = 1.5
[train]
max_epochs = 3
chronological_split = yes
[experiment]
model = cnn-lstm-mt
sizes = 1, 2, 4
seeds = 3, 4
models = mlp, cnn-lstm-mt
jobs = 2
"""


def test_parse_all_sections():
    cfg = load_config(text=TEXT)
    synth = build("synth", cfg["synth"])
    assert synth.n_sessions == 10 and synth.informative_bands == [(70.0, 10.0), (20.0, 4.0)]
    train = build("train", cfg["train"])
    assert train.max_epochs == 3 and train.chronological_split is True
    exp = build("experiment", cfg["experiment"])
    assert exp.model == "cnn-lstm-mt" and exp.sizes == [1, 2, 4] and exp.seeds == [3, 4]
    assert cfg["experiment"]["models"] == ["mlp", "cnn-lstm-mt"] and cfg["experiment"]["jobs"] == 2


def test_flags_override_file():
    cfg = load_config(text=TEXT)
    assert build("train", cfg["train"], {"max_epochs": 9, "seed": None}).max_epochs == 9


def test_defaults_when_empty():
    cfg = load_config(text="")
    assert build("train", cfg["train"]).learning_rate == 0.001


@pytest.mark.parametrize("text", [
    "[synth]\nn_sesions = 3\n",
    "[model]\nx = 1\n",
    "n_sessions = 3\n",
    "[train]\nmax_epochs = three\n",
    "[train]\nchronological_split = maybe\n",
    "[synth]\nchannel_weights = 1\n",
])
def test_rejected(text):
    with pytest.raises(ConfigError):
        load_config(text=text)


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.ini")
