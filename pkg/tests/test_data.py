import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_session
from ecogdec.data import (
    FS, N_STEPS, STRIDE, WINDOW_SAMPLES, Dataset, DatasetFormatError, DatasetShapeError, GridLayout, SynthConfig,
    band_envelopes, generate_synthetic, load_dataset, n_target_steps, perturb_targets, save_dataset, step_index,
    window_sessions,
)
from ecogdec.experiments import ridge_oracle_cs


class TestWindowing:
    def test_exact_window_length(self):
        w = window_sessions(Dataset((make_session(590),)))
        assert len(w) == 1 and w.skipped == 0

    def test_two_windows(self):
        w = window_sessions(Dataset((make_session(649),)))
        assert w.starts.tolist() == [0, 59]

    def test_short_session_skipped(self):
        w = window_sessions(Dataset((make_session(589),)))
        assert len(w) == 0 and w.skipped == 1

    @settings(max_examples=40, deadline=None)
    @given(st.integers(590, 6000))
    def test_window_count(self, n):
        w = window_sessions(Dataset((make_session(n),)))
        assert len(w) == (n - WINDOW_SAMPLES) // STRIDE + 1
        assert np.all(w.starts + WINDOW_SAMPLES <= n)

    def test_targets_sampled_at_block_ends(self):
        s = make_session(1000)
        w = window_sessions(Dataset((s,)))
        start = w.starts[3]
        for k in range(N_STEPS):
            end = start + STRIDE * (k + 1) - 1
            np.testing.assert_array_equal(w.targets[3, k], s.targets[(end * 10) // 586])
        np.testing.assert_array_equal(w.labels, w.targets[:, -1])

    def test_signal_slices(self):
        s = make_session(800)
        w = window_sessions(Dataset((s,)))
        np.testing.assert_array_equal(w.signals([2])[0], s.raw[:, 118:118 + 590])
        window, traj = w[2]
        assert window.window_start == 118 and traj.steps.shape == (10, 3)

    def test_step_index(self):
        assert step_index(0) == 0
        assert step_index(58) == 0 and step_index(59) == 1
        assert n_target_steps(586) == 10 and n_target_steps(587) == 11


class TestGrid:
    def test_layout(self):
        g = GridLayout()
        assert g.position(0) == (0, 0, 0)
        assert g.position(5) == (0, 1, 1)
        assert g.position(31) == (0, 7, 3)
        assert g.position(32) == (1, 0, 0)
        assert len(set(g.channel_to_position.values())) == 64

    def test_to_grid(self):
        x = np.arange(64)[None]
        grid = GridLayout().to_grid(x, axis=1)
        assert grid.shape == (1, 2, 8, 4)
        assert grid[0, 1, 2, 3] == 32 + 2 * 4 + 3


class TestSynthetic:
    def test_deterministic(self, tiny_config):
        assert generate_synthetic(tiny_config) == generate_synthetic(tiny_config)

    def test_seed_changes_data(self, tiny_config):
        other = SynthConfig(**{**tiny_config.__dict__, "seed": tiny_config.seed + 1})
        assert generate_synthetic(other) != generate_synthetic(tiny_config)

    def test_shapes(self, tiny_dataset, tiny_config):
        assert len(tiny_dataset) == tiny_config.n_sessions
        s = tiny_dataset.sessions[0]
        assert s.raw.shape == (64, round(2.0 * FS))
        np.testing.assert_allclose(np.linalg.norm(s.targets, axis=1), 1, atol=1e-5)

    def test_nyquist_rejected(self):
        with pytest.raises(ValueError, match="Nyquist"):
            generate_synthetic(SynthConfig(informative_bands=[(300.0, 10.0)]))

    def test_snr_zero_constant_envelope(self):
        rng = np.random.default_rng(0)
        env = band_envelopes(rng.normal(size=(50, 3)), rng.normal(size=(64, 1, 3)), snr=0.0)
        assert np.all(env == 1.0)

    def test_ridge_oracle_decodes(self):
        cfg = SynthConfig(n_sessions=4, session_duration_s=8, seed=3)
        w = window_sessions(generate_synthetic(cfg))
        train = w.subset(np.where(w.session_index < 2)[0])
        test = w.subset(np.where(w.session_index >= 2)[0])
        assert ridge_oracle_cs(train, test, cfg) > 0.5

    def test_config_json_roundtrip(self, tiny_config):
        assert SynthConfig.from_json(json.loads(json.dumps(tiny_config.to_json()))) == tiny_config


class TestPerturb:
    def test_fraction_zero_identity(self, tiny_dataset):
        w = tiny_dataset.windows
        assert perturb_targets(w, 0.0, 1) is w

    def test_full_shuffle_preserves_multiset(self, tiny_dataset):
        w = tiny_dataset.windows
        p = perturb_targets(w, 1.0, 1)
        key = lambda t: sorted(map(tuple, t.reshape(len(t), -1)))  # noqa: E731
        assert key(p.targets) == key(w.targets)
        assert not np.array_equal(p.targets, w.targets)

    def test_reject_out_of_range(self, tiny_dataset):
        for f in (-0.1, 1.5):
            with pytest.raises(ValueError):
                perturb_targets(tiny_dataset.windows, f, 0)

    def test_count_perturbed(self):
        ds = Dataset((make_session(590 + 9 * 59),))
        w = window_sessions(ds)
        assert len(w) == 10
        changed = [int((perturb_targets(w, 0.4, s).targets != w.targets).any(axis=(1, 2)).sum())
                   for s in range(20)]
        assert max(changed) == 4

    @settings(max_examples=25, deadline=None)
    @given(st.floats(0, 1), st.integers(0, 2**31))
    def test_at_most_floor_changed(self, fraction, seed):
        w = window_sessions(Dataset((make_session(590 + 29 * 59),)))
        p = perturb_targets(w, fraction, seed)
        changed = (p.targets != w.targets).any(axis=(1, 2)).sum()
        assert changed <= np.floor(fraction * len(w) + 1e-9)
        np.testing.assert_array_equal(np.sort(p.targets, axis=0), np.sort(w.targets, axis=0))


class TestPersistence:
    def test_roundtrip(self, tiny_dataset, tmp_path):
        save_dataset(tiny_dataset, tmp_path / "d")
        back = load_dataset(tmp_path / "d")
        assert back == tiny_dataset
        assert back.content_hash() == tiny_dataset.content_hash()
        assert back.config == tiny_dataset.config

    def test_corrupted_magic(self, tiny_dataset, tmp_path):
        save_dataset(tiny_dataset, tmp_path)
        blob = tmp_path / "session_0000.bin"
        data = bytearray(blob.read_bytes())
        data[:4] = b"XXXX"
        blob.write_bytes(bytes(data))
        with pytest.raises(DatasetFormatError) as e:
            load_dataset(tmp_path)
        assert e.value.field == "magic"

    def test_payload_for_32_channels(self, tmp_path):
        s = make_session(600)
        save_dataset(Dataset((s,)), tmp_path)
        blob = tmp_path / "session_0000.bin"
        data = blob.read_bytes()
        header = data[:8]
        half = s.raw[:32].astype("<f4").tobytes() + s.targets.astype("<f4").tobytes()
        blob.write_bytes(header + half)
        with pytest.raises(DatasetShapeError) as e:
            load_dataset(tmp_path)
        assert e.value.field == "n_channels"

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(DatasetFormatError):
            load_dataset(tmp_path)
