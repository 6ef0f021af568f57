"""Signal windows, synthetic ECoG-like sessions, target shuffling and the
binary dataset container.

Sessions are stored as float32 ``[64, T]`` arrays sampled at 586 Hz together
with one unit 3-D target direction per 0.1 s.  Windows are 590-sample views
taken every 59 samples, so each window spans exactly ten pooling blocks.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import struct
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

FS = 586.0
N_CHANNELS = 64
WINDOW_SAMPLES = 590
STRIDE = 59
N_STEPS = 10
MAGIC = b"WDEC"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sI")


class DatasetFormatError(ValueError):
    """Raised when a dataset container cannot be decoded.

    ``field`` names the manifest entry or payload part that is inconsistent.
    """

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class DatasetShapeError(DatasetFormatError):
    pass


def step_index(sample):
    """Index of the 0.1 s target step that holds at ``sample`` (586 Hz)."""
    return (np.asarray(sample, dtype=np.int64) * 10) // int(FS)


def n_target_steps(n_samples: int) -> int:
    # ceil(T / 58.6) in integer arithmetic
    return -(-n_samples * 10 // int(FS))


@dataclass(frozen=True)
class GridLayout:
    """Channel to electrode position map for the two 8x4 implants.

    Channels 0-31 belong to implant 0 and 32-63 to implant 1, each laid out
    row-major over 8 rows and 4 columns.
    """

    n_implants: int = 2
    rows: int = 8
    cols: int = 4

    def position(self, channel: int) -> tuple[int, int, int]:
        if not 0 <= channel < self.n_channels:
            raise ValueError(f"channel {channel} out of range")
        per_implant = self.rows * self.cols
        implant, rest = divmod(channel, per_implant)
        row, col = divmod(rest, self.cols)
        return implant, row, col

    @property
    def n_channels(self) -> int:
        return self.n_implants * self.rows * self.cols

    @property
    def channel_to_position(self) -> dict[int, tuple[int, int, int]]:
        return {c: self.position(c) for c in range(self.n_channels)}

    def to_grid(self, x, axis: int = 1):
        """Split the 64-channel ``axis`` of ``x`` into (implant, row, col)."""
        shape = tuple(x.shape)
        if shape[axis] != self.n_channels:
            raise ValueError(f"axis {axis} has size {shape[axis]}, expected {self.n_channels}")
        return x.reshape(shape[:axis] + (self.n_implants, self.rows, self.cols) + shape[axis + 1:])


@dataclass(frozen=True)
class SignalWindow:
    samples: np.ndarray
    window_start: int
    session_id: int

    def __post_init__(self):
        if self.samples.shape != (N_CHANNELS, WINDOW_SAMPLES):
            raise ValueError(f"window must be 64x590, got {self.samples.shape}")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("window contains non-finite samples")


@dataclass(frozen=True)
class TargetTrajectory:
    steps: np.ndarray
    degenerate: bool = False

    def __post_init__(self):
        if self.steps.shape != (N_STEPS, 3):
            raise ValueError(f"trajectory must be 10x3, got {self.steps.shape}")
        if not self.degenerate:
            norms = np.linalg.norm(self.steps, axis=1)
            if np.any(np.abs(norms - 1.0) > 1e-6):
                raise ValueError("trajectory steps must be unit vectors")

    @property
    def window_label(self) -> np.ndarray:
        return self.steps[-1]


@dataclass(eq=False)
class SynthConfig:
    """Parameters of the synthetic surrogate generator.

    ``informative_bands`` holds ``(center_hz, bandwidth_hz)`` pairs; a zero
    bandwidth gives a pure sinusoidal carrier.  ``channel_weights`` is
    ``[64, n_bands, 3]`` and is drawn from ``seed`` when left as ``None``.
    """

    n_sessions: int = 24
    session_duration_s: float = 120.0
    informative_bands: list = field(default_factory=lambda: [(70.0, 10.0)])
    channel_weights: np.ndarray | None = None
    noise_exponent: float = 1.0
    snr: float = 2.0
    seed: int = 0
    noise_amplitude: float = 1.0
    band_amplitude: float = 1.0
    target_step: float = 0.15
    fs: float = FS

    def validate(self) -> None:
        nyquist = self.fs / 2
        if self.n_sessions < 1:
            raise ValueError("n_sessions must be >= 1")
        if self.session_duration_s <= 0:
            raise ValueError("session_duration_s must be positive")
        for center, width in self.informative_bands:
            if not 0 < center < nyquist:
                raise ValueError(
                    f"band center {center} Hz outside (0, {nyquist}) Hz (Nyquist violation)"
                )
            if width < 0:
                raise ValueError(f"band width {width} must be >= 0")
        if self.snr < 0 or self.noise_amplitude < 0 or self.band_amplitude < 0:
            raise ValueError("snr and amplitudes must be non-negative")
        if self.channel_weights is not None:
            w = np.asarray(self.channel_weights)
            if w.shape != (N_CHANNELS, len(self.informative_bands), 3):
                raise ValueError(f"channel_weights must be [64, n_bands, 3], got {w.shape}")

    def resolved_weights(self) -> np.ndarray:
        if self.channel_weights is not None:
            return np.asarray(self.channel_weights, dtype=np.float64)
        rng = np.random.default_rng([self.seed, 0x5EED])
        return rng.normal(scale=1 / np.sqrt(3), size=(N_CHANNELS, len(self.informative_bands), 3))

    def __eq__(self, other):
        # configs that resolve to the same channel weights generate the same data
        if not isinstance(other, SynthConfig):
            return NotImplemented
        return self.to_json() == other.to_json()

    def to_json(self) -> dict:
        d = asdict(self)
        d["informative_bands"] = [list(map(float, b)) for b in self.informative_bands]
        d["channel_weights"] = self.resolved_weights().tolist()
        return d

    @classmethod
    def from_json(cls, d: dict) -> "SynthConfig":
        d = dict(d)
        d["informative_bands"] = [tuple(b) for b in d["informative_bands"]]
        if d.get("channel_weights") is not None:
            d["channel_weights"] = np.asarray(d["channel_weights"], dtype=np.float64)
        return cls(**d)


@dataclass(frozen=True, eq=False)
class Session:
    id: int
    raw: np.ndarray
    targets: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.raw.ndim != 2 or self.raw.shape[0] != N_CHANNELS:
            raise ValueError(f"raw must be [64, T], got {self.raw.shape}")
        expected = n_target_steps(self.raw.shape[1])
        if self.targets.shape != (expected, 3):
            raise ValueError(f"targets must be [{expected}, 3], got {self.targets.shape}")

    @property
    def n_samples(self) -> int:
        return self.raw.shape[1]

    def __eq__(self, other):
        if not isinstance(other, Session):
            return NotImplemented
        return (
            self.id == other.id
            and np.array_equal(self.raw, other.raw)
            and np.array_equal(self.targets, other.targets)
            and self.metadata == other.metadata
        )


@dataclass(frozen=True, eq=False)
class Dataset:
    sessions: tuple
    config: SynthConfig | None = None

    def __len__(self):
        return len(self.sessions)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return len(self) == len(other) and all(a == b for a, b in zip(self.sessions, other.sessions))

    def select(self, idx) -> "Dataset":
        """Sub-dataset made of the sessions at positions ``idx``."""
        return Dataset(tuple(self.sessions[i] for i in idx), self.config)

    @property
    def windows(self) -> "Windows":
        return window_sessions(self)

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for s in self.sessions:
            h.update(struct.pack("<qq", s.id, s.n_samples))
            h.update(_le32(s.raw).tobytes())
            h.update(_le32(s.targets).tobytes())
        return "sha256:" + h.hexdigest()


class Windows(Sequence):
    """Overlapping windows over a set of sessions, paired with their targets.

    Signals are sliced lazily from the parent sessions; ``targets`` is owned by
    the instance so that label perturbation never touches the sessions.
    """

    def __init__(self, sessions, session_index, starts, targets, skipped=0):
        self.sessions = tuple(sessions)
        self.session_index = np.asarray(session_index, dtype=np.int64)
        self.starts = np.asarray(starts, dtype=np.int64)
        self.targets = np.asarray(targets)
        self.skipped = skipped

    def __len__(self):
        return len(self.starts)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return self.subset(np.arange(len(self))[i])
        s = self.sessions[self.session_index[i]]
        start = int(self.starts[i])
        window = SignalWindow(s.raw[:, start:start + WINDOW_SAMPLES], start, s.id)
        return window, TargetTrajectory(self.targets[i])

    @property
    def session_ids(self) -> np.ndarray:
        ids = np.array([s.id for s in self.sessions], dtype=np.int64)
        return ids[self.session_index] if len(self) else np.zeros(0, np.int64)

    @property
    def labels(self) -> np.ndarray:
        return self.targets[:, -1]

    def keys(self) -> list[tuple[int, int]]:
        return list(zip(self.session_ids.tolist(), self.starts.tolist()))

    def signals(self, idx=None) -> np.ndarray:
        if idx is None:
            idx = np.arange(len(self))
        idx = np.asarray(idx, dtype=np.int64)
        out = np.empty((len(idx), N_CHANNELS, WINDOW_SAMPLES), dtype=np.float32)
        for k, i in enumerate(idx):
            s = self.sessions[self.session_index[i]]
            start = self.starts[i]
            out[k] = s.raw[:, start:start + WINDOW_SAMPLES]
        return out

    def subset(self, idx) -> "Windows":
        idx = np.asarray(idx, dtype=np.int64)
        return Windows(self.sessions, self.session_index[idx], self.starts[idx],
                       self.targets[idx], self.skipped)

    def with_targets(self, targets) -> "Windows":
        return Windows(self.sessions, self.session_index, self.starts, targets, self.skipped)

    def content_hash(self) -> str:
        """Hash of window identities and targets (signals are identified by key)."""
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.session_ids, dtype="<i8").tobytes())
        h.update(np.ascontiguousarray(self.starts, dtype="<i8").tobytes())
        h.update(_le32(self.targets).tobytes())
        return "sha256:" + h.hexdigest()


def window_starts(n_samples: int) -> np.ndarray:
    if n_samples < WINDOW_SAMPLES:
        return np.zeros(0, dtype=np.int64)
    return np.arange(0, n_samples - WINDOW_SAMPLES + 1, STRIDE, dtype=np.int64)


def window_sessions(dataset: Dataset) -> Windows:
    """Cut every session into 590-sample windows with a 59-sample stride.

    Each window gets the ten target steps in force at the last sample of
    each of its 59-sample blocks.  Sessions shorter than one window are
    skipped and counted in ``Windows.skipped``.
    """
    sess_idx, starts, targets = [], [], []
    skipped = 0
    block_ends = STRIDE * np.arange(1, N_STEPS + 1) - 1
    for k, s in enumerate(dataset.sessions):
        st = window_starts(s.n_samples)
        if len(st) == 0:
            skipped += 1
            logger.warning("session %s has %d samples (< %d); skipped", s.id, s.n_samples, WINDOW_SAMPLES)
            continue
        idx = step_index(st[:, None] + block_ends[None, :])
        sess_idx.append(np.full(len(st), k))
        starts.append(st)
        targets.append(s.targets[idx])
    if not starts:
        return Windows(dataset.sessions, [], [], np.zeros((0, N_STEPS, 3), np.float32), skipped)
    return Windows(dataset.sessions, np.concatenate(sess_idx), np.concatenate(starts),
                   np.concatenate(targets), skipped)


# --- synthetic generation -------------------------------------------------

def _unit(v):
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def random_walk_targets(n_steps: int, step: float, rng) -> np.ndarray:
    y = np.empty((n_steps, 3))
    y[0] = _unit(rng.normal(size=3))
    noise = rng.normal(size=(n_steps, 3)) * step
    for j in range(1, n_steps):
        y[j] = _unit(y[j - 1] + noise[j])
    return y


def pink_noise(n_channels: int, n_samples: int, exponent: float, rng) -> np.ndarray:
    """Unit-variance noise with power spectral density ~ 1/f**exponent."""
    n_freq = n_samples // 2 + 1
    spec = rng.normal(size=(n_channels, n_freq)) + 1j * rng.normal(size=(n_channels, n_freq))
    freqs = np.arange(n_freq, dtype=np.float64)
    scale = np.zeros(n_freq)
    scale[1:] = freqs[1:] ** (-exponent / 2)
    x = np.fft.irfft(spec * scale, n=n_samples)
    return x / x.std(axis=1, keepdims=True)


def band_carrier(n_channels: int, n_samples: int, center: float, width: float, fs: float, rng) -> np.ndarray:
    """Unit-RMS narrowband carrier around ``center`` Hz, independent per channel."""
    if width == 0:
        t = np.arange(n_samples) / fs
        phase = rng.uniform(0, 2 * np.pi, size=(n_channels, 1))
        return np.sqrt(2) * np.cos(2 * np.pi * center * t + phase)
    n_freq = n_samples // 2 + 1
    freqs = np.fft.rfftfreq(n_samples, d=1 / fs)
    shape = np.exp(-0.5 * ((freqs - center) / (width / 2)) ** 2)
    spec = rng.normal(size=(n_channels, n_freq)) + 1j * rng.normal(size=(n_channels, n_freq))
    x = np.fft.irfft(spec * shape, n=n_samples)
    return x / np.sqrt(np.mean(x ** 2, axis=1, keepdims=True))


def band_envelopes(targets: np.ndarray, weights: np.ndarray, snr: float) -> np.ndarray:
    """Per-step band amplitudes ``max(0, 1 + snr * <w[c, b], y_j>)``: [64, n_bands, n_steps]."""
    proj = np.einsum("cbk,jk->cbj", weights, targets)
    return np.maximum(0.0, 1.0 + snr * proj)


def _generate_session(sid: int, config: SynthConfig, weights: np.ndarray, seed_seq) -> Session:
    rng = np.random.default_rng(seed_seq)
    fs = config.fs
    n = int(round(config.session_duration_s * fs))
    targets = random_walk_targets(n_target_steps(n), config.target_step, rng)
    env = band_envelopes(targets, weights, config.snr)
    sample_step = step_index(np.arange(n))
    x = config.noise_amplitude * pink_noise(N_CHANNELS, n, config.noise_exponent, rng)
    for b, (center, width) in enumerate(config.informative_bands):
        carrier = band_carrier(N_CHANNELS, n, center, width, fs, rng)
        x += config.band_amplitude * env[:, b, sample_step] * carrier
    meta = {"seed": config.seed, "session_entropy": list(map(int, seed_seq.spawn_key))}
    return Session(sid, x.astype(np.float32), targets.astype(np.float32), meta)


def generate_synthetic(config: SynthConfig) -> Dataset:
    """Generate ``config.n_sessions`` sessions whose band envelopes encode the target.

    Each session draws from its own child seed, so results do not depend on
    generation order.
    """
    config.validate()
    weights = config.resolved_weights()
    children = np.random.SeedSequence(config.seed).spawn(config.n_sessions)
    sessions = tuple(_generate_session(i, config, weights, children[i]) for i in range(config.n_sessions))
    return Dataset(sessions, config)


def true_band_power(windows: Windows, config: SynthConfig) -> np.ndarray:
    """Generator envelopes for each window block: [N, 64, n_bands, 10].

    Uses the session targets (not ``windows.targets``), so shuffled labels do
    not leak into this oracle feature.
    """
    weights = config.resolved_weights()
    block_ends = STRIDE * np.arange(1, N_STEPS + 1) - 1
    out = np.empty((len(windows), N_CHANNELS, weights.shape[1], N_STEPS))
    env_cache = {}
    for i in range(len(windows)):
        k = int(windows.session_index[i])
        if k not in env_cache:
            s = windows.sessions[k]
            env_cache[k] = band_envelopes(s.targets.astype(np.float64), weights, config.snr)
        out[i] = env_cache[k][:, :, step_index(windows.starts[i] + block_ends)]
    return out


# --- label perturbation ---------------------------------------------------

def perturb_targets(windows: Windows, fraction: float, seed) -> Windows:
    """Shuffle the targets among a random ``floor(fraction * N)`` subset of windows.

    The multiset of targets is preserved; windows outside the subset keep
    their targets.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"fraction must be in [0, 1], got {fraction}")
    n = len(windows)
    k = math.floor(fraction * n + 1e-9)
    if k == 0:
        return windows
    if n < 2:
        raise ValueError("need at least 2 windows to shuffle targets")
    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(n, size=k, replace=False))
    targets = windows.targets.copy()
    targets[chosen] = windows.targets[chosen[rng.permutation(k)]]
    return windows.with_targets(targets)


# --- persistence ----------------------------------------------------------

def _le32(a) -> np.ndarray:
    return np.ascontiguousarray(a, dtype="<f4")


def _session_blob(s: Session) -> bytes:
    return _HEADER.pack(MAGIC, FORMAT_VERSION) + _le32(s.raw).tobytes() + _le32(s.targets).tobytes()


def save_dataset(dataset: Dataset, path) -> Path:
    """Write ``manifest.json`` plus one ``session_XXXX.bin`` blob per session."""
    from ecogdec._io import atomic_write_bytes, atomic_write_text

    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    for s in dataset.sessions:
        name = f"session_{s.id:04d}.bin"
        blob = _session_blob(s)
        atomic_write_bytes(path / name, blob)
        entries.append({
            "id": s.id, "file": name, "n_channels": N_CHANNELS, "n_samples": s.n_samples,
            "n_targets": len(s.targets), "metadata": s.metadata,
            "sha256": hashlib.sha256(blob).hexdigest(),
        })
    manifest = {
        "magic": MAGIC.decode(), "version": FORMAT_VERSION,
        "n_sessions": len(dataset.sessions),
        "seed": dataset.config.seed if dataset.config else None,
        "synth_config": dataset.config.to_json() if dataset.config else None,
        "content_hash": dataset.content_hash(),
        "sessions": entries,
    }
    atomic_write_text(path / "manifest.json", json.dumps(manifest, indent=1))
    return path


def load_dataset(path) -> Dataset:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except FileNotFoundError:
        raise DatasetFormatError("manifest", f"no manifest.json in {path}") from None
    except json.JSONDecodeError as e:
        raise DatasetFormatError("manifest", f"invalid JSON: {e}") from None
    if manifest.get("magic") != MAGIC.decode():
        raise DatasetFormatError("magic", f"expected {MAGIC.decode()!r}, got {manifest.get('magic')!r}")
    if manifest.get("version") != FORMAT_VERSION:
        raise DatasetFormatError("version", f"unsupported version {manifest.get('version')}")
    entries = manifest.get("sessions", [])
    if manifest.get("n_sessions") != len(entries):
        raise DatasetShapeError("n_sessions", f"manifest lists {len(entries)} sessions, declares {manifest.get('n_sessions')}")
    sessions = []
    for e in entries:
        blob = (path / e["file"]).read_bytes()
        if len(blob) < _HEADER.size:
            raise DatasetFormatError("payload", f"{e['file']} truncated before header")
        magic, version = _HEADER.unpack_from(blob)
        if magic != MAGIC:
            raise DatasetFormatError("magic", f"{e['file']} has magic bytes {magic!r}")
        if version != FORMAT_VERSION:
            raise DatasetFormatError("version", f"{e['file']} has version {version}")
        n_ch, n_s, n_t = e["n_channels"], e["n_samples"], e["n_targets"]
        if n_ch != N_CHANNELS:
            raise DatasetShapeError("n_channels", f"expected {N_CHANNELS}, manifest declares {n_ch}")
        if n_t != n_target_steps(n_s):
            raise DatasetShapeError("n_targets", f"{n_t} targets do not cover {n_s} samples")
        payload = np.frombuffer(blob, dtype="<f4", offset=_HEADER.size)
        expected = n_ch * n_s + n_t * 3
        if payload.size != expected:
            raise DatasetShapeError(
                "n_channels",
                f"{e['file']} holds {payload.size} floats, manifest shape [{n_ch} x {n_s}] + [{n_t} x 3] needs {expected}",
            )
        raw = payload[: n_ch * n_s].reshape(n_ch, n_s).astype(np.float32)
        targets = payload[n_ch * n_s:].reshape(n_t, 3).astype(np.float32)
        sessions.append(Session(e["id"], raw, targets, e.get("metadata", {})))
    cfg = manifest.get("synth_config")
    return Dataset(tuple(sessions), SynthConfig.from_json(cfg) if cfg else None)
