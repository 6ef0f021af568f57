"""Holdout, dataset-size and label-noise protocols, plus filter drift analysis."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from ecogdec._io import atomic_write_text
from ecogdec.data import Dataset, SynthConfig, Windows, perturb_targets, true_band_power, window_sessions
from ecogdec.decoders import EndToEndModel, build_model
from ecogdec.training import PooledCache, TrainConfig, TrainingCurve, evaluate, train
from ecogdec.wavelets import power_spectrum

logger = logging.getLogger(__name__)

DEFAULT_SIZES = (1,) + tuple(range(2, 23, 2))
DEFAULT_FRACTIONS = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)


class ProtocolError(ValueError):
    pass


@dataclass
class ExperimentSpec:
    model: str = "mlp"
    frontend: str = "hand-crafted"
    n_runs: int = 5
    seeds: list | None = None
    calibration_sessions: int = 6
    sizes: list = field(default_factory=lambda: list(DEFAULT_SIZES))
    fractions: list = field(default_factory=lambda: list(DEFAULT_FRACTIONS))
    dataset: str | None = None
    squeeze: bool = False
    frequencies: list | None = None

    def run_seeds(self) -> list[int]:
        seeds = list(self.seeds) if self.seeds is not None else list(range(self.n_runs))
        if len(seeds) < 1 or len(set(seeds)) != len(seeds):
            raise ProtocolError("seeds must be non-empty and distinct")
        return seeds


@dataclass
class ExperimentResult:
    protocol: str
    model: str
    frontend: str
    setting: float | None
    seeds: list
    per_run_cs: list
    test_hash: str
    train_hash: str = ""
    curves: list = field(default_factory=list)
    drift: list = field(default_factory=list)

    @property
    def mean(self) -> float:
        return float(np.mean(self.per_run_cs))

    @property
    def std(self) -> float:
        return float(np.std(self.per_run_cs))

    def to_json(self) -> dict:
        d = asdict(self)
        d["curves"] = [c.rows if isinstance(c, TrainingCurve) else c for c in self.curves]
        d["mean"], d["std"] = self.mean, self.std
        return d


def _session_windows(dataset: Dataset, positions) -> Windows:
    return window_sessions(dataset.select(list(positions)))


def _model_kwargs(spec: ExperimentSpec) -> dict:
    kw = {"squeeze": spec.squeeze}
    if spec.frequencies is not None:
        kw["frequencies"] = tuple(spec.frequencies)
    return kw


def train_and_test(spec: ExperimentSpec, seed: int, train_w: Windows, test_w: Windows, train_config: TrainConfig,
                   cache: PooledCache | None = None, dtype=torch.float32):
    """One run: fresh model with ``seed``, train on ``train_w``, mean CS on ``test_w``."""
    model = build_model(spec.model, spec.frontend, seed=seed, dtype=dtype, **_model_kwargs(spec))
    before = build_model(spec.model, spec.frontend, seed=seed, dtype=dtype, **_model_kwargs(spec))
    cfg = replace(train_config, seed=seed)
    model, curve = train(model, train_w, cfg, cache=cache)
    cs = evaluate(model, test_w, cache)["cs"]
    return cs, curve, model, before


def holdout_partitions(dataset: Dataset, calibration_sessions: int):
    if len(dataset) <= calibration_sessions:
        raise ProtocolError(f"holdout needs more than {calibration_sessions} sessions, dataset has {len(dataset)}")
    train_w = _session_windows(dataset, range(calibration_sessions))
    test_w = _session_windows(dataset, range(calibration_sessions, len(dataset)))
    return train_w, test_w


def size_partitions(dataset: Dataset, sizes, size: int):
    sizes = sorted(int(s) for s in sizes)
    if not sizes or sizes[0] < 1:
        raise ProtocolError("sizes must be positive")
    if len(dataset) < sizes[-1] + 1:
        raise ProtocolError(f"size sweep up to {sizes[-1]} needs at least {sizes[-1] + 1} sessions, "
                            f"dataset has {len(dataset)}")
    test_w = _session_windows(dataset, range(sizes[-1], len(dataset)))
    return _session_windows(dataset, range(size)), test_w


def noise_seed(seed: int, fraction: float) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), int(round(fraction * 1_000_000))])


def run_cell(dataset: Dataset, spec: ExperimentSpec, protocol: str, setting=None,
             train_config: TrainConfig = TrainConfig(), cache: PooledCache | None = None,
             dtype=torch.float32) -> ExperimentResult:
    """All seeds of one (protocol, model, frontend, setting) cell.

    ``holdout`` ignores ``setting``; ``size`` trains on the first ``setting``
    sessions; ``noise`` shuffles a ``setting`` fraction of the training
    targets with a seed derived from the run seed.
    """
    cache = cache if cache is not None else PooledCache()
    if protocol == "holdout":
        train_w, test_w = holdout_partitions(dataset, spec.calibration_sessions)
    elif protocol == "size":
        train_w, test_w = size_partitions(dataset, spec.sizes, int(setting))
    elif protocol == "noise":
        if not 0 <= setting <= 1:
            raise ProtocolError(f"noise fraction {setting} outside [0, 1]")
        train_w, test_w = holdout_partitions(dataset, spec.calibration_sessions)
    else:
        raise ProtocolError(f"unknown protocol {protocol!r}")
    per_run, curves, drift, train_hashes = [], [], [], []
    for seed in spec.run_seeds():
        run_train = perturb_targets(train_w, setting, noise_seed(seed, setting)) if protocol == "noise" else train_w
        cs, curve, model, before = train_and_test(spec, seed, run_train, test_w, train_config, cache, dtype)
        per_run.append(cs)
        curves.append(curve)
        train_hashes.append(run_train.content_hash())
        if spec.frontend != "hand-crafted":
            drift.append(analyze_filter_drift(before, model).to_json())
        logger.info("%s %s/%s setting=%s seed=%d test cs %.4f", protocol, spec.model, spec.frontend,
                    setting, seed, cs)
    setting = None if setting is None else float(setting)
    return ExperimentResult(protocol, spec.model, spec.frontend, setting, spec.run_seeds(), per_run,
                            test_w.content_hash(), ";".join(sorted(set(train_hashes))), curves, drift)


def run_holdout(dataset: Dataset, spec: ExperimentSpec, train_config: TrainConfig = TrainConfig(),
                cache: PooledCache | None = None) -> ExperimentResult:
    """Train on the first ``calibration_sessions`` sessions, test on the rest."""
    return run_cell(dataset, spec, "holdout", None, train_config, cache)


def run_size_sweep(dataset: Dataset, spec: ExperimentSpec, train_config: TrainConfig = TrainConfig(),
                   cache: PooledCache | None = None) -> list[ExperimentResult]:
    """Train on the first ``s`` sessions for each size; test on the sessions after the largest size."""
    cache = cache if cache is not None else PooledCache()
    size_partitions(dataset, spec.sizes, 1)
    return [run_cell(dataset, spec, "size", s, train_config, cache) for s in sorted(spec.sizes)]


def run_noise_sweep(dataset: Dataset, spec: ExperimentSpec, train_config: TrainConfig = TrainConfig(),
                    cache: PooledCache | None = None) -> list[ExperimentResult]:
    """Shuffle a fraction of training targets, train, and test on the untouched test sessions."""
    for f in spec.fractions:
        if not 0 <= f <= 1:
            raise ProtocolError(f"noise fraction {f} outside [0, 1]")
    cache = cache if cache is not None else PooledCache()
    return [run_cell(dataset, spec, "noise", f, train_config, cache) for f in spec.fractions]


# --- paired comparisons -----------------------------------------------------

def moving_average(values, window: int = 3) -> np.ndarray:
    """Centred moving average; the edges average over the available neighbours."""
    v = np.asarray(values, dtype=np.float64)
    half = window // 2
    return np.array([v[max(0, i - half):i + half + 1].mean() for i in range(len(v))])


def difference_curve(a: list[ExperimentResult], b: list[ExperimentResult], window: int = 3) -> dict:
    """Seed-matched ``a - b`` per sweep point, averaged over seeds, plus its moving average."""
    if [r.setting for r in a] != [r.setting for r in b]:
        raise ProtocolError("sweep settings differ")
    diffs = []
    for ra, rb in zip(a, b):
        common = [s for s in ra.seeds if s in rb.seeds]
        da = dict(zip(ra.seeds, ra.per_run_cs))
        db = dict(zip(rb.seeds, rb.per_run_cs))
        diffs.append([da[s] - db[s] for s in common])
    mean = np.array([np.mean(d) for d in diffs])
    return {"settings": [r.setting for r in a], "per_seed": diffs, "mean": mean.tolist(),
            "moving_average": moving_average(mean, window).tolist()}


# --- ridge oracle -----------------------------------------------------------

def ridge_oracle_cs(train_w: Windows, test_w: Windows, config: SynthConfig, lam: float = 1.0) -> float:
    """Mean test CS of a ridge regression on the generator's own band envelopes.

    Upper reference for what a decoder can extract from the planted signal.
    """
    a = true_band_power(train_w, config).reshape(len(train_w), -1)
    b = true_band_power(test_w, config).reshape(len(test_w), -1)
    mu = a.mean(0)
    a, b = a - mu, b - mu
    w = np.linalg.solve(a.T @ a + lam * np.eye(a.shape[1]), a.T @ train_w.labels.astype(np.float64))
    pred = b @ w
    y = test_w.labels.astype(np.float64)
    return float(np.mean(np.sum(pred * y, 1) / (np.linalg.norm(pred, axis=1) * np.linalg.norm(y, axis=1))))


# --- filter drift -----------------------------------------------------------

@dataclass
class FilterDriftReport:
    mode: str
    rows: list
    kernels_before: np.ndarray
    kernels_after: np.ndarray
    spectra_before: np.ndarray
    spectra_after: np.ndarray
    spectrum_freqs: np.ndarray

    @property
    def delta_f(self) -> np.ndarray:
        return np.array([r["delta_f"] for r in self.rows])

    def to_json(self) -> dict:
        return {"mode": self.mode, "rows": self.rows}

    def write(self, out_dir) -> list[Path]:
        """Plot-ready CSVs: Δf/peak table, kernels and spectra (before/after)."""
        out_dir = Path(out_dir)
        written = []
        keys = list(self.rows[0])
        lines = [",".join(keys)] + [",".join(_fmt(r[k]) for k in keys) for r in self.rows]
        path = out_dir / ("delta_f.csv" if self.mode == "cfo" else "peaks.csv")
        atomic_write_text(path, "\n".join(lines) + "\n")
        written.append(path)
        k = len(self.kernels_before) // 2
        lines = ["kernel_index,filter_index,part,tap_index,before,after"]
        for j in range(len(self.kernels_before)):
            part = "re" if j < k else "im"
            for t, (u, v) in enumerate(zip(self.kernels_before[j], self.kernels_after[j])):
                lines.append(f"{j},{j % k},{part},{t},{u:.9g},{v:.9g}")
        atomic_write_text(out_dir / "kernels.csv", "\n".join(lines) + "\n")
        lines = ["kernel_index,frequency_hz,before,after"]
        for j in range(len(self.spectra_before)):
            for f, u, v in zip(self.spectrum_freqs, self.spectra_before[j], self.spectra_after[j]):
                lines.append(f"{j},{f:.6g},{u:.9g},{v:.9g}")
        atomic_write_text(out_dir / "spectra.csv", "\n".join(lines) + "\n")
        written += [out_dir / "kernels.csv", out_dir / "spectra.csv"]
        atomic_write_text(out_dir / "drift.json", json.dumps(self.to_json(), indent=1))
        return written + [out_dir / "drift.json"]


def _fmt(v):
    return f"{v:.9g}" if isinstance(v, float) else str(v)


def analyze_filter_drift(before: EndToEndModel, after: EndToEndModel) -> FilterDriftReport:
    """Central-frequency shifts (cfo) or spectral-peak shifts of every kernel."""
    fb0, fb1 = before.filterbank, after.filterbank
    if fb0.mode != fb1.mode:
        raise ProtocolError(f"filterbank mode mismatch: {fb0.mode} vs {fb1.mode}")
    k0 = fb0.stored_kernels().double().numpy()
    k1 = fb1.stored_kernels().double().numpy()
    spectra0, peaks0 = zip(*(power_spectrum(k, fb0.fs) for k in k0))
    spectra1, peaks1 = zip(*(power_spectrum(k, fb1.fs) for k in k1))
    n_fft = 2 * (len(spectra0[0]) - 1)
    freqs = np.fft.rfftfreq(n_fft, d=1 / fb0.fs)
    if fb0.mode == "cfo":
        f0 = fb0.frequencies.detach().double().numpy()
        f1 = fb1.frequencies.detach().double().numpy()
        rows = [{"wavelet": i, "f_init": float(a), "f_final": float(b), "delta_f": float(b - a)}
                for i, (a, b) in enumerate(zip(f0, f1))]
    else:
        nw = fb0.n_wavelets
        rows = [{"kernel": j, "part": "re" if j < nw else "im", "peak_init": float(a), "peak_final": float(b),
                 "delta_f": float(b - a)} for j, (a, b) in enumerate(zip(peaks0, peaks1))]
    return FilterDriftReport(fb0.mode, rows, k0, k1, np.array(spectra0), np.array(spectra1), freqs)


# --- results layout ---------------------------------------------------------

SUMMARY_COLUMNS = ("protocol", "model", "frontend_mode", "size_or_fraction", "seed", "test_cs")


def cell_name(result_or_protocol, model=None, frontend=None, setting=None) -> str:
    if isinstance(result_or_protocol, ExperimentResult):
        r = result_or_protocol
        protocol, model, frontend, setting = r.protocol, r.model, r.frontend, r.setting
    else:
        protocol = result_or_protocol
    s = "all" if setting is None else f"{setting:g}"
    return f"{protocol}__{model}__{frontend}__{s}"


def write_cell(out_dir, result: ExperimentResult, manifest: dict) -> Path:
    out_dir = Path(out_dir) / cell_name(result)
    for seed, curve in zip(result.seeds, result.curves):
        if isinstance(curve, TrainingCurve):
            atomic_write_text(out_dir / f"curve_seed{seed}.csv", curve.to_csv())
    body = dict(manifest, result=result.to_json(), completed=time.strftime("%Y-%m-%dT%H:%M:%S"))
    atomic_write_text(out_dir / "cell.json", json.dumps(body, indent=1))
    return out_dir


def read_cell(path) -> ExperimentResult | None:
    path = Path(path) / "cell.json"
    if not path.exists():
        return None
    d = json.loads(path.read_text())["result"]
    return ExperimentResult(d["protocol"], d["model"], d["frontend"], d["setting"], d["seeds"], d["per_run_cs"],
                            d["test_hash"], d.get("train_hash", ""), d.get("curves", []), d.get("drift", []))


def summary_rows(results) -> list[tuple]:
    rows = []
    for r in results:
        for seed, cs in zip(r.seeds, r.per_run_cs):
            rows.append((r.protocol, r.model, r.frontend, "" if r.setting is None else f"{r.setting:g}", seed, f"{cs:.9g}"))
    return rows


def write_summary(out_dir, results) -> Path:
    lines = [",".join(SUMMARY_COLUMNS)] + [",".join(map(str, row)) for row in summary_rows(results)]
    path = Path(out_dir) / "summary.csv"
    atomic_write_text(path, "\n".join(lines) + "\n")
    return path
