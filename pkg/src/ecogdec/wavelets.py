"""Complex Morlet filterbank as a temporal convolution layer.

The filterbank holds 15 wavelets (30 real-valued kernels: real parts first,
then imaginary parts) of 118 taps.  Depending on ``mode`` the kernels are a
fixed buffer, free trainable weights, uniformly random trainable weights, or
are regenerated from 15 trainable central frequencies (``"cfo"``).

Convolution orientation is cross-correlation::

    out[k] = sum_n kernel[n] * x[k + n - 59]

so output sample ``k`` lines up with the centre tap (index 59) at input
sample ``k``.  Inputs are zero-padded with 59 samples on the left and 58 on
the right, which keeps the 590-sample length.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn
from torch.utils.checkpoint import checkpoint

from ecogdec.data import FS, N_CHANNELS, STRIDE, WINDOW_SAMPLES

logger = logging.getLogger(__name__)

SUPPORT = 118
CENTER_TAP = SUPPORT // 2
PAD_LEFT = CENTER_TAP
PAD_RIGHT = SUPPORT - 1 - CENTER_TAP
DEFAULT_FREQUENCIES = tuple(float(f) for f in range(10, 151, 10))
MODES = ("fixed", "free", "random", "cfo")
SQUEEZE_RANGE = (10.0, 150.0)


@dataclass(frozen=True)
class MorletParams:
    f: float
    f_s: float = FS
    support: int = SUPPORT

    def __post_init__(self):
        if not 0 < self.f < self.f_s / 2:
            raise ValueError(f"central frequency {self.f} outside (0, {self.f_s / 2})")
        if self.support <= 0 or self.support % 2:
            raise ValueError("support must be a positive even tap count")


def morlet_coefficients(params: MorletParams) -> np.ndarray:
    """Sampled complex Morlet wavelet, maximal at tap ``support // 2``.

    ``psi(t, f) = pi**-0.5 * (f_s / f)**-0.5 * exp(-(t f)**2) * exp(2 i pi t f)``
    with ``t_n = (n - support // 2) / f_s``.
    """
    n = np.arange(params.support)
    t = (n - params.support // 2) / params.f_s
    tf = t * params.f
    amp = np.sqrt(params.f / params.f_s) / np.sqrt(np.pi) * np.exp(-tf ** 2)
    return amp * np.cos(2 * np.pi * tf) + 1j * amp * np.sin(2 * np.pi * tf)


def morlet_kernels(frequencies: torch.Tensor, fs: float = FS, support: int = SUPPORT) -> torch.Tensor:
    """Differentiable counterpart of :func:`morlet_coefficients`.

    Returns ``[2 * K, support]``: the K real parts followed by the K imaginary
    parts.  Gradients flow into ``frequencies`` through the amplitude, the
    envelope and the carrier.
    """
    n = torch.arange(support, dtype=frequencies.dtype, device=frequencies.device)
    t = (n - support // 2) / fs
    tf = frequencies[:, None] * t[None, :]
    amp = torch.sqrt(frequencies / fs)[:, None] / math.sqrt(math.pi) * torch.exp(-tf ** 2)
    return torch.cat([amp * torch.cos(2 * math.pi * tf), amp * torch.sin(2 * math.pi * tf)])


def flush_subnormal(w: torch.Tensor) -> torch.Tensor:
    """Zero the subnormal far tails of the Gaussian envelope.

    Subnormal operands make CPU convolution roughly 20x slower; the values
    involved are below 1e-38 so the response is unchanged in practice.
    """
    tiny = torch.finfo(w.dtype).tiny
    return torch.where(w.abs() < tiny, torch.zeros((), dtype=w.dtype), w)


class Filterbank(nn.Module):
    def __init__(self, mode="fixed", fs=FS, frequencies=DEFAULT_FREQUENCIES, seed=0,
                 squeeze=False, squeeze_range=SQUEEZE_RANGE, dtype=torch.float32):
        super().__init__()
        if mode not in MODES:
            raise ValueError(f"unknown filterbank mode {mode!r}; expected one of {MODES}")
        freqs = torch.tensor(frequencies, dtype=dtype)
        if torch.any(freqs <= 0) or torch.any(freqs >= fs / 2):
            raise ValueError(f"frequencies must lie in (0, {fs / 2})")
        self.mode = mode
        self.fs = float(fs)
        self.squeeze = bool(squeeze) and mode == "cfo"
        self.squeeze_range = tuple(float(v) for v in squeeze_range)
        self.n_wavelets = len(frequencies)
        self.clamp_events: list[dict] = []
        self.register_buffer("init_frequencies", freqs.clone())

        if mode == "cfo":
            if self.squeeze:
                lo, hi = self.squeeze_range
                self.freq_param = nn.Parameter((freqs - lo) / (hi - lo))
            else:
                self.freq_param = nn.Parameter(freqs.clone())
            with torch.no_grad():
                self.register_buffer("kernel_cache", self._morlet().clone())
            return

        if mode == "random":
            gen = torch.Generator().manual_seed(int(seed))
            bound = 1 / math.sqrt(SUPPORT)
            weight = (torch.rand(2 * self.n_wavelets, SUPPORT, generator=gen, dtype=torch.float64) * 2 - 1) * bound
            weight = weight.to(dtype)
        else:
            weight = self._morlet(freqs)
        bias = torch.zeros(2 * self.n_wavelets, dtype=dtype)
        if mode == "fixed":
            self.register_buffer("weight", weight)
            self.register_buffer("bias", bias)
        else:
            self.weight = nn.Parameter(weight)
            self.bias = nn.Parameter(bias)

    # -- parameters ----------------------------------------------------
    @property
    def frequencies(self) -> torch.Tensor:
        """Current central frequencies in Hz (initial ones outside cfo mode)."""
        if self.mode != "cfo":
            return self.init_frequencies
        if self.squeeze:
            lo, hi = self.squeeze_range
            return lo + (hi - lo) * self.freq_param
        return self.freq_param

    def _morlet(self, freqs=None) -> torch.Tensor:
        # evaluated in float64 for every mode, so that an untouched cfo bank
        # is bit-identical to the fixed one at any working precision
        freqs = self.frequencies if freqs is None else freqs
        return morlet_kernels(freqs.double(), self.fs).to(freqs.dtype)

    def kernels(self) -> torch.Tensor:
        if self.mode == "cfo":
            return self._morlet()
        return self.weight

    def kernel_bias(self):
        return None if self.mode == "cfo" else self.bias

    @property
    def frozen(self) -> bool:
        params = list(self.parameters())
        return not params or not any(p.requires_grad for p in params)

    def set_frozen(self, frozen: bool) -> None:
        for p in self.parameters():
            p.requires_grad_(not frozen)

    def trainable_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    @torch.no_grad()
    def regenerate_cfo(self) -> torch.Tensor:
        """Clamp drifted frequencies and refresh the cached kernels.

        Frequencies outside ``(0, fs/2)`` are clamped to ``[1, fs/2 - 1]`` and
        the event is appended to ``clamp_events``.
        """
        if self.mode != "cfo":
            raise ValueError("regenerate_cfo requires a cfo filterbank")
        f = self.frequencies
        bad = (f <= 0) | (f >= self.fs / 2)
        if bool(bad.any()):
            clamped = f.clamp(1.0, self.fs / 2 - 1)
            self.clamp_events.append({
                "indices": torch.nonzero(bad).flatten().tolist(),
                "before": f[bad].tolist(), "after": clamped[bad].tolist(),
            })
            logger.warning("clamped cfo frequencies %s", self.clamp_events[-1])
            if self.squeeze:
                lo, hi = self.squeeze_range
                self.freq_param.copy_((clamped - lo) / (hi - lo))
            else:
                self.freq_param.copy_(clamped)
        self.kernel_cache.copy_(self._morlet())
        return self.kernel_cache

    def stored_kernels(self) -> torch.Tensor:
        """Kernels as they would be written to a checkpoint (no graph)."""
        if self.mode == "cfo":
            return self.kernel_cache
        return self.weight.detach()

    # -- forward -------------------------------------------------------
    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """``[B, 64, 590]`` -> real/imag responses ``[B, 64, 30, 590]``."""
        b, c, n = x.shape
        xp = F.pad(x.reshape(b * c, 1, n), (PAD_LEFT, PAD_RIGHT))
        out = F.conv1d(xp, flush_subnormal(self.kernels())[:, None, :], self.kernel_bias())
        return out.reshape(b, c, -1, n)


def build_filterbank(mode: str, f_s: float = FS, seed: int = 0, **kwargs) -> Filterbank:
    return Filterbank(mode, fs=f_s, seed=seed, **kwargs)


def _window_tensor(window, dtype) -> torch.Tensor:
    samples = getattr(window, "samples", window)
    x = torch.as_tensor(np.asarray(samples), dtype=dtype)
    return x[None] if x.ndim == 2 else x


@torch.no_grad()
def cwt_convolve(filterbank: Filterbank, window) -> np.ndarray:
    """Complex CWT response ``[64, 15, 590]`` (``[B, 64, 15, 590]`` for a batch)."""
    dtype = filterbank.init_frequencies.dtype
    x = _window_tensor(window, dtype)
    out = filterbank(x).double().numpy()
    k = filterbank.n_wavelets
    z = out[:, :, :k] + 1j * out[:, :, k:]
    return z[0] if np.ndim(getattr(window, "samples", window)) == 2 else z


def cwt_direct_oracle(filterbank: Filterbank, window) -> np.ndarray:
    """Reference CWT by explicit shifted sums in float64.

    Loops over wavelets and taps; shares nothing with :func:`cwt_convolve`
    beyond reading the kernels.
    """
    samples = np.asarray(getattr(window, "samples", window), dtype=np.float64)
    single = samples.ndim == 2
    if single:
        samples = samples[None]
    kernels = filterbank.stored_kernels().detach().double().numpy()
    bias = filterbank.kernel_bias()
    bias = np.zeros(len(kernels)) if bias is None else bias.detach().double().numpy()
    k = filterbank.n_wavelets
    b, c, n = samples.shape
    m = kernels.shape[1]
    center = m // 2
    padded = np.zeros((b, c, n + m - 1))
    padded[:, :, center:center + n] = samples
    out = np.empty((b, c, 2 * k, n))
    for j in range(2 * k):
        acc = np.full((b, c, n), bias[j])
        for tap in range(m):
            acc += kernels[j, tap] * padded[:, :, tap:tap + n]
        out[:, :, j] = acc
    z = out[:, :, :k] + 1j * out[:, :, k:]
    return z[0] if single else z


class FeatureExtractor(nn.Module):
    """conv time -> modulus -> dropout -> 0.1 s average pool -> batch norm.

    ``pooled`` returns the non-negative ``[B, 64, 15, 10]`` tensor before
    normalization; ``normalize`` applies a 15-band batch norm whose statistics
    run over batch, channels and time.
    """

    def __init__(self, filterbank: Filterbank, dropout: float = 0.5, chunk: int = 25):
        super().__init__()
        self.filterbank = filterbank
        self.dropout = nn.Dropout(dropout)
        self.bn = nn.BatchNorm1d(filterbank.n_wavelets, eps=1e-5, momentum=0.1,
                                 dtype=filterbank.init_frequencies.dtype)
        self.chunk = chunk

    def _pooled_chunk(self, x):
        out = self.filterbank(x)
        k = self.filterbank.n_wavelets
        modulus = torch.complex(out[:, :, :k], out[:, :, k:]).abs()
        modulus = self.dropout(modulus)
        b, c, _, n = modulus.shape
        return modulus.reshape(b, c, k, n // STRIDE, STRIDE).mean(-1)

    def pooled(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1:] != (N_CHANNELS, WINDOW_SAMPLES):
            raise ValueError(f"expected [B, 64, 590] windows, got {tuple(x.shape)}")
        needs_graph = torch.is_grad_enabled() and any(p.requires_grad for p in self.filterbank.parameters())
        parts = []
        for i in range(0, x.shape[0], self.chunk):
            xc = x[i:i + self.chunk]
            if needs_graph:
                parts.append(checkpoint(self._pooled_chunk, xc, use_reentrant=False))
            else:
                with torch.no_grad():
                    parts.append(self._pooled_chunk(xc))
        return torch.cat(parts)

    def normalize(self, pooled: torch.Tensor) -> torch.Tensor:
        b, c, k, t = pooled.shape
        z = self.bn(pooled.reshape(b * c, k, t))
        return z.reshape(b, c, k, t)

    def forward(self, x):
        return self.normalize(self.pooled(x))


def extract_features(extractor: FeatureExtractor, window, normalize: bool = True) -> np.ndarray:
    """Evaluation-mode features ``[64, 15, 10]`` for one window (or a batch)."""
    was_training = extractor.training
    extractor.eval()
    try:
        with torch.no_grad():
            x = _window_tensor(window, extractor.filterbank.init_frequencies.dtype)
            z = extractor(x) if normalize else extractor.pooled(x)
    finally:
        extractor.train(was_training)
    z = z.numpy()
    return z[0] if np.ndim(getattr(window, "samples", window)) == 2 else z


def regenerate_cfo(filterbank: Filterbank) -> torch.Tensor:
    return filterbank.regenerate_cfo()


class UndefinedPeakError(ValueError):
    pass


def power_spectrum(kernel, fs: float = FS, n_fft: int | None = None):
    """Magnitude spectrum of a real kernel and the frequency of its peak (Hz)."""
    kernel = np.asarray(kernel, dtype=np.float64)
    if not np.any(kernel):
        raise UndefinedPeakError("all-zero kernel has no spectral peak")
    n = n_fft or max(1024, 1 << (len(kernel) - 1).bit_length())
    spectrum = np.abs(np.fft.rfft(kernel, n=n))
    freqs = np.fft.rfftfreq(n, d=1 / fs)
    return spectrum, float(freqs[int(np.argmax(spectrum))])


def export_filters(filterbank: Filterbank, out_dir, stem="filters", peaks_before=None) -> dict:
    """Write ``<stem>.csv`` (filter_index, part, tap_index, value) and a JSON summary."""
    from ecogdec._io import atomic_write_text

    out_dir = Path(out_dir)
    kernels = filterbank.stored_kernels().double().numpy()
    k = filterbank.n_wavelets
    lines = ["filter_index,part,tap_index,value"]
    for j, kern in enumerate(kernels):
        part = "re" if j < k else "im"
        lines.extend(f"{j % k},{part},{tap},{v:.9g}" for tap, v in enumerate(kern))
    atomic_write_text(out_dir / f"{stem}.csv", "\n".join(lines) + "\n")
    summary = {
        "mode": filterbank.mode,
        "frequencies": filterbank.frequencies.detach().double().tolist(),
        "peak_frequencies": [power_spectrum(kern, filterbank.fs)[1] for kern in kernels],
    }
    if peaks_before is not None:
        summary["peak_frequencies_before"] = list(peaks_before)
    atomic_write_text(out_dir / f"{stem}.json", json.dumps(summary, indent=1))
    return summary
