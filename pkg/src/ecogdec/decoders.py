"""Regression heads and the end-to-end model wrapper.

Both heads consume batch-normalized features laid out ``[B, 64, 15, 10]``
(channel, band, time).  The MLP flattens them in that row-major order; the
CNN+LSTM+MT head regroups the 64 channels into two 8x4 implant maps with
:class:`~ecogdec.data.GridLayout`.
"""
from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np
import torch
from torch import nn

from ecogdec.data import N_CHANNELS, N_STEPS, GridLayout
from ecogdec.wavelets import DEFAULT_FREQUENCIES, FeatureExtractor, Filterbank

FRONTENDS = {
    "hand-crafted": "fixed",
    "e2e-free": "free",
    "e2e-cfo": "cfo",
    "e2e-random": "random",
}
ARCHITECTURES = ("mlp", "cnn-lstm-mt")
N_BANDS = len(DEFAULT_FREQUENCIES)


class ShapeMismatchError(ValueError):
    pass


def _check_features(x: torch.Tensor):
    if x.ndim != 4 or tuple(x.shape[1:]) != (N_CHANNELS, N_BANDS, N_STEPS):
        raise ShapeMismatchError(f"features must be [B, 64, 15, 10], got {tuple(x.shape)}")


def init_head(module: nn.Module, generator: torch.Generator) -> None:
    """Uniform +-1/sqrt(fan_in) weights, zero biases."""
    for name, p in module.named_parameters():
        if "bn" in name.split(".")[0]:
            continue
        if name.endswith("bias") or "bias_" in name:
            nn.init.zeros_(p)
            continue
        fan_in = p.shape[1] if p.ndim == 2 else int(np.prod(p.shape[1:]))
        bound = 1 / math.sqrt(fan_in)
        with torch.no_grad():
            p.copy_((torch.rand(p.shape, generator=generator, dtype=torch.float64) * 2 - 1).to(p.dtype) * bound)


class MlpDecoder(nn.Module):
    def __init__(self, dropout=0.5, hidden=50):
        super().__init__()
        self.fc1 = nn.Linear(N_CHANNELS * N_BANDS * N_STEPS, hidden)
        self.bn = nn.BatchNorm1d(hidden)
        self.drop1 = nn.Dropout(dropout)
        self.fc2 = nn.Linear(hidden, hidden)
        self.drop2 = nn.Dropout(dropout)
        self.fc3 = nn.Linear(hidden, 3)

    multi_target = False

    def forward(self, x):
        _check_features(x)
        h = self.drop1(torch.relu(self.bn(self.fc1(x.flatten(1)))))
        h = self.drop2(torch.relu(self.fc2(h)))
        return self.fc3(h)


class CnnLstmMtDecoder(nn.Module):
    """Spatial 3x3 convolutions shared by both implants, then two LSTMs.

    Shape chain per implant: [15, 8, 4, 10] -> [32, 6, 4, 10] -> [64, 4, 2, 10];
    both implants are concatenated per timestep into 1024-vectors, and the
    second LSTM's 3-dim hidden state is the per-timestep prediction.
    """

    multi_target = True

    def __init__(self, dropout=0.5, layout=GridLayout()):
        super().__init__()
        self.layout = layout
        self.conv1 = nn.Conv3d(N_BANDS, 32, (3, 3, 1), padding=(0, 1, 0))
        self.bn = nn.BatchNorm3d(32)
        self.drop1 = nn.Dropout(dropout)
        self.conv2 = nn.Conv3d(32, 64, (3, 3, 1))
        self.drop2 = nn.Dropout(dropout)
        self.lstm1 = nn.LSTM(1024, 50, batch_first=True)
        self.lstm2 = nn.LSTM(50, 3, batch_first=True)

    def implant_maps(self, x):
        """[B, 64, 15, 10] -> [B * 2, 15, 8, 4, 10] (implant-major within each sample)."""
        grid = self.layout.to_grid(x, axis=1)  # B, 2, 8, 4, 15, 10
        b = x.shape[0]
        return grid.permute(0, 1, 4, 2, 3, 5).reshape(b * self.layout.n_implants, N_BANDS,
                                                      self.layout.rows, self.layout.cols, N_STEPS)

    def spatial(self, x):
        h = self.drop1(self.bn(torch.relu(self.conv1(self.implant_maps(x)))))
        return self.drop2(torch.relu(self.conv2(h)))

    def forward(self, x):
        _check_features(x)
        b = x.shape[0]
        h = self.spatial(x)  # B*2, 64, 4, 2, 10
        h = h.reshape(b, self.layout.n_implants, *h.shape[1:])
        seq = h.permute(0, 5, 1, 2, 3, 4).reshape(b, N_STEPS, -1)
        out, _ = self.lstm1(seq)
        out, _ = self.lstm2(out)
        return out


def window_prediction(predictions):
    """Single 3-vector per window from a ``[..., 10, 3]`` multi-target output (last step)."""
    return predictions[..., -1, :]


class EndToEndModel(nn.Module):
    def __init__(self, architecture="mlp", frontend="hand-crafted", seed=0, dropout=0.5,
                 extractor_dropout=0.5, squeeze=False, frequencies=DEFAULT_FREQUENCIES,
                 dtype=torch.float32):
        super().__init__()
        if architecture not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {architecture!r}; expected one of {ARCHITECTURES}")
        if frontend not in FRONTENDS:
            raise ValueError(f"unknown frontend {frontend!r}; expected one of {tuple(FRONTENDS)}")
        self.architecture = architecture
        self.frontend_mode = frontend
        self.seed = seed
        self.hparams = dict(architecture=architecture, frontend=frontend, seed=seed, dropout=dropout,
                            extractor_dropout=extractor_dropout, squeeze=squeeze,
                            frequencies=[float(f) for f in frequencies], dtype=str(dtype).replace("torch.", ""))
        fb = Filterbank(FRONTENDS[frontend], frequencies=frequencies, seed=seed, squeeze=squeeze, dtype=dtype)
        self.extractor = FeatureExtractor(fb, dropout=extractor_dropout)
        head_cls = MlpDecoder if architecture == "mlp" else CnnLstmMtDecoder
        self.head = head_cls(dropout=dropout).to(dtype)
        gen = torch.Generator().manual_seed(int(seed) + 1)
        init_head(self.head, gen)

    @property
    def filterbank(self) -> Filterbank:
        return self.extractor.filterbank

    @property
    def multi_target(self) -> bool:
        return self.head.multi_target

    @property
    def dtype(self):
        return self.filterbank.init_frequencies.dtype

    def forward_pooled(self, pooled):
        return self.head(self.extractor.normalize(pooled))

    def forward(self, x):
        return self.forward_pooled(self.extractor.pooled(x))

    def predict(self, x, pooled=False):
        """Evaluation-mode window predictions ``[B, 3]``."""
        was = self.training
        self.eval()
        try:
            with torch.no_grad():
                out = self.forward_pooled(x) if pooled else self(x)
        finally:
            self.train(was)
        return window_prediction(out) if self.multi_target else out


def build_model(architecture="mlp", frontend="hand-crafted", seed=0, **kwargs) -> EndToEndModel:
    return EndToEndModel(architecture, frontend, seed=seed, **kwargs)


def count_parameters(model: EndToEndModel) -> list[tuple[str, int]]:
    """Trainable parameter count per named layer, in forward order."""
    def n(module):
        return sum(p.numel() for p in module.parameters())

    rows = [
        ("conv_time", model.filterbank.trainable_count()),
        ("extractor_bn", n(model.extractor.bn)),
    ]
    head = model.head
    if isinstance(head, MlpDecoder):
        rows += [("fc1", n(head.fc1)), ("bn", n(head.bn)), ("fc2", n(head.fc2)), ("fc3", n(head.fc3))]
    else:
        rows += [("conv1", n(head.conv1)), ("bn", n(head.bn)), ("conv2", n(head.conv2)),
                 ("lstm1", n(head.lstm1)), ("lstm2", n(head.lstm2))]
    return rows


# --- checkpoints ------------------------------------------------------------

CHECKPOINT_FORMAT = 1


def save_checkpoint(model: EndToEndModel, path, epoch=None, extra=None) -> Path:
    """Write ``<path>.json`` (manifest) and ``<path>.bin`` (little-endian floats).

    Every tensor of the state dict, including buffers such as batch-norm
    running statistics and cached cfo kernels, is stored in manifest order.
    Float32 models use ``<f4``; float64 models keep full precision with ``<f8``.
    """
    from ecogdec._io import atomic_write_bytes, atomic_write_text

    path = Path(path)
    state = model.state_dict()
    code = "<f8" if model.dtype == torch.float64 else "<f4"
    layers, chunks, offset = [], [], 0
    for name, t in state.items():
        arr = np.ascontiguousarray(t.detach().cpu().double().numpy(), dtype=code)
        if t.dtype == torch.int64:  # batch-norm num_batches_tracked
            arr = np.ascontiguousarray(t.cpu().numpy(), dtype=code)
        layers.append({"name": name, "shape": list(t.shape), "offset": offset, "count": int(arr.size),
                       "integer": t.dtype == torch.int64})
        chunks.append(arr.tobytes())
        offset += int(arr.size)
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "architecture": model.architecture,
        "frontend_mode": model.frontend_mode,
        "hparams": model.hparams,
        "seed": model.seed,
        "epoch": epoch,
        "dtype": code,
        "layers": layers,
        "clamp_events": model.filterbank.clamp_events,
    }
    if extra:
        manifest.update(extra)
    atomic_write_bytes(path.with_suffix(".bin"), b"".join(chunks))
    atomic_write_text(path.with_suffix(".json"), json.dumps(manifest, indent=1))
    return path


def load_checkpoint(path) -> tuple[EndToEndModel, dict]:
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    hp = dict(manifest["hparams"])
    dtype = getattr(torch, hp.pop("dtype"))
    model = EndToEndModel(**hp, dtype=dtype)
    blob = np.frombuffer(path.with_suffix(".bin").read_bytes(), dtype=manifest["dtype"])
    state = model.state_dict()
    for layer in manifest["layers"]:
        name = layer["name"]
        if name not in state:
            raise ShapeMismatchError(f"checkpoint layer {name} not in model")
        if list(state[name].shape) != layer["shape"] or int(np.prod(layer["shape"])) != layer["count"]:
            raise ShapeMismatchError(f"{name}: checkpoint shape {layer['shape']} vs model {list(state[name].shape)}")
        arr = blob[layer["offset"]:layer["offset"] + layer["count"]]
        if arr.size != layer["count"]:
            raise ShapeMismatchError(f"{name}: checkpoint payload truncated")
        arr = arr.reshape(layer["shape"])
        state[name] = torch.as_tensor(np.array(arr), dtype=state[name].dtype)
    model.load_state_dict(state)
    model.filterbank.clamp_events = list(manifest.get("clamp_events", []))
    return model, manifest
