"""Cosine objective, Adam with decoupled weight decay, and the training loop.

The loop trains on shuffled mini-batches, keeps the temporal filters frozen
for the first ``pretrain_freeze_epochs`` epochs of an end-to-end run, and stops
after ``patience`` epochs without a lower validation loss, restoring the best
snapshot.
"""
from __future__ import annotations

import copy
import csv
import io
import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from ecogdec.data import Windows
from ecogdec.decoders import EndToEndModel, window_prediction

logger = logging.getLogger(__name__)


class ZeroNormError(ValueError):
    pass


class NonFiniteError(RuntimeError):
    pass


class EmptyDatasetError(ValueError):
    pass


# --- metrics ----------------------------------------------------------------

def cosine_similarity(y, y_hat) -> float:
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    ny, nh = np.linalg.norm(y), np.linalg.norm(y_hat)
    if ny == 0 or nh == 0:
        raise ZeroNormError("cosine similarity is undefined for zero-norm vectors")
    return float(np.clip(y @ y_hat / (ny * nh), -1.0, 1.0))


def batch_cosine_similarity(y: torch.Tensor, y_hat: torch.Tensor) -> torch.Tensor:
    """Row-wise CS over the last axis; raises on any zero-norm row."""
    ny = torch.linalg.vector_norm(y, dim=-1)
    nh = torch.linalg.vector_norm(y_hat, dim=-1)
    if bool((ny == 0).any()) or bool((nh == 0).any()):
        raise ZeroNormError("zero-norm target or prediction in batch")
    return ((y * y_hat).sum(-1) / (ny * nh)).clamp(-1.0, 1.0)


def cosine_loss(y: torch.Tensor, y_hat: torch.Tensor) -> torch.Tensor:
    """Mean of ``1 - CS`` over every leading axis (batch, and timesteps for MT)."""
    if y.numel() == 0:
        raise EmptyDatasetError("empty batch")
    return (1.0 - batch_cosine_similarity(y, y_hat)).mean()


# --- configuration ----------------------------------------------------------

@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    weight_decay: float = 0.01
    batch_size: int = 200
    max_epochs: int = 55
    patience: int = 20
    pretrain_freeze_epochs: int = 5
    e2e_epochs: int = 50
    valid_fraction: float = 0.1
    seed: int = 0
    cfo_squeeze: bool = False
    chronological_split: bool = False
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def validate(self):
        for name in ("learning_rate", "batch_size", "max_epochs", "patience"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.weight_decay < 0 or self.pretrain_freeze_epochs < 0:
            raise ValueError("weight_decay and pretrain_freeze_epochs must be >= 0")
        if not 0 < self.valid_fraction < 1:
            raise ValueError("valid_fraction must be in (0, 1)")


# --- optimizer --------------------------------------------------------------

@dataclass
class OptimizerState:
    steps: dict = field(default_factory=dict)
    exp_avg: dict = field(default_factory=dict)
    exp_avg_sq: dict = field(default_factory=dict)


def no_decay_names(model: nn.Module) -> set[str]:
    """Batch-norm parameters, every bias, and cfo frequencies."""
    names = set()
    for mod_name, mod in model.named_modules():
        for p_name, _ in mod.named_parameters(recurse=False):
            full = f"{mod_name}.{p_name}" if mod_name else p_name
            if isinstance(mod, nn.modules.batchnorm._BatchNorm) or "bias" in p_name or p_name == "freq_param":
                names.add(full)
    return names


@torch.no_grad()
def optimizer_step(params: dict, grads: dict, state: OptimizerState, config: TrainConfig,
                   no_decay: set = frozenset()) -> dict:
    """One Adam update with decoupled weight decay, in place on ``params``.

    Decay multiplies each decayed parameter by ``1 - lr * wd`` before the
    adaptive step.  Step counts and moments are kept per parameter, so a
    parameter group unfrozen late starts with its own bias correction.
    """
    lr, b1, b2 = config.learning_rate, config.beta1, config.beta2
    bad = [n for n, g in grads.items() if g is not None and not bool(torch.isfinite(g).all())]
    if bad:
        raise NonFiniteError(f"non-finite gradient in {bad}")
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if name not in state.exp_avg:
            state.exp_avg[name] = torch.zeros_like(p)
            state.exp_avg_sq[name] = torch.zeros_like(p)
            state.steps[name] = 0
        state.steps[name] += 1
        t = state.steps[name]
        m, v = state.exp_avg[name], state.exp_avg_sq[name]
        m.mul_(b1).add_(g, alpha=1 - b1)
        v.mul_(b2).addcmul_(g, g, value=1 - b2)
        if config.weight_decay and name not in no_decay:
            p.mul_(1 - lr * config.weight_decay)
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        p.sub_(lr * m_hat / (v_hat.sqrt() + config.eps))
    return params


class Adam:
    def __init__(self, model: nn.Module, config: TrainConfig):
        self.model = model
        self.config = config
        self.state = OptimizerState()
        self.no_decay = no_decay_names(model)

    def step(self):
        params = {n: p for n, p in self.model.named_parameters() if p.requires_grad}
        grads = {n: p.grad for n, p in params.items()}
        optimizer_step(params, grads, self.state, self.config, self.no_decay)

    def zero_grad(self):
        for p in self.model.parameters():
            p.grad = None


# --- early stopping ---------------------------------------------------------

class EarlyStopper:
    def __init__(self, patience: int):
        self.patience = patience
        self.best_valid_loss = math.inf
        self.best_epoch = None
        self.epochs_since_improvement = 0
        self.best_parameter_snapshot = None

    def update(self, epoch: int, valid_loss: float, model: nn.Module) -> bool:
        """Record an epoch; returns True when training should stop."""
        if valid_loss < self.best_valid_loss:
            self.best_valid_loss = valid_loss
            self.best_epoch = epoch
            self.epochs_since_improvement = 0
            self.best_parameter_snapshot = copy.deepcopy(model.state_dict())
        else:
            self.epochs_since_improvement += 1
        return self.epochs_since_improvement >= self.patience


# --- data plumbing ----------------------------------------------------------

def split_train_valid(windows: Windows, fraction: float = 0.1, seed=0, chronological=False):
    """Random window-level split (or the last ``fraction`` of windows when chronological).

    Overlapping windows make a random split leak neighbouring samples into
    validation; the chronological variant avoids that.
    """
    n = len(windows)
    if n < 10:
        raise EmptyDatasetError(f"need at least 10 windows to split, got {n}")
    n_valid = max(1, int(round(fraction * n)))
    if chronological:
        order = np.arange(n)
    else:
        order = np.random.default_rng(seed).permutation(n)
    return windows.subset(np.sort(order[:n - n_valid])), windows.subset(np.sort(order[n - n_valid:]))


class PooledCache:
    """Pooled (pre-normalization) wavelet features of fixed filterbanks, keyed by window.

    Hand-crafted features never change during training, so they are computed
    once per window and shared across runs and seeds.
    """

    def __init__(self, batch_size: int = 200):
        self.batch_size = batch_size
        self._store: dict = {}

    def __len__(self):
        return sum(len(v) for v in self._store.values())

    def get(self, model: EndToEndModel, windows: Windows) -> torch.Tensor:
        fb = model.filterbank
        if fb.mode != "fixed":
            raise ValueError("only fixed filterbanks can be cached")
        tag = (str(fb.init_frequencies.dtype), tuple(fb.init_frequencies.tolist()), fb.fs)
        store = self._store.setdefault(tag, {})
        keys = windows.keys()
        missing = [i for i, k in enumerate(keys) if k not in store]
        if missing:
            ex = model.extractor
            was = ex.training
            ex.eval()
            with torch.no_grad():
                for i in range(0, len(missing), self.batch_size):
                    idx = missing[i:i + self.batch_size]
                    x = torch.from_numpy(windows.signals(idx)).to(fb.init_frequencies.dtype)
                    pooled = ex.pooled(x)
                    for j, row in zip(idx, pooled):
                        store[keys[j]] = row.clone()
            ex.train(was)
        if not keys:
            return torch.zeros((0, 64, fb.n_wavelets, 10), dtype=fb.init_frequencies.dtype)
        return torch.stack([store[k] for k in keys])


def _model_inputs(model: EndToEndModel, windows: Windows, cache: PooledCache | None):
    if model.frontend_mode == "hand-crafted":
        cache = cache if cache is not None else PooledCache()
        return cache.get(model, windows), True
    return None, False


def _batch(model, windows, idx, pooled):
    if pooled is not None:
        return pooled[idx]
    return torch.from_numpy(windows.signals(idx)).to(model.dtype)


def _targets(model, windows, idx):
    y = torch.as_tensor(windows.targets[idx], dtype=model.dtype)
    return y if model.multi_target else y[:, -1]


@torch.no_grad()
def evaluate(model: EndToEndModel, windows: Windows, cache: PooledCache | None = None,
             batch_size: int = 200, pooled=None) -> dict:
    """Cosine loss (training objective) and mean window CS in evaluation mode."""
    if len(windows) == 0:
        raise EmptyDatasetError("cannot evaluate on an empty partition")
    if pooled is None:
        pooled, _ = _model_inputs(model, windows, cache)
    was = model.training
    model.eval()
    loss_sum, cs = 0.0, []
    try:
        for i in range(0, len(windows), batch_size):
            idx = np.arange(i, min(i + batch_size, len(windows)))
            x = _batch(model, windows, idx, pooled)
            out = model.forward_pooled(x) if pooled is not None else model(x)
            y = _targets(model, windows, idx)
            loss_sum += float(cosine_loss(y, out)) * len(idx)
            pred = window_prediction(out) if model.multi_target else out
            label = torch.as_tensor(windows.labels[idx], dtype=model.dtype)
            cs.append(batch_cosine_similarity(label, pred).double().numpy())
    finally:
        model.train(was)
    cs = np.concatenate(cs)
    return {"loss": loss_sum / len(windows), "cs": float(cs.mean()), "per_window_cs": cs}


# --- training loop ----------------------------------------------------------

@dataclass
class TrainingCurve:
    rows: list = field(default_factory=list)
    stopped_epoch: int | None = None
    best_epoch: int | None = None

    def to_csv(self) -> str:
        buf = io.StringIO()
        n_f = max((len(r.get("frequencies") or []) for r in self.rows), default=0)
        cols = ["epoch", "train_loss", "valid_loss", "valid_cs", "frozen_flag"] + [f"f_{i + 1}" for i in range(n_f)]
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for r in self.rows:
            freqs = list(r.get("frequencies") or [])
            w.writerow([r["epoch"], f"{r['train_loss']:.9g}", f"{r['valid_loss']:.9g}",
                        f"{r['valid_cs']:.9g}", str(bool(r["frozen_flag"])).lower()] + [f"{f:.9g}" for f in freqs])
        return buf.getvalue()

    @property
    def valid_losses(self):
        return [r["valid_loss"] for r in self.rows]


def train(model: EndToEndModel, windows: Windows, config: TrainConfig, valid: Windows | None = None,
          cache: PooledCache | None = None, on_epoch_end=None):
    """Fit ``model`` on ``windows`` and return ``(model, curve)``.

    ``valid`` overrides the internal random 90/10 split.  ``on_epoch_end`` is
    called as ``on_epoch_end(epoch, model, row)`` after each epoch.
    """
    config.validate()
    torch.manual_seed(config.seed)
    if valid is None:
        train_w, valid_w = split_train_valid(windows, config.valid_fraction, config.seed,
                                             config.chronological_split)
    else:
        train_w, valid_w = windows, valid
    if len(train_w) < 2:
        raise EmptyDatasetError("training partition needs at least 2 windows")
    if len(valid_w) == 0:
        raise EmptyDatasetError("validation partition is empty")

    cache = cache if cache is not None else PooledCache()
    train_pooled, _ = _model_inputs(model, train_w, cache)
    valid_pooled, _ = _model_inputs(model, valid_w, cache)
    e2e = model.frontend_mode != "hand-crafted"
    cfo = model.filterbank.mode == "cfo"
    opt = Adam(model, config)
    stopper = EarlyStopper(config.patience)
    rng = np.random.default_rng(config.seed)
    curve = TrainingCurve()
    n = len(train_w)

    for epoch in range(1, config.max_epochs + 1):
        frozen = not e2e or epoch <= config.pretrain_freeze_epochs
        model.filterbank.set_frozen(frozen)
        model.train()
        order = rng.permutation(n)
        total, seen = 0.0, 0
        for i in range(0, n, config.batch_size):
            idx = order[i:i + config.batch_size]
            if len(idx) < 2:  # batch norm needs more than one sample
                continue
            x = _batch(model, train_w, idx, train_pooled)
            out = model.forward_pooled(x) if train_pooled is not None else model(x)
            loss = cosine_loss(_targets(model, train_w, idx), out)
            if not bool(torch.isfinite(loss)):
                raise NonFiniteError(f"non-finite training loss at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            if cfo:
                model.filterbank.regenerate_cfo()
            total += loss.detach().item() * len(idx)
            seen += len(idx)
        metrics = evaluate(model, valid_w, pooled=valid_pooled)
        row = {
            "epoch": epoch, "train_loss": total / max(seen, 1), "valid_loss": metrics["loss"],
            "valid_cs": metrics["cs"], "frozen_flag": frozen,
            "frequencies": model.filterbank.frequencies.detach().double().tolist() if cfo else None,
        }
        curve.rows.append(row)
        logger.info("epoch %d train %.4f valid %.4f cs %.4f%s", epoch, row["train_loss"],
                    row["valid_loss"], row["valid_cs"], " (frozen)" if frozen and e2e else "")
        if on_epoch_end is not None:
            on_epoch_end(epoch, model, row)
        if stopper.update(epoch, metrics["loss"], model):
            break

    curve.stopped_epoch = curve.rows[-1]["epoch"]
    curve.best_epoch = stopper.best_epoch
    model.load_state_dict(stopper.best_parameter_snapshot)
    model.filterbank.set_frozen(not e2e)
    return model, curve


def run_manifest(config: TrainConfig, model: EndToEndModel, dataset_hash: str, curve: TrainingCurve,
                 wall_clock_s: float, **extra) -> dict:
    return {
        "train_config": asdict(config),
        "model": model.hparams,
        "dataset_hash": dataset_hash,
        "weight_decay_exempt": sorted(no_decay_names(model)),
        "best_epoch": curve.best_epoch,
        "stopped_epoch": curve.stopped_epoch,
        "wall_clock_s": wall_clock_s,
        "created": time.strftime("%Y-%m-%dT%H:%M:%S"),
        **extra,
    }


# --- gradient checking ------------------------------------------------------

@dataclass
class GradCheckReport:
    rows: list
    tolerance: float

    @property
    def passed(self) -> bool:
        return all(r["rel_error"] <= self.tolerance for r in self.rows)

    def worst(self, k: int = 5):
        return sorted(self.rows, key=lambda r: -r["rel_error"])[:k]

    def groups(self):
        out = {}
        for r in self.rows:
            out[r["group"]] = max(out.get(r["group"], 0.0), r["rel_error"])
        return out


def _default_step(name: str) -> float:
    return 1e-3 if name.endswith("freq_param") else 1e-6


def finite_difference_check(model: nn.Module, loss_fn, sample_count: int = 5, groups=None, seed=0,
                            step=_default_step, tolerance: float = 1e-3, corrupt: float = 0.0) -> GradCheckReport:
    """Compare autograd gradients with central differences on sampled scalars.

    ``loss_fn(model)`` must return a scalar tensor.  Dropout is disabled and
    batch norm uses batch statistics.  ``groups`` maps a group name to a list
    of parameter names (default: one group per parameter tensor).  ``corrupt``
    scales the analytic gradient by ``1 + corrupt`` (negative control).
    """
    was = model.training
    model.train()
    for m in model.modules():
        if isinstance(m, nn.Dropout):
            m.eval()
    params = dict(model.named_parameters())
    if groups is None:
        groups = {n: [n] for n, p in params.items() if p.requires_grad}
    rng = np.random.default_rng(seed)
    try:
        for p in model.parameters():
            p.grad = None
        loss_fn(model).backward()
        analytic = {n: params[n].grad.detach().clone() for names in groups.values() for n in names}
        scale = {n: float(g.abs().max()) for n, g in analytic.items()}
        rows = []
        for group, names in groups.items():
            sizes = np.array([params[n].numel() for n in names])
            for _ in range(sample_count):
                k = int(rng.choice(len(names), p=sizes / sizes.sum()))
                name = names[k]
                flat = int(rng.integers(sizes[k]))
                p = params[name]
                h = step(name) if callable(step) else step
                with torch.no_grad():
                    view = p.view(-1)
                    orig = view[flat].item()
                    view[flat] = orig + h
                    up = float(loss_fn(model))
                    view[flat] = orig - h
                    down = float(loss_fn(model))
                    view[flat] = orig
                fd = (up - down) / (2 * h)
                a = float(analytic[name].view(-1)[flat]) * (1 + corrupt)
                # entries whose gradient is tiny relative to the rest of the tensor are
                # compared against that scale, not against their own roundoff
                denom = max(abs(a), abs(fd), 1e-4 * scale[name], 1e-12)
                rows.append({"group": group, "param": name, "index": flat, "analytic": a, "numeric": fd,
                             "rel_error": abs(a - fd) / denom})
    finally:
        model.train(was)
        for p in model.parameters():
            p.grad = None
    return GradCheckReport(rows, tolerance)
