"""``ecogdec`` command line: gen-data, train, sweep, inspect-filters, eval.

Exit codes: 0 on success, 1 on usage or configuration errors, 2 on runtime
errors.  Errors are reported as one line on stderr::

    ecogdec: error: <kind>: <message>

Output paths default to ``$ECOGDEC_OUT/<command>`` (``./ecogdec-out`` when the
variable is unset).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np
import torch

from ecogdec import __version__
from ecogdec._io import atomic_write_text
from ecogdec.config import ConfigError, build, load_config
from ecogdec.data import DatasetFormatError, generate_synthetic, load_dataset, save_dataset, window_sessions
from ecogdec.decoders import ARCHITECTURES, FRONTENDS, ShapeMismatchError, build_model, load_checkpoint, \
    save_checkpoint
from ecogdec.experiments import ExperimentSpec, ProtocolError, analyze_filter_drift, cell_name, \
    difference_curve, read_cell, run_cell, write_cell, write_summary
from ecogdec.training import EmptyDatasetError, NonFiniteError, TrainConfig, evaluate, run_manifest, train

logger = logging.getLogger("ecogdec")

OUT_ENV = "ECOGDEC_OUT"
PROTOCOLS = ("size", "noise", "holdout")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def default_out(command: str) -> Path:
    return Path(os.environ.get(OUT_ENV, "ecogdec-out")) / command


def _out_dir(args, command: str) -> Path:
    out = Path(args.out) if args.out else default_out(command)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create output directory {out}: {e.strerror}") from None
    if not os.access(out, os.W_OK):
        raise OSError(f"output directory {out} is not writable")
    return out


def _config(args) -> dict:
    return load_config(args.config) if args.config else load_config(text="")


def _int_list(s: str) -> list[int]:
    try:
        return [int(v) for v in s.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {s!r}") from None


def _str_list(s: str) -> list[str]:
    return [v.strip() for v in s.split(",") if v.strip()]


def _check_written(*paths):
    for p in paths:
        p = Path(p)
        if not p.exists() or p.stat().st_size == 0:
            raise OSError(f"output {p} missing or empty after write")


def _train_config(cfg: dict, args) -> TrainConfig:
    overrides = {
        "max_epochs": getattr(args, "max_epochs", None),
        "seed": getattr(args, "seed", None),
        "learning_rate": getattr(args, "lr", None),
        "batch_size": getattr(args, "batch_size", None),
        "patience": getattr(args, "patience", None),
    }
    tc = build("train", cfg["train"], overrides)
    tc.validate()
    return tc


# --- gen-data ---------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = _config(args)
    synth = build("synth", cfg["synth"], {"seed": args.seed, "n_sessions": args.sessions,
                                          "session_duration_s": args.duration})
    try:
        synth.validate()
    except ValueError as e:
        raise ConfigError(str(e)) from None
    out = _out_dir(args, "gen-data")
    dataset = generate_synthetic(synth)
    save_dataset(dataset, out)
    reloaded = load_dataset(out)
    digest = dataset.content_hash()
    if reloaded.content_hash() != digest:
        raise OSError("dataset re-read does not match what was written")
    n_windows = len(window_sessions(dataset))
    print(f"sessions={len(dataset)} windows={n_windows} seed={synth.seed} hash={digest}")
    return 0


# --- train ------------------------------------------------------------------

def _select_sessions(dataset, sessions):
    if sessions is None:
        return dataset
    bad = [s for s in sessions if not 0 <= s < len(dataset)]
    if bad:
        raise ProtocolError(f"session indices {bad} outside 0..{len(dataset) - 1}")
    return dataset.select(sessions)


def cmd_train(args) -> int:
    cfg = _config(args)
    tc = _train_config(cfg, args)
    exp = cfg["experiment"]
    out = _out_dir(args, "train")
    dataset = load_dataset(args.dataset)
    part = _select_sessions(dataset, args.sessions)
    windows = window_sessions(part)
    dtype = torch.float64 if args.float64 else torch.float32
    kwargs = {"squeeze": bool(exp.get("squeeze", tc.cfo_squeeze))}
    if exp.get("frequencies"):
        kwargs["frequencies"] = tuple(exp["frequencies"])
    model = build_model(args.model, args.frontend, seed=tc.seed, dtype=dtype, **kwargs)
    save_checkpoint(model, out / "checkpoint_init", epoch=0)
    start = time.perf_counter()
    model, curve = train(model, windows, tc)
    wall = time.perf_counter() - start
    save_checkpoint(model, out / "checkpoint", epoch=curve.best_epoch)
    atomic_write_text(out / "curve.csv", curve.to_csv())
    manifest = run_manifest(tc, model, dataset.content_hash(), curve, wall,
                            sessions=args.sessions, synth_config=dataset.config.to_json() if dataset.config else None,
                            config_file=str(args.config) if args.config else None)
    atomic_write_text(out / "run.json", json.dumps(manifest, indent=1))
    written = [out / "checkpoint.json", out / "checkpoint.bin", out / "curve.csv", out / "run.json"]
    if not args.no_plots:
        from ecogdec import plotting
        written.append(plotting.learning_curve(curve, out / "curve.png"))
    _check_written(*written)
    load_checkpoint(out / "checkpoint")
    best = curve.rows[curve.best_epoch - 1]
    print(f"final valid_cs={best['valid_cs']:.6f} best_epoch={curve.best_epoch} stopped_epoch={curve.stopped_epoch}")
    return 0


# --- sweep ------------------------------------------------------------------

def _cell_job(dataset_path, spec_dict, protocol, setting, tc_dict, out_dir, manifest, threads):
    """Worker entry point; runs in a separate process when ``--jobs > 1``."""
    torch.set_num_threads(threads)
    dataset = load_dataset(dataset_path)
    spec = ExperimentSpec(**spec_dict)
    result = run_cell(dataset, spec, protocol, setting, TrainConfig(**tc_dict))
    write_cell(out_dir, result, manifest)
    return cell_name(result)


def _settings(protocol, spec):
    if protocol == "size":
        return sorted(spec.sizes)
    if protocol == "noise":
        return list(spec.fractions)
    return [None]


def cmd_sweep(args) -> int:
    cfg = _config(args)
    tc = _train_config(cfg, args)
    exp = dict(cfg["experiment"])
    models = args.models or exp.pop("models", None) or ["mlp"]
    frontends = args.frontends or exp.pop("frontends", None) or ["hand-crafted"]
    exp.pop("models", None), exp.pop("frontends", None), exp.pop("protocols", None)
    jobs = args.jobs or exp.pop("jobs", None) or 1
    exp.pop("jobs", None)
    for m in models:
        if m not in ARCHITECTURES:
            raise ConfigError(f"unknown model {m!r}; expected one of {ARCHITECTURES}")
    for f in frontends:
        if f not in FRONTENDS:
            raise ConfigError(f"unknown frontend {f!r}; expected one of {tuple(FRONTENDS)}")
    overrides = {"seeds": args.seeds, "sizes": args.sizes}
    base = build("experiment", exp, overrides)
    dataset_path = Path(args.dataset or base.dataset or "")
    if not str(dataset_path):
        raise ConfigError("no dataset given (--dataset or [experiment] dataset)")
    dataset = load_dataset(dataset_path)
    protocol = args.protocol
    if protocol == "size" and len(dataset) < max(base.sizes) + 1:
        raise ProtocolError(f"size sweep up to {max(base.sizes)} sessions needs at least {max(base.sizes) + 1} "
                            f"sessions, dataset has {len(dataset)}")
    if protocol in ("noise", "holdout") and len(dataset) <= base.calibration_sessions:
        raise ProtocolError(f"{protocol} needs more than {base.calibration_sessions} sessions, "
                            f"dataset has {len(dataset)}")
    out = _out_dir(args, "sweep")
    base_manifest = {
        "dataset": str(dataset_path), "dataset_hash": dataset.content_hash(),
        "synth_config": dataset.config.to_json() if dataset.config else None,
        "train_config": asdict(tc), "config_file": str(args.config) if args.config else None,
    }

    cells, todo = [], []
    for model in models:
        for frontend in frontends:
            spec = replace(base, model=model, frontend=frontend, dataset=str(dataset_path))
            for setting in _settings(protocol, spec):
                name = cell_name(protocol, model, frontend, None if setting is None else float(setting))
                cells.append((spec, setting, name))
                if read_cell(out / name) is None:
                    todo.append((spec, setting, name))
    logger.info("%d cells, %d already complete", len(cells), len(cells) - len(todo))

    for spec, setting, name in todo if jobs == 1 else []:
        result = run_cell(dataset, spec, protocol, setting, tc)
        write_cell(out, result, dict(base_manifest, spec=asdict(spec)))
        print(f"done {name} mean_cs={result.mean:.4f}", flush=True)
    if jobs > 1 and todo:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_cell_job, str(dataset_path), asdict(spec), protocol, setting, asdict(tc),
                                   str(out), dict(base_manifest, spec=asdict(spec)), 1)
                       for spec, setting, _ in todo]
            for fut in futures:
                print(f"done {fut.result()}", flush=True)

    results = [read_cell(out / name) for _, _, name in cells]
    if any(r is None for r in results):
        raise OSError("some sweep cells are missing after the run")
    written = [write_summary(out, results)]
    written += _write_plot_data(out, protocol, results, models, frontends, plots=not args.no_plots)
    _check_written(*written)
    print(f"cells={len(results)} summary={out / 'summary.csv'}")
    return 0


def _grouped(results, model, frontend):
    return [r for r in results if r.model == model and r.frontend == frontend]


def _write_plot_data(out, protocol, results, models, frontends, plots=True) -> list[Path]:
    written = []
    if protocol == "size":
        for model in models:
            ref = _grouped(results, model, "hand-crafted")
            curves = {}
            for frontend in frontends:
                if frontend == "hand-crafted" or not ref:
                    continue
                d = difference_curve(_grouped(results, model, frontend), ref)
                lines = ["size,mean_difference,moving_average,n_seeds"]
                for s, m, ma, per in zip(d["settings"], d["mean"], d["moving_average"], d["per_seed"]):
                    lines.append(f"{s:g},{m:.9g},{ma:.9g},{len(per)}")
                path = out / f"difference__{model}__{frontend}.csv"
                atomic_write_text(path, "\n".join(lines) + "\n")
                written.append(path)
                curves[f"{frontend} - hand-crafted"] = d
            if plots and curves:
                from ecogdec import plotting
                written.append(plotting.size_sweep(curves, out / f"difference__{model}.png"))
    if protocol in ("size", "noise"):
        lines = ["model,frontend_mode,size_or_fraction,mean_cs,std_cs,n_seeds"]
        for r in results:
            lines.append(f"{r.model},{r.frontend},{r.setting:g},{r.mean:.9g},{r.std:.9g},{len(r.seeds)}")
        path = out / f"{protocol}_curve.csv"
        atomic_write_text(path, "\n".join(lines) + "\n")
        written.append(path)
        if plots and protocol == "noise":
            from ecogdec import plotting
            by_label = {f"{m} / {f}": _grouped(results, m, f) for m in models for f in frontends}
            written.append(plotting.noise_sweep(by_label, out / "noise_curve.png"))
    return written


# --- inspect-filters / eval -------------------------------------------------

def cmd_inspect_filters(args) -> int:
    before, _ = load_checkpoint(args.before)
    after, _ = load_checkpoint(args.after)
    if before.frontend_mode != after.frontend_mode:
        raise ProtocolError(f"frontend mode mismatch: {before.frontend_mode} vs {after.frontend_mode}")
    out = _out_dir(args, "inspect-filters")
    report = analyze_filter_drift(before, after)
    written = report.write(out)
    if not args.no_plots:
        from ecogdec import plotting
        written.append(plotting.filter_drift(report, out / "filters.png"))
    _check_written(*written)
    df = report.delta_f
    print(f"mode={report.mode} filters={len(df)} mean_delta_f={df.mean():.6f}")
    return 0


def cmd_eval(args) -> int:
    model, manifest = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.dataset)
    sessions = args.sessions if args.sessions is not None else list(range(len(dataset)))
    if not sessions:
        raise EmptyDatasetError("empty evaluation partition")
    part = _select_sessions(dataset, sessions)
    windows = window_sessions(part)
    if len(windows) == 0:
        raise EmptyDatasetError("evaluation partition has no complete windows")
    metrics = evaluate(model, windows)
    per_window = metrics["per_window_cs"]
    per_session = {}
    for pos, sid in enumerate(sessions):
        mask = windows.session_index == pos
        if mask.any():
            per_session[str(sid)] = float(per_window[mask].mean())
    body = {
        "checkpoint": str(args.checkpoint), "dataset": str(args.dataset), "dataset_hash": dataset.content_hash(),
        "model": manifest["hparams"], "sessions": sessions, "n_windows": len(windows),
        "loss": metrics["loss"], "cs": metrics["cs"], "per_session_cs": per_session,
    }
    out = Path(args.out) if args.out else default_out("eval") / "metrics.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out, json.dumps(body, indent=1, sort_keys=True))
    _check_written(out)
    print(f"cs={metrics['cs']:.6f} windows={len(windows)}")
    return 0


# --- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ecogdec", description="Synthetic ECoG decoding: hand-crafted vs end-to-end wavelet features.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0, help="-v for progress, -vv for debug")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, out_help):
        sp.add_argument("--config", type=Path, help="INI config with [synth]/[train]/[experiment] sections")
        sp.add_argument("--out", type=Path, help=out_help)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    common(g, f"dataset directory (default ${OUT_ENV}/gen-data)")
    g.add_argument("--seed", type=int)
    g.add_argument("--sessions", type=int, help="number of sessions")
    g.add_argument("--duration", type=float, help="session duration in seconds")
    g.set_defaults(func=cmd_gen_data)

    def train_flags(sp):
        sp.add_argument("--max-epochs", type=int)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--lr", type=float)
        sp.add_argument("--batch-size", type=int)
        sp.add_argument("--patience", type=int)
        sp.add_argument("--no-plots", action="store_true", help="skip PNG rendering")

    t = sub.add_parser("train", help="train one decoder")
    common(t, f"run directory (default ${OUT_ENV}/train)")
    t.add_argument("--dataset", type=Path, required=True)
    t.add_argument("--model", choices=ARCHITECTURES, default="mlp")
    t.add_argument("--frontend", choices=tuple(FRONTENDS), default="hand-crafted")
    t.add_argument("--sessions", type=_int_list, help="session indices to train on (default all)")
    t.add_argument("--float64", action="store_true", help="train in double precision")
    train_flags(t)
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sweep", help="run a holdout, size or noise protocol")
    common(s, f"results directory (default ${OUT_ENV}/sweep)")
    s.add_argument("protocol", choices=PROTOCOLS)
    s.add_argument("--dataset", type=Path)
    s.add_argument("--models", type=_str_list, help="comma-separated architectures")
    s.add_argument("--frontends", type=_str_list, help="comma-separated frontend modes")
    s.add_argument("--seeds", type=_int_list)
    s.add_argument("--sizes", type=_int_list)
    s.add_argument("--jobs", type=int, help="parallel worker processes")
    train_flags(s)
    s.set_defaults(func=cmd_sweep)

    i = sub.add_parser("inspect-filters", help="compare filterbanks of two checkpoints")
    i.add_argument("before", type=Path)
    i.add_argument("after", type=Path)
    i.add_argument("--out", type=Path, help=f"output directory (default ${OUT_ENV}/inspect-filters)")
    i.add_argument("--no-plots", action="store_true")
    i.set_defaults(func=cmd_inspect_filters)

    e = sub.add_parser("eval", help="evaluate a checkpoint on dataset sessions")
    e.add_argument("checkpoint", type=Path)
    e.add_argument("--dataset", type=Path, required=True)
    e.add_argument("--sessions", type=_int_list)
    e.add_argument("--out", type=Path, help=f"metrics JSON (default ${OUT_ENV}/eval/metrics.json)")
    e.set_defaults(func=cmd_eval)
    return p


def _fail(kind: str, message: str, code: int) -> int:
    message = " ".join(str(message).split())
    print(f"ecogdec: error: {kind}: {message}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        return _fail("usage", e, 1)
    level = [logging.WARNING, logging.INFO, logging.DEBUG][min(args.verbose, 2)]
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as e:
        return _fail("config", e, 1)
    except (DatasetFormatError, ShapeMismatchError, ProtocolError, EmptyDatasetError, NonFiniteError) as e:
        return _fail(type(e).__name__, e, 2)
    except (OSError, ValueError) as e:
        return _fail(type(e).__name__, e, 2)


if __name__ == "__main__":
    sys.exit(main())
