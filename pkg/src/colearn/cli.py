"""Experiment harness: config parsing, method x seed grids, CSV traces, SVG plots.

Usage::

    colearn run experiment.yaml [--jobs N] [--resume] [--output-dir DIR]
    colearn corrupt experiment.yaml [--output-dir DIR]
    colearn gradcheck
"""

from __future__ import annotations

import argparse
import csv
import difflib
import io
import logging
import math
import os
import sys
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Sequence
from xml.sax.saxutils import escape

import multiprocessing as mp
import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .data import (CIFAR10_PAIRS, ImageDataset, TransitionMatrix, build_asymmetric_circular,
                   build_asymmetric_pairmap, build_symmetric, corrupt_labels, generate_synthetic,
                   load_cifar10_binary, save_dataset)
from .errors import ColearnError, ConfigError, ParameterError
from .eval import MetricsRow, last_k_summary, summarize
from .model import save_checkpoint
from .train import TrainConfig, run_training

log = logging.getLogger("colearn")

CSV_HEADER = ("epoch", "l_sup", "l_int", "l_str", "l_total", "test_acc", "clean_train_acc", "memorization")
SUMMARY_HEADER = ("method", "seeds", "k", "test_acc_mean", "test_acc_std",
                  "final_memorization_mean", "final_memorization_std")
PLOT_TITLES = {
    "l_sup": "supervised loss", "l_int": "intrinsic loss", "l_str": "structural loss",
    "l_total": "total loss", "test_acc": "test accuracy", "clean_train_acc": "clean-subset train accuracy",
    "memorization": "noisy-subset memorization",
}


def fmt(x: float) -> str:
    return f"{x:.6g}"


# -- config -----------------------------------------------------------------------

class DatasetSection(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    source: Literal["synthetic", "cifar10"] = "synthetic"
    train_paths: list[str] = Field(default_factory=list)
    test_paths: list[str] = Field(default_factory=list)
    num_classes: int = Field(10, ge=2, le=16)
    n_train: int = Field(5000, ge=2)
    n_test: int = Field(1000, ge=1)
    side: int = Field(16, ge=8)
    data_seed: int = Field(0, ge=0)

    @model_validator(mode="after")
    def _paths(self):
        if self.source == "cifar10" and not (self.train_paths and self.test_paths):
            raise ValueError("cifar10 source needs train_paths and test_paths")
        return self


class NoiseSection(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    kind: Literal["none", "symmetric", "asymmetric_pairmap", "asymmetric_circular"] = "symmetric"
    rate: float = Field(0.5, ge=0, le=1)
    pairs: list[tuple[int, int]] = Field(default_factory=lambda: [list(p) for p in CIFAR10_PAIRS])
    include_true_class: bool = False


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    dataset: DatasetSection = Field(default_factory=DatasetSection)
    noise: NoiseSection = Field(default_factory=NoiseSection)
    methods: list[TrainConfig] = Field(min_length=1)
    seeds: list[int] = Field(min_length=1)
    output_dir: str = "runs"
    summary_k: int = Field(10, ge=1)
    checkpoints: bool = True

    @model_validator(mode="after")
    def _unique(self):
        labels = [m.label for m in self.methods]
        if len(set(labels)) != len(labels):
            raise ValueError("method labels must be unique; give repeated methods distinct 'name' values")
        if len(set(self.seeds)) != len(self.seeds) or min(self.seeds) < 0:
            raise ValueError("seeds must be distinct non-negative integers")
        if any(m.epochs < self.summary_k for m in self.methods):
            raise ValueError("summary_k exceeds the epoch count of a method")
        return self

    def cells(self) -> list[TrainConfig]:
        return [m.model_copy(update={"seed": s}) for m in self.methods for s in self.seeds]


_SECTIONS: dict[str, type[BaseModel]] = {"dataset": DatasetSection, "noise": NoiseSection,
                                         "methods": TrainConfig}


def _suggest(loc: tuple) -> str:
    model = _SECTIONS.get(loc[0], ExperimentConfig) if len(loc) > 1 else ExperimentConfig
    close = difflib.get_close_matches(str(loc[-1]), list(model.model_fields), n=1)
    return f"; did you mean '{close[0]}'?" if close else ""


def _config_error(exc: ValidationError) -> ConfigError:
    messages, first = [], None
    for err in exc.errors():
        loc = tuple(err["loc"])
        path = ".".join(str(p) for p in loc)
        msg = err["msg"]
        if err["type"] == "extra_forbidden":
            msg = f"unknown key '{loc[-1]}'{_suggest(loc)}"
        messages.append(f"{path}: {msg}" if path else msg)
        first = first or path
    err = ConfigError("", "; ".join(messages))
    err.path = first or ""
    return err


def parse_config(text: str) -> ExperimentConfig:
    """Parse and validate a YAML experiment description."""
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError("", f"malformed YAML: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("", "top level must be a mapping")
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as exc:
        raise _config_error(exc) from None


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError("", f"cannot read {path}: {exc.strerror}") from exc
    return parse_config(text)


# -- datasets -----------------------------------------------------------------------

def transition_matrix(cfg: ExperimentConfig, num_classes: int) -> TransitionMatrix | None:
    noise = cfg.noise
    if noise.kind == "none":
        return None
    if noise.kind == "symmetric":
        return build_symmetric(num_classes, noise.rate, noise.include_true_class)
    if noise.kind == "asymmetric_pairmap":
        return build_asymmetric_pairmap(num_classes, noise.rate, [tuple(p) for p in noise.pairs])
    return build_asymmetric_circular(num_classes, noise.rate)


def build_datasets(cfg: ExperimentConfig) -> tuple[ImageDataset, ImageDataset]:
    """(corrupted train split, clean test split), built once per data seed."""
    d = cfg.dataset
    if d.source == "synthetic":
        train, test = generate_synthetic(d.num_classes, d.n_train, d.n_test, d.side, d.data_seed)
    else:
        train, test = load_cifar10_binary(d.train_paths), load_cifar10_binary(d.test_paths)
    q = transition_matrix(cfg, train.num_classes)
    if q is not None:
        train = corrupt_labels(train, q, d.data_seed)
    return train, test


# -- traces -------------------------------------------------------------------------

def cell_name(cfg: TrainConfig) -> str:
    return f"{cfg.label}_s{cfg.seed}"


def trace_csv(rows: Sequence[MetricsRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in rows:
        w.writerow([r.epoch, *(fmt(v) for v in (r.l_sup, r.l_int, r.l_str, r.l_total, r.test_accuracy,
                                               r.clean_subset_train_acc, r.noisy_subset_memorization))])
    return buf.getvalue()


def read_trace(path: str | Path) -> list[MetricsRow]:
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = tuple(next(reader))
        if header != CSV_HEADER:
            raise ParameterError(f"{path}: unexpected header {header}")
        return [MetricsRow(int(r[0]), *(float(v) for v in r[1:])) for r in reader]


def _write_atomic(path: Path, data: str | bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    if isinstance(data, str):
        tmp.write_text(data)
    else:
        tmp.write_bytes(data)
    os.replace(tmp, path)


@dataclass
class RunArtifacts:
    traces: dict[str, Path] = field(default_factory=dict)
    summary: Path | None = None
    plots: list[Path] = field(default_factory=list)
    checkpoints: list[Path] = field(default_factory=list)

    def paths(self) -> list[Path]:
        return [*self.traces.values(), *([self.summary] if self.summary else []), *self.plots, *self.checkpoints]

    def missing(self) -> list[Path]:
        return [p for p in self.paths() if not p.exists()]


# worker-global datasets, set once per process
_DATA: tuple[ImageDataset, ImageDataset, int, Path, bool] | None = None


def _init_worker(train: ImageDataset, test: ImageDataset, data_seed: int, out: Path, ckpt: bool) -> None:
    global _DATA
    _DATA = (train, test, data_seed, out, ckpt)


def _run_cell(cfg: TrainConfig) -> str:
    train, test, data_seed, out, ckpt = _DATA
    name = cell_name(cfg)
    start = time.perf_counter()
    run = run_training(train, test, cfg, data_seed)
    _write_atomic(out / f"{name}.csv", trace_csv(run.rows))
    if ckpt:
        save_checkpoint(run.params, out / f"{name}.clmp")
    (out / f"{name}.done").write_text("")
    log.info("finished %s in %.1fs (final test acc %.4f)", name, time.perf_counter() - start,
             run.rows[-1].test_accuracy)
    return name


def check_writable(out: Path) -> None:
    """Raise ``OSError`` unless ``out`` can be created and written to."""
    out.mkdir(parents=True, exist_ok=True)
    with tempfile.NamedTemporaryFile(dir=out, prefix=".probe"):
        pass


def run_experiment(cfg: ExperimentConfig, jobs: int = 1, resume: bool = False) -> RunArtifacts:
    """Run every (method, seed) cell and write traces, a summary and plots."""
    out = Path(cfg.output_dir)
    check_writable(out)
    cells = cfg.cells()
    todo = [c for c in cells if not (resume and (out / f"{cell_name(c)}.done").exists())]
    skipped = len(cells) - len(todo)
    if skipped:
        log.info("resuming: %d of %d cells already complete", skipped, len(cells))
    if todo:
        train, test = build_datasets(cfg)
        log.info("dataset: %d train / %d test, %d classes, %.4f of labels corrupted (hash %s)",
                 len(train), len(test), train.num_classes, train.corruption_mask.mean(), train.label_hash()[:12])
        init = (train, test, cfg.dataset.data_seed, out, cfg.checkpoints)
        if jobs <= 1 or len(todo) == 1:
            _init_worker(*init)
            for c in todo:
                _run_cell(c)
        else:
            ctx = mp.get_context("fork" if "fork" in mp.get_all_start_methods() else "spawn")
            with ProcessPoolExecutor(min(jobs, len(todo)), mp_context=ctx, initializer=_init_worker,
                                     initargs=init) as pool:
                list(pool.map(_run_cell, todo))

    art = RunArtifacts()
    traces: dict[str, list[list[MetricsRow]]] = {m.label: [] for m in cfg.methods}
    for c in cells:
        path = out / f"{cell_name(c)}.csv"
        art.traces[cell_name(c)] = path
        traces[c.label].append(read_trace(path))
        if cfg.checkpoints:
            art.checkpoints.append(out / f"{cell_name(c)}.clmp")
    art.summary = out / "summary.csv"
    _write_atomic(art.summary, summary_csv(traces, cfg.summary_k))
    for metric in CSV_HEADER[1:]:
        path = out / f"{metric}.svg"
        emit_svg_plot(metric_series(traces, metric), PLOT_TITLES[metric], path)
        art.plots.append(path)
    missing = art.missing()
    if missing:
        raise ColearnError(f"expected outputs missing: {', '.join(map(str, missing))}")
    return art


_FIELD = dict(zip(CSV_HEADER, ("epoch", "l_sup", "l_int", "l_str", "l_total", "test_accuracy",
                               "clean_subset_train_acc", "noisy_subset_memorization")))


def summary_csv(traces: dict[str, list[list[MetricsRow]]], k: int) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_HEADER)
    for label, runs in traces.items():
        acc_mean, acc_std = last_k_summary(runs, k)
        mem_mean, mem_std = summarize([r[-1].noisy_subset_memorization for r in runs])
        w.writerow([label, len(runs), k, fmt(acc_mean), fmt(acc_std), fmt(mem_mean), fmt(mem_std)])
    return buf.getvalue()


def read_summary(path: str | Path) -> dict[str, dict[str, float]]:
    with open(path, newline="") as f:
        return {r["method"]: {k: float(v) for k, v in r.items() if k != "method"} for r in csv.DictReader(f)}


# -- plots ----------------------------------------------------------------------------

@dataclass
class Series:
    name: str
    mean: list[float]
    std: list[float] | None = None


def metric_series(traces: dict[str, list[list[MetricsRow]]], metric: str) -> list[Series]:
    attr = _FIELD[metric]
    out = []
    for label, runs in traces.items():
        values = np.array([[getattr(r, attr) for r in run] for run in runs])
        std = values.std(axis=0, ddof=1) if len(runs) > 1 else np.zeros(values.shape[1])
        out.append(Series(label, values.mean(axis=0).tolist(), std.tolist()))
    return out


PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f")
WIDTH, HEIGHT = 640, 400
LEFT, RIGHT, TOP, BOTTOM = 64, 170, 36, 44


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    return [lo + (hi - lo) * i / (n - 1) for i in range(n)]


def emit_svg_plot(series: Sequence[Series], title: str, path: str | Path, x_label: str = "epoch") -> None:
    """Write a self-contained SVG with one mean line and a shaded std band per series."""
    if not series or any(len(s.mean) == 0 for s in series):
        raise ParameterError("nothing to plot")
    n = len(series[0].mean)
    if any(len(s.mean) != n or (s.std is not None and len(s.std) != n) for s in series):
        raise ParameterError("all series must have the same length")
    lows = [m - (s.std[i] if s.std else 0.0) for s in series for i, m in enumerate(s.mean)]
    highs = [m + (s.std[i] if s.std else 0.0) for s in series for i, m in enumerate(s.mean)]
    lo, hi = min(lows), max(highs)
    if not (math.isfinite(lo) and math.isfinite(hi)):
        raise ParameterError("series contain non-finite values")
    if hi - lo < 0.1:
        mid = (hi + lo) / 2
        lo, hi = mid - 0.05, mid + 0.05
    x_hi = max(n - 1, 1)
    pw, ph = WIDTH - LEFT - RIGHT, HEIGHT - TOP - BOTTOM

    def px(i: float) -> str:
        return fmt(LEFT + pw * (i / x_hi if n > 1 else 0.5))

    def py(v: float) -> str:
        return fmt(TOP + ph * (hi - v) / (hi - lo))

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
           f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">',
           f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
           f'<text x="{fmt(LEFT + pw / 2)}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>',
           f'<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>']
    for v in _ticks(lo, hi):
        out.append(f'<line x1="{LEFT - 4}" y1="{py(v)}" x2="{LEFT}" y2="{py(v)}" stroke="black"/>')
        out.append(f'<text x="{LEFT - 6}" y="{py(v)}" text-anchor="end" dominant-baseline="middle">{fmt(v)}</text>')
    step = max(1, math.ceil(n / 10))
    for i in range(0, n, step):
        out.append(f'<line x1="{px(i)}" y1="{TOP + ph}" x2="{px(i)}" y2="{TOP + ph + 4}" stroke="black"/>')
        out.append(f'<text x="{px(i)}" y="{TOP + ph + 16}" text-anchor="middle">{i}</text>')
    out.append(f'<text x="{fmt(LEFT + pw / 2)}" y="{HEIGHT - 8}" text-anchor="middle">{escape(x_label)}</text>')
    for k, s in enumerate(series):
        color = PALETTE[k % len(PALETTE)]
        if s.std is not None:
            upper = [f"{px(i)},{py(m + d)}" for i, (m, d) in enumerate(zip(s.mean, s.std))]
            lower = [f"{px(i)},{py(m - d)}" for i, (m, d) in enumerate(zip(s.mean, s.std))]
            out.append(f'<polygon points="{" ".join(upper + lower[::-1])}" fill="{color}" '
                       f'fill-opacity="0.2" stroke="none"/>')
        pts = " ".join(f"{px(i)},{py(m)}" for i, m in enumerate(s.mean))
        out.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        ly = TOP + 10 + 18 * k
        lx = WIDTH - RIGHT + 12
        out.append(f'<line class="legend" x1="{lx}" y1="{ly}" x2="{lx + 20}" y2="{ly}" stroke="{color}" '
                   f'stroke-width="3"/>')
        out.append(f'<text x="{lx + 26}" y="{ly}" dominant-baseline="middle">{escape(s.name)}</text>')
    out.append("</svg>\n")
    _write_atomic(Path(path), "\n".join(out))


# -- command line ----------------------------------------------------------------------

def _override(cfg: ExperimentConfig, output_dir: str | None) -> ExperimentConfig:
    return cfg.model_copy(update={"output_dir": output_dir}) if output_dir else cfg


def cmd_run(args) -> int:
    cfg = _override(load_config(args.config), args.output_dir)
    art = run_experiment(cfg, jobs=args.jobs, resume=args.resume)
    for label, row in read_summary(art.summary).items():
        print(f"{label}: last-{int(row['k'])} test acc {row['test_acc_mean']:.4f} +/- {row['test_acc_std']:.4f}, "
              f"final memorization {row['final_memorization_mean']:.4f}")
    print(f"outputs in {cfg.output_dir}")
    return 0


def cmd_corrupt(args) -> int:
    cfg = _override(load_config(args.config), args.output_dir)
    out = Path(cfg.output_dir)
    check_writable(out)
    train, test = build_datasets(cfg)
    save_dataset(train, out / "train.clds")
    save_dataset(test, out / "test.clds")
    q = transition_matrix(cfg, train.num_classes)
    if q is not None:
        np.savetxt(out / "transition.csv", q.entries, delimiter=",", fmt="%.6g")
    print(f"wrote {len(train)} train / {len(test)} test images to {out}; "
          f"corrupted fraction {train.corruption_mask.mean():.4f}")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_master_check

    start = time.perf_counter()
    reports = run_master_check(args.seed)
    for r in reports:
        print(f"{'ok  ' if r.ok else 'FAIL'} {r.name:<18} {r.size:>6} entries  max |err| {r.max_abs_err:.3g}")
    total = sum(r.size for r in reports)
    print(f"{total} parameters checked in {time.perf_counter() - start:.1f}s")
    return 0 if all(r.ok for r in reports) else 2


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="colearn", description="Noisy-label training experiments.")
    p.add_argument("-v", "--verbose", action="store_true", help="log every epoch")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="train every method x seed cell of a config")
    run.add_argument("config")
    run.add_argument("--output-dir")
    run.add_argument("--jobs", type=int, default=1, help="cells to run in parallel")
    run.add_argument("--resume", action="store_true", help="skip cells with a .done marker")
    run.set_defaults(func=cmd_run)

    corrupt = sub.add_parser("corrupt", help="write the corrupted dataset only")
    corrupt.add_argument("config")
    corrupt.add_argument("--output-dir")
    corrupt.set_defaults(func=cmd_corrupt)

    gc = sub.add_parser("gradcheck", help="finite-difference check of the full loss gradient")
    gc.add_argument("--seed", type=int, default=0)
    gc.set_defaults(func=cmd_gradcheck)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    if not args.verbose:
        logging.getLogger("colearn.train").setLevel(logging.WARNING)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (ColearnError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
