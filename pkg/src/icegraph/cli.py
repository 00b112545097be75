"""``icegraph`` command line: simulate, dataset, train, eval, sweep, bench.

Options can come from a ``key = value`` config file (``--config``); flags on
the command line override it. Every run writes ``run_manifest.txt`` next to
its outputs with the resolved configuration, which is enough to repeat it.

Exit codes: 0 success, 2 usage, 3 invalid input, 4 I/O, 5 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import platform
import sys
import time
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .autodiff import ShapeError
from .dataset import CorpusConfig, CorpusError, build_corpus, load_manifest, load_samples, write_trajectory
from .evaluation import (
    BenchmarkRow, aggregate, emulator_sweep, evaluate_predictions, instructor_sweep, median_time, render_map,
    sweep_samples, write_grid, write_table,
)
from .mesh import MeshError, write_mesh
from .models import (
    ARCHITECTURES, TEST_RATES, TrainingError, build_model, load_model, predict_many, save_model,
    split_dataset, train,
)
from .ssa import ConvergenceError, ScenarioConfig, SimulationError, prepare_glacier, run_transient

log = logging.getLogger("icegraph")

EXIT_OK, EXIT_USAGE, EXIT_INVALID, EXIT_IO, EXIT_NUMERICAL = 0, 2, 3, 4, 5


def _floats(text: str) -> tuple[float, ...]:
    """``"0 2 4"``, ``"0,2,4"`` or a range ``"0:70:2"`` (inclusive stop)."""
    text = text.strip()
    if ":" in text:
        lo, hi, step = (float(v) for v in text.split(":"))
        if step <= 0:
            raise ValueError(f"range step must be positive: {text!r}")
        n = int(np.floor((hi - lo) / step + 1e-9)) + 1
        return tuple(float(lo + k * step) for k in range(n))
    return tuple(float(v) for v in text.replace(",", " ").split())


@dataclass(frozen=True)
class RunConfig:
    """Every tunable of every subcommand, with full-scale defaults."""

    m0: float = 20e3
    melt: float = 0.0
    years: float = 20.0
    dt_months: int = 1
    mesh_sizes: tuple[float, ...] = (20e3,)
    rates: tuple[float, ...] = tuple(float(r) for r in range(0, 71, 2))
    months: int = 240
    arch: str = "gcn"
    epochs: int = 200
    lr: float = 0.01
    seed: int = 0
    repeats: int = 3
    warmup: int = 1
    sample_years: tuple[float, ...] = (5.0, 10.0, 15.0, 20.0)

    def __post_init__(self):
        if self.arch not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.arch!r}; choose from {', '.join(ARCHITECTURES)}")
        if self.epochs < 0 or self.lr < 0 or self.repeats < 1 or self.warmup < 0 or self.dt_months < 1:
            raise ValueError("epochs, lr and warmup must be non-negative; repeats and dt_months positive")
        if self.years <= 0 or self.months < 1 or self.m0 <= 0 or not self.rates or not self.mesh_sizes:
            raise ValueError("years, months, m0, rates and mesh sizes must be positive / non-empty")

    def serialize(self) -> str:
        out = []
        for f in fields(self):
            v = getattr(self, f.name)
            out.append(f"{f.name} = {' '.join(repr(x) for x in v) if isinstance(v, tuple) else repr(v) if isinstance(v, float) else v}")
        return "\n".join(out) + "\n"

    @classmethod
    def parse(cls, text: str, base: "RunConfig | None" = None) -> "RunConfig":
        kv = {}
        for raw in text.splitlines():
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ValueError(f"config line is not 'key = value': {raw!r}")
            kv[key.strip()] = value.strip()
        return (base or cls()).updated(kv)

    def updated(self, kv: dict[str, str]) -> "RunConfig":
        types = {f.name: f for f in fields(self)}
        changes = {}
        for key, value in kv.items():
            if key not in types:
                raise ValueError(f"unknown config key {key!r}")
            default = getattr(self, key)
            if isinstance(default, tuple):
                changes[key] = _floats(value)
            elif isinstance(default, bool):
                changes[key] = value.lower() in ("1", "true", "yes")
            elif isinstance(default, int):
                changes[key] = int(value)
            elif isinstance(default, float):
                changes[key] = float(value)
            else:
                changes[key] = value
        return dataclasses.replace(self, **changes)


# -- helpers ------------------------------------------------------------------

def _threads() -> int:
    raw = os.environ.get("ICEGRAPH_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ValueError(f"ICEGRAPH_THREADS must be an integer, got {raw!r}") from None


def _write_manifest(out: Path, command: str, argv: Sequence[str], config: RunConfig, extra: dict | None = None) -> None:
    out.mkdir(parents=True, exist_ok=True)
    lines = [
        f"# icegraph run manifest; repeat with: icegraph {command} --config run_manifest.txt ...",
        f"# command = {command}",
        f"# argv = {' '.join(argv)}",
        f"# icegraph_version = {__version__}",
        f"# python = {platform.python_version()}",
        f"# numpy = {np.__version__}",
        f"# threads = {_threads()}",
    ]
    lines += [f"# {k} = {v}" for k, v in (extra or {}).items()]
    (out / "run_manifest.txt").write_text("\n".join(lines) + "\n" + config.serialize())


def _corpus_samples(data: Path):
    manifest = load_manifest(data)
    return manifest, load_samples(manifest)


# -- subcommands --------------------------------------------------------------

def cmd_simulate(cfg: RunConfig, out: Path) -> dict:
    mesh, initial = prepare_glacier(cfg.m0, seed=cfg.seed)
    scenario = ScenarioConfig(melt_rate=cfg.melt, duration=cfg.years, dt=cfg.dt_months / 12.0, m0=cfg.m0)
    t0 = time.perf_counter()
    states = run_transient(scenario, initial, mesh)
    out.mkdir(parents=True, exist_ok=True)
    write_mesh(mesh, out / "mesh.txt")
    write_trajectory(out / "trajectory.bin", states)
    log.info("simulated %d steps on %d nodes in %.1f s", len(states), mesh.num_nodes, time.perf_counter() - t0)
    return {"mesh_file": "mesh.txt", "trajectory_file": "trajectory.bin", "nodes": mesh.num_nodes, "steps": len(states)}


def cmd_dataset(cfg: RunConfig, out: Path) -> dict:
    config = CorpusConfig(cfg.mesh_sizes, cfg.rates, cfg.months, cfg.dt_months, cfg.seed)
    manifest = build_corpus(config, out, workers=_threads())
    return {"samples": manifest.num_samples, "fingerprint": manifest.fingerprint}


def cmd_train(cfg: RunConfig, out: Path, data: Path) -> dict:
    manifest, samples = _corpus_samples(data)
    train_set, val_set, _ = split_dataset(samples)
    model = build_model(cfg.arch, cfg.seed, manifest.normalization())

    def progress(epoch, tr, va):
        log.info("epoch %d train %.4e val %.4e", epoch, tr, va)
    result = train(model, train_set, val_set, cfg.epochs, cfg.lr, cfg.seed, progress)
    extra = {"epochs": cfg.epochs, "lr": cfg.lr, "dataset_fingerprint": manifest.fingerprint,
             "best_epoch": result.best_epoch, "best_val_mse": repr(result.best_val)}
    save_model(model, out, extra)
    write_table(out / "loss.txt", ["epoch", "train_mse", "val_mse"],
                [(k, a, b) for k, (a, b) in enumerate(zip(result.train_loss, result.val_loss))])
    return extra | {"seconds": f"{result.seconds:.1f}"}


def _model_or_fresh(model_dir: Path | None, cfg: RunConfig, manifest):
    if model_dir is not None:
        return load_model(model_dir), str(model_dir)
    return build_model(cfg.arch, cfg.seed, manifest.normalization()), "untrained (timing only)"


def cmd_eval(cfg: RunConfig, out: Path, data: Path, model_dir: Path) -> dict:
    manifest, samples = _corpus_samples(data)
    model = load_model(model_dir)
    _, _, test = split_dataset(samples)
    preds = predict_many(model, test)
    rows = evaluate_predictions(model.architecture, test, preds)
    out.mkdir(parents=True, exist_ok=True)
    write_table(out / "metrics.txt", ["architecture", "m0", "rate", "variable", "rmse", "pearson_r", "yearly_rmse"],
                [dataclasses.astuple(r) for r in rows])
    agg = aggregate(rows, TEST_RATES)
    write_table(out / "summary.txt", ["architecture", "m0", "variable", "mean_rmse", "mean_r"],
                [(a, m0, var, e, r) for (a, m0, var), (e, r) in sorted(agg.items())])
    # time-mean thickness maps for each test rate: truth, prediction and difference
    for rate in sorted({s.meta.rate for s in test}):
        idx = [k for k, s in enumerate(test) if s.meta.rate == rate]
        mesh = test[idx[0]].mesh
        box = mesh.bounding_box
        h = max(box.width, box.height) / 128
        nx, ny = int(round(box.width / h)) + 1, int(round(box.height / h)) + 1
        truth = np.stack([test[k].targets[:, 2] for k in idx])
        pred = np.stack([preds[k][:, 2] for k in idx])
        for name, series in (("truth", truth), ("pred", pred), ("diff", pred - truth)):
            write_grid(out / f"map_H_r{rate:g}_{name}.txt", render_map(mesh, series, (box.xmin, box.ymin), h, nx, ny))
    return {"model": str(model_dir), "dataset_fingerprint": manifest.fingerprint, "rows": len(rows)}


def cmd_sweep(cfg: RunConfig, out: Path, data: Path, model_dir: Path | None) -> dict:
    manifest = load_manifest(data)
    months = manifest.config.months
    sample_months = sorted({min(months, max(1, int(round(y * 12)))) for y in cfg.sample_years})
    rows = []
    for entry_m0 in manifest.config.mesh_sizes:
        entry = next(e for e in manifest.entries if e.m0 == entry_m0)
        mesh, topo = manifest.mesh(entry)
        _, initial = prepare_glacier(entry_m0, manifest.config.domain, seed=manifest.config.seed)
        rows += instructor_sweep(mesh, initial, cfg.rates, months, sample_months)
        if model_dir is not None:
            rows += emulator_sweep(load_model(model_dir), mesh, topo, cfg.rates, sample_months, entry_m0)
    out.mkdir(parents=True, exist_ok=True)
    write_table(out / "sweep.txt", ["engine", "rate", "month", "volume_km3", "mean_speed"],
                [dataclasses.astuple(r) for r in rows])
    return {"rows": len(rows), "sample_months": " ".join(map(str, sample_months))}


def cmd_bench(cfg: RunConfig, out: Path, data: Path, model_dir: Path | None) -> dict:
    manifest = load_manifest(data)
    model, label = _model_or_fresh(model_dir, cfg, manifest)
    rates = manifest.config.rates
    rows = []
    for m0 in manifest.config.mesh_sizes:
        rows.append(benchmark_sweep(model, manifest, m0, cfg.repeats, cfg.warmup))
        log.info("m0 %g: instructor %.2f s, %s %.3f s", m0, rows[-1].instructor_seconds, model.architecture,
                 rows[-1].emulator_seconds)
    out.mkdir(parents=True, exist_ok=True)
    write_table(out / "timing.txt", BenchmarkRow.header, [r.as_row() for r in rows])
    return {"model": label, "rates": len(rates), "months": manifest.config.months, "repeats": cfg.repeats}


def benchmark_sweep(model, manifest, m0: float, repeats: int = 3, warmup: int = 1) -> BenchmarkRow:
    """Median time of the instructor and of emulator inference over every (rate, month) of a corpus mesh."""
    entry = next(e for e in manifest.entries if e.m0 == m0)
    mesh, topo = manifest.mesh(entry)
    c = manifest.config
    _, initial = prepare_glacier(m0, c.domain, seed=c.seed)

    def instructor():
        for r in c.rates:
            run_transient(c.scenario(r, m0), initial, mesh)
    samples = sweep_samples(mesh, topo, c.rates, [manifest.month_index(k) for k in range(manifest.steps_per_run)], m0)
    t_inst = median_time(instructor, repeats, warmup)
    t_emu = median_time(lambda: predict_many(model, samples), repeats, warmup)
    return BenchmarkRow(m0, mesh.num_nodes, model.architecture, t_inst, t_emu)


# -- argument parsing ---------------------------------------------------------

_FLAG_KEYS = {
    "m0": "m0", "melt": "melt", "years": "years", "dt_months": "dt_months", "mesh_sizes": "mesh_sizes",
    "rates": "rates", "months": "months", "arch": "arch", "epochs": "epochs", "lr": "lr", "seed": "seed",
    "repeats": "repeats", "warmup": "warmup", "sample_years": "sample_years",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="icegraph", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"icegraph {__version__}")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, *, data=False, model=False):
        p.add_argument("--config", type=Path, help="key = value file; flags override it")
        p.add_argument("--out", type=Path, required=True, help="output directory")
        p.add_argument("--seed", type=int)
        if data:
            p.add_argument("--data", type=Path, required=True, help="corpus directory")
        if model:
            p.add_argument("--model", type=Path, help="trained model directory")
        return p

    p = common(sub.add_parser("simulate", help="run one transient instructor simulation"))
    p.add_argument("--m0", type=float)
    p.add_argument("--melt", type=float)
    p.add_argument("--years", type=float)
    p.add_argument("--dt-months", dest="dt_months", type=int)

    p = common(sub.add_parser("dataset", help="build a training corpus from instructor sweeps"))
    p.add_argument("--mesh-sizes", dest="mesh_sizes")
    p.add_argument("--rates")
    p.add_argument("--months", type=int)
    p.add_argument("--dt-months", dest="dt_months", type=int)

    p = common(sub.add_parser("train", help="train an emulator on a corpus"), data=True)
    p.add_argument("--arch", choices=ARCHITECTURES)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)

    common(sub.add_parser("eval", help="fidelity metrics and maps on the test rates"), data=True).add_argument(
        "--model", type=Path, required=True)

    p = common(sub.add_parser("sweep", help="melt-rate sensitivity of volume and mean speed"), data=True, model=True)
    p.add_argument("--rates")
    p.add_argument("--sample-years", dest="sample_years")

    p = common(sub.add_parser("bench", help="wall-clock instructor vs emulator over a full sweep"), data=True, model=True)
    p.add_argument("--arch", choices=ARCHITECTURES)
    p.add_argument("--repeats", type=int)
    p.add_argument("--warmup", type=int)
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "config", None) is not None:
        cfg = RunConfig.parse(args.config.read_text(), cfg)
    overrides = {}
    for flag, key in _FLAG_KEYS.items():
        v = getattr(args, flag, None)
        if v is not None:
            overrides[key] = v if isinstance(v, str) else repr(v) if isinstance(v, float) else str(v)
    return cfg.updated(overrides)


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=getattr(logging, args.log_level), format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        out = args.out
        if args.command == "simulate":
            info = cmd_simulate(cfg, out)
        elif args.command == "dataset":
            info = cmd_dataset(cfg, out)
        elif args.command == "train":
            info = cmd_train(cfg, out, args.data)
        elif args.command == "eval":
            info = cmd_eval(cfg, out, args.data, args.model)
        elif args.command == "sweep":
            info = cmd_sweep(cfg, out, args.data, args.model)
        else:
            info = cmd_bench(cfg, out, args.data, args.model)
        _write_manifest(out, args.command, argv, cfg, info)
    except (SimulationError, TrainingError, ConvergenceError, FloatingPointError, np.linalg.LinAlgError) as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERICAL
    except (CorpusError, OSError) as exc:
        log.error("I/O failure: %s", exc)
        return EXIT_IO
    except (ValueError, ShapeError, MeshError, KeyError) as exc:
        log.error("invalid input: %s", exc)
        return EXIT_INVALID
    return EXIT_OK


def read_run_manifest(path: str | Path) -> RunConfig:
    """Configuration recorded by a previous run (comment lines are metadata)."""
    return RunConfig.parse(Path(path).read_text())


__all__ = ["RunConfig", "main", "build_parser", "resolve_config", "read_run_manifest", "benchmark_sweep"]


if __name__ == "__main__":
    sys.exit(main())
