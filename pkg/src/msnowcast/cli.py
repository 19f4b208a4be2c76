"""Command-line experiment harness.

Every command takes an experiment config (``--config``, flat key=value),
``--set key=value`` overrides and ``--variant``, and writes into a single
output directory that starts with a ``config.txt`` snapshot::

    msnowcast gen-data --out data/
    msnowcast train    --data data/ --out run/ --variant hrrr_lv
    msnowcast predict  --data data/ --run run/ --out fc/
    msnowcast baseline --data data/ --method persistence --out pers/
    msnowcast evaluate --forecasts fc/ --out eval/
    msnowcast render   --forecasts fc/ --index 0 --out img/

A forecast directory holds ``fcst_NNNN.nwrs`` / ``truth_NNNN.nwrs`` pairs
whose minute offsets are the lead times.
"""

from __future__ import annotations

import argparse
import logging
import shutil
import sys
from pathlib import Path

import numpy as np

from .autodiff import ConfigurationError, Tensor
from .baselines import optical_flow_forecast, persistence_forecast
from .config import ConfigError, ExperimentConfig, load_kv, toy_experiment
from .data import (
    DATA_RANGE,
    RadarSequence,
    gen_synthetic_sequence,
    read_sequence,
    window_dataset,
    write_sequence,
)
from .fileformat import FormatError, load_checkpoint, read_sequence_file, write_sequence_file
from .metrics import evaluate_run
from .model import center_crop, init_params, param_manifest
from .training import TrainingError, predict, train_loop

log = logging.getLogger("msnowcast")

COMMANDS = ("gen-data", "train", "predict", "evaluate", "baseline", "render")


class CLIError(RuntimeError):
    pass


# ---------------------------------------------------------------- config


def _parse_sets(items: list[str]) -> dict[str, str]:
    out = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def resolve_config(args) -> ExperimentConfig:
    kv = load_kv(args.config) if args.config else {}
    kv.update(_parse_sets(args.set))
    if args.variant:
        kv["variant"] = args.variant
    if args.preset == "toy":
        return toy_experiment(**kv)
    return ExperimentConfig.from_kv(kv)


# ---------------------------------------------------------------- io helpers


def _seq_paths(directory: Path, prefix: str) -> list[Path]:
    paths = sorted(directory.glob(f"{prefix}_*.nwrs"))
    if not paths:
        raise CLIError(f"no {prefix}_*.nwrs files in {directory}")
    return paths


def _windows(cfg: ExperimentConfig, data_dir: Path, split: str):
    windows = []
    for p in _seq_paths(data_dir / split, "seq"):
        windows.extend(window_dataset(read_sequence(p), cfg.windows))
    if not windows:
        raise CLIError(f"sequences in {data_dir / split} are too short for t_in={cfg.model.t_in}, t_out={cfg.model.t_out}")
    return windows


def _tile(arr: np.ndarray, cfg: ExperimentConfig) -> np.ndarray:
    """Cut full-domain rasters to the verification tile."""
    side = arr.shape[-1]
    if side == cfg.model.target_size:
        return arr
    if side == cfg.model.lv_factor * cfg.model.target_size:
        return center_crop(arr, cfg.model.lv_factor)
    raise CLIError(f"raster side {side} fits neither the tile nor the large viewport")


def _write_forecasts(out: Path, forecasts, windows, cfg: ExperimentConfig, cell_km: float) -> None:
    for i, (fc, w) in enumerate(zip(forecasts, windows)):
        leads = w.lead_minutes
        write_sequence_file(out / f"fcst_{i:04d}.nwrs", np.asarray(fc, dtype=np.float32), leads, cell_km)
        write_sequence_file(out / f"truth_{i:04d}.nwrs", _tile(w.targets, cfg), leads, cell_km)


def _cell_km(data_dir: Path) -> float:
    return read_sequence_file(_seq_paths(data_dir / "test", "seq")[0])[2]


def to_gray(frame_dbz: np.ndarray) -> np.ndarray:
    """dBZ [0, 70] -> 8-bit gray by floor(dbz / 70 * 255), clamped."""
    g = np.floor(np.asarray(frame_dbz, dtype=np.float64) / DATA_RANGE * 255.0)
    return np.clip(g, 0, 255).astype(np.uint8)


def write_pgm(path, frame_dbz: np.ndarray) -> None:
    gray = to_gray(frame_dbz)
    h, w = gray.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + gray.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5" or len(parts) < 4:
        raise FormatError("not a binary PGM", 0)
    w, h = (int(t) for t in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8, count=w * h).reshape(h, w)


# ---------------------------------------------------------------- commands


def cmd_gen_data(args, cfg: ExperimentConfig, out: Path) -> None:
    from dataclasses import replace

    for split, n, offset in (("train", cfg.n_train_sequences, 0), ("test", cfg.n_test_sequences, 10_000)):
        (out / split).mkdir()
        for i in range(n):
            scfg = replace(cfg.synthetic, seed=cfg.seed * 100_003 + offset + i)
            write_sequence(out / split / f"seq_{i:04d}.nwrs", gen_synthetic_sequence(scfg))


def cmd_train(args, cfg: ExperimentConfig, out: Path) -> None:
    windows = _windows(cfg, Path(args.data), "train")
    res = train_loop(cfg.model, windows, cfg.train, out_dir=out)
    first = res.smoothed_losses[0] if res.smoothed_losses else float("nan")
    last = res.smoothed_losses[-1] if res.smoothed_losses else float("nan")
    print(f"trained {len(res.raw_losses)} steps on {len(windows)} windows, smoothed loss {first:.5f} -> {last:.5f}")


def _load_params(run: Path, cfg: ExperimentConfig):
    path = run / f"{cfg.checkpoint}.msnc"
    if not path.exists() and cfg.checkpoint == "swa":
        path = run / "final.msnc"
    arrays = load_checkpoint(path)
    manifest = param_manifest(cfg.model)
    if set(arrays) != set(manifest):
        missing = sorted(set(manifest) - set(arrays))[:3]
        extra = sorted(set(arrays) - set(manifest))[:3]
        raise CLIError(f"checkpoint {path} does not match variant {cfg.variant} (missing {missing}, extra {extra})")
    for k, shape in manifest.items():
        if arrays[k].shape != tuple(shape):
            raise CLIError(f"checkpoint tensor {k} has shape {arrays[k].shape}, expected {tuple(shape)}")
    return {k: Tensor(arrays[k], name=k) for k in manifest}


def cmd_predict(args, cfg: ExperimentConfig, out: Path) -> None:
    data = Path(args.data)
    windows = _windows(cfg, data, "test")
    params = _load_params(Path(args.run), cfg)
    fc = predict(params, cfg.model, windows, batch_size=cfg.train.batch_size)
    _write_forecasts(out, fc, windows, cfg, _cell_km(data))


def cmd_baseline(args, cfg: ExperimentConfig, out: Path) -> None:
    data = Path(args.data)
    windows = _windows(cfg, data, "test")
    t_out = cfg.model.t_out
    ratio = cfg.windows.out_cadence_min / cfg.windows.in_cadence_min
    fcs = []
    for w in windows:
        if args.method == "persistence":
            fc = persistence_forecast(_tile(w.inputs[-1], cfg), t_out)
        else:
            # flow runs on the whole raster so motion from outside the tile is seen
            fc = _tile(optical_flow_forecast(w.inputs, t_out, cadence_ratio=ratio), cfg)
        fcs.append(fc)
    _write_forecasts(out, fcs, windows, cfg, _cell_km(data))


def _read_pairs(fdir: Path):
    fc_paths = _seq_paths(fdir, "fcst")
    leads = None
    fcs, truths = [], []
    for p in fc_paths:
        tp = fdir / p.name.replace("fcst_", "truth_")
        f, lf, _ = read_sequence_file(p)
        t, lt, _ = read_sequence_file(tp)
        if f.shape != t.shape or not np.array_equal(lf, lt):
            raise CLIError(f"{p.name} and {tp.name} disagree in shape or lead grid")
        if leads is None:
            leads = lf
        elif not np.array_equal(leads, lf):
            raise CLIError(f"{p.name} has a different lead grid")
        fcs.append(f)
        truths.append(t)
    return fcs, truths, leads


def cmd_evaluate(args, cfg: ExperimentConfig, out: Path) -> None:
    fcs, truths, leads = _read_pairs(Path(args.forecasts))
    report = evaluate_run(fcs, truths, leads)
    report.to_csv(out / "report.csv")
    agg = report.aggregates["agg_0_6h"]
    print(f"evaluated {len(fcs)} forecasts: MAE {agg['mae']:.4f} dBZ, F1@23 {agg['f1_23']:.4f}")


def cmd_render(args, cfg: ExperimentConfig, out: Path) -> None:
    fdir = Path(args.forecasts)
    rows = {}
    for row, prefix in (("truth", "truth"), ("pred", "fcst")):
        path = fdir / f"{prefix}_{args.index:04d}.nwrs"
        if not path.exists():
            raise CLIError(f"missing {path}")
        rows[row] = read_sequence_file(path)
    render_rows(rows, out)


def render_rows(rows: dict[str, tuple], out: Path) -> list[Path]:
    """Write ``<row>_<lead_min>.pgm`` for each row of (frames, leads[, ...]) sequences."""
    ref = None
    written = []
    for name, (frames, leads, *_) in rows.items():
        if ref is None:
            ref = (frames.shape, tuple(leads))
        elif (frames.shape, tuple(leads)) != ref:
            raise CLIError(f"row {name} differs in shape or lead grid from the first row")
        for frame, lead in zip(frames, leads):
            p = out / f"{name}_{int(lead)}.pgm"
            write_pgm(p, frame)
            written.append(p)
    return written


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "baseline": cmd_baseline,
    "render": cmd_render,
}


# ---------------------------------------------------------------- entry


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value experiment config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    common.add_argument("--variant", choices=("base", "hrrr", "lv", "hrrr_lv"))
    common.add_argument("--preset", choices=("toy", "paper"), default="toy", help="defaults the config file builds on")
    common.add_argument("--out", required=True, help="output directory (must not exist)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="msnowcast", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="write synthetic train/test sequences")
    p = sub.add_parser("train", parents=[common], help="train a model variant")
    p.add_argument("--data", required=True)
    p = sub.add_parser("predict", parents=[common], help="forecast the test windows")
    p.add_argument("--data", required=True)
    p.add_argument("--run", required=True, help="training output directory")
    p = sub.add_parser("baseline", parents=[common], help="persistence or optical-flow forecasts")
    p.add_argument("--data", required=True)
    p.add_argument("--method", choices=("persistence", "optical_flow"), required=True)
    p = sub.add_parser("evaluate", parents=[common], help="score a forecast directory")
    p.add_argument("--forecasts", required=True)
    p = sub.add_parser("render", parents=[common], help="PGM images of truth and forecast")
    p.add_argument("--forecasts", required=True)
    p.add_argument("--index", type=int, default=0)
    return parser


def run(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    out = Path(args.out)
    created = False
    try:
        cfg = resolve_config(args)
        if out.exists():
            raise CLIError(f"output directory {out} already exists")
        out.mkdir(parents=True)
        created = True
        cfg.dump(out / "config.txt")
        HANDLERS[args.command](args, cfg, out)
    except (CLIError, ConfigError, ConfigurationError, FormatError, TrainingError, ValueError, OSError) as exc:
        if created:
            shutil.rmtree(out, ignore_errors=True)
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"msnowcast {args.command}: error: {msg}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
