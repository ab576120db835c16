"""Command line entry point: ``fogfusion {generate,entropy,train,eval,ablate}``."""

from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from pathlib import Path

import numpy as np

from . import pipeline as P
from .config import ConfigError, RunConfig, load_config, validate
from .dataset import DatasetFormatError, DatasetReader, InsufficientDataError, SplitManifest, make_split, write_dataset
from .encoding import STREAMS
from .fusion import ALL_MODES, FusionMode

log = logging.getLogger("fogfusion")

EXIT_OK, EXIT_CONFIG, EXIT_DATA = 0, 2, 3
MANIFEST_FILE = "split.json"


class DataError(RuntimeError):
    pass


def _write_config(cfg: RunConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(f"# config_digest={cfg.digest()}\n" + cfg.dumps())


def _dataset_dir(cfg: RunConfig, out: Path) -> Path:
    return Path(cfg.data.dataset) if cfg.data.dataset else out / "dataset"


def _load_split(cfg: RunConfig, out: Path) -> tuple[DatasetReader, SplitManifest]:
    d = _dataset_dir(cfg, out)
    if not (d / "frames.fgd").exists():
        raise DataError(f"no dataset at {d}; run 'generate' first or set data.dataset")
    reader = DatasetReader(d)
    mf = d / MANIFEST_FILE
    if mf.exists():
        manifest = SplitManifest.from_json(mf.read_text())
    else:
        manifest = make_split(list(reader), {"train": 1.0, "test": 0.0}, cfg.seed)
    return reader, manifest


def _test_sets(cfg: RunConfig, reader: DatasetReader, manifest: SplitManifest) -> dict:
    calib = P.calibration_for(cfg)
    strata = manifest.strata.get("test", {})
    missing = [k for k in P.TEST_SPLITS if not strata.get(k)]
    if missing:
        raise DataError(f"test split has no frames of kind(s) {missing}")
    return {k: P.prepare_records((reader[i] for i in strata[k]), calib, cfg) for k in P.TEST_SPLITS}


# ---------------------------------------------------------------------------
# commands


def cmd_generate(cfg: RunConfig, out: Path) -> int:
    d = _dataset_dir(cfg, out)
    _write_config(cfg, out)
    records = list(P.iter_records(cfg))
    write_dataset(records, d, cfg.digest())
    manifest = P.designed_split(records, cfg.seed)
    (d / MANIFEST_FILE).write_text(manifest.to_json())
    log.info("wrote %d frames to %s", len(records), d)
    return EXIT_OK


def cmd_entropy(cfg: RunConfig, out: Path) -> int:
    _write_config(cfg, out)
    maps_dir = out / "entropy_maps"

    def write_map(name, stream, grid):
        maps_dir.mkdir(parents=True, exist_ok=True)
        img = np.clip(np.rint(np.asarray(grid) / 8.0 * 255), 0, 255).astype(np.uint8)
        h, w = img.shape
        (maps_dir / f"{name}.pgm").write_bytes(f"P5\n{w} {h}\n255\n".encode() + img.tobytes())

    rows = P.entropy_sweep(cfg, map_writer=write_map if cfg.entropy.write_maps else None)
    buf = io.StringIO()
    buf.write(f"# config_digest={cfg.digest()}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["condition", "stream", "mean_entropy", "normalized_entropy"])
    for r in rows:
        for s in STREAMS:
            w.writerow([r["condition"], s, f"{r['mean'][s]:.6f}", f"{r[s]:.6f}"])
    (out / "entropy.csv").write_text(buf.getvalue())
    return EXIT_OK


def _train_set(cfg: RunConfig, out: Path):
    reader, manifest = _load_split(cfg, out)
    ids = manifest.splits.get("train", [])
    if not ids:
        raise DataError("training split is empty")
    return reader, manifest, P.prepare_records((reader[i] for i in ids), P.calibration_for(cfg), cfg)


def cmd_train(cfg: RunConfig, out: Path) -> int:
    mode = FusionMode.parse(cfg.model.mode)
    _write_config(cfg, out)
    _, _, train = _train_set(cfg, out)
    rows: list = []
    P.train_model(mode, train, cfg, out / mode.name, rows, log.info)
    P.write_loss_log(rows, out / mode.name / "loss_log.csv", cfg.digest())
    return EXIT_OK


def cmd_eval(cfg: RunConfig, out: Path) -> int:
    mode = FusionMode.parse(cfg.model.mode)
    ckpt = Path(cfg.train.checkpoint) if cfg.train.checkpoint else out / mode.name / f"{mode.name}_epoch{cfg.train.epochs}.ckpt"
    if not ckpt.exists():
        raise DataError(f"checkpoint {ckpt} not found; run 'train' first or set train.checkpoint")
    net, _ = P.load_model(ckpt)
    reader, manifest = _load_split(cfg, out)
    tests = _test_sets(cfg, reader, manifest)
    report = P.evaluate({mode.name: net}, tests, cfg)
    _write_config(cfg, out)
    (out / f"eval_{mode.name}.csv").write_text(report.to_csv())
    print(report.to_csv(), end="")
    return EXIT_OK


def cmd_ablate(cfg: RunConfig, out: Path) -> int:
    _write_config(cfg, out)
    reader, manifest, train = _train_set(cfg, out)
    tests = _test_sets(cfg, reader, manifest)
    report = P.run_ablation(cfg, ALL_MODES, out, log.info, sets=(train, tests))
    (out / "ablation.csv").write_text(report.to_csv())
    print(report.to_csv(), end="")
    return EXIT_OK


COMMANDS = {"generate": cmd_generate, "entropy": cmd_entropy, "train": cmd_train, "eval": cmd_eval,
            "ablate": cmd_ablate}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fogfusion", description="Entropy-steered multimodal fusion detector")
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", metavar="PATH", help="key = value config file")
    ap.add_argument("--seed", type=int, help="override run.seed")
    ap.add_argument("--out", metavar="DIR", help="output directory (overrides run.out)")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = load_config(args.config) if args.config else RunConfig()
        if args.seed is not None:
            cfg = cfg.with_overrides(run={"seed": args.seed})
        if args.out is not None:
            cfg = cfg.with_overrides(run={"out": args.out})
        validate(cfg)
        FusionMode.parse(cfg.model.mode)
    except (ConfigError, ValueError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(cfg.run.out)
    try:
        return COMMANDS[args.command](cfg, out)
    except (DataError, DatasetFormatError, InsufficientDataError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
