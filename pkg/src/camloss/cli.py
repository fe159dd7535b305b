"""Command-line entry point: ``camloss {train,distill,eval,export-maps,gen-data}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint
from . import data as D
from . import export
from . import losses as L
from . import network as N
from . import tensor as T
from . import trainer as TR
from .config import TEST_SEED_OFFSET, ConfigError, RunConfig, parse_config

log = logging.getLogger("camloss")


def load_datasets(cfg: RunConfig) -> tuple[D.Dataset, D.Dataset]:
    kind = cfg["data.kind"]
    if kind == "shapes":
        common = dict(class_count=cfg["data.classes"], image_size=cfg["data.size"],
                      clutter=cfg["data.clutter"])
        train = D.gen_shapes(cfg["data.train_count"], seed=cfg["data.seed"], **common)
        test = D.gen_shapes(cfg["data.test_count"], seed=cfg["data.seed"] + TEST_SEED_OFFSET, **common)
        return train, test
    if kind == "cifar10":
        return D.load_cifar10(cfg["data.path"], "train"), D.load_cifar10(cfg["data.path"], "test")
    return D.load_dataset(cfg["data.path"]), D.load_dataset(cfg["data.test_path"])


def validate_paths(cfg: RunConfig, command: str) -> None:
    """Fail before any work if a referenced input is missing."""
    needed = []
    if cfg["data.kind"] == "cifar10":
        cfg.require("data.path")
        needed += [Path(cfg["data.path"]) / f for f in D.CIFAR_TRAIN_FILES + D.CIFAR_TEST_FILES]
    elif cfg["data.kind"] == "cache":
        cfg.require("data.path", "data.test_path")
        needed += [Path(cfg["data.path"]), Path(cfg["data.test_path"])]
    if command == "distill":
        cfg.require("distill.teacher")
        needed.append(Path(cfg["distill.teacher"]))
    if command in ("eval", "export-maps"):
        cfg.require("checkpoint")
        needed.append(Path(cfg["checkpoint"]))
    for path in needed:
        if not path.exists():
            raise FileNotFoundError(f"referenced path does not exist: {path}")


def _prepare_out(cfg: RunConfig) -> Path:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.dump())
    return out


def _tracking_callback(out: Path):
    best = {"acc": -1.0}

    def on_epoch(m: TR.EpochMetrics, net: N.Network) -> None:
        if m.test_acc > best["acc"]:
            best["acc"] = m.test_acc
            N.save(net, out / "best.camc")

    return on_epoch


def cmd_train(cfg: RunConfig) -> int:
    validate_paths(cfg, "train")
    out = _prepare_out(cfg)
    train_set, test_set = load_datasets(cfg)
    channels, size = train_set.images.shape[1], train_set.images.shape[-1]
    net = N.build(cfg.network_config(train_set.class_count, channels, size), cfg["seed"])
    net, history = TR.train(net, train_set, test_set, cfg.train_config(), _tracking_callback(out))
    export.write_metrics(history, out / "metrics.csv")
    N.save(net, out / "final.camc")
    return 0


def cmd_distill(cfg: RunConfig) -> int:
    validate_paths(cfg, "distill")
    out = _prepare_out(cfg)
    train_set, test_set = load_datasets(cfg)
    teacher = N.load(cfg["distill.teacher"])
    channels, size = train_set.images.shape[1], train_set.images.shape[-1]
    student = N.build(cfg.network_config(train_set.class_count, channels, size), cfg["seed"])
    student, history = TR.distill_train(
        teacher, student, train_set, test_set, cfg.train_config(), cfg.distill_config(),
        _tracking_callback(out),
    )
    export.write_metrics(history, out / "metrics.csv")
    N.save(student, out / "final.camc")
    return 0


def cmd_eval(cfg: RunConfig) -> int:
    validate_paths(cfg, "eval")
    out = _prepare_out(cfg)
    _, test_set = load_datasets(cfg)
    net = N.load(cfg["checkpoint"])
    result = TR.evaluate(net, test_set)
    text = json.dumps(result, indent=2, sort_keys=True)
    (out / "eval.json").write_text(text + "\n")
    print(text)
    return 0


def export_maps(net: N.Network, ds: D.Dataset, indices, out_dir) -> list[Path]:
    """Write normalised CAAM, target-class CAM and |CAAM' - CAM'| for each sample as PGM."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    indices = [int(i) for i in indices]
    for i in indices:
        if not 0 <= i < len(ds):
            raise IndexError(f"sample index {i} out of range for {len(ds)} samples")
    written = []
    with T.no_tape():
        out = N.forward(net, ds.images[indices])
        caam, cam = L.cam_maps(out.features, net.head, ds.labels[indices])
    for row, i in enumerate(indices):
        diff = np.abs(caam.data[row] - cam.data[row])
        for tag, values in (("caam", caam.data[row]), ("cam", cam.data[row]), ("diff", diff)):
            path = out_dir / f"{i}_{tag}.pgm"
            export.write_pgm(path, values)
            written.append(path)
    return written


def cmd_export_maps(cfg: RunConfig) -> int:
    validate_paths(cfg, "export-maps")
    out = _prepare_out(cfg)
    _, test_set = load_datasets(cfg)
    net = N.load(cfg["checkpoint"])
    indices = [int(tok) for tok in cfg["export.indices"].split(",") if tok.strip()]
    export_maps(net, test_set, indices, out / "maps")
    return 0


def cmd_gen_data(cfg: RunConfig) -> int:
    if cfg["data.kind"] != "shapes":
        raise ConfigError("gen-data only generates the synthetic shapes dataset (data.kind = shapes)")
    out = _prepare_out(cfg)
    train_set, test_set = load_datasets(cfg)
    D.save_dataset(out / "train.camc", train_set)
    D.save_dataset(out / "test.camc", test_set)
    return 0


COMMANDS = {
    "train": cmd_train,
    "distill": cmd_distill,
    "eval": cmd_eval,
    "export-maps": cmd_export_maps,
    "gen-data": cmd_gen_data,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="camloss", description=__doc__)
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="key = value configuration file")
    parser.add_argument("--seed", type=int, help="overrides the 'seed' key")
    parser.add_argument("--out", help="run directory (overrides the 'out' key)")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key; repeatable")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    overrides = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            print(f"error: --set expects KEY=VALUE, got {item!r}", file=sys.stderr)
            return 2
        overrides[key.strip()] = value.strip()
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if args.out is not None:
        overrides["out"] = args.out
    try:
        cfg = parse_config(args.config, overrides)
        return COMMANDS[args.command](cfg)
    except (ConfigError, FileNotFoundError, IndexError, checkpoint.CheckpointError,
            D.CifarFormatError, TR.TrainingDiverged, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
