"""``fedcache partition|run|sweep|report`` command-line front end.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import federation
from .errors import FedCacheError, InvalidArgument
from .federation import ExperimentConfig
from .metrics import comparison_table, read_csv_report

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2

log = logging.getLogger("fedcache")


class UsageError(Exception):
    pass


@dataclass
class RunManifest:
    config_path: str
    output_dir: str
    run_id: str
    started_at: str
    finished_at: str = ""

    def write(self, path: Path) -> None:
        path.write_text(json.dumps(self.__dict__, indent=2, sort_keys=True) + "\n")


def run_id(config: ExperimentConfig) -> str:
    """Stable id: hash of the canonical key=value serialisation (which includes the seed)."""
    return hashlib.sha256(config.to_kv().encode()).hexdigest()[:12]


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


def _parse_kv_pairs(pairs: list[str] | None) -> dict[str, str]:
    out = {}
    for item in pairs or []:
        if "=" not in item:
            raise UsageError(f"expected KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip().replace("-", "_")] = v.strip()
    return out


def _parse_list(text: str, cast=float) -> list:
    try:
        values = [cast(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"bad value list {text!r}") from None
    if not values:
        raise UsageError("value list is empty")
    return values


_OVERRIDE_FLAGS = ("algorithm", "K", "R", "beta", "temperature", "lr", "batch_size", "rounds",
                   "alpha", "seed", "models", "schedule", "async_seed")


def load_config(args) -> ExperimentConfig:
    """Defaults < FEDCACHE_SEED < config file < command-line flags."""
    raw: dict[str, str] = {}
    if "FEDCACHE_SEED" in os.environ:
        raw["seed"] = os.environ["FEDCACHE_SEED"]
    if getattr(args, "config", None):
        try:
            text = Path(args.config).read_text()
        except OSError as exc:
            raise UsageError(f"cannot read config: {exc}") from None
        raw.update(federation.parse_kv(text))
    for name in _OVERRIDE_FLAGS:
        value = getattr(args, name, None)
        if value is not None:
            raw[name] = str(value)
    raw.update(_parse_kv_pairs(getattr(args, "set", None)))
    return ExperimentConfig.from_mapping(raw)


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value experiment file")
    p.add_argument("--algorithm", choices=("fedcache", "fd", "standalone"))
    p.add_argument("--K", type=int)
    p.add_argument("--R", type=int)
    p.add_argument("--beta", type=float)
    p.add_argument("--temperature", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--rounds", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--models")
    p.add_argument("--schedule", choices=("sync", "async"))
    p.add_argument("--async-seed", dest="async_seed", type=int)
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedcache", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("partition", help="partition a dataset into client shards")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--synth", nargs="+", metavar="KEY=VALUE",
                     help="synthetic Gaussian data: C=, per-class=, dim=, sep=")
    src.add_argument("--idx-images")
    p.add_argument("--idx-labels")
    p.add_argument("--K", type=int, required=True)
    p.add_argument("--alpha", type=float, required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--test-fraction", type=float, default=0.2)
    p.add_argument("--out", required=True)

    p = sub.add_parser("run", help="run one experiment and write metrics CSV")
    _add_run_flags(p)
    p.add_argument("--out", required=True)

    p = sub.add_parser("sweep", help="run one arm per value of a config key")
    _add_run_flags(p)
    p.add_argument("--axis", required=True)
    p.add_argument("--values", required=True, help="comma-separated")
    p.add_argument("--algorithms", default="fedcache,fd")
    p.add_argument("--seeds", default=None, help="comma-separated seeds (default: config seed)")
    p.add_argument("--out", required=True)

    p = sub.add_parser("report", help="comparison table from metrics CSVs")
    p.add_argument("inputs", nargs="+", metavar="NAME=CSV")
    p.add_argument("--target", type=float, required=True, help="average UA for acc@ bytes")
    p.add_argument("--out")
    return parser


def _synth_params(pairs: list[str], seed: int) -> data_mod.LabeledDataset:
    kv = _parse_kv_pairs(pairs)
    aliases = {"C": "C", "classes": "C", "per_class": "per_class", "dim": "dim", "sep": "sep", "class_sep": "sep"}
    vals = {"C": "10", "per_class": "100", "dim": "64", "sep": "3.0"}
    for k, v in kv.items():
        if k not in aliases:
            raise UsageError(f"unknown --synth key {k!r}")
        vals[aliases[k]] = v
    try:
        return data_mod.synth_gaussian(int(vals["C"]), int(vals["per_class"]), int(vals["dim"]), float(vals["sep"]), seed)
    except ValueError:
        raise UsageError(f"bad --synth values {kv}") from None


def cmd_partition(args) -> int:
    seed = args.seed if args.seed is not None else federation.default_seed()
    if args.synth:
        dataset = _synth_params(args.synth, seed)
    else:
        if not args.idx_labels:
            raise UsageError("--idx-images needs --idx-labels")
        try:
            dataset = data_mod.load_idx(args.idx_images, args.idx_labels)
        except OSError as exc:
            raise UsageError(f"cannot read IDX input: {exc}") from None
    shards = data_mod.make_shards(dataset, args.K, args.alpha, seed, args.test_fraction)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for shard in shards:
        (out / f"client_{shard.client_id:04d}.manifest").write_text(
            "client_id, n_train, n_test, per_class_counts\n" + data_mod.manifest_line(shard) + "\n"
        )
    with open(out / "partition.txt", "w") as fh:
        fh.write(f"# K={args.K} alpha={args.alpha!r} seed={seed} n={len(dataset)} test_fraction={args.test_fraction!r}\n")
        for shard in shards:
            tr = ",".join(str(int(i)) for i in shard.train_idx)
            te = ",".join(str(int(i)) for i in shard.test_idx)
            fh.write(f"{shard.client_id}\t{tr}\t{te}\n")
    tv = data_mod.label_tv_distance([np.concatenate([s.train.labels, s.test.labels]) for s in shards], dataset.num_classes)
    print(f"wrote {len(shards)} shard manifests to {out} (mean label TV distance {tv:.4f})")
    return EXIT_OK


def _run_one(config: ExperimentConfig, out: Path, config_path: str = "") -> federation.RunResult:
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(config_path, str(out), run_id(config), _now())
    (out / "config.cfg").write_text(config.to_kv())
    result = federation.run(config)
    (out / "metrics.csv").write_text(result.report.to_csv())
    manifest.finished_at = _now()
    manifest.write(out / "manifest.json")
    return result


def cmd_run(args) -> int:
    config = load_config(args)
    result = _run_one(config, Path(args.out), args.config or "")
    rep = result.report
    last = rep.records[-1]
    print(f"{config.algorithm}: MAUA {rep.maua:.4f} after {config.rounds} rounds, "
          f"{last.bytes_up} bytes up, {last.bytes_down} bytes down")
    for target, b in rep.acc_at.items():
        print(f"  acc@{target:g}: {'unreached' if b is None else b}")
    return EXIT_OK


_SWEEP_HEADER = ["axis", "value", "algorithm", "median_maua", "maua_per_seed", "label_tv"]


def cmd_sweep(args) -> int:
    base = load_config(args)
    values = _parse_list(args.values, str)
    algorithms = _parse_list(args.algorithms, str)
    seeds = _parse_list(args.seeds, int) if args.seeds else [base.seed]
    if args.axis not in ExperimentConfig.__dataclass_fields__:
        raise UsageError(f"unknown sweep axis {args.axis!r}")
    arms = []
    for value in values:
        for alg in algorithms:
            arms.append((value, alg, {**base.to_mapping(), args.axis: value, "algorithm": alg}))

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows: list[list] = []

    def flush():
        key = lambda r: (float(r[1]) if _is_number(r[1]) else r[1], r[2])
        with open(out / "sweep.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(_SWEEP_HEADER)
            w.writerows(sorted(rows, key=key))

    # validate every arm before spending time on any of them
    for _, _, raw in arms:
        ExperimentConfig.from_mapping(raw)
    for value, alg, raw in arms:
        mauas, tvs = [], []
        for seed in seeds:
            cfg_s = ExperimentConfig.from_mapping({**raw, "seed": str(seed)})
            try:
                result = _run_one(cfg_s, out / f"{args.axis}={value}" / f"{alg}_seed{seed}")
            except FedCacheError:
                flush()
                raise
            mauas.append(result.report.maua)
            tvs.append(data_mod.label_tv_distance(
                [np.concatenate([c.shard.train.labels, c.shard.test.labels]) for c in result.clients],
                cfg_s.num_classes))
        rows.append([args.axis, value, alg, repr(float(np.median(mauas))),
                     " ".join(repr(m) for m in mauas), repr(float(np.mean(tvs)))])
        flush()
        print(f"{args.axis}={value} {alg}: median MAUA {np.median(mauas):.4f}", flush=True)
    print((out / "sweep.csv").read_text(), end="")
    return EXIT_OK


def _is_number(text: str) -> bool:
    try:
        float(text)
        return True
    except ValueError:
        return False


def cmd_report(args) -> int:
    reports = []
    for item in args.inputs:
        if "=" not in item:
            raise UsageError(f"expected NAME=CSV, got {item!r}")
        name, path = item.split("=", 1)
        try:
            reports.append((name, read_csv_report(Path(path).read_text())))
        except OSError as exc:
            raise UsageError(f"cannot read {path}: {exc}") from None
    table = comparison_table(reports, args.target)
    if args.out:
        Path(args.out).write_text(table)
    print(table, end="")
    return EXIT_OK


COMMANDS = {"partition": cmd_partition, "run": cmd_run, "sweep": cmd_sweep, "report": cmd_report}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with 2 on usage errors
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, InvalidArgument) as exc:
        parser.print_usage(sys.stderr)
        print(f"fedcache: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FedCacheError as exc:
        print(f"fedcache: runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
