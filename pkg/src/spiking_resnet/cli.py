"""Operator-facing command surface.

Subcommands: `train`, `convert`, `simulate`, `report`, plus `synth-data`
for generating format-identical stand-in datasets. Every run writes its
artifacts under a per-run output directory with a manifest at the root.

Exit codes: 0 success, 2 usage, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__, datasets, model_io, synthetic, training
from .convert import ConversionError, ConvertOptions
from .convert import convert as convert_ann
from .simulate import evaluate as snn_evaluate
from .simulate import simulate as snn_simulate
from .errors import (
    DataError,
    NumericError,
    SpikingResnetError,
    UnsupportedDepthError,
)
from .graph import build_plain, build_resnet
from .manifest import RunManifest, load_manifest, sha256_file, write_csv

DATA_ROOT_ENV = "SPIKING_RESNET_DATA"


# -- dataset plumbing ----------------------------------------------------------


def _data_root(args) -> Path:
    root = args.data_root or os.environ.get(DATA_ROOT_ENV)
    if not root:
        raise DataError(
            f"no data root: pass --data-root or set ${DATA_ROOT_ENV}"
        )
    return Path(root)


def _require(path: Path) -> Path:
    if not path.exists():
        raise DataError(f"missing dataset file: {path}")
    return path


def resolve_dataset(name: str, root: Path):
    """Return (train, test) datasets plus the list of files read."""
    if name == "mnist":
        d = root / "mnist"
        files = [
            _require(d / "train-images-idx3-ubyte"),
            _require(d / "train-labels-idx1-ubyte"),
            _require(d / "t10k-images-idx3-ubyte"),
            _require(d / "t10k-labels-idx1-ubyte"),
        ]
        train = datasets.load_mnist_idx(files[0], files[1])
        test = datasets.load_mnist_idx(files[2], files[3])
    elif name == "cifar10":
        d = root / "cifar-10-batches-bin"
        batches = sorted(d.glob("data_batch_*.bin"))
        if not batches:
            raise DataError(f"no data_batch_*.bin files under {d}")
        files = batches + [_require(d / "test_batch.bin")]
        train = datasets.load_cifar10_bin(batches)
        test = datasets.load_cifar10_bin([files[-1]])
    elif name == "cifar100":
        d = root / "cifar-100-binary"
        files = [_require(d / "train.bin"), _require(d / "test.bin")]
        train = datasets.load_cifar100_bin([files[0]])
        test = datasets.load_cifar100_bin([files[1]])
    else:
        raise DataError(f"unknown dataset {name!r}")
    train.split, test.split = "train", "test"
    return train, test, [str(f) for f in files]


def _stats_to_model(g, stats) -> None:
    node = g.nodes[g.input_id]
    node.params["std_mean"] = stats.mean
    node.params["std_std"] = stats.std


def _stats_from_model(g):
    node = g.nodes[g.input_id]
    if "std_mean" not in node.params:
        return None
    return datasets.StandardizationStats(
        mean=node.params["std_mean"], std=node.params["std_std"], source_split="train"
    )


def _parse_widths(text: str):
    try:
        widths = tuple(int(w) for w in text.split(","))
    except ValueError:
        raise DataError(f"bad widths {text!r}; expected e.g. 4,8,16")
    if len(widths) != 3:
        raise DataError(f"expected 3 stage widths, got {text!r}")
    return widths


# -- commands --------------------------------------------------------------------


def cmd_train(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train_full, test_ds, files = resolve_dataset(args.dataset, _data_root(args))
    if args.subset_per_class:
        train_full = datasets.subset_per_class(train_full, args.subset_per_class)

    train_ds, val_ds = datasets.split(train_full, args.val_fraction, seed=args.seed)
    train_ds, stats = training.standardize(train_ds)
    assert stats.source_split == "train"
    val_ds = training.apply_standardization(val_ds, stats)
    test_std = training.apply_standardization(test_ds, stats)

    input_shape = tuple(train_ds.images.shape[1:])
    builder_kwargs = dict(
        stage_widths=_parse_widths(args.widths),
        num_classes=train_ds.num_classes,
        input_shape=input_shape,
        seed=args.seed,
    )
    if args.arch == "resnet":
        g = build_resnet(args.depth, projection_shortcuts=args.projection_shortcuts,
                         **builder_kwargs)
    else:
        g = build_plain(args.depth, **builder_kwargs)

    augment_on = args.augment == "on" or (
        args.augment == "auto" and args.dataset.startswith("cifar")
    )
    try:
        cfg = training.TrainConfig(
            total_epochs=args.epochs,
            batch_size=args.batch_size,
            seed=args.seed,
            augment=augment_on,
            warmup_lr=args.warmup_lr,
            main_lr=args.main_lr,
            warmup_epochs=args.warmup_epochs,
            decay_epochs=tuple(int(e) for e in args.decay_epochs.split(",") if e),
            decay_factor=args.decay_factor,
        )
    except ValueError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 2

    manifest = RunManifest(
        command="train",
        config={
            "dataset": args.dataset, "depth": args.depth, "widths": args.widths,
            "arch": args.arch, "epochs": args.epochs, "batch_size": args.batch_size,
            "augment": augment_on, "val_fraction": args.val_fraction,
            "subset_per_class": args.subset_per_class,
            "projection_shortcuts": args.projection_shortcuts,
            "warmup_lr": args.warmup_lr, "main_lr": args.main_lr,
            "warmup_epochs": args.warmup_epochs, "decay_epochs": args.decay_epochs,
            "decay_factor": args.decay_factor,
        },
        seed=args.seed,
    )
    for f in files:
        manifest.add_input(f)

    def log(row):
        print(
            f"epoch {row['epoch'] + 1}/{cfg.total_epochs}  lr {row['lr']:g}  "
            f"loss {row['train_loss']:.4f}  acc {row['train_acc']:.4f}  "
            f"val {row['val_acc']:.4f}"
        )

    trained, history = training.train(g, train_ds, cfg, val_dataset=val_ds, log=log)
    test_acc = training.evaluate_ann(trained, test_std)
    print(f"test accuracy: {test_acc:.4f}")

    _stats_to_model(trained, stats)
    model_path = out / "model.snnm"
    model_io.save_model(trained, model_path)
    metrics_path = out / "metrics.csv"
    write_csv(
        metrics_path, "train-metrics v1",
        ["epoch", "lr", "train_loss", "train_acc", "val_acc"],
        [(r["epoch"], r["lr"], r["train_loss"], r["train_acc"], r["val_acc"])
         for r in history],
    )
    manifest.add_output(model_path)
    manifest.add_output(metrics_path)
    manifest.summary = {
        "kind": "train",
        "dataset": args.dataset,
        "arch": args.arch,
        "depth": args.depth,
        "final_train_acc": history[-1]["train_acc"] if history else None,
        "final_val_acc": history[-1]["val_acc"] if history else None,
        "test_acc": test_acc,
        "model_sha256": sha256_file(model_path),
    }
    manifest.write(out)
    return 0


def cmd_convert(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model_path = Path(args.model)
    if not model_path.exists():
        raise DataError(f"model file not found: {model_path}")
    g = model_io.load_model(model_path)

    train_full, _, files = resolve_dataset(args.dataset, _data_root(args))
    stats = _stats_from_model(g)
    if stats is None:
        print("note: model carries no standardisation stats; recomputing from train split",
              file=sys.stderr)
        _, stats = training.standardize(train_full)
    train_std = training.apply_standardization(train_full, stats)
    calib_pool, val_ds = datasets.split(train_std, args.val_fraction, seed=args.seed)
    calib = calib_pool.images[: args.calib_samples]
    if args.val_samples:
        val_ds = datasets.Dataset(
            images=val_ds.images[: args.val_samples],
            labels=val_ds.labels[: args.val_samples],
            num_classes=val_ds.num_classes, split="val", stats=val_ds.stats,
        )

    opts = ConvertOptions(
        percentile=args.percentile,
        shortcut_norm=not args.no_shortcut_norm,
        compensate=args.compensate,
        timesteps=args.T,
        grid_size=args.grid,
        batch_size=args.batch_size,
    )
    manifest = RunManifest(
        command="convert",
        config={
            "model": str(model_path), "dataset": args.dataset,
            "percentile": args.percentile, "calib_samples": args.calib_samples,
            "shortcut_norm": opts.shortcut_norm, "compensate": args.compensate,
            "T": args.T, "grid": args.grid, "val_fraction": args.val_fraction,
            "val_samples": args.val_samples,
        },
        seed=args.seed,
    )
    manifest.add_input(model_path)
    for f in files:
        manifest.add_input(f)

    snn, report = convert_ann(g, calib, opts, validation_set=val_ds)
    snn.meta["source_model_sha256"] = sha256_file(model_path)

    snn_path = out / "snn.snnm"
    model_io.save_snn(snn, snn_path)
    report_path = out / "conversion.json"
    report_path.write_text(json.dumps(report.as_dict(), indent=2, sort_keys=True) + "\n")
    manifest.add_output(snn_path)
    manifest.add_output(report_path)
    manifest.summary = {
        "kind": "convert",
        "source_model_sha256": snn.meta["source_model_sha256"],
        "snn_sha256": sha256_file(snn_path),
        "shortcut_norm": opts.shortcut_norm,
        "compensation_factor": report.compensation.get("factor", 1.0),
        "tau_max": report.compensation.get("tau_max"),
    }
    manifest.write(out)
    mode = "with" if opts.shortcut_norm else "WITHOUT"
    print(f"converted {mode} shortcut normalisation; "
          f"compensation factor {manifest.summary['compensation_factor']:g}")
    return 0


def cmd_simulate(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    snn_path = Path(args.snn)
    if not snn_path.exists():
        raise DataError(f"snn file not found: {snn_path}")
    snn = model_io.load_snn(snn_path)

    train_full, test_ds, files = resolve_dataset(args.dataset, _data_root(args))
    ds = test_ds if args.split == "test" else train_full
    stats = _stats_from_model(snn.graph)
    if stats is None:
        _, stats = training.standardize(train_full)
    ds = training.apply_standardization(ds, stats)
    if args.limit:
        ds = datasets.Dataset(images=ds.images[: args.limit], labels=ds.labels[: args.limit],
                              num_classes=ds.num_classes, split=ds.split, stats=ds.stats)

    manifest = RunManifest(
        command="simulate",
        config={"snn": str(snn_path), "dataset": args.dataset, "split": args.split,
                "T": args.T, "limit": args.limit, "reset": args.reset,
                "membrane_floor": args.membrane_floor},
        seed=None,
    )
    manifest.add_input(snn_path)
    for f in files:
        manifest.add_input(f)

    report = snn_evaluate(snn, ds, T=args.T, batch_size=args.batch_size,
                          reset_mode=args.reset, membrane_floor=args.membrane_floor)
    print(f"SNN accuracy over {report.samples} samples at T={args.T}: "
          f"{report.accuracy:.4f}")

    report_path = out / "report.json"
    report_path.write_text(json.dumps(report.as_dict(), indent=2) + "\n")
    manifest.add_output(report_path)

    conv_path = out / "convergence.csv"
    write_csv(conv_path, "convergence v1", ["timestep", "accuracy"],
              [(t + 1, acc) for t, acc in enumerate(report.convergence)])
    manifest.add_output(conv_path)

    if args.dump_rates:
        rates_path = out / "rates.csv"
        write_csv(
            rates_path, "rate-profile v1", ["depth_index", "layer_id", "max_rate"],
            [(i, nid, rate) for i, (nid, rate) in enumerate(report.layer_max_rates.items())],
        )
        manifest.add_output(rates_path)
    if args.dump_raster:
        *_, raster = snn_simulate(snn, ds.images[0], T=args.T, reset_mode=args.reset,
                                  membrane_floor=args.membrane_floor, collect_raster=True)
        raster_path = out / "raster.csv"
        write_csv(raster_path, "spike-raster v1",
                  ["sample", "timestep", "layer_id", "neuron_index"],
                  [(0, t, nid, idx) for t, nid, idx in raster])
        manifest.add_output(raster_path)

    manifest.summary = {
        "kind": "simulate",
        "snn_sha256": sha256_file(snn_path),
        "accuracy": report.accuracy,
        "T": args.T,
        "samples": report.samples,
        "split": args.split,
        "total_spikes": report.total_spikes,
    }
    manifest.write(out)
    return 0


def cmd_report(args) -> int:
    manifests = []
    for d in args.run_dirs:
        p = Path(d) / "manifest.json"
        if not p.exists():
            raise DataError(f"no manifest.json under {d}")
        manifests.append(load_manifest(d))

    trains = {m["summary"]["model_sha256"]: m for m in manifests
              if m["summary"].get("kind") == "train"}
    converts = {m["summary"]["snn_sha256"]: m for m in manifests
                if m["summary"].get("kind") == "convert"}
    simulates = [m for m in manifests if m["summary"].get("kind") == "simulate"]
    if not simulates:
        raise DataError("no simulate runs among the given directories")

    rows = []
    for m in simulates:
        s = m["summary"]
        cv = converts.get(s["snn_sha256"], {}).get("summary", {})
        tr = trains.get(cv.get("source_model_sha256"), {}).get("summary", {})
        ann_acc = tr.get("test_acc")
        loss = None if ann_acc is None else ann_acc - s["accuracy"]
        rows.append({
            "dataset": tr.get("dataset", m["config"].get("dataset", "?")),
            "arch": tr.get("arch", "?"),
            "depth": tr.get("depth", "?"),
            "ann_acc": ann_acc,
            "snn_acc": s["accuracy"],
            "acc_loss": loss,
            "shortcut_norm": cv.get("shortcut_norm"),
            "compensation": cv.get("compensation_factor"),
            "T": s["T"],
        })

    header = ["dataset", "arch", "depth", "ann_acc", "snn_acc", "acc_loss",
              "shortcut_norm", "compensation", "T"]

    def fmt(v):
        if v is None:
            return ""
        if isinstance(v, float):
            return f"{v:.4f}"
        return str(v)

    if args.format == "markdown":
        lines = ["| " + " | ".join(header) + " |",
                 "|" + "|".join("---" for _ in header) + "|"]
        for r in rows:
            lines.append("| " + " | ".join(fmt(r[h]) for h in header) + " |")
        text = "\n".join(lines)
    else:
        lines = ["# schema: ann-vs-snn v1", ",".join(header)]
        for r in rows:
            lines.append(",".join(fmt(r[h]) for h in header))
        text = "\n".join(lines)

    print(text)
    if args.out:
        Path(args.out).write_text(text + "\n")
    return 0


def cmd_synth_data(args) -> int:
    root = Path(args.root)
    if args.like == "mnist":
        files = synthetic.write_mnist_like(root / "mnist", n_train=args.train,
                                           n_test=args.test, seed=args.seed)
    else:
        files = synthetic.write_cifar10_like(root, n_train=args.train,
                                             n_test=args.test, seed=args.seed)
    count = sum(len(v) if isinstance(v, list) else len(list(v)) for v in files.values())
    print(f"wrote {count} {args.like}-format files under {root}")
    return 0


# -- parser ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="spiking-resnet",
        description="Train compact residual CNNs, convert them to spiking "
                    "networks, and simulate the result clock-driven.",
    )
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="cmd", required=True)

    def add_common(sp):
        sp.add_argument("--data-root", default=None,
                        help=f"dataset root (default: ${DATA_ROOT_ENV})")
        sp.add_argument("--threads", type=int, default=None,
                        help="cap BLAS worker threads")

    t = sub.add_parser("train", help="train an ANN and write a checkpoint")
    add_common(t)
    t.add_argument("--dataset", required=True, choices=["mnist", "cifar10", "cifar100"])
    t.add_argument("--depth", type=int, default=8)
    t.add_argument("--widths", default="4,8,16")
    t.add_argument("--arch", choices=["resnet", "plain"], default="resnet")
    t.add_argument("--projection-shortcuts", action="store_true")
    t.add_argument("--epochs", type=int, default=30)
    t.add_argument("--batch-size", type=int, default=64)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--val-fraction", type=float, default=0.1)
    t.add_argument("--subset-per-class", type=int, default=None)
    t.add_argument("--augment", choices=["auto", "on", "off"], default="auto")
    t.add_argument("--warmup-lr", type=float, default=0.01)
    t.add_argument("--main-lr", type=float, default=0.1)
    t.add_argument("--warmup-epochs", type=int, default=3)
    t.add_argument("--decay-epochs", default="20,25")
    t.add_argument("--decay-factor", type=float, default=10.0)
    t.add_argument("--out", required=True, help="run output directory")
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("convert", help="convert a trained ANN to a spiking network")
    add_common(c)
    c.add_argument("--model", required=True)
    c.add_argument("--dataset", required=True, choices=["mnist", "cifar10", "cifar100"])
    c.add_argument("--percentile", type=float, default=0.999)
    c.add_argument("--calib-samples", type=int, default=1000)
    c.add_argument("--no-shortcut-norm", action="store_true",
                   help="ablation: skip shortcut normalisation")
    c.add_argument("--compensate", action="store_true")
    c.add_argument("--T", type=int, default=500)
    c.add_argument("--grid", type=int, default=8)
    c.add_argument("--val-fraction", type=float, default=0.1)
    c.add_argument("--val-samples", type=int, default=200)
    c.add_argument("--batch-size", type=int, default=256)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_convert)

    s = sub.add_parser("simulate", help="run a spiking network on a dataset split")
    add_common(s)
    s.add_argument("--snn", required=True)
    s.add_argument("--dataset", required=True, choices=["mnist", "cifar10", "cifar100"])
    s.add_argument("--split", choices=["test", "train"], default="test")
    s.add_argument("--T", type=int, default=500)
    s.add_argument("--limit", type=int, default=None)
    s.add_argument("--batch-size", type=int, default=256)
    s.add_argument("--reset", choices=["subtract", "zero"], default="subtract")
    s.add_argument("--membrane-floor", action="store_true")
    s.add_argument("--dump-rates", action="store_true")
    s.add_argument("--dump-raster", action="store_true")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    r = sub.add_parser("report", help="tabulate ANN vs SNN accuracy across runs")
    r.add_argument("run_dirs", nargs="+")
    r.add_argument("--format", choices=["csv", "markdown"], default="csv")
    r.add_argument("--out", default=None)
    r.set_defaults(func=cmd_report, threads=None)

    y = sub.add_parser("synth-data", help="write a synthetic dataset in the real format")
    y.add_argument("--like", choices=["mnist", "cifar10"], required=True)
    y.add_argument("--root", required=True)
    y.add_argument("--train", type=int, default=12000)
    y.add_argument("--test", type=int, default=2000)
    y.add_argument("--seed", type=int, default=0)
    y.set_defaults(func=cmd_synth_data, threads=None)

    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.threads:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=args.threads):
                return args.func(args)
        return args.func(args)
    except UnsupportedDepthError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 2
    except ConversionError as e:
        kind = 3 if isinstance(e.__cause__, (DataError, OSError)) else 4
        print(f"error: {e}", file=sys.stderr)
        return kind
    except (DataError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 4
    except SpikingResnetError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
