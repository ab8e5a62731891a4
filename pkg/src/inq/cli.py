"""Command-line driver: data generation, baseline training, INQ, evaluation,
statistics and model packing.

Every subcommand reads an optional ``key=value`` config file (``--config``);
command-line flags override it. Outputs carry the resolved configuration.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import data as data_mod
from .container import ContainerError, QuantizedModel, load_model, save_model
from .core import STRATEGIES, InqState, parse_schedule, run_inq
from .engine import (Conv2D, Dataset, Dense, Flatten, MaxPool2D, Network, ReLU, SgdConfig,
                     evaluate, forward, train)
from .quantizer import build_grid
from .runtime import compression_report, distribution, shift_evaluate, shift_forward, to_shift_form

logger = logging.getLogger("inq")

EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_MISSING = 3

IDX_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


class UsageError(ValueError):
    pass


class MissingFileError(FileNotFoundError):
    pass


def _schedule_pairs(text: str) -> tuple:
    """``"12:0.1,17:0.01"`` -> ``((12, 0.1), (17, 0.01))``."""
    if not text.strip():
        return ()
    pairs = []
    for item in text.split(","):
        epoch, mult = item.split(":")
        pairs.append((int(epoch), float(mult)))
    return tuple(pairs)


@dataclass
class ExperimentConfig:
    seed: int = 0
    # data: an IDX directory, or a synthetic dataset generated on the fly
    data_dir: str = ""
    dataset: str = "spirals"
    classes: int = 10
    n_train: int = 3000
    n_test: int = 1000
    image_size: int = 16
    # network: two 3x3 conv blocks and two dense layers
    conv1: int = 8
    conv2: int = 16
    hidden: int = 192
    # baseline training
    epochs: int = 20
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 0.0
    batch_size: int = 32
    lr_schedule: str = "12:0.1,17:0.01"
    # INQ
    bits: int = 5
    schedule: str = "resnet18-5bit"
    strategy: str = "pruning"
    epochs_per_step: int = 0  # 0 = derive from bits and schedule length
    retrain_lr: float = 0.1
    retrain_weight_decay: float = 0.0
    retrain_lr_schedule: str = "-1:0.1"  # negative epochs count from the end of each step
    retrain_last: bool = True
    out: str = "runs"

    @classmethod
    def load(cls, path=None, overrides=None) -> "ExperimentConfig":
        values = {}
        if path:
            p = Path(path)
            if not p.exists():
                raise MissingFileError(f"config file not found: {path}")
            for n, line in enumerate(p.read_text().splitlines(), 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise UsageError(f"{path}:{n}: expected key=value")
                key, value = (s.strip() for s in line.split("=", 1))
                values[key] = value
        values.update({k: v for k, v in (overrides or {}).items() if v is not None})
        return cls.from_mapping(values)

    @classmethod
    def from_mapping(cls, values: dict) -> "ExperimentConfig":
        types = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            key = key.replace("-", "_")
            if key not in types:
                raise UsageError(f"unknown config field {key!r}")
            typ = types[key]
            try:
                if typ == "bool":
                    kwargs[key] = raw if isinstance(raw, bool) else str(raw).lower() in ("1", "true", "yes")
                elif typ == "int":
                    kwargs[key] = int(raw)
                elif typ == "float":
                    kwargs[key] = float(raw)
                else:
                    kwargs[key] = str(raw)
            except ValueError:
                raise UsageError(f"config field {key!r}: cannot parse {raw!r} as {typ}") from None
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        def bad(name, why):
            raise UsageError(f"config field {name!r}: {why}")

        if self.dataset not in ("spirals", "blobs"):
            bad("dataset", "must be spirals or blobs")
        for name in ("classes", "n_train", "n_test", "image_size", "conv1", "conv2",
                     "hidden", "epochs", "batch_size"):
            if getattr(self, name) <= 0:
                bad(name, "must be positive")
        if self.classes < 2:
            bad("classes", "must be at least 2")
        if self.bits < 2:
            bad("bits", "must be at least 2")
        if self.strategy not in STRATEGIES:
            bad("strategy", f"must be one of {', '.join(STRATEGIES)}")
        if self.epochs_per_step < 0:
            bad("epochs_per_step", "must be >= 0")
        try:
            parse_schedule(self.schedule)
        except ValueError as exc:
            bad("schedule", str(exc))
        for name in ("lr_schedule", "retrain_lr_schedule"):
            try:
                _schedule_pairs(getattr(self, name))
            except ValueError:
                bad(name, "expected epoch:multiplier pairs separated by commas")
        for name in ("lr", "retrain_lr"):
            if not 0 < getattr(self, name) < float("inf"):
                bad(name, "must be a positive finite number")
        for name in ("weight_decay", "retrain_weight_decay"):
            if not 0 <= getattr(self, name) < float("inf"):
                bad(name, "must be >= 0")
        if not 0 <= self.momentum < 1:
            bad("momentum", "must lie in [0, 1)")
        for name, build in (("lr_schedule", self.sgd), ("retrain_lr_schedule", self.retrain_sgd)):
            try:
                build()
            except ValueError as exc:
                bad(name, str(exc))

    def sgd(self) -> SgdConfig:
        return SgdConfig(self.lr, self.momentum, self.weight_decay, self.batch_size,
                         _schedule_pairs(self.lr_schedule))

    def retrain_sgd(self) -> SgdConfig:
        return SgdConfig(self.retrain_lr, self.momentum, self.retrain_weight_decay,
                         self.batch_size, _schedule_pairs(self.retrain_lr_schedule))

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


def build_network(cfg: ExperimentConfig, input_shape, num_classes: int) -> Network:
    """The regression architecture: conv-relu-pool twice, then two dense layers."""
    c, h, w = input_shape
    flat = cfg.conv2 * (h // 4) * (w // 4)
    layers = [Conv2D(c, cfg.conv1, 3, padding=1), ReLU(), MaxPool2D(2),
              Conv2D(cfg.conv1, cfg.conv2, 3, padding=1), ReLU(), MaxPool2D(2),
              Flatten(), Dense(flat, cfg.hidden), ReLU(), Dense(cfg.hidden, num_classes)]
    return Network(input_shape, layers, seed=cfg.seed)


def load_datasets(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    if cfg.data_dir:
        d = Path(cfg.data_dir)
        out = []
        for split in ("train", "test"):
            paths = [d / f for f in IDX_FILES[split]]
            for p in paths:
                if not p.exists():
                    raise MissingFileError(f"IDX file not found: {p}")
            out.append(data_mod.load_idx(*paths, num_classes=cfg.classes))
        return out[0], out[1]
    train_set = data_mod.gen_synthetic(cfg.dataset, cfg.classes, cfg.n_train, seed=cfg.seed,
                                       image_size=cfg.image_size)
    test_set = data_mod.gen_synthetic(cfg.dataset, cfg.classes, cfg.n_test,
                                      seed=cfg.seed + 1_000_003, image_size=cfg.image_size)
    return train_set, test_set


def _load(path):
    if not Path(path).exists():
        raise MissingFileError(f"model file not found: {path}")
    return load_model(path, with_provenance=True)


def _write_jsonl(path: Path, records) -> None:
    path.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in records))


def _out_dir(cfg) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_gen_data(cfg: ExperimentConfig, args) -> int:
    out = _out_dir(cfg)
    train_set, test_set = load_datasets(dataclasses.replace(cfg, data_dir=""))
    for split, ds in (("train", train_set), ("test", test_set)):
        data_mod.write_idx(out / IDX_FILES[split][0], out / IDX_FILES[split][1], ds)
    (out / "dataset.json").write_text(json.dumps({"config": cfg.as_dict()}, sort_keys=True) + "\n")
    print(f"wrote {len(train_set)} train / {len(test_set)} test items to {out}")
    return 0


def cmd_train(cfg: ExperimentConfig, args) -> int:
    out = _out_dir(cfg)
    train_set, test_set = load_datasets(cfg)
    net = build_network(cfg, train_set.inputs.shape[1:], cfg.classes)
    records = [{"config": cfg.as_dict()}]

    def on_epoch(epoch, net, m):
        rec = m.as_dict()
        rec.update({f"eval_{k}": v for k, v in evaluate(net, test_set).items()})
        records.append(rec)
        print(f"epoch {epoch:3d}  loss {m.loss:.4f}  train {m.accuracy:.4f}  "
              f"test {rec['eval_top1']:.4f}")

    train(net, train_set, cfg.sgd(), cfg.epochs, seed=cfg.seed, on_epoch=on_epoch)
    model_path = Path(args.model_out) if args.model_out else out / "baseline.inqm"
    save_model(model_path, net, provenance={"config": cfg.as_dict(), "stage": "baseline"})
    _write_jsonl(out / "train_metrics.jsonl", records)
    print(f"saved {model_path}")
    return 0


def cmd_inq(cfg: ExperimentConfig, args) -> int:
    out = _out_dir(cfg)
    net, _ = _load(args.baseline)
    if not isinstance(net, Network):
        raise UsageError("baseline must be a full-precision model")
    train_set, test_set = load_datasets(cfg)
    schedule = parse_schedule(cfg.schedule)
    records = [{"config": cfg.as_dict()}]
    ckpt_dir = Path(args.checkpoint_dir) if args.checkpoint_dir else None
    if ckpt_dir:
        ckpt_dir.mkdir(parents=True, exist_ok=True)

    def on_step(state, rec):
        print(f"step {rec['step']}  sigma {rec['sigma']:.4g}  frozen "
              f"{rec['frozen_fraction']:.4f}  test {rec.get('eval_top1', float('nan')):.4f}")
        if ckpt_dir:
            state.save(ckpt_dir / f"step{rec['step']:02d}.ckpt")

    state = InqState.load(args.resume) if args.resume else None
    model, steps = run_inq(net, cfg.bits, schedule, cfg.strategy, train_set, cfg.retrain_sgd(),
                           epochs_per_step=cfg.epochs_per_step or None, seed=cfg.seed,
                           eval_data=test_set, retrain_last=cfg.retrain_last, state=state,
                           on_step=on_step,
                           provenance={"config": cfg.as_dict(), "stage": "inq"})
    records.extend(steps)
    model_path = Path(args.model_out) if args.model_out else out / f"inq_b{cfg.bits}.inqm"
    save_model(model_path, model)
    _write_jsonl(out / f"inq_b{cfg.bits}_metrics.jsonl", records)
    print(f"saved {model_path}")
    return 0


def _error_row(name, bits, acc, ref=None):
    e1 = 1 - acc["top1"]
    row = [name, bits, f"{100 * e1:.2f}%"]
    e5 = 1 - acc["top5"] if "top5" in acc else None
    row.append(f"{100 * e5:.2f}%" if e5 is not None else "-")
    if ref is not None:
        d1 = (1 - ref["top1"]) - e1
        d5 = (1 - ref["top5"]) - e5 if e5 is not None else None
        row.append(f"{100 * d1:.2f}%/" + (f"{100 * d5:.2f}%" if d5 is not None else "-"))
    else:
        row.append("")
    return row


def cmd_eval(cfg: ExperimentConfig, args) -> int:
    from .runtime import _render

    model, _ = _load(args.model)
    _, test_set = load_datasets(cfg)
    rows = []
    ref = None
    if args.baseline:
        base, _ = _load(args.baseline)
        ref = evaluate(base if isinstance(base, Network) else base.to_network(), test_set)
        rows.append(_error_row("reference", "float", ref))
    if isinstance(model, QuantizedModel):
        shift = to_shift_form(model)
        acc = shift_evaluate(shift, test_set)
        if args.check_oracle:
            decoded = model.to_network()
            for i in range(0, len(test_set), 256):
                batch = test_set.inputs[i:i + 256]
                if shift_forward(shift, batch).tobytes() != forward(decoded, batch).tobytes():
                    print("oracle cross-check FAILED: shift-add logits differ", file=sys.stderr)
                    return EXIT_ERROR
            print("oracle cross-check passed: shift-add logits bit-identical to float forward")
        bits = "/".join(sorted({str(q.b) for q in model.qlayers}))
        rows.append(_error_row("quantized", bits, acc, ref))
    else:
        acc = evaluate(model, test_set)
        rows.append(_error_row("model", "float", acc, ref))
    print(_render(["model", "bit-width", "top-1 error", "top-5 error",
                   "decrease in top-1/top-5 error"], rows))
    return 0


def cmd_stats(cfg: ExperimentConfig, args) -> int:
    model, _ = _load(args.model)
    if not isinstance(model, QuantizedModel):
        raise UsageError("stats needs a quantized model (see the pack subcommand)")
    table = distribution(model)
    report = compression_report(model)
    print("Weight distribution")
    print(table.to_text())
    print()
    print("Effective bit-width: " + ", ".join(
        f"{n}={b} (of {q.b})" for n, b, q in zip(table.names, table.bitwidths(), model.qlayers)))
    print()
    print("Compression (weights only, vs 32-bit floats)")
    print(report.to_text())
    if args.csv:
        out = _out_dir(cfg)
        (out / "distribution.csv").write_text(table.to_csv())
        (out / "compression.csv").write_text(report.to_csv())
    return 0


def cmd_pack(cfg: ExperimentConfig, args) -> int:
    net, prov = _load(args.model)
    if not isinstance(net, Network):
        raise UsageError("pack expects a full-precision model file")
    grids = [build_grid(w, cfg.bits) for w, _ in net.params]
    model = QuantizedModel.from_network(net, grids, prov)
    save_model(args.output, model)
    print(f"packed {args.model} -> {args.output}")
    return 0


def cmd_unpack(cfg: ExperimentConfig, args) -> int:
    model, prov = _load(args.model)
    if not isinstance(model, QuantizedModel):
        raise UsageError("unpack expects a quantized model file")
    save_model(args.output, model.to_network(), provenance=prov)
    print(f"unpacked {args.model} -> {args.output}")
    return 0


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "inq": cmd_inq, "eval": cmd_eval,
            "stats": cmd_stats, "pack": cmd_pack, "unpack": cmd_unpack}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--bits", type=int)
    common.add_argument("--schedule", help="preset name or comma-separated portions")
    common.add_argument("--strategy", choices=STRATEGIES)
    common.add_argument("--epochs-per-step", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config field")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(
        prog="inq", description="Incremental network quantization to power-of-two weights.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="write a synthetic dataset as IDX files")
    p = sub.add_parser("train", parents=[common], help="train the full-precision baseline")
    p.add_argument("--model-out")
    p = sub.add_parser("inq", parents=[common], help="quantize a baseline incrementally")
    p.add_argument("--baseline", required=True)
    p.add_argument("--model-out")
    p.add_argument("--checkpoint-dir")
    p.add_argument("--resume", help="checkpoint to continue from")
    p = sub.add_parser("eval", parents=[common], help="accuracy of a model file")
    p.add_argument("--model", required=True)
    p.add_argument("--baseline", help="reference model to compare against")
    p.add_argument("--check-oracle", action="store_true",
                   help="verify shift-add logits against the float forward pass")
    p = sub.add_parser("stats", parents=[common], help="weight distribution and compression")
    p.add_argument("--model", required=True)
    p.add_argument("--csv", action="store_true", help="also write CSV files to --out")
    for name, what in (("pack", "encode a grid-valued float model"),
                       ("unpack", "decode a quantized model to floats")):
        p = sub.add_parser(name, parents=[common], help=what)
        p.add_argument("--model", required=True)
        p.add_argument("--output", required=True)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = {"seed": args.seed, "bits": args.bits, "schedule": args.schedule,
                 "strategy": args.strategy, "epochs_per_step": args.epochs_per_step,
                 "out": args.out}
    try:
        for item in args.set:
            if "=" not in item:
                raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
            key, value = item.split("=", 1)
            overrides[key.strip()] = value.strip()
        cfg = ExperimentConfig.load(args.config, overrides)
        return COMMANDS[args.command](cfg, args)
    except UsageError as exc:
        print(f"inq {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (MissingFileError, FileNotFoundError) as exc:
        print(f"inq {args.command}: missing file: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (ContainerError, ValueError, RuntimeError, OverflowError) as exc:
        print(f"inq {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
