"""Command-line entry point: ``python -m fpsa <command> [options]``."""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import sys
import time
from contextlib import nullcontext
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import __version__
from .autodiff import precision
from .diagnostics import (
    export_attention_csv,
    export_trace_csv,
    load_checkpoint,
    restore_model,
    save_checkpoint,
    summarize,
)
from .errors import CheckpointError, ConfigError, DataError, FpsaError, NumericalError, ShapeError
from .solver import FpiConfig
from .tasks import (
    InductionTaskSpec,
    ModelSpec,
    TrainConfig,
    build_model,
    default_spec,
    evaluate,
    gen_induction_dataset,
    load_mnist,
    split_dataset,
    train,
)
from .tasks.train import model_inputs
from .verify import layer_gradcheck

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4
EXIT_CHECKPOINT = 5
EXIT_GRADCHECK = 6

EXIT_CODES = {
    EXIT_OK: "success",
    EXIT_CONFIG: "invalid configuration",
    EXIT_DATA: "missing or malformed data",
    EXIT_NUMERIC: "numerical divergence (non-finite loss or activations)",
    EXIT_CHECKPOINT: "checkpoint unreadable or incompatible with the config",
    EXIT_GRADCHECK: "gradient check above tolerance",
}


@dataclass
class RunConfig:
    # [run]
    task: str = "induction"
    attention: str = "self"
    backward: str = "implicit"
    seed: int = 0
    f64: bool = False
    # [fpi]
    max_iter: int = 100
    epsilon: float = 1e-4
    granularity: str = "per_token_per_head"
    # [train]
    epochs: int = 100
    batch: int = 64
    lr: float = 3e-4
    weight_decay: float = 0.01
    clip_t: float = 1.0
    # [task]
    vocab_size: int = 20
    n_samples: int = 0
    test_fraction: float = 0.2
    dim: int = 0
    heads: int = 0
    # [paths]
    data_dir: str = ""
    out_dir: str = "runs/latest"

    def fpi(self):
        return FpiConfig(self.max_iter, self.epsilon, self.granularity)

    def train_config(self):
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch,
            lr=self.lr,
            weight_decay=self.weight_decay,
            clip=self.clip_t,
            seed=self.seed,
            fpi=self.fpi(),
            backward=self.backward,
        )

    def model_spec(self):
        base = default_spec(self.task, self.attention)
        return ModelSpec(
            self.task,
            self.attention,
            dim=self.dim or base.dim,
            heads=self.heads or base.heads,
            vocab_size=self.vocab_size,
        )

    def validate(self):
        """Build every derived config once so bad values fail before any work starts."""
        self.fpi()
        self.train_config()
        self.model_spec()
        if self.vocab_size < 2:
            raise ConfigError(f"[task] vocab_size must be at least 2, got {self.vocab_size}")
        if not 0 <= self.test_fraction < 1:
            raise ConfigError(f"[task] test_fraction must lie in [0, 1), got {self.test_fraction}")
        if self.n_samples < 0:
            raise ConfigError(f"[task] n_samples must be >= 0, got {self.n_samples}")
        return self


SECTIONS = {
    "run": ("task", "attention", "backward", "seed", "f64"),
    "fpi": ("max_iter", "epsilon", "granularity"),
    "train": ("epochs", "batch", "lr", "weight_decay", "clip_t"),
    "task": ("vocab_size", "n_samples", "test_fraction", "dim", "heads"),
    "paths": ("data_dir", "out_dir"),
}

KEY_HELP = {
    "task": "induction | mnist_patch",
    "attention": "self (fixed-point) | vanilla (single pass)",
    "backward": "unrolled | implicit | phantom",
    "seed": "seeds data order, data generation and initialisation",
    "f64": "run in float64",
    "max_iter": "iteration cap of the fixed-point solve",
    "epsilon": "relative-residual tolerance",
    "granularity": "whole | per_token | per_token_per_head",
    "epochs": "training epochs (0 = evaluate the untrained model)",
    "batch": "minibatch size",
    "lr": "AdamW learning rate",
    "weight_decay": "AdamW decoupled weight decay",
    "clip_t": "global gradient-norm clip threshold",
    "vocab_size": "ordinary tokens of the induction task",
    "n_samples": "induction sequences to generate (0 = every distinct pair)",
    "test_fraction": "held-out share of the induction pairs",
    "dim": "model width (0 = task default: 32)",
    "heads": "attention heads (0 = task default: 2 induction, 4 mnist_patch)",
    "data_dir": "directory holding the four MNIST IDX files",
    "out_dir": "where artifacts are written",
}

_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _convert(key, raw):
    kind = _TYPES[key]
    try:
        if kind == "bool":
            lowered = raw.strip().lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        return raw.strip()
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind}") from None


def config_reference():
    """Every key, grouped by section, with its default value."""
    defaults = RunConfig()
    lines = ["config keys (INI sections; flags override file values):"]
    for section, keys in SECTIONS.items():
        lines.append(f"  [{section}]")
        for key in keys:
            lines.append(f"    {key:<14} default {getattr(defaults, key)!r:<22} {KEY_HELP[key]}")
    lines.append("exit codes:")
    lines.extend(f"  {code}  {text}" for code, text in EXIT_CODES.items())
    return "\n".join(lines)


def read_config_file(path, config=None):
    config = config or RunConfig()
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path, encoding="utf-8") as f:
            parser.read_file(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"{path}: unknown section [{section}]")
        for key, raw in parser.items(section):
            if key not in SECTIONS[section]:
                raise ConfigError(f"{path}: unknown key {key!r} in [{section}]")
            setattr(config, key, _convert(key, raw))
    return config


def write_config_file(config, path):
    lines = []
    for section, keys in SECTIONS.items():
        lines.append(f"[{section}]")
        for key in keys:
            value = getattr(config, key)
            lines.append(f"{key} = {str(value).lower() if isinstance(value, bool) else value}")
        lines.append("")
    Path(path).write_text("\n".join(lines), encoding="utf-8")


def apply_overrides(config, args):
    for key in ("task", "attention", "backward", "seed", "epochs"):
        value = getattr(args, key, None)
        if value is not None:
            setattr(config, key, value)
    if getattr(args, "data", None) is not None:
        config.data_dir = args.data
    if getattr(args, "out", None) is not None:
        config.out_dir = args.out
    if getattr(args, "f64", False):
        config.f64 = True
    for item in getattr(args, "set", None) or ():
        name, sep, raw = item.partition("=")
        section, _, key = name.partition(".")
        if not sep or section not in SECTIONS or key not in SECTIONS[section]:
            raise ConfigError(f"--set expects section.key=value with a known key, got {item!r}")
        setattr(config, key, _convert(key, raw))
    return config


def resolve_config(args):
    config = read_config_file(args.config) if getattr(args, "config", None) else RunConfig()
    return apply_overrides(config, args).validate()


# ----------------------------------------------------------------------
# data and models


def load_splits(config):
    """``(train, test)`` datasets for the configured task."""
    if config.task == "mnist_patch":
        if not config.data_dir:
            raise DataError("mnist_patch needs [paths] data_dir (or --data) pointing at the MNIST IDX files")
        return load_mnist(config.data_dir)
    spec = InductionTaskSpec(config.vocab_size)
    n = config.n_samples or spec.pair_capacity
    return split_dataset(gen_induction_dataset(spec, n, config.seed), config.test_fraction)


def _limit(dataset, limit):
    return dataset.limit(limit) if limit else dataset


def load_model(config, checkpoint_path):
    """Build the configured model and fill it from a checkpoint, if one is given."""
    model = build_model(config.model_spec(), config.seed)
    if checkpoint_path is None:
        return model, None
    ckpt = load_checkpoint(checkpoint_path)
    restore_model(model, ckpt)
    return model, ckpt


def _checkpoint_arg(args, config, required):
    if args.checkpoint:
        return Path(args.checkpoint)
    default = Path(config.out_dir) / "checkpoint"
    if (default / "manifest.json").exists():
        return default
    if required:
        raise CheckpointError(f"no checkpoint given and none found at {default}")
    return None


# ----------------------------------------------------------------------
# artifacts


def _fmt(x):
    return repr(float(x))


def write_metrics(report, heads, path):
    header = ["epoch", "loss", "train_accuracy", "test_accuracy"]
    for h in range(heads):
        header += [f"head{h}_mean_iter", f"head{h}_median_iter", f"head{h}_max_iter", f"head{h}_non_converged"]
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for e in report.epochs:
            row = [e.epoch + 1, _fmt(e.loss), _fmt(e.train_accuracy), _fmt(e.test_accuracy)]
            for h in range(heads):
                s = e.iterations.get(h)
                row += [_fmt(s.mean), s.median, s.max, s.non_converged] if s else ["", "", "", ""]
            w.writerow(row)


def write_run_meta(out_dir, command, config, extra=None):
    meta = {
        "command": command,
        "version": __version__,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "argv": sys.argv[1:],
        "config": asdict(config),
        **(extra or {}),
    }
    (Path(out_dir) / "run_meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def print_summary(trace):
    for h, s in summarize(trace).items():
        print(
            f"head {h}: mean {s.mean:.2f} median {s.median} max {s.max} "
            f"non-converged {s.non_converged}/{s.count}"
        )


# ----------------------------------------------------------------------
# commands


def cmd_train(args):
    config = resolve_config(args)
    out = Path(config.out_dir)
    with precision(np.float64) if config.f64 else nullcontext():
        train_set, test_set = load_splits(config)
        train_set = _limit(train_set, args.limit)
        model = build_model(config.model_spec(), config.seed)
        tc = config.train_config()
        state = tc.optimizer()

        def progress(record, _state):
            print(
                f"epoch {record.epoch + 1}/{tc.epochs} loss {record.loss:.4f} "
                f"train {record.train_accuracy:.4f} test {record.test_accuracy:.4f}",
                file=sys.stderr,
            )

        report = train(model, train_set, tc, test_set, state=state, on_epoch=progress)
        final = evaluate(model, test_set, tc.fpi, tc.batch_size)

    out.mkdir(parents=True, exist_ok=True)
    write_config_file(config, out / "config.ini")
    save_checkpoint(out / "checkpoint", model, asdict(config), state, epoch=len(report.epochs))
    write_metrics(report, model.spec.heads, out / "metrics.csv")
    if final.trace is not None:
        export_trace_csv(final.trace, out / "trace.csv")
    write_run_meta(out, "train", config, {"aborted": report.aborted, "error": report.error})
    if report.aborted:
        print(f"error: {report.error}; last good state saved to {out / 'checkpoint'}", file=sys.stderr)
        return EXIT_NUMERIC
    print(f"final accuracy: {final.accuracy:.6f}")
    return EXIT_OK


def cmd_eval(args):
    config = resolve_config(args)
    with precision(np.float64) if config.f64 else nullcontext():
        model, _ = load_model(config, _checkpoint_arg(args, config, required=True))
        _, test_set = load_splits(config)
        test_set = _limit(test_set, args.limit)
        result = evaluate(model, test_set, config.fpi(), config.batch)
        if args.export:
            _export_maps(model, test_set, config, args.sample, Path(config.out_dir) / "attention" / "eval.csv")
    print(f"accuracy: {result.accuracy:.6f}")
    return EXIT_OK


def cmd_trace(args):
    config = resolve_config(args)
    if config.attention != "self":
        raise ConfigError("trace needs attention = self (the vanilla block has no iterations)")
    with precision(np.float64) if config.f64 else nullcontext():
        model, _ = load_model(config, _checkpoint_arg(args, config, required=False))
        train_set, test_set = load_splits(config)
        dataset = _limit(train_set if args.split == "train" else test_set, args.limit)
        result = evaluate(model, dataset, config.fpi(), config.batch)
    out = Path(config.out_dir)
    path = export_trace_csv(result.trace, out / f"trace_{args.split}.csv")
    print(f"{len(dataset)} samples from the {args.split} split; trace written to {path}")
    print_summary(result.trace)
    return EXIT_OK


def _export_maps(model, dataset, config, sample, path):
    from .attention import attention_maps

    if not 0 <= sample < len(dataset):
        raise DataError(f"sample index {sample} outside the {len(dataset)}-sample split")
    inputs = model_inputs(model, dataset.inputs[sample : sample + 1])
    if config.task == "induction":
        h = model.token_embedding.data[inputs] + model.position_embedding.data
        spec = model.task
        names = {spec.bos: "BOS", spec.sep: "SEP", spec.mask: "MASK", spec.eos: "EOS"}
        labels = [names.get(int(t), f"t{int(t)}") for t in inputs[0]]
        labels = [f"{i}:{lab}" for i, lab in enumerate(labels)]
    else:
        h = model.patch_embedding(inputs).data + model.position_embedding.data
        labels = [f"p{i}" for i in range(h.shape[1])]
    probs = attention_maps(h, model.layer, config.fpi(), fixed_point_layer=model.fixed_point)
    return export_attention_csv(probs[0], path, labels)


def cmd_heatmap(args):
    config = resolve_config(args)
    with precision(np.float64) if config.f64 else nullcontext():
        model, _ = load_model(config, _checkpoint_arg(args, config, required=False))
        _, test_set = load_splits(config)
        path = Path(config.out_dir) / "attention" / f"sample{args.sample}.csv"
        paths = _export_maps(model, test_set, config, args.sample, path)
    for p in paths:
        print(p)
    return EXIT_OK


def cmd_gradcheck(args):
    config = resolve_config(args)
    report = layer_gradcheck(seed=config.seed, corrupt=args.corrupt_vjp)
    for line in report.lines():
        print(line)
    return EXIT_OK if report.passed else EXIT_GRADCHECK


# ----------------------------------------------------------------------
# argument parsing


def build_parser():
    epilog = config_reference()
    fmt = argparse.RawDescriptionHelpFormatter
    parser = argparse.ArgumentParser(
        prog="fpsa",
        description="Fixed-point self-attention: training, evaluation and diagnostics.",
        epilog=epilog,
        formatter_class=fmt,
    )
    parser.add_argument("--version", action="version", version=f"fpsa {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", metavar="PATH", help="INI config file")
        p.add_argument("--seed", type=int, help="override [run] seed")
        p.add_argument("--out", metavar="DIR", help="override [paths] out_dir")
        p.add_argument("--data", metavar="DIR", help="override [paths] data_dir")
        p.add_argument("--limit", type=int, metavar="N", help="use only the first N samples")
        p.add_argument("--f64", action="store_true", help="run in float64")
        p.add_argument("--task", choices=("induction", "mnist_patch"))
        p.add_argument("--attention", choices=("self", "vanilla"))
        p.add_argument("--backward", choices=("unrolled", "implicit", "phantom"))
        p.add_argument("--epochs", type=int)
        p.add_argument(
            "--set", action="append", metavar="SECTION.KEY=VALUE", help="override any config key (repeatable)"
        )

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text, epilog=epilog, formatter_class=fmt)
        common(p)
        return p

    add("train", "train a model; writes checkpoint, metrics.csv, trace.csv, run_meta.json")

    p = add("eval", "evaluate a checkpoint on the test split")
    p.add_argument("--checkpoint", metavar="DIR", help="checkpoint directory (default out_dir/checkpoint)")
    p.add_argument("--export", action="store_true", help="also write attention CSVs for --sample")
    p.add_argument("--sample", type=int, default=0, help="test-split index for --export (default 0)")

    p = add("gradcheck", "compare implicit, unrolled and finite-difference gradients (float64)")
    p.add_argument("--corrupt-vjp", action="store_true", help="negative control: use a wrong derivative")

    p = add("trace", "per-head iteration statistics over a dataset split")
    p.add_argument("--checkpoint", metavar="DIR", help="checkpoint (default: untrained model)")
    p.add_argument("--split", choices=("train", "test"), default="train")

    p = add("heatmap", "export per-head attention maps of one test sample as CSV")
    p.add_argument("--checkpoint", metavar="DIR", help="checkpoint (default: untrained model)")
    p.add_argument("--sample", type=int, default=0, help="test-split index (default 0)")
    return parser


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "trace": cmd_trace,
    "heatmap": cmd_heatmap,
}


def exit_code(exc):
    """Map a library exception onto the documented exit codes."""
    if isinstance(exc, (ConfigError, ShapeError)):
        return EXIT_CONFIG
    if isinstance(exc, NumericalError):
        return EXIT_NUMERIC
    if isinstance(exc, CheckpointError):
        return EXIT_CHECKPOINT
    return EXIT_DATA


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (FpsaError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
