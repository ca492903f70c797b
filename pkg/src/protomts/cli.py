"""Command-line entry point: ``protomts {synth,train,eval,interpret}``.

Exit codes: 0 success, 2 usage/config/data error, 3 model-state error.

Config files are flat ``key=value`` lines with ``#`` comments. Keys are the
long flag names without the leading dashes (``-`` or ``_`` both accepted);
flags given on the command line override file values.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys

from . import __version__
from .dataset import stratified_split
from .errors import ConfigError, ContractError, DataError, ModelLoadError, ParseError
from .interpret import build_report, export_encodings
from .losses import RegularizerWeights
from .synthetic import SyntheticConfig, generate
from .training import TrainConfig, evaluate, fit, load_model, save_model
from .tsfile import load_ts, write_ts


EXIT_OK = 0
EXIT_USAGE = 2
EXIT_STATE = 3

TRAIN_FILE = "train.ts"
TEST_FILE = "test.ts"
MANIFEST = "manifest.json"
CHECKPOINT = "{out}.stage{stage}"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


_TRAIN_KEYS = {
    "epochs-stage1": ("epochs_stage1", int),
    "epochs-stage2": ("epochs_stage2", int),
    "epochs-stage3": ("epochs_stage3", int),
    "batch-size": ("batch_size", int),
    "lr-stage1": ("lr_stage1", float),
    "lr-stage2": ("lr_stage2", float),
    "lr-stage3": ("lr_stage3", float),
    "pairs-per-epoch": ("pairs_per_epoch", int),
    "grad-clip": ("grad_clip", float),
    "single-prototypes": ("single_prototypes", int),
    "multi-prototypes": ("multi_prototypes", int),
    "hidden": ("hidden", int),
    "seed": ("seed", int),
}
_WEIGHT_KEYS = {
    "lambda-diversity": ("diversity", float),
    "lambda-similarity": ("similarity", float),
    "lambda-coverage": ("coverage", float),
    "margin": ("margin", float),
}


def read_config_file(path) -> dict[str, str]:
    """Parse flat key=value lines; returns normalized keys to raw strings."""
    out: dict[str, str] = {}
    try:
        fh = open(path, encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror}") from exc
    with fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}, line {lineno}: expected key=value")
            key, value = (s.strip() for s in line.split("=", 1))
            key = key.replace("_", "-").lower()
            if key not in _TRAIN_KEYS and key not in _WEIGHT_KEYS:
                raise ConfigError(f"{path}, line {lineno}: unknown key {key!r}")
            out[key] = value
    return out


def train_config_from(file_values: dict[str, str], args: argparse.Namespace, base: TrainConfig | None = None) -> TrainConfig:
    """Defaults (or ``base``), overridden by the config file, overridden by flags."""
    merged = dict(file_values)
    for key in list(_TRAIN_KEYS) + list(_WEIGHT_KEYS):
        flag = getattr(args, key.replace("-", "_"), None)
        if flag is not None:
            merged[key] = str(flag)
    base = base or TrainConfig()
    train_kw = {name: getattr(base, name) for name, _ in _TRAIN_KEYS.values()}
    weight_kw = {name: getattr(base.weights, name) for name, _ in _WEIGHT_KEYS.values()}
    for key, raw in merged.items():
        table, target = (_TRAIN_KEYS, train_kw) if key in _TRAIN_KEYS else (_WEIGHT_KEYS, weight_kw)
        name, kind = table[key]
        try:
            target[name] = kind(raw)
        except ValueError:
            raise ConfigError(f"{key} expects a {kind.__name__}, got {raw!r}") from None
    extra = {"chrono_init": base.chrono_init}
    return TrainConfig(weights=RegularizerWeights(**weight_kw), **train_kw, **extra)


def _write_text(path, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _load_split(directory, name):
    path = os.path.join(directory, name)
    if not os.path.isfile(path):
        raise DataError(f"missing data file {path}")
    return load_ts(path)


def _find_split(directory, which: str):
    """``train.ts``/``test.ts``, else the first ``*_TRAIN.ts``/``*_TEST.ts`` (archive naming)."""
    if not os.path.isdir(directory):
        raise DataError(f"data directory {directory} does not exist")
    plain = TRAIN_FILE if which == "train" else TEST_FILE
    if os.path.isfile(os.path.join(directory, plain)):
        return _load_split(directory, plain)
    suffix = f"_{which.upper()}.ts"
    matches = sorted(f for f in os.listdir(directory) if f.endswith(suffix))
    if not matches:
        raise DataError(f"no {plain} or *{suffix} in {directory}")
    return _load_split(directory, matches[0])


# -- commands ----------------------------------------------------------------
def cmd_synth(args) -> int:
    config = SyntheticConfig(
        series_length=args.series_length,
        samples_per_class=args.samples_per_class,
        noise_std=args.noise_std,
        seed=args.seed,
    )
    data = generate(config)
    train, test = stratified_split(data, args.test_fraction, args.seed)
    try:
        os.makedirs(args.out, exist_ok=True)
        write_ts(train, os.path.join(args.out, TRAIN_FILE))
        write_ts(test, os.path.join(args.out, TEST_FILE))
        manifest = {
            "generator": "synthetic",
            "config": {
                "series_length": config.series_length,
                "samples_per_class": config.samples_per_class,
                "noise_std": config.noise_std,
                "seed": config.seed,
                "patterns_per_variable": config.patterns_per_variable,
            },
            "test_fraction": args.test_fraction,
            "split_seed": args.seed,
            "train_samples": len(train),
            "test_samples": len(test),
            "irrelevant_cycles": [float(c) for c in data.meta["irrelevant_cycles"]],
        }
        _write_text(os.path.join(args.out, MANIFEST), json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    except OSError as exc:
        raise DataError(f"cannot write to {args.out}: {exc.strerror}") from exc
    print(f"wrote {len(train)} train and {len(test)} test samples to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    file_values = read_config_file(args.config) if args.config else {}
    train = _find_split(args.data, "train")
    test = None
    try:
        test = _find_split(args.data, "test")
    except DataError:
        pass

    model = None
    if args.resume:
        model = load_model(args.resume)
        print(f"resuming from {args.resume}; completed stages {[i + 1 for i, s in enumerate(model.stages) if s]}")
    # a resumed run keeps the checkpoint's settings unless overridden explicitly
    cfg = train_config_from(file_values, args, model.config if model else None)

    def checkpoint(m, stage):
        save_model(m, CHECKPOINT.format(out=args.out, stage=stage))

    log: list[dict] = []
    model = fit(train, cfg, model=model, log=log, checkpoint=checkpoint)
    try:
        save_model(model, args.out)
        if args.log:
            _write_log(args.log, log)
    except OSError as exc:
        raise DataError(f"cannot write output: {exc.strerror}") from exc
    if test is not None and len(test):
        print(f"hold-out accuracy {evaluate(model, test)['accuracy']:.4f}")
    else:
        print("no test split found; model trained without hold-out evaluation")
    return EXIT_OK


LOG_FIELDS = ("stage", "variable", "epoch", "loss", "heldout", "ce", "diversity", "similarity", "coverage", "accuracy")


def _write_log(path, log: list[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_FIELDS, lineterminator="\n")
        w.writeheader()
        for rec in log:
            w.writerow({k: rec.get(k, "") for k in LOG_FIELDS})


def cmd_eval(args) -> int:
    model = load_model(args.model)
    data = load_ts(args.data) if os.path.isfile(args.data) else _find_split(args.data, "test")
    if data.class_names != model.class_names:
        raise DataError("data class names differ from the model's")
    result = evaluate(model, data)
    print(f"accuracy {result['accuracy']:.4f}")
    for name, acc in zip(model.class_names, result["per_class"]):
        print(f"  {name}: {acc:.4f}")
    rows = [["true\\pred"] + model.class_names]
    rows += [[name] + [str(int(v)) for v in row] for name, row in zip(model.class_names, result["confusion"])]
    text = "".join(",".join(r) + "\n" for r in rows)
    if args.confusion:
        try:
            _write_text(args.confusion, text)
        except OSError as exc:
            raise DataError(f"cannot write {args.confusion}: {exc.strerror}") from exc
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_interpret(args) -> int:
    model = load_model(args.model)
    train = load_ts(args.data) if os.path.isfile(args.data) else _find_split(args.data, "train")
    report = build_report(model, train)
    try:
        os.makedirs(args.out, exist_ok=True)
        report.write_json(os.path.join(args.out, "report.json"))
        export_encodings(model, train, args.out)
    except OSError as exc:
        raise DataError(f"cannot write to {args.out}: {exc.strerror}") from exc
    print(f"wrote report for {len(report.single)} single-variable and {len(report.multi)} multivariable prototypes")
    return EXIT_OK


# -- wiring ------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="protomts", description="Two-level prototype learning for multivariable time series.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate the synthetic benchmark as .ts files")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--samples-per-class", type=int, default=100)
    s.add_argument("--noise-std", type=float, default=0.1)
    s.add_argument("--series-length", type=int, default=128)
    s.add_argument("--test-fraction", type=float, default=0.2)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="run the three training stages")
    t.add_argument("--data", required=True, help="directory with train.ts/test.ts or *_TRAIN.ts/*_TEST.ts")
    t.add_argument("--out", required=True, help="model file to write")
    t.add_argument("--config", help="flat key=value config file")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--log", help="CSV training log path")
    for key, (_, kind) in list(_TRAIN_KEYS.items()) + list(_WEIGHT_KEYS.items()):
        t.add_argument(f"--{key}", type=kind, default=None)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="accuracy and confusion matrix of a trained model")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True, help=".ts file, or directory holding the test split")
    e.add_argument("--confusion", help="write the confusion matrix CSV here instead of stdout")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("interpret", help="prototype projections, multivariable report and encodings")
    i.add_argument("--model", required=True)
    i.add_argument("--data", required=True, help=".ts file, or directory holding the train split")
    i.add_argument("--out", required=True)
    i.set_defaults(func=cmd_interpret)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"protomts: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (ContractError, ModelLoadError) as exc:
        print(f"protomts: model error: {exc}", file=sys.stderr)
        return EXIT_STATE
    except (ConfigError, DataError, ParseError) as exc:
        print(f"protomts: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"protomts: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
