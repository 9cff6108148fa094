"""Command-line front end.

Every subcommand writes its outputs and a ``manifest.json`` under
``--out-dir``. Exit status is 0 on success, 1 when a pipeline stage fails
and 2 on usage errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import features as F
from .audio_io import read_wav
from .errors import ConfigError, SonostackError
from .models import ModelSpec, build_model, count_params, load_checkpoint, save_checkpoint
from . import pipeline as P

log = logging.getLogger("sonostack")

class UsageError(Exception):
    pass


class StageError(Exception):
    def __init__(self, stage, exc):
        super().__init__(f"{stage} failed: {exc}")
        self.stage = stage


class _Stage:
    """Context manager that tags domain errors with the stage they came from."""

    def __init__(self, name):
        self.name = name

    def __enter__(self):
        log.info("stage: %s", self.name)
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc is not None and isinstance(exc, (SonostackError, OSError, ValueError)):
            raise StageError(self.name, exc) from exc
        return False


def _feature_name(value: str) -> str:
    try:
        return F.canonical_name(value)
    except ConfigError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _positive_int(value: str) -> int:
    n = int(value)
    if n < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {value}")
    return n


def _env_seed() -> int:
    raw = os.environ.get("SONOSTACK_SEED")
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"SONOSTACK_SEED must be an integer, got {raw!r}") from None


# -- parser -----------------------------------------------------------------

def _common(p, seed_default):
    p.add_argument("--out-dir", default="out", help="directory receiving every output file")
    p.add_argument("--config", default=None, help="JSON file of flag values (flags given on the command line win)")
    p.add_argument("--seed", type=int, default=seed_default, help="run seed; falls back to $SONOSTACK_SEED, then 0")
    p.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"], help="logging verbosity")


def _dataset_args(p, family=0, classes=2, per_class=8):
    g = p.add_argument_group("dataset")
    g.add_argument("--dataset", default="synth", help="'synth' or a corpus root directory")
    g.add_argument("--origin", default="SYNTH", choices=P.ORIGINS, help="layout of a corpus root")
    g.add_argument("--classes", type=_positive_int, default=classes, help="synthetic corpus: class count")
    g.add_argument("--per-class", type=int, default=per_class, help="synthetic corpus: clips per class")
    g.add_argument("--folds", type=_positive_int, default=4, help="synthetic fold count / cross-validation k")
    g.add_argument("--family", type=int, default=family, help="synthetic corpus: tone family")
    g.add_argument("--duration", type=float, default=3.0, help="clip duration in seconds")


def _train_args(p, epochs=150, lr=1e-3, freeze="all_layers_trainable", batch=32):
    g = p.add_argument_group("training")
    g.add_argument("--epochs", type=_positive_int, default=epochs, help="maximum training epochs")
    g.add_argument("--batch-size", type=_positive_int, default=batch, help="mini-batch size")
    g.add_argument("--lr", type=float, default=lr, help="learning rate")
    g.add_argument("--optimizer", default="adam", choices=["adam", "adamw"], help="optimizer kind")
    g.add_argument("--schedule", default="constant", choices=["constant", "cosine"], help="learning-rate schedule")
    g.add_argument("--weight-decay", type=float, default=1e-4, help="AdamW decoupled weight decay")
    g.add_argument("--freeze", default=freeze, choices=list(P.FREEZE_POLICIES), help="which layers train")
    g.add_argument("--target-train-acc", type=float, default=None,
                   help="stop once an epoch reaches this training accuracy")


def _arch_args(p):
    g = p.add_argument_group("model")
    g.add_argument("--arch", default="cnn1", type=str.lower, choices=["cnn1", "cnn2", "ast"], help="architecture")
    g.add_argument("--depth", type=_positive_int, default=2, help="AST blocks")
    g.add_argument("--heads", type=_positive_int, default=4, help="AST attention heads")
    g.add_argument("--embed-dim", type=_positive_int, default=64, help="AST embedding width")
    g.add_argument("--ffn-dim", type=_positive_int, default=128, help="AST feed-forward width")


def build_parser() -> argparse.ArgumentParser:
    seed_default = _env_seed()
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="sonostack", description=__doc__.splitlines()[0], formatter_class=fmt)
    parser.add_argument("--version", action="version", version=f"sonostack {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("synth", help="write a synthetic corpus as WAV files plus metadata.csv", formatter_class=fmt)
    _common(p, seed_default)
    p.add_argument("--classes", type=_positive_int, default=2, help="class count")
    p.add_argument("--per-class", type=int, default=8, help="clips per class")
    p.add_argument("--folds", type=_positive_int, default=4, help="fold count")
    p.add_argument("--family", type=int, default=0, help="tone family; families share no class")
    p.add_argument("--duration", type=float, default=3.0, help="clip duration in seconds")

    p = sub.add_parser("extract", help="dump stacked feature maps for one clip", formatter_class=fmt)
    _common(p, seed_default)
    p.add_argument("--features", type=_feature_name, default="LM", help="'+'-joined feature kinds")
    p.add_argument("--in", dest="input", required=True, help="input WAV file")
    p.add_argument("--out", default="features.fmap", help="FMAP file name, relative to --out-dir")

    p = sub.add_parser("train", help="train a model and save a checkpoint", formatter_class=fmt)
    _common(p, seed_default)
    p.add_argument("--features", type=_feature_name, default="LM", help="'+'-joined feature kinds")
    _arch_args(p)
    _dataset_args(p)
    _train_args(p)
    p.add_argument("--val-fold", type=int, default=None, help="validation fold; unset means the last fold")
    p.add_argument("--checkpoint", default="model.ssck", help="checkpoint name, relative to --out-dir")

    p = sub.add_parser("finetune", help="retrain the head of a checkpoint on a new corpus", formatter_class=fmt)
    _common(p, seed_default)
    p.add_argument("--checkpoint", required=True, help="pretrained checkpoint path")
    p.add_argument("--features", type=_feature_name, default=None,
                   help="must match the checkpoint; unset means the checkpoint's own")
    _dataset_args(p, family=1, classes=10)
    _train_args(p, epochs=50, freeze="last_layer_only")
    p.add_argument("--val-fold", type=int, default=None, help="validation fold; unset means the last fold")
    p.add_argument("--save", default="finetuned.ssck", help="output checkpoint name, relative to --out-dir")

    p = sub.add_parser("crossval", help="k-fold cross-validation", formatter_class=fmt)
    _common(p, seed_default)
    p.add_argument("--features", type=_feature_name, default="LM", help="'+'-joined feature kinds")
    _arch_args(p)
    _dataset_args(p)
    _train_args(p)
    p.add_argument("--jobs", type=_positive_int, default=1, help="parallel fold workers")

    p = sub.add_parser("eval", help="score a checkpoint on some folds", formatter_class=fmt)
    _common(p, seed_default)
    p.add_argument("--checkpoint", required=True, help="checkpoint to score")
    _dataset_args(p)
    p.add_argument("--eval-folds", type=int, nargs="+", default=None, help="folds to score; unset means every fold")

    p = sub.add_parser("bench", help="single-sample inference latency", formatter_class=fmt)
    _common(p, seed_default)
    p.add_argument("--arch", default="cnn1", type=str.lower, choices=["cnn1", "cnn2", "ast", "ast-full"],
                   help="fresh model to time; ast-full is the full-size transformer")
    p.add_argument("--checkpoint", default=None, help="benchmark this checkpoint instead of a fresh --arch")
    p.add_argument("--in-channels", type=_positive_int, default=3, help="input channels of a fresh model")
    p.add_argument("--n-classes", type=_positive_int, default=50, help="head width of a fresh model")
    p.add_argument("--height", type=_positive_int, default=128, help="input rows")
    p.add_argument("--width", type=_positive_int, default=128, help="input columns")
    p.add_argument("--iterations", type=int, default=50, help="timed forward passes")
    p.add_argument("--warmup", type=int, default=5, help="untimed forward passes before timing")
    return parser


# -- config handling --------------------------------------------------------

def _load_config(path) -> dict:
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    if isinstance(data, dict) and "config" in data and "command" in data:
        data = data["config"]  # a previous run manifest
    if not isinstance(data, dict):
        raise UsageError(f"config {path} must hold a JSON object")
    return {k.replace("-", "_"): v for k, v in data.items()}


def parse_args(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        values = _load_config(args.config)
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in sub._actions}
        unknown = sorted(set(values) - known - {"command"})
        if unknown:
            sub.error(f"unknown config keys: {', '.join(unknown)}")
        values.pop("command", None)
        values.pop("config", None)
        actions = {a.dest: a for a in sub._actions}
        for key, value in values.items():
            action = actions[key]
            if action.type is not None and action.nargs is None and value is not None:
                # argparse runs string defaults through the flag's type, just like typed input
                values[key] = str(value)
            elif action.choices is not None and value not in action.choices:
                sub.error(f"config value {value!r} for {key} is not one of {list(action.choices)}")
        sub.set_defaults(**values)
        args = parser.parse_args(argv)
        for key in values:
            action = actions[key]
            if action.choices is not None and getattr(args, key) not in action.choices:
                sub.error(f"config value {values[key]!r} for {key} is not one of {list(action.choices)}")
    return args


# -- outputs ----------------------------------------------------------------

def _atomic_write(path: Path, data: bytes):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _write_text(path: Path, text: str):
    _atomic_write(path, text.encode("utf-8"))


def write_manifest(out_dir: Path, command: str, config: dict, seed: int, outputs, started: float):
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "version": __version__,
        "outputs": [str(p) for p in outputs],
        "started": time.strftime("%Y-%m-%dT%H:%M:%S", time.localtime(started)),
        "finished": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    path = out_dir / "manifest.json"
    _write_text(path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


# -- commands ---------------------------------------------------------------

def _dataset(args):
    if args.dataset == "synth":
        return P.synth_dataset(args.classes, args.per_class, seed=args.seed, n_folds=args.folds,
                               duration=args.duration, family=args.family)
    return P.load_dataset(args.dataset, args.origin)


def _spec(args, in_channels, n_classes):
    return ModelSpec(args.arch.upper(), in_channels, n_classes, depth=args.depth, heads=args.heads,
                     embed_dim=args.embed_dim, ffn_dim=args.ffn_dim, seed=args.seed)


def _train_cfg(args, features):
    return P.TrainConfig(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr, optimizer=args.optimizer,
                         schedule=args.schedule, weight_decay=args.weight_decay, seed=args.seed,
                         features=features, freeze=args.freeze, target_train_acc=args.target_train_acc)


def _split(ds, val_fold):
    folds = ds.folds
    if val_fold is None:
        return P.default_split(ds)
    if val_fold not in folds:
        raise P.PipelineError(f"validation fold {val_fold} not in dataset folds {folds}")
    return [f for f in folds if f != val_fold], val_fold


def cmd_synth(args, out):
    with _Stage("generate corpus"):
        ds = P.synth_dataset(args.classes, args.per_class, seed=args.seed, n_folds=args.folds,
                             duration=args.duration, family=args.family)
    with _Stage("write corpus"):
        P.write_dataset(ds, out)
    print(f"wrote {len(ds)} clips, {ds.n_labels} classes, folds {ds.folds} to {out}")
    return [out / "metadata.csv", out / "audio"]


def cmd_extract(args, out):
    cfg = F.FeatureConfig()
    with _Stage("read audio"):
        clip = read_wav(args.input)
    with _Stage("extract features"):
        clip = F.prepare_clip(clip, cfg)
        maps = [F.resize_map(F.extract(clip, kind, cfg)) for kind in F.config_from_name(args.features)]
        stacked = F.stack(maps)
    path = out / args.out
    with _Stage("write features"):
        _atomic_write(path, F.dump_fmaps(maps))
    h, w, c = stacked.shape
    print(f"{args.features}: {h}x{w}x{c} -> {path}")
    return [path]


def cmd_train(args, out):
    with _Stage("load dataset"):
        ds = _dataset(args)
        folds_train, fold_val = _split(ds, args.val_fold)
    n_ch = len(F.config_from_name(args.features))
    with _Stage("build model"):
        model = build_model(_spec(args, n_ch, ds.n_labels))
    with _Stage("train"):
        model, hist = P.train(model, ds, folds_train, fold_val, _train_cfg(args, args.features), F.FeatureConfig(duration=args.duration))
    ckpt = out / args.checkpoint
    with _Stage("save outputs"):
        save_checkpoint(model, ckpt)
        _write_text(out / "history.csv", hist.to_csv())
    last = hist.records[-1]
    print(f"epochs={len(hist)} train_acc={last.train_acc:.4f} val_acc={last.val_acc if last.val_acc is not None else 'n/a'}")
    return [ckpt, out / "history.csv"]


def cmd_finetune(args, out):
    with _Stage("load checkpoint"):
        model = load_checkpoint(args.checkpoint)
    with _Stage("load dataset"):
        ds = _dataset(args)
        folds_train, fold_val = _split(ds, args.val_fold)
    features = args.features or model.features
    with _Stage("finetune"):
        model, hist = P.transfer_finetune(model, ds, _train_cfg(args, features), folds_train, fold_val)
    ckpt = out / args.save
    with _Stage("save outputs"):
        save_checkpoint(model, ckpt)
        _write_text(out / "history.csv", hist.to_csv())
    last = hist.records[-1]
    print(f"epochs={len(hist)} train_acc={last.train_acc:.4f} val_acc={last.val_acc if last.val_acc is not None else 'n/a'}")
    return [ckpt, out / "history.csv"]


def cmd_crossval(args, out):
    with _Stage("load dataset"):
        ds = _dataset(args)
    k = args.folds if args.dataset == "synth" else len(ds.folds)
    n_ch = len(F.config_from_name(args.features))
    with _Stage("cross-validate"):
        res = P.cross_validate(_spec(args, n_ch, ds.n_labels), ds, k, _train_cfg(args, args.features),
                               F.FeatureConfig(duration=args.duration), jobs=args.jobs)
    with _Stage("save outputs"):
        _write_text(out / "crossval.csv", res.table_csv())
        _write_text(out / "folds.csv", res.detail_csv())
        for f in res.folds:
            _write_text(out / f"history_fold{f.fold}.csv", f.history.to_csv())
    sys.stdout.write(res.detail_csv())
    print(f"mean_accuracy={res.mean_accuracy:.4f}")
    return [out / "crossval.csv", out / "folds.csv"] + [out / f"history_fold{f.fold}.csv" for f in res.folds]


def cmd_eval(args, out):
    with _Stage("load checkpoint"):
        model = load_checkpoint(args.checkpoint)
    with _Stage("load dataset"):
        ds = _dataset(args)
    folds = args.eval_folds or ds.folds
    with _Stage("evaluate"):
        m = P.evaluate(model, ds, folds)
    with _Stage("save outputs"):
        row = m.as_row()
        _write_text(out / "metrics.csv", ",".join(row) + "\n" + ",".join(repr(v) for v in row.values()) + "\n")
        _write_text(out / "confusion.csv", "\n".join(",".join(map(str, r)) for r in m.confusion) + "\n")
    print(" ".join(f"{k}={v:.4f}" for k, v in row.items()))
    return [out / "metrics.csv", out / "confusion.csv"]


def cmd_bench(args, out):
    with _Stage("build model"):
        if args.checkpoint:
            model = load_checkpoint(args.checkpoint)
            c = model.spec.in_channels
        elif args.arch == "ast-full":
            model = build_model(ModelSpec.full_ast(args.n_classes, args.in_channels, args.seed))
            c = args.in_channels
        else:
            model = build_model(ModelSpec(args.arch.upper(), args.in_channels, args.n_classes, seed=args.seed))
            c = args.in_channels
    sample = np.random.default_rng(args.seed).standard_normal((args.height, args.width, c)).astype(np.float32)
    with _Stage("benchmark"):
        times = P.time_inference(model, sample, args.iterations, args.warmup)
    mean = float(np.mean(times))
    std = float(np.std(times, ddof=1))
    learnable, total = count_params(model)
    with _Stage("save outputs"):
        _write_text(out / "bench.csv", "iteration,ms\n" + "".join(f"{i},{t!r}\n" for i, t in enumerate(times, 1)))
    label = args.checkpoint or args.arch
    print(f"{label}: params={learnable} ({total} with running stats) iterations={len(times)} "
          f"warmup={args.warmup} mean_ms={mean:.3f} std_ms={std:.3f}")
    return [out / "bench.csv"]


HANDLERS = {
    "synth": cmd_synth,
    "extract": cmd_extract,
    "train": cmd_train,
    "finetune": cmd_finetune,
    "crossval": cmd_crossval,
    "eval": cmd_eval,
    "bench": cmd_bench,
}


def run(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse_args(argv)
    except UsageError as exc:
        print(f"sonostack: error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:
        return int(exc.code or 0)

    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    out = Path(args.out_dir)
    started = time.time()
    try:
        out.mkdir(parents=True, exist_ok=True)
        outputs = HANDLERS[args.command](args, out)
        config = {k: v for k, v in vars(args).items() if k not in ("command", "config", "log_level")}
        write_manifest(out, args.command, config, args.seed, outputs, started)
    except StageError as exc:
        print(f"sonostack {args.command}: {exc}", file=sys.stderr)
        return 1
    except (SonostackError, OSError) as exc:
        print(f"sonostack {args.command}: {exc}", file=sys.stderr)
        return 1
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
