"""Datasets, training loops, transfer, cross-validation, metrics and latency benchmarking."""

from __future__ import annotations

import csv
import logging
import math
import statistics
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import features as F
from .audio_io import AudioClip, read_wav, write_wav
from .errors import CheckpointError, ConfigError, DatasetError, PipelineError
from .features import FeatureConfig
from .models import (
    FREEZE_POLICIES,
    Model,
    ModelSpec,
    apply_freeze,
    build_model,
    load_checkpoint,
    replace_head,
)
from .nn import Adam, AdamW, cosine_schedule, no_grad, one_hot, softmax_cross_entropy

log = logging.getLogger(__name__)

ORIGINS = ("ESC50", "US8K", "SYNTH")
_EXPECTED = {"ESC50": (50, 5), "US8K": (10, 10)}  # (n_labels, n_folds)
_METADATA = {
    "ESC50": ("meta/esc50.csv", "metadata.csv"),
    "US8K": ("metadata/UrbanSound8K.csv", "metadata.csv"),
    "SYNTH": ("metadata.csv",),
}
_FILENAME_COLS = ("filename", "slice_file_name")
_TARGET_COLS = ("target", "classid")
_NAME_COLS = ("category", "class")


# -- datasets ---------------------------------------------------------------

@dataclass
class Item:
    clip: AudioClip | Path
    label: int
    fold: int
    name: str = ""


@dataclass
class Dataset:
    items: list
    labels: list
    origin: str = "SYNTH"
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __len__(self):
        return len(self.items)

    @property
    def n_labels(self):
        return len(self.labels)

    @property
    def folds(self):
        return sorted({it.fold for it in self.items})

    def indices(self, folds) -> np.ndarray:
        folds = set(folds)
        return np.array([i for i, it in enumerate(self.items) if it.fold in folds], dtype=np.int64)

    def targets(self, idx=None) -> np.ndarray:
        y = np.array([it.label for it in self.items], dtype=np.int64)
        return y if idx is None else y[idx]

    def clip(self, i) -> AudioClip:
        ref = self.items[i].clip
        return ref if isinstance(ref, AudioClip) else read_wav(ref)


def _column(header, options, required=True):
    lowered = [h.strip().lower() for h in header]
    for opt in options:
        if opt in lowered:
            return lowered.index(opt)
    if required:
        raise DatasetError(f"metadata has none of the columns {options}")
    return None


def _resolve(root: Path, filename: str, fold: int):
    for cand in (root / "audio" / filename, root / "audio" / f"fold{fold}" / filename, root / filename):
        if cand.is_file():
            return cand
    return None


def load_dataset(root, origin: str = "SYNTH") -> Dataset:
    """Read a corpus laid out as audio files plus a metadata CSV.

    ESC-50 (``filename,fold,target,category,...``) and UrbanSound8K
    (``slice_file_name,...,fold,classID,class``) column names are both
    accepted. Errors name the offending data row, counting from 1 after
    the header.
    """
    root = Path(root)
    origin = origin.upper()
    if origin not in ORIGINS:
        raise DatasetError(f"unknown dataset origin {origin!r}")
    meta = next((root / m for m in _METADATA[origin] if (root / m).is_file()), None)
    if meta is None:
        raise DatasetError(f"no metadata CSV under {root}")
    n_labels_expected, n_folds_expected = _EXPECTED.get(origin, (None, None))

    with open(meta, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DatasetError(f"{meta} is empty") from None
        c_file = _column(header, _FILENAME_COLS)
        c_fold = _column(header, ("fold",))
        c_target = _column(header, _TARGET_COLS)
        c_name = _column(header, _NAME_COLS, required=False)
        items, names = [], {}
        for rownum, row in enumerate(reader, start=1):
            if not row:
                continue
            try:
                filename = row[c_file].strip()
                fold = int(row[c_fold])
                target = int(row[c_target])
            except (IndexError, ValueError) as exc:
                raise DatasetError(f"row {rownum}: malformed metadata ({exc})") from None
            if target < 0 or (n_labels_expected and target >= n_labels_expected):
                raise DatasetError(f"row {rownum}: label {target} out of range")
            if fold < 1 or (n_folds_expected and fold > n_folds_expected):
                raise DatasetError(f"row {rownum}: fold {fold} out of range")
            path = _resolve(root, filename, fold)
            if path is None:
                raise DatasetError(f"row {rownum}: audio file {filename!r} not found")
            if c_name is not None and c_name < len(row):
                names.setdefault(target, row[c_name].strip())
            items.append(Item(path, target, fold, filename))

    n_labels = n_labels_expected or (max((it.label for it in items), default=-1) + 1)
    labels = [names.get(i, str(i)) for i in range(n_labels)]
    return Dataset(items, labels, origin)


def _class_grid(n_classes: int):
    n_f = math.ceil(math.sqrt(n_classes))
    n_r = math.ceil(n_classes / n_f)
    return n_f, n_r


def synth_class_params(c: int, n_classes: int, family: int = 0):
    """(fundamental Hz, amplitude-modulation Hz) for class ``c``.

    Classes sit on a grid of log-spaced fundamentals (120 Hz .. ~2.4 kHz)
    by modulation rates (0 .. 8 Hz). ``family`` shifts the fundamentals by
    a fraction of a grid step so different families share no class.
    """
    n_f, n_r = _class_grid(n_classes)
    fi, ri = c % n_f, c // n_f
    f0 = 120.0 * 20.0 ** ((fi + 0.5 * (family % 2) + 0.25 * (family // 2)) / n_f)
    rate = 0.0 if n_r == 1 else 1.0 + 7.0 * ri / (n_r - 1)
    return f0, rate


def synth_clip(c: int, n_classes: int, rng: np.random.Generator, sample_rate=22050,
               duration=3.0, family: int = 0, noise=0.01) -> np.ndarray:
    f0, rate = synth_class_params(c, n_classes, family)
    f0 *= 1.0 + rng.uniform(-0.01, 0.01)
    t = np.arange(int(round(duration * sample_rate))) / sample_rate
    x = np.zeros_like(t)
    for h in range(1, 5):
        if h * f0 < sample_rate / 2:
            x += np.sin(2 * np.pi * h * f0 * t + rng.uniform(0, 2 * np.pi)) / h
    if rate > 0:
        x *= 0.5 * (1.0 + np.cos(2 * np.pi * rate * t + rng.uniform(0, 2 * np.pi)))
    x *= rng.uniform(0.3, 0.6) / np.abs(x).max()
    return x + noise * rng.standard_normal(t.size)


def synth_dataset(n_classes: int, per_class: int, seed: int = 0, n_folds: int = 4,
                  sample_rate: int = 22050, duration: float = 3.0, family: int = 0) -> Dataset:
    """Deterministic labeled corpus of harmonic tones.

    Clip ``j`` of every class goes to fold ``j % n_folds + 1``, so folds are
    class-balanced whenever ``per_class`` is a multiple of ``n_folds``.
    """
    if n_classes < 2:
        raise DatasetError("synthetic corpus needs at least 2 classes")
    rng = np.random.Generator(np.random.PCG64(seed))
    items = []
    for j in range(per_class):
        for c in range(n_classes):
            samples = synth_clip(c, n_classes, rng, sample_rate, duration, family)
            name = f"synth-{family}-{c:02d}-{j:03d}.wav"
            items.append(Item(AudioClip(samples, sample_rate, name), c, j % n_folds + 1, name))
    items.sort(key=lambda it: (it.label, it.name))
    labels = [f"class{c:02d}" for c in range(n_classes)]
    return Dataset(items, labels, "SYNTH")


def write_dataset(ds: Dataset, root) -> Path:
    """Materialize a dataset as ``audio/*.wav`` plus ``metadata.csv``."""
    root = Path(root)
    (root / "audio").mkdir(parents=True, exist_ok=True)
    with open(root / "metadata.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["filename", "fold", "target", "category"])
        for i, it in enumerate(ds.items):
            name = it.name or f"clip{i:05d}.wav"
            write_wav(ds.clip(i), root / "audio" / name)
            w.writerow([name, it.fold, it.label, ds.labels[it.label]])
    return root


def featurize(ds: Dataset, name: str, cfg: FeatureConfig = FeatureConfig(), idx=None) -> np.ndarray:
    """Un-normalized stacked features ``[N, 128, 128, C]`` (float32), cached per dataset."""
    key = (F.canonical_name(name), cfg)
    cache = ds._cache.setdefault(key, {})
    idx = np.arange(len(ds)) if idx is None else np.asarray(idx, dtype=np.int64)
    for i in idx:
        if int(i) not in cache:
            cache[int(i)] = F.extract_stack(ds.clip(int(i)), name, cfg).data.astype(np.float32)
    n_ch = len(F.config_from_name(name))
    if len(idx) == 0:
        return np.zeros((0, F.GRID, F.GRID, n_ch), np.float32)
    return np.stack([cache[int(i)] for i in idx])


# -- training ---------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 150
    batch_size: int = 32
    lr: float = 1e-3
    optimizer: str = "adam"
    schedule: str = "constant"
    weight_decay: float = 1e-4
    seed: int = 0
    features: str = "LM"
    freeze: str = "all_layers_trainable"
    target_train_acc: float | None = None  # stop once a full epoch reaches it

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.optimizer not in ("adam", "adamw"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.schedule not in ("constant", "cosine"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        if self.freeze not in FREEZE_POLICIES:
            raise ConfigError(f"unknown freeze policy {self.freeze!r}")
        F.config_from_name(self.features)

    @classmethod
    def finetune_defaults(cls, **kw):
        return cls(**{"epochs": 50, "batch_size": 32, "freeze": "last_layer_only", **kw})

    @classmethod
    def ast_defaults(cls, **kw):
        return cls(**{"epochs": 10, "batch_size": 8, "lr": 5e-5, "optimizer": "adamw",
                      "schedule": "cosine", "weight_decay": 1e-4, **kw})


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float | None
    val_acc: float | None


@dataclass
class History:
    records: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def column(self, name):
        return [getattr(r, name) for r in self.records]

    @property
    def best_epoch(self) -> EpochRecord | None:
        scored = [r for r in self.records if r.val_acc is not None]
        return max(scored, key=lambda r: r.val_acc) if scored else None

    def to_csv(self) -> str:
        lines = ["epoch,train_loss,train_acc,val_loss,val_acc"]
        for r in self.records:
            vals = [r.epoch, r.train_loss, r.train_acc, r.val_loss, r.val_acc]
            lines.append(",".join("" if v is None else repr(v) for v in vals))
        return "\n".join(lines) + "\n"

    def __eq__(self, other):
        return isinstance(other, History) and self.records == other.records


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    chunks = [order[i : i + batch_size] for i in range(0, n, batch_size)]
    # a lone trailing sample would make batch-norm statistics degenerate
    if len(chunks) > 1 and len(chunks[-1]) == 1:
        chunks[-2] = np.concatenate([chunks[-2], chunks.pop()])
    return chunks


def _loss_acc(logits: np.ndarray, y: np.ndarray):
    shifted = logits - logits.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = float(-logp[np.arange(len(y)), y].mean())
    acc = float((logits.argmax(axis=1) == y).mean())
    return loss, acc


def _check_folds(folds_train, fold_val):
    folds_train = set(folds_train)
    if fold_val is not None and fold_val in folds_train:
        raise PipelineError(f"validation fold {fold_val} is also a training fold")
    return folds_train


def train(model: Model, dataset: Dataset, folds_train, fold_val, train_cfg: TrainConfig,
          feature_cfg: FeatureConfig = FeatureConfig()):
    """Fit ``model`` on ``folds_train`` and track ``fold_val`` (may be None).

    Normalization statistics come from the training folds only and are
    stored on the model. Layers below the trainable part set by the freeze
    policy run once in eval mode and their outputs are reused every epoch.
    """
    folds_train = _check_folds(folds_train, fold_val)
    if model.spec.n_classes != dataset.n_labels:
        raise PipelineError(f"model has {model.spec.n_classes} classes, dataset {dataset.n_labels}")
    tr_idx = dataset.indices(folds_train)
    if tr_idx.size == 0:
        raise PipelineError("training split is empty")
    va_idx = dataset.indices([fold_val]) if fold_val is not None else np.zeros(0, np.int64)

    name = F.canonical_name(train_cfg.features)
    x_tr = featurize(dataset, name, feature_cfg, tr_idx)
    mean, std = F.channel_statistics(x_tr)
    model.normalization = (mean, std)
    model.features = name
    model.feature_config = feature_cfg.to_dict()
    model.labels = list(dataset.labels)
    dtype = model.dtype
    x_tr = ((x_tr - mean) / std).astype(dtype)
    y_tr = dataset.targets(tr_idx)
    x_va = ((featurize(dataset, name, feature_cfg, va_idx) - mean) / std).astype(dtype)
    y_va = dataset.targets(va_idx)

    start = apply_freeze(model, train_cfg.freeze)
    if start > 0:
        model.eval()
        with no_grad():
            x_tr = np.concatenate([model.forward(x_tr[i : i + 64], 0, start).data for i in range(0, len(x_tr), 64)])
    params = model.trainable_parameters()
    opt_cls = AdamW if train_cfg.optimizer == "adamw" else Adam
    opt = opt_cls(params, lr=train_cfg.lr,
                  weight_decay=train_cfg.weight_decay if train_cfg.optimizer == "adamw" else 0.0)
    n_classes = model.spec.n_classes
    steps_per_epoch = len(_batches(len(x_tr), train_cfg.batch_size, np.random.default_rng(0)))
    total_steps = steps_per_epoch * train_cfg.epochs
    step = 0
    history = History()

    for epoch in range(1, train_cfg.epochs + 1):
        rng = np.random.Generator(np.random.PCG64([train_cfg.seed, epoch]))
        model.reseed_dropout(train_cfg.seed * 100_003 + epoch)
        model.train()
        loss_sum, correct = 0.0, 0
        for batch in _batches(len(x_tr), train_cfg.batch_size, rng):
            if train_cfg.schedule == "cosine":
                opt.lr = cosine_schedule(step, total_steps, train_cfg.lr)
            opt.zero_grad()
            logits = model.forward(x_tr[batch], start)
            loss = softmax_cross_entropy(logits, one_hot(y_tr[batch], n_classes, dtype))
            loss.backward()
            opt.step()
            step += 1
            loss_sum += float(loss.data) * len(batch)
            correct += int((logits.data.argmax(axis=1) == y_tr[batch]).sum())
        train_loss, train_acc = loss_sum / len(x_tr), correct / len(x_tr)
        val_loss = val_acc = None
        if len(x_va):
            val_loss, val_acc = _loss_acc(model.predict_logits(x_va), y_va)
        history.records.append(EpochRecord(epoch, train_loss, train_acc, val_loss, val_acc))
        log.debug("epoch %d loss %.4f acc %.3f val %s", epoch, train_loss, train_acc, val_acc)
        if train_cfg.target_train_acc is not None and train_acc >= train_cfg.target_train_acc:
            break

    model.eval()
    model.provenance = {
        **model.provenance,
        "dataset": dataset.origin,
        "epochs": len(history),
        "folds_train": sorted(folds_train),
        "fold_val": fold_val,
        "seed": train_cfg.seed,
        "freeze": train_cfg.freeze,
    }
    return model, history


def default_split(dataset: Dataset):
    folds = dataset.folds
    if len(folds) < 2:
        return folds, None
    return folds[:-1], folds[-1]


def transfer_finetune(checkpoint, new_dataset: Dataset, train_cfg: TrainConfig | None = None,
                      folds_train=None, fold_val=None, head_seed: int | None = None):
    """Load a checkpoint, give it a fresh head for ``new_dataset`` and train under the freeze policy."""
    model = checkpoint if isinstance(checkpoint, Model) else load_checkpoint(checkpoint)
    if model.features is None or model.feature_config is None:
        raise CheckpointError("checkpoint carries no feature configuration")
    if train_cfg is None:
        train_cfg = TrainConfig.finetune_defaults(features=model.features)
    if F.canonical_name(train_cfg.features) != model.features:
        raise ConfigError(
            f"checkpoint was trained on {model.features}, finetune requested {train_cfg.features}"
        )
    feature_cfg = FeatureConfig.from_dict(model.feature_config)
    replace_head(model, new_dataset.n_labels, seed=train_cfg.seed if head_seed is None else head_seed)
    if folds_train is None:
        folds_train, fold_val = default_split(new_dataset)
    model.provenance = {**model.provenance, "pretrained_on": model.provenance.get("dataset")}
    return train(model, new_dataset, folds_train, fold_val, train_cfg, feature_cfg)


# -- metrics ----------------------------------------------------------------

@dataclass
class Metrics:
    accuracy: float
    precision: float
    recall: float
    f1: float
    confusion: np.ndarray  # rows = true class, cols = predicted class

    def as_row(self):
        return {"accuracy": self.accuracy, "precision": self.precision, "recall": self.recall, "f1": self.f1}

    def __eq__(self, other):
        return (
            isinstance(other, Metrics)
            and self.as_row() == other.as_row()
            and np.array_equal(self.confusion, other.confusion)
        )


def compute_metrics(y_true, y_pred, n_classes: int) -> Metrics:
    """Accuracy plus macro precision/recall/F1; a never-predicted class has precision 0."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.size == 0:
        raise PipelineError("cannot score an empty split")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    tp = np.diag(cm).astype(np.float64)
    predicted = cm.sum(axis=0)
    support = cm.sum(axis=1)
    precision = np.divide(tp, predicted, out=np.zeros(n_classes), where=predicted > 0)
    recall = np.divide(tp, support, out=np.zeros(n_classes), where=support > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros(n_classes), where=denom > 0)
    return Metrics(
        accuracy=float(tp.sum() / y_true.size),
        precision=float(precision.mean()),
        recall=float(recall.mean()),
        f1=float(f1.mean()),
        confusion=cm,
    )


def predict(model: Model, x: np.ndarray) -> np.ndarray:
    """Class indices; ``argmax`` already resolves ties to the lowest index."""
    return model.predict_logits(x).argmax(axis=1)


def evaluate(model: Model, dataset: Dataset, fold_set, feature_cfg: FeatureConfig | None = None) -> Metrics:
    idx = dataset.indices(fold_set)
    if idx.size == 0:
        raise PipelineError(f"no items in folds {sorted(fold_set)}")
    if model.features is None or model.normalization is None:
        raise PipelineError("model carries no feature configuration or normalization; train it first")
    if feature_cfg is None:
        feature_cfg = FeatureConfig.from_dict(model.feature_config) if model.feature_config else FeatureConfig()
    mean, std = model.normalization
    x = ((featurize(dataset, model.features, feature_cfg, idx) - mean) / std).astype(model.dtype)
    return compute_metrics(dataset.targets(idx), predict(model, x), model.spec.n_classes)


# -- cross-validation -------------------------------------------------------

@dataclass
class FoldResult:
    fold: int
    metrics: Metrics
    best_val_acc: float | None
    best_epoch: int | None
    history: History


@dataclass
class CVResult:
    folds: list
    architecture: str = ""
    features: str = ""

    @property
    def accuracies(self):
        return [f.metrics.accuracy for f in self.folds]

    @property
    def mean_accuracy(self) -> float:
        return float(sum(self.accuracies) / len(self.folds))

    def table_csv(self) -> str:
        """One row in the per-fold accuracy layout: model, features, fold 1..k, average."""
        head = ["model", "features"] + [f"fold_{f.fold}" for f in self.folds] + ["average_accuracy"]
        row = [self.architecture, self.features] + [f"{a:.4f}" for a in self.accuracies]
        row.append(f"{self.mean_accuracy:.4f}")
        return ",".join(head) + "\n" + ",".join(row) + "\n"

    def detail_csv(self) -> str:
        lines = ["fold,accuracy,precision,recall,f1,best_val_acc,best_epoch"]
        for f in self.folds:
            m = f.metrics
            lines.append(
                f"{f.fold},{m.accuracy!r},{m.precision!r},{m.recall!r},{m.f1!r},"
                f"{'' if f.best_val_acc is None else repr(f.best_val_acc)},{f.best_epoch or ''}"
            )
        return "\n".join(lines) + "\n"


def fold_seed(run_seed: int, fold: int) -> int:
    return int(np.random.SeedSequence([run_seed, fold]).generate_state(1)[0])


def _run_fold(spec, dataset, fold, folds, train_cfg, feature_cfg):
    model = build_model(replace(spec, seed=fold_seed(train_cfg.seed, fold)))
    cfg = replace(train_cfg, seed=fold_seed(train_cfg.seed, fold))
    model, history = train(model, dataset, [f for f in folds if f != fold], fold, cfg, feature_cfg)
    metrics = evaluate(model, dataset, [fold], feature_cfg)
    best = history.best_epoch
    return FoldResult(fold, metrics, best.val_acc if best else None, best.epoch if best else None, history)


def cross_validate(spec: ModelSpec, dataset: Dataset, k: int, train_cfg: TrainConfig,
                   feature_cfg: FeatureConfig = FeatureConfig(), jobs: int = 1) -> CVResult:
    """Train on every fold but ``i`` and score fold ``i``, for ``i = 1..k``.

    Fold seeds derive from the run seed and fold number only, so results
    do not depend on ``jobs``.
    """
    folds = list(range(1, k + 1))
    missing = set(folds) - set(dataset.folds)
    if missing:
        raise PipelineError(f"dataset has no items in folds {sorted(missing)}")
    featurize(dataset, train_cfg.features, feature_cfg)
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_run_fold, spec, dataset, f, folds, train_cfg, feature_cfg) for f in folds]
            results = [fut.result() for fut in futures]
    else:
        results = [_run_fold(spec, dataset, f, folds, train_cfg, feature_cfg) for f in folds]
    return CVResult(results, spec.architecture, F.canonical_name(train_cfg.features))


# -- benchmark --------------------------------------------------------------

def time_inference(model: Model, sample, iterations: int = 50, warmup: int = 5) -> list:
    """Per-call wall-clock times in ms for single-sample eval forwards."""
    if iterations < 2:
        raise ValueError("need at least 2 timed iterations")
    data = sample.data if isinstance(sample, F.StackedTensor) else np.asarray(sample)
    x = data[None].astype(model.dtype)
    model.eval()
    times = []
    with no_grad():
        for _ in range(warmup):
            model.forward(x)
        for _ in range(iterations):
            t0 = time.perf_counter()
            model.forward(x)
            times.append((time.perf_counter() - t0) * 1e3)
    return times


def benchmark_inference(model: Model, sample, iterations: int = 50, warmup: int = 5):
    """(mean_ms, std_ms) over ``iterations`` timed passes after ``warmup`` untimed ones."""
    times = time_inference(model, sample, iterations, warmup)
    return statistics.fmean(times), statistics.stdev(times)
