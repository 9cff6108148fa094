"""CNN-1, CNN-2 and the Audio Spectrogram Transformer, plus checkpoints.

Models are ordered layer lists. CNN inputs are ``[N, 128, 128, C]``
stacked feature tensors; the AST takes ``[N, 128, T, C]`` log-mel maps with
``T`` a multiple of 16.

With 3 input channels and a 50-class head, CNN-1 has 147,058 parameters
and CNN-2 151,922 when batch-norm running statistics are counted, which
is how the 146 K / 151 K figures reported for these models are matched.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .errors import CheckpointError, ConfigError, ShapeError
from .nn import layers as L
from .nn.tensor import Tensor, no_grad

ARCHITECTURES = ("CNN1", "CNN2", "AST")


@dataclass(frozen=True)
class ModelSpec:
    architecture: str
    in_channels: int = 3
    n_classes: int = 50
    depth: int = 2
    heads: int = 4
    embed_dim: int = 64
    ffn_dim: int = 128
    patch: int = 16
    dropout: float = 0.1
    seed: int = 0

    def __post_init__(self):
        arch = self.architecture.upper().replace("-", "")
        if arch not in ARCHITECTURES:
            raise ConfigError(f"unknown architecture {self.architecture!r}")
        object.__setattr__(self, "architecture", arch)
        if self.n_classes < 2:
            raise ConfigError("n_classes must be >= 2")
        if self.in_channels < 1:
            raise ConfigError("in_channels must be >= 1")
        if arch == "AST" and self.embed_dim % self.heads:
            raise ConfigError(f"embed_dim {self.embed_dim} is not divisible by {self.heads} heads")

    @classmethod
    def full_ast(cls, n_classes=50, in_channels=1, seed=0):
        # 12 heads: 768 is not divisible by 20
        return cls("AST", in_channels, n_classes, depth=20, heads=12, embed_dim=768,
                   ffn_dim=3072, patch=16, dropout=0.1, seed=seed)

    def to_dict(self):
        return asdict(self)


class Model:
    """Sequential network with the metadata a checkpoint carries."""

    def __init__(self, spec: ModelSpec, layers):
        self.spec = spec
        self.layers: list[tuple[str, L.Module]] = list(layers)
        self.labels: list[str] = [str(i) for i in range(spec.n_classes)]
        self.normalization: tuple[np.ndarray, np.ndarray] | None = None
        self.features: str | None = None
        self.feature_config: dict | None = None
        self.provenance: dict = {}
        self.training = True

    def __repr__(self):
        body = "\n".join(f"  {name}: {layer!r}" for name, layer in self.layers)
        return f"Model({self.spec.architecture},\n{body}\n)"

    def layer(self, name):
        for n, layer in self.layers:
            if n == name:
                return layer
        raise KeyError(name)

    def layer_index(self, name):
        return [n for n, _ in self.layers].index(name)

    def named_parameters(self):
        for name, layer in self.layers:
            yield from layer.named_parameters(name + ".")

    def named_buffers(self):
        for name, layer in self.layers:
            yield from layer.named_buffers(name + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]

    def state_dict(self):
        """Copies of every parameter and buffer, keyed by dotted name."""
        out = {n: p.data.copy() for n, p in self.named_parameters()}
        out.update({n: b.copy() for n, b in self.named_buffers()})
        return out

    def train(self, mode=True):
        self.training = mode
        for _, layer in self.layers:
            layer.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def astype(self, dtype):
        for _, layer in self.layers:
            layer.astype(dtype)
        return self

    @property
    def dtype(self):
        return self.parameters()[0].data.dtype

    def reseed_dropout(self, seed):
        k = 0
        for _, layer in self.layers:
            for m in layer.modules():
                if isinstance(m, L.Dropout):
                    m.reseed([seed, k])
                    k += 1

    def forward(self, x, start=0, stop=None):
        """Run layers ``[start, stop)``; ``x`` may be an array or a Tensor."""
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.dtype))
        for _, layer in self.layers[start:stop]:
            x = layer(x)
        return x

    __call__ = forward

    def head_index(self):
        return len(self.layers) - 1

    def predict_logits(self, batch, batch_size=32):
        """Eval-mode logits without building a graph; restores the previous mode."""
        was_training = self.training
        self.eval()
        try:
            with no_grad():
                outs = [self.forward(batch[i : i + batch_size]).data for i in range(0, len(batch), batch_size)]
        finally:
            self.train(was_training)
        return np.concatenate(outs) if outs else np.zeros((0, self.spec.n_classes))


# -- builders ---------------------------------------------------------------

def _conv_block(spec, rng, i, cin, cout, bn, drop):
    out = [(f"conv{i}", L.Conv2D(cin, cout, 2, rng))]
    if bn:
        out.append((f"bn{i}", L.BatchNorm(cout)))
    out += [(f"relu{i}", L.ReLU()), (f"pool{i}", L.MaxPool2D(2))]
    if drop:
        out.append((f"drop{i}", L.Dropout(0.25, spec.seed + i)))
    return out


def _cnn(spec: ModelSpec, regularized: bool) -> Model:
    rng = np.random.default_rng(spec.seed)
    widths = [spec.in_channels, 32, 32, 64, 64]
    layers = []
    for i in range(1, 5):
        layers += _conv_block(spec, rng, i, widths[i - 1], widths[i], regularized, regularized and i in (2, 4))
    layers.append(("gap", L.GlobalAvgPool()))
    layers.append(("fc1", L.Dense(64, 1024, rng)))
    if regularized:
        layers.append(("bn5", L.BatchNorm(1024)))
    layers.append(("relu5", L.ReLU()))
    layers.append(("head", L.Dense(1024, spec.n_classes, rng, init="glorot")))
    return Model(spec, layers)


def build_cnn1(spec: ModelSpec) -> Model:
    """Four 2x2 conv + ReLU + max-pool blocks (32, 32, 64, 64 filters), GAP, dense 1024, head."""
    if spec.architecture != "CNN1":
        raise ConfigError(f"build_cnn1 got a {spec.architecture} spec")
    return _cnn(spec, regularized=False)


def build_cnn2(spec: ModelSpec) -> Model:
    """CNN-1 with batch norm after every conv and the dense layer, dropout 0.25 after blocks 2 and 4."""
    if spec.architecture != "CNN2":
        raise ConfigError(f"build_cnn2 got a {spec.architecture} spec")
    return _cnn(spec, regularized=True)


def build_ast(spec: ModelSpec) -> Model:
    if spec.architecture != "AST":
        raise ConfigError(f"build_ast got a {spec.architecture} spec")
    rng = np.random.default_rng(spec.seed)
    d = spec.embed_dim
    layers = [
        ("patch", L.PatchEmbed(spec.in_channels, d, spec.patch, rng)),
        ("embed", L.ClsPosEmbed(d, spec.patch, rng)),
    ]
    for i in range(spec.depth):
        block = L.TransformerBlock(d, spec.heads, spec.ffn_dim, spec.dropout, rng, seed=spec.seed + 2 * i)
        layers.append((f"block{i}", block))
    layers += [
        ("cls", L.ClsPool()),
        ("norm", L.LayerNorm(d)),
        ("head", L.Dense(d, spec.n_classes, rng, init="glorot")),
    ]
    return Model(spec, layers)


def ast_token_count(h: int, w: int, patch: int = 16) -> int:
    if h % patch or w % patch:
        raise ShapeError(f"{h}x{w} input is not a multiple of the {patch}x{patch} patch")
    return (h // patch) * (w // patch) + 1


BUILDERS = {"CNN1": build_cnn1, "CNN2": build_cnn2, "AST": build_ast}


def build_model(spec: ModelSpec) -> Model:
    return BUILDERS[spec.architecture](spec)


def count_params(model: Model | None) -> tuple[int, int]:
    """(learnable, total); total adds batch-norm running statistics."""
    if model is None:
        return 0, 0
    learnable = sum(p.data.size for p in model.parameters())
    buffers = sum(b.size for _, b in model.named_buffers())
    return learnable, learnable + buffers


# -- transfer ---------------------------------------------------------------

FREEZE_POLICIES = ("all_layers_trainable", "last_layer_only", "last_two_layers")


def trainable_start(model: Model, policy: str) -> int:
    """Index of the first layer left trainable under ``policy``."""
    if policy == "all_layers_trainable":
        return 0
    head = model.head_index()
    if policy == "last_layer_only":
        return head
    if policy == "last_two_layers":
        for i in range(head - 1, -1, -1):
            layer = model.layers[i][1]
            if layer.params and not isinstance(layer, L.BatchNorm):
                return i
        return 0
    raise ConfigError(f"unknown freeze policy {policy!r}")


def apply_freeze(model: Model, policy: str) -> int:
    start = trainable_start(model, policy)
    for i, (_, layer) in enumerate(model.layers):
        for _, p in layer.named_parameters():
            p.requires_grad = i >= start
    return start


def replace_head(model: Model, n_classes_new: int, seed: int | None = None) -> Model:
    """Swap in a fresh head of width ``n_classes_new`` and freeze everything else."""
    name, old = model.layers[-1]
    if not isinstance(old, L.Dense):
        raise ConfigError("model has no final dense head")
    seed = model.spec.seed + 1 if seed is None else seed
    rng = np.random.default_rng(seed)
    init = old.init
    head = L.Dense(old.in_features, n_classes_new, rng, init=init, dtype=old.params["weight"].data.dtype)
    model.layers[-1] = (name, head)
    model.spec = replace(model.spec, n_classes=n_classes_new)
    model.labels = [str(i) for i in range(n_classes_new)]
    apply_freeze(model, "last_layer_only")
    return model


# -- checkpoints ------------------------------------------------------------

MAGIC = b"SSCK"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_DTYPE_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK = 0xFFFFFFFFFFFFFFFF


def fnv1a64(data: bytes) -> int:
    h = _FNV_OFFSET
    for b in data:
        h = ((h ^ b) * _FNV_PRIME) & _MASK
    return h


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def serialize(model: Model) -> bytes:
    header = {
        "spec": model.spec.to_dict(),
        "features": model.features,
        "feature_config": model.feature_config,
        "provenance": model.provenance,
        "frozen": [n for n, p in model.named_parameters() if not p.requires_grad],
    }
    parts = [MAGIC, struct.pack("<I", VERSION), _pack_str(json.dumps(header, sort_keys=True))]
    tensors = [(n, p.data) for n, p in model.named_parameters()] + list(model.named_buffers())
    parts.append(struct.pack("<I", len(tensors)))
    for name, arr in tensors:
        code = _DTYPE_CODES[arr.dtype]
        parts.append(_pack_str(name))
        parts.append(struct.pack("<BB", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    if model.normalization is None:
        parts.append(struct.pack("<I", 0))
    else:
        mean, std = (np.asarray(a, dtype="<f8") for a in model.normalization)
        parts.append(struct.pack("<I", mean.size) + mean.tobytes() + std.tobytes())
    parts.append(struct.pack("<I", len(model.labels)))
    parts += [_pack_str(lbl) for lbl in model.labels]
    payload = b"".join(parts)
    return payload + struct.pack("<Q", fnv1a64(payload))


class _Reader:
    def __init__(self, data):
        self.data, self.pos = data, 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise CheckpointError("checkpoint is truncated")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self):
        (n,) = self.unpack("<I")
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError(f"invalid UTF-8 in checkpoint: {exc}") from None


def deserialize(data: bytes) -> Model:
    if len(data) < 16 or data[:4] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    payload, (digest,) = data[:-8], struct.unpack("<Q", data[-8:])
    if fnv1a64(payload) != digest:
        raise CheckpointError("checkpoint digest mismatch (corrupted or truncated file)")
    r = _Reader(payload)
    r.take(4)
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        header = json.loads(r.string())
        spec = ModelSpec(**header["spec"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"bad checkpoint header: {exc}") from None

    (count,) = r.unpack("<I")
    blobs = {}
    for _ in range(count):
        name = r.string()
        code, rank = r.unpack("<BB")
        if code not in _DTYPES:
            raise CheckpointError(f"unknown dtype code {code} for {name}")
        shape = r.unpack(f"<{rank}Q")
        dtype = _DTYPES[code]
        n = int(np.prod(shape, dtype=np.int64))
        if name in blobs:
            raise CheckpointError(f"tensor {name} appears twice")
        blobs[name] = np.frombuffer(r.take(n * dtype.itemsize), dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
    (c,) = r.unpack("<I")
    normalization = None
    if c:
        mean = np.frombuffer(r.take(8 * c), dtype="<f8").astype(np.float64)
        std = np.frombuffer(r.take(8 * c), dtype="<f8").astype(np.float64)
        normalization = (mean, std)
    (n_labels,) = r.unpack("<I")
    labels = [r.string() for _ in range(n_labels)]
    if r.pos != len(payload):
        raise CheckpointError("trailing bytes after label block")
    if len(labels) != spec.n_classes:
        raise CheckpointError(f"{len(labels)} labels for {spec.n_classes} classes")

    model = build_model(spec)
    params = dict(model.named_parameters())
    expected = set(params) | {n for n, _ in model.named_buffers()}
    if set(blobs) != expected:
        missing, extra = sorted(expected - set(blobs)), sorted(set(blobs) - expected)
        raise CheckpointError(f"tensor set mismatch: missing {missing}, unexpected {extra}")
    dtype = next(iter(blobs.values())).dtype if blobs else np.float32
    model.astype(dtype)
    for name, p in model.named_parameters():
        if p.data.shape != blobs[name].shape:
            raise CheckpointError(f"{name} has shape {blobs[name].shape}, expected {p.data.shape}")
        p.data = blobs[name].copy()
    for lname, layer in model.layers:
        for m_prefix, m in _modules_with_prefix(layer, lname):
            for bname in m.buffers:
                m.buffers[bname] = blobs[f"{m_prefix}{bname}"].copy()
    frozen = set(header.get("frozen", []))
    for name, p in model.named_parameters():
        p.requires_grad = name not in frozen
    model.labels = labels
    model.normalization = normalization
    model.features = header.get("features")
    model.feature_config = header.get("feature_config")
    model.provenance = header.get("provenance") or {}
    return model


def _modules_with_prefix(module, prefix):
    yield prefix + ".", module
    for cname, child in module.children.items():
        yield from _modules_with_prefix(child, f"{prefix}.{cname}")


def save_checkpoint(model: Model, path) -> None:
    """Write atomically: the target is replaced only once the file is complete."""
    path = Path(path)
    data = serialize(model)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=path.name, suffix=".tmp")
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


def load_checkpoint(path) -> Model:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    return deserialize(data)
