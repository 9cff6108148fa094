"""Layers with named parameters and train/eval modes."""

from __future__ import annotations

import numpy as np

from ..errors import ConfigError, ShapeError
from . import tensor as T
from .tensor import Tensor


def he_uniform(rng, shape, fan_in, dtype=np.float32):
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def glorot_uniform(rng, shape, fan_in, fan_out, dtype=np.float32):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Module:
    kind = "module"

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.children: dict[str, Module] = {}
        self.training = True

    def __call__(self, x):
        return self.forward(x)

    def forward(self, x):
        raise NotImplementedError

    def config(self) -> dict:
        return {}

    def named_parameters(self, prefix=""):
        for name, p in self.params.items():
            yield prefix + name, p
        for cname, child in self.children.items():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def named_buffers(self, prefix=""):
        for name, b in self.buffers.items():
            yield prefix + name, b
        for cname, child in self.children.items():
            yield from child.named_buffers(f"{prefix}{cname}.")

    def modules(self):
        yield self
        for child in self.children.values():
            yield from child.modules()

    def train(self, mode: bool = True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def astype(self, dtype):
        for m in self.modules():
            for p in m.params.values():
                p.data = p.data.astype(dtype)
                p.grad = None
            for k, b in m.buffers.items():
                m.buffers[k] = b.astype(dtype)
        return self

    def __repr__(self):
        args = ", ".join(f"{k}={v}" for k, v in self.config().items())
        return f"{type(self).__name__}({args})"


class Conv2D(Module):
    kind = "conv2d"

    def __init__(self, in_channels, filters, kernel_size=2, rng=None, dtype=np.float32):
        super().__init__()
        rng = np.random.default_rng() if rng is None else rng
        self.in_channels, self.filters, self.kernel_size = in_channels, filters, kernel_size
        shape = (kernel_size, kernel_size, in_channels, filters)
        fan_in = kernel_size * kernel_size * in_channels
        self.params["kernel"] = Tensor(he_uniform(rng, shape, fan_in, dtype), requires_grad=True)
        self.params["bias"] = Tensor(np.zeros(filters, dtype), requires_grad=True)

    def config(self):
        return {"in_channels": self.in_channels, "filters": self.filters, "kernel_size": self.kernel_size}

    def forward(self, x):
        return T.conv2d(x, self.params["kernel"], self.params["bias"])


class MaxPool2D(Module):
    kind = "maxpool2d"

    def __init__(self, pool=2):
        super().__init__()
        self.pool = pool

    def config(self):
        return {"pool": self.pool}

    def forward(self, x):
        return T.maxpool2d(x, self.pool)


class GlobalAvgPool(Module):
    kind = "global_avg_pool"

    def forward(self, x):
        return T.global_avg_pool(x)


class Dense(Module):
    kind = "dense"

    def __init__(self, in_features, units, rng=None, init="he", dtype=np.float32):
        super().__init__()
        rng = np.random.default_rng() if rng is None else rng
        self.in_features, self.units, self.init = in_features, units, init
        if init == "he":
            w = he_uniform(rng, (in_features, units), in_features, dtype)
        else:
            w = glorot_uniform(rng, (in_features, units), in_features, units, dtype)
        self.params["weight"] = Tensor(w, requires_grad=True)
        self.params["bias"] = Tensor(np.zeros(units, dtype), requires_grad=True)

    def config(self):
        return {"in_features": self.in_features, "units": self.units, "init": self.init}

    def forward(self, x):
        if x.shape[-1] != self.in_features:
            raise ShapeError(f"dense expects {self.in_features} features, got {x.shape[-1]}")
        return T.matmul(x, self.params["weight"]) + self.params["bias"]


class ReLU(Module):
    kind = "relu"

    def forward(self, x):
        return T.relu(x)


class GELU(Module):
    kind = "gelu"

    def forward(self, x):
        return T.gelu(x)


class BatchNorm(Module):
    kind = "batchnorm"

    def __init__(self, channels, momentum=0.9, eps=1e-5, dtype=np.float32):
        super().__init__()
        self.channels, self.momentum, self.eps = channels, momentum, eps
        self.params["gamma"] = Tensor(np.ones(channels, dtype), requires_grad=True)
        self.params["beta"] = Tensor(np.zeros(channels, dtype), requires_grad=True)
        self.buffers["running_mean"] = np.zeros(channels, dtype)
        self.buffers["running_var"] = np.ones(channels, dtype)

    def config(self):
        return {"channels": self.channels, "momentum": self.momentum, "eps": self.eps}

    def forward(self, x):
        return T.batchnorm(
            x, self.params["gamma"], self.params["beta"],
            self.buffers["running_mean"], self.buffers["running_var"],
            self.training, self.momentum, self.eps,
        )


class Dropout(Module):
    kind = "dropout"

    def __init__(self, p, seed=0):
        super().__init__()
        self.p = p
        self.reseed(seed)

    def reseed(self, seed):
        # PCG64 keeps masks reproducible across platforms for a given seed
        self.rng = np.random.Generator(np.random.PCG64(seed))

    def config(self):
        return {"p": self.p}

    def forward(self, x):
        return T.dropout(x, self.p, self.training, self.rng)


class LayerNorm(Module):
    kind = "layernorm"

    def __init__(self, dim, eps=1e-6, dtype=np.float32):
        super().__init__()
        self.dim, self.eps = dim, eps
        self.params["gamma"] = Tensor(np.ones(dim, dtype), requires_grad=True)
        self.params["beta"] = Tensor(np.zeros(dim, dtype), requires_grad=True)

    def config(self):
        return {"dim": self.dim, "eps": self.eps}

    def forward(self, x):
        return T.layernorm(x, self.params["gamma"], self.params["beta"], self.eps)


class MultiHeadAttention(Module):
    """Scaled dot-product self-attention over ``[N, T, D]`` tokens.

    The softmax weights of the last forward pass are kept in
    ``last_attention`` (shape ``[N, heads, T, T]``) for inspection.
    """

    kind = "attention"

    def __init__(self, dim, heads, rng=None, dtype=np.float32):
        super().__init__()
        if heads < 1 or dim % heads:
            raise ConfigError(f"embedding dim {dim} is not divisible by {heads} heads")
        rng = np.random.default_rng() if rng is None else rng
        self.dim, self.heads = dim, heads
        self.children["qkv"] = Dense(dim, 3 * dim, rng, init="glorot", dtype=dtype)
        self.children["proj"] = Dense(dim, dim, rng, init="glorot", dtype=dtype)
        self.last_attention = None

    def config(self):
        return {"dim": self.dim, "heads": self.heads}

    def forward(self, x):
        n, t, d = x.shape
        hd = d // self.heads
        qkv = self.children["qkv"](x).reshape(n, t, 3, self.heads, hd).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = T.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / float(np.sqrt(hd)))
        att = T.softmax(scores, axis=-1)
        self.last_attention = att.data
        out = T.matmul(att, v).transpose(0, 2, 1, 3).reshape(n, t, d)
        return self.children["proj"](out)


class TransformerBlock(Module):
    """Pre-norm encoder block: x + drop(attn(ln(x))), then x + drop(ffn(ln(x)))."""

    kind = "transformer_block"

    def __init__(self, dim, heads, ffn_dim, dropout=0.1, rng=None, seed=0, dtype=np.float32):
        super().__init__()
        rng = np.random.default_rng() if rng is None else rng
        self.dim, self.heads, self.ffn_dim, self.dropout = dim, heads, ffn_dim, dropout
        self.children["ln1"] = LayerNorm(dim, dtype=dtype)
        self.children["attn"] = MultiHeadAttention(dim, heads, rng, dtype)
        self.children["drop1"] = Dropout(dropout, seed)
        self.children["ln2"] = LayerNorm(dim, dtype=dtype)
        self.children["fc1"] = Dense(dim, ffn_dim, rng, init="glorot", dtype=dtype)
        self.children["fc2"] = Dense(ffn_dim, dim, rng, init="glorot", dtype=dtype)
        self.children["drop2"] = Dropout(dropout, seed + 1)

    def config(self):
        return {"dim": self.dim, "heads": self.heads, "ffn_dim": self.ffn_dim, "dropout": self.dropout}

    def forward(self, x):
        c = self.children
        x = x + c["drop1"](c["attn"](c["ln1"](x)))
        h = c["fc2"](T.gelu(c["fc1"](c["ln2"](x))))
        return x + c["drop2"](h)


class PatchEmbed(Module):
    """Non-overlapping ``patch x patch`` patches projected to ``dim`` (a strided convolution).

    Output is ``[N, H / patch, W / patch, dim]`` so the patch grid survives
    until positions are added.
    """

    kind = "patch_embed"

    def __init__(self, in_channels, dim, patch=16, rng=None, dtype=np.float32):
        super().__init__()
        rng = np.random.default_rng() if rng is None else rng
        self.in_channels, self.dim, self.patch = in_channels, dim, patch
        self.children["proj"] = Dense(patch * patch * in_channels, dim, rng, init="glorot", dtype=dtype)

    def config(self):
        return {"in_channels": self.in_channels, "dim": self.dim, "patch": self.patch}

    def forward(self, x):
        n, h, w, c = x.shape
        p = self.patch
        if h % p or w % p:
            raise ShapeError(f"input {h}x{w} is not a multiple of the {p}x{p} patch size")
        if c != self.in_channels:
            raise ShapeError(f"patch embedding expects {self.in_channels} channels, got {c}")
        patches = (
            T.as_tensor(x)
            .reshape(n, h // p, p, w // p, p, c)
            .transpose(0, 1, 3, 2, 4, 5)
            .reshape(n, h // p, w // p, p * p * c)
        )
        return self.children["proj"](patches)


def sincos_2d(rows: int, cols: int, dim: int) -> np.ndarray:
    """Fixed 2-D sinusoidal embedding, ``[rows * cols, dim]``.

    The first half of the channels encodes the row index, the second half
    the column index, each as interleaved-free sin/cos blocks.
    """
    if dim % 4:
        raise ConfigError(f"2-D sinusoidal embedding needs dim divisible by 4, got {dim}")
    quarter = dim // 4
    omega = 1.0 / (10000.0 ** (np.arange(quarter) / quarter))
    r, c = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
    r_ang = r.reshape(-1, 1) * omega
    c_ang = c.reshape(-1, 1) * omega
    return np.concatenate([np.sin(r_ang), np.cos(r_ang), np.sin(c_ang), np.cos(c_ang)], axis=1)


class ClsPosEmbed(Module):
    """Prepend a learnable CLS token and add 2-D sinusoidal positions to the patch tokens."""

    kind = "cls_pos_embed"

    def __init__(self, dim, patch=16, rng=None, dtype=np.float32):
        super().__init__()
        rng = np.random.default_rng() if rng is None else rng
        self.dim, self.patch = dim, patch
        self.params["cls"] = Tensor(rng.normal(0, 0.02, size=(1, 1, dim)).astype(dtype), requires_grad=True)

    def config(self):
        return {"dim": self.dim, "patch": self.patch}

    def forward(self, x):
        n, rows, cols, d = x.shape
        pos = sincos_2d(rows, cols, d).astype(x.dtype)
        tokens = x.reshape(n, rows * cols, d) + pos
        cls = T.broadcast_to(self.params["cls"], (n, 1, d))
        return T.concat([cls, tokens], axis=1)


class ClsPool(Module):
    """Select the CLS position (token 0)."""

    kind = "cls_pool"

    def forward(self, x):
        return x[:, 0, :]
